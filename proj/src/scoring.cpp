#include "ekp/scoring.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "ekp/errors.hpp"

namespace ekp::scoring {

double channel_score(const ad::Tensor& tap_grad, const ad::Tensor& tap_value,
                     int channel) {
  if (!tap_grad.same_shape(tap_value))
    throw ShapeError("channel_score: grad/value shape mismatch");
  const int n = tap_grad.dim(0), c = tap_grad.dim(1);
  const std::size_t hw =
      tap_grad.rank() == 4
          ? static_cast<std::size_t>(tap_grad.dim(2)) * tap_grad.dim(3)
          : 1;
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const std::size_t base = (static_cast<std::size_t>(i) * c + channel) * hw;
    for (std::size_t j = 0; j < hw; ++j)
      s += tap_grad[base + j] * tap_value[base + j];
  }
  return std::abs(s);
}

ScoreTable score_filters(const net::PrunableNetwork& network, const RewardFn& reward,
                         const std::vector<data::Batch>& batches) {
  if (batches.empty()) throw InsufficientDataError("score_filters needs >= 1 batch");

  ScoreTable table;
  table.batch_count = static_cast<int>(batches.size());

  net::ForwardOptions opt;
  opt.bn = net::BatchNormMode::BatchStats;
  opt.record_taps = true;

  std::set<int> tapped_layers;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    auto pass = network.forward(batches[b].x, opt);
    if (b == 0)
      for (const auto& [layer, node] : pass.taps) tapped_layers.insert(layer);
    auto r = reward(pass, batches[b]);
    if (!r->value.all_finite())
      throw NumericFailureError("non-finite reward in batch " + std::to_string(b));

    std::vector<int> tap_layers;
    std::vector<ad::NodePtr> tap_nodes;
    for (const auto& [layer, node] : pass.taps) {
      tap_layers.push_back(layer);
      tap_nodes.push_back(node);
    }
    auto grads = ad::grad(r, tap_nodes);

    for (std::size_t t = 0; t < tap_layers.size(); ++t) {
      const int layer = tap_layers[t];
      const auto& g = grads[t]->value;
      const auto& f = tap_nodes[t]->value;
      if (!g.all_finite())
        throw NumericFailureError("non-finite tap gradient for layer " +
                                  std::to_string(layer) + " in batch " +
                                  std::to_string(b));
      const auto& mask = network.unit_mask(network.unit_of_layer(layer));
      for (int j = 0; j < static_cast<int>(mask.size()); ++j) {
        if (!mask[static_cast<std::size_t>(j)]) continue;
        table.entries[{layer, j}] += channel_score(g, f, j);
      }
    }
  }

  for (auto& [ref, score] : table.entries) score /= table.batch_count;

  // Every alive filter that feeds a next layer must have exactly one entry.
  // Convs without consumers have no taps and are not scored.
  for (const auto& ref : network.alive_filters())
    if (tapped_layers.count(ref.layer_index) && !table.entries.count(ref))
      throw StructuralError("alive filter missed scoring: layer " +
                            std::to_string(ref.layer_index));
  return table;
}

void write_score_csv(const std::filesystem::path& path, const ScoreTable& table) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << "layer_index,filter_index,score\n";
  f.precision(12);
  for (const auto& [ref, score] : table.entries)
    f << ref.layer_index << ',' << ref.filter_index << ',' << score << "\n";
  if (!f) throw IoError("short write: " + path.string());
}

}  // namespace ekp::scoring
