#include "ekp/netcore.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "ekp/errors.hpp"
#include "ekp/util.hpp"

namespace ekp::net {

const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Input: return "input";
    case LayerKind::Conv: return "conv";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Add: return "add";
    case LayerKind::GlobalAvgPool: return "gap";
    case LayerKind::Dense: return "dense";
  }
  throw UnsupportedArchitectureError("unknown layer kind");
}

LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "input") return LayerKind::Input;
  if (s == "conv") return LayerKind::Conv;
  if (s == "batchnorm") return LayerKind::BatchNorm;
  if (s == "relu") return LayerKind::ReLU;
  if (s == "add") return LayerKind::Add;
  if (s == "gap") return LayerKind::GlobalAvgPool;
  if (s == "dense") return LayerKind::Dense;
  throw UnsupportedArchitectureError("unknown layer kind: " + s);
}

struct NetworkStructure {
  std::vector<LayerDesc> descs;
  InputSpec input;
  std::vector<LayerShape> shapes;
  std::vector<PrunableUnit> units;
  std::vector<int> layer_unit;     // per layer; -1 for non-conv
  std::vector<int> producer_unit;  // unit governing a layer's output channels
  std::vector<std::vector<int>> consumers;
  std::map<int, int> tap_source;             // conv layer -> tap tensor's layer
  std::map<int, std::vector<int>> tap_owners;  // tap layer -> conv layers
  std::vector<std::string> trainable;
  double bn_eps = 1e-5;
};

namespace {

constexpr double kBnEps = 1e-5;

std::shared_ptr<NetworkStructure> analyze(std::vector<LayerDesc> descs,
                                                    InputSpec input) {
  auto s = std::make_shared<NetworkStructure>();
  s->descs = std::move(descs);
  s->input = input;
  const int n = static_cast<int>(s->descs.size());
  if (n == 0 || s->descs[0].kind != LayerKind::Input)
    throw StructuralError("network must start with an input layer");

  std::set<std::string> names;
  for (int i = 0; i < n; ++i) {
    const auto& d = s->descs[static_cast<std::size_t>(i)];
    if (d.name.empty() || !names.insert(d.name).second)
      throw StructuralError("layer names must be unique and non-empty");
    for (int in : d.inputs)
      if (in < 0 || in >= i)
        throw StructuralError("layer " + d.name + " has a non-topological input");
    const std::size_t want_inputs = d.kind == LayerKind::Input  ? 0
                                    : d.kind == LayerKind::Add ? 2
                                                               : 1;
    if (d.inputs.size() != want_inputs)
      throw StructuralError("layer " + d.name + " has wrong input count");
  }

  // Shapes and channel-producing units.
  s->shapes.resize(static_cast<std::size_t>(n));
  s->layer_unit.assign(static_cast<std::size_t>(n), -1);
  s->producer_unit.assign(static_cast<std::size_t>(n), -1);
  s->consumers.assign(static_cast<std::size_t>(n), {});
  std::map<int, int> group_to_unit;

  for (int i = 0; i < n; ++i) {
    const auto& d = s->descs[static_cast<std::size_t>(i)];
    auto& shape = s->shapes[static_cast<std::size_t>(i)];
    for (int in : d.inputs) s->consumers[static_cast<std::size_t>(in)].push_back(i);
    switch (d.kind) {
      case LayerKind::Input:
        shape = {input.channels, input.height, input.width, true};
        s->producer_unit[static_cast<std::size_t>(i)] = -1;
        break;
      case LayerKind::Conv: {
        const auto& in_shape = s->shapes[static_cast<std::size_t>(d.inputs[0])];
        if (!in_shape.spatial) throw StructuralError("conv after non-spatial layer");
        if (d.out_channels <= 0 || d.kh <= 0 || d.kw <= 0 || d.stride <= 0)
          throw StructuralError("conv " + d.name + " has invalid geometry");
        shape.c = d.out_channels;
        shape.h = (in_shape.h + 2 * d.pad - d.kh) / d.stride + 1;
        shape.w = (in_shape.w + 2 * d.pad - d.kw) / d.stride + 1;
        if (shape.h <= 0 || shape.w <= 0)
          throw StructuralError("conv " + d.name + " collapses spatial dims");
        int unit_id;
        if (d.coupling_group >= 0) {
          auto it = group_to_unit.find(d.coupling_group);
          if (it == group_to_unit.end()) {
            unit_id = static_cast<int>(s->units.size());
            group_to_unit.emplace(d.coupling_group, unit_id);
            s->units.push_back({unit_id, {}, d.out_channels});
          } else {
            unit_id = it->second;
            if (s->units[static_cast<std::size_t>(unit_id)].channels != d.out_channels)
              throw StructuralError("coupling group of " + d.name +
                                    " mixes channel counts");
          }
        } else {
          unit_id = static_cast<int>(s->units.size());
          s->units.push_back({unit_id, {}, d.out_channels});
        }
        s->units[static_cast<std::size_t>(unit_id)].conv_layers.push_back(i);
        s->layer_unit[static_cast<std::size_t>(i)] = unit_id;
        s->producer_unit[static_cast<std::size_t>(i)] = unit_id;
        break;
      }
      case LayerKind::BatchNorm:
      case LayerKind::ReLU: {
        shape = s->shapes[static_cast<std::size_t>(d.inputs[0])];
        s->producer_unit[static_cast<std::size_t>(i)] =
            s->producer_unit[static_cast<std::size_t>(d.inputs[0])];
        break;
      }
      case LayerKind::Add: {
        const auto& a = s->shapes[static_cast<std::size_t>(d.inputs[0])];
        const auto& b = s->shapes[static_cast<std::size_t>(d.inputs[1])];
        if (a.c != b.c || a.h != b.h || a.w != b.w || a.spatial != b.spatial)
          throw StructuralError("add " + d.name + " joins mismatched shapes");
        const int pa = s->producer_unit[static_cast<std::size_t>(d.inputs[0])];
        const int pb = s->producer_unit[static_cast<std::size_t>(d.inputs[1])];
        if (pa != pb)
          throw StructuralError(
              "add " + d.name +
              " joins channels from different units; couple the convs");
        shape = a;
        s->producer_unit[static_cast<std::size_t>(i)] = pa;
        break;
      }
      case LayerKind::GlobalAvgPool: {
        const auto& in_shape = s->shapes[static_cast<std::size_t>(d.inputs[0])];
        if (!in_shape.spatial) throw StructuralError("gap after non-spatial layer");
        shape = {in_shape.c, 1, 1, false};
        s->producer_unit[static_cast<std::size_t>(i)] =
            s->producer_unit[static_cast<std::size_t>(d.inputs[0])];
        break;
      }
      case LayerKind::Dense: {
        const auto& in_shape = s->shapes[static_cast<std::size_t>(d.inputs[0])];
        if (in_shape.spatial)
          throw StructuralError("dense " + d.name + " needs pooled input");
        if (d.out_features <= 0)
          throw StructuralError("dense " + d.name + " has no output features");
        shape = {d.out_features, 1, 1, false};
        s->producer_unit[static_cast<std::size_t>(i)] = -2;  // classifier output
        break;
      }
    }
  }

  // Tap chase: from each conv, follow channel-preserving layers until some
  // consumer is a conv or dense; that consumer's input tensor is the tap.
  for (int i = 0; i < n; ++i) {
    if (s->descs[static_cast<std::size_t>(i)].kind != LayerKind::Conv) continue;
    int cur = i;
    for (;;) {
      const auto& cons = s->consumers[static_cast<std::size_t>(cur)];
      if (cons.empty()) break;  // nothing consumes this tensor; no tap
      bool stop = false;
      for (int c : cons) {
        const auto k = s->descs[static_cast<std::size_t>(c)].kind;
        if (k == LayerKind::Conv || k == LayerKind::Dense) {
          stop = true;
          break;
        }
      }
      if (stop) {
        s->tap_source[i] = cur;
        s->tap_owners[cur].push_back(i);
        break;
      }
      cur = cons.front();
    }
  }

  for (int i = 0; i < n; ++i) {
    const auto& d = s->descs[static_cast<std::size_t>(i)];
    switch (d.kind) {
      case LayerKind::Conv:
        s->trainable.push_back(d.name + ".W");
        break;
      case LayerKind::BatchNorm:
        s->trainable.push_back(d.name + ".gamma");
        s->trainable.push_back(d.name + ".beta");
        break;
      case LayerKind::Dense:
        s->trainable.push_back(d.name + ".W");
        s->trainable.push_back(d.name + ".b");
        break;
      default:
        break;
    }
  }
  s->bn_eps = kBnEps;
  return s;
}

WeightStore init_weights(const NetworkStructure& s, std::uint64_t seed) {
  WeightStore w;
  Rng rng(seed);
  for (std::size_t i = 0; i < s.descs.size(); ++i) {
    const auto& d = s.descs[i];
    switch (d.kind) {
      case LayerKind::Conv: {
        const int cin = s.shapes[static_cast<std::size_t>(d.inputs[0])].c;
        ad::Tensor W({d.out_channels, cin, d.kh, d.kw});
        const double fan_in = static_cast<double>(cin) * d.kh * d.kw;
        const double fan_out = static_cast<double>(d.out_channels) * d.kh * d.kw;
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        for (std::size_t j = 0; j < W.size(); ++j) W[j] = uniform(rng, -a, a);
        w.emplace(d.name + ".W", std::move(W));
        break;
      }
      case LayerKind::BatchNorm: {
        const int c = s.shapes[i].c;
        w.emplace(d.name + ".gamma", ad::Tensor::full({c}, 1.0));
        w.emplace(d.name + ".beta", ad::Tensor({c}));
        w.emplace(d.name + ".running_mean", ad::Tensor({c}));
        w.emplace(d.name + ".running_var", ad::Tensor::full({c}, 1.0));
        break;
      }
      case LayerKind::Dense: {
        const int cin = s.shapes[static_cast<std::size_t>(d.inputs[0])].c;
        ad::Tensor W({d.out_features, cin});
        const double stddev = std::sqrt(2.0 / static_cast<double>(cin));
        for (std::size_t j = 0; j < W.size(); ++j) W[j] = normal(rng, 0.0, stddev);
        w.emplace(d.name + ".W", std::move(W));
        w.emplace(d.name + ".b", ad::Tensor({d.out_features}));
        break;
      }
      default:
        break;
    }
  }
  return w;
}

ad::Tensor masked_rows(const ad::Tensor& t, const std::vector<std::uint8_t>& mask) {
  ad::Tensor out = t;
  const std::size_t row = t.size() / static_cast<std::size_t>(t.dim(0));
  for (int i = 0; i < t.dim(0); ++i)
    if (!mask[static_cast<std::size_t>(i)]) {
      double* p = out.data() + static_cast<std::size_t>(i) * row;
      for (std::size_t j = 0; j < row; ++j) p[j] = 0.0;
    }
  return out;
}

bool all_alive(const std::vector<std::uint8_t>& mask) {
  for (auto m : mask)
    if (!m) return false;
  return true;
}

}  // namespace

PrunableNetwork PrunableNetwork::build(std::vector<LayerDesc> layers, InputSpec input,
                                       std::uint64_t init_seed) {
  PrunableNetwork net;
  net.structure_ = analyze(std::move(layers), input);
  net.weights_ = std::make_shared<WeightStore>(init_weights(*net.structure_, init_seed));
  for (const auto& u : net.structure_->units)
    net.unit_masks_.emplace_back(static_cast<std::size_t>(u.channels), std::uint8_t{1});
  return net;
}

PrunableNetwork PrunableNetwork::build_with_weights(std::vector<LayerDesc> layers,
                                                    InputSpec input,
                                                    WeightStore weights) {
  PrunableNetwork net;
  net.structure_ = analyze(std::move(layers), input);
  net.weights_ = std::make_shared<WeightStore>(std::move(weights));
  for (const auto& u : net.structure_->units)
    net.unit_masks_.emplace_back(static_cast<std::size_t>(u.channels), std::uint8_t{1});
  // Sanity: every trainable tensor must exist.
  for (const auto& name : net.structure_->trainable)
    if (!net.weights_->count(name))
      throw StructuralError("missing weight tensor: " + name);
  return net;
}

const std::vector<LayerDesc>& PrunableNetwork::layers() const { return structure_->descs; }
const InputSpec& PrunableNetwork::input() const { return structure_->input; }
const std::vector<PrunableUnit>& PrunableNetwork::units() const { return structure_->units; }
LayerShape PrunableNetwork::shape_of(int layer) const {
  return structure_->shapes[static_cast<std::size_t>(layer)];
}

int PrunableNetwork::unit_of_layer(int layer) const {
  return structure_->layer_unit[static_cast<std::size_t>(layer)];
}

const std::vector<std::uint8_t>& PrunableNetwork::unit_mask(int unit) const {
  return unit_masks_[static_cast<std::size_t>(unit)];
}

int PrunableNetwork::alive_count(int unit) const {
  int n = 0;
  for (auto m : unit_masks_[static_cast<std::size_t>(unit)]) n += m ? 1 : 0;
  return n;
}

int PrunableNetwork::total_alive() const {
  int n = 0;
  for (std::size_t u = 0; u < unit_masks_.size(); ++u) n += alive_count(static_cast<int>(u));
  return n;
}

bool PrunableNetwork::filter_alive(const FilterRef& f) const {
  const int u = unit_of_layer(f.layer_index);
  if (u < 0) return false;
  const auto& m = unit_masks_[static_cast<std::size_t>(u)];
  if (f.filter_index < 0 || f.filter_index >= static_cast<int>(m.size())) return false;
  return m[static_cast<std::size_t>(f.filter_index)] != 0;
}

std::vector<FilterRef> PrunableNetwork::alive_filters() const {
  std::vector<FilterRef> out;
  for (std::size_t i = 0; i < structure_->descs.size(); ++i) {
    if (structure_->descs[i].kind != LayerKind::Conv) continue;
    const int u = structure_->layer_unit[i];
    const auto& m = unit_masks_[static_cast<std::size_t>(u)];
    for (int j = 0; j < static_cast<int>(m.size()); ++j)
      if (m[static_cast<std::size_t>(j)])
        out.push_back({static_cast<int>(i), j});
  }
  return out;
}

std::vector<int> PrunableNetwork::alive_histogram() const {
  std::vector<int> h;
  for (std::size_t u = 0; u < unit_masks_.size(); ++u)
    h.push_back(alive_count(static_cast<int>(u)));
  return h;
}

PrunableNetwork PrunableNetwork::mask(const std::vector<FilterRef>& filters) const {
  PrunableNetwork out = *this;
  for (const auto& f : filters) {
    if (f.layer_index < 0 ||
        f.layer_index >= static_cast<int>(structure_->descs.size()) ||
        structure_->descs[static_cast<std::size_t>(f.layer_index)].kind !=
            LayerKind::Conv)
      throw InvalidCandidateError("filter ref does not name a conv layer");
    const int u = unit_of_layer(f.layer_index);
    auto& m = out.unit_masks_[static_cast<std::size_t>(u)];
    if (f.filter_index < 0 || f.filter_index >= static_cast<int>(m.size()))
      throw InvalidCandidateError("filter index out of range");
    if (!unit_masks_[static_cast<std::size_t>(u)][static_cast<std::size_t>(f.filter_index)])
      throw InvalidCandidateError("filter already dead: layer " +
                                  std::to_string(f.layer_index) + " filter " +
                                  std::to_string(f.filter_index));
    m[static_cast<std::size_t>(f.filter_index)] = 0;
  }
  for (std::size_t u = 0; u < out.unit_masks_.size(); ++u)
    if (out.alive_count(static_cast<int>(u)) == 0)
      throw EmptyLayerError("masking would empty unit " + std::to_string(u));
  return out;
}

std::int64_t PrunableNetwork::flops() const {
  std::int64_t total = 0;
  for (std::size_t i = 0; i < structure_->descs.size(); ++i) {
    const auto& d = structure_->descs[i];
    switch (d.kind) {
      case LayerKind::Conv: {
        const int pu = structure_->producer_unit[static_cast<std::size_t>(d.inputs[0])];
        const int in_alive =
            pu < 0 ? structure_->shapes[static_cast<std::size_t>(d.inputs[0])].c
                   : alive_count(pu);
        const int out_alive = alive_count(structure_->layer_unit[i]);
        const auto& shape = structure_->shapes[i];
        total += static_cast<std::int64_t>(d.kh) * d.kw * in_alive * out_alive *
                 shape.h * shape.w;
        break;
      }
      case LayerKind::Dense: {
        const int pu = structure_->producer_unit[static_cast<std::size_t>(d.inputs[0])];
        const int in_alive =
            pu < 0 ? structure_->shapes[static_cast<std::size_t>(d.inputs[0])].c
                   : alive_count(pu);
        total += static_cast<std::int64_t>(in_alive) * d.out_features;
        break;
      }
      case LayerKind::Input:
      case LayerKind::BatchNorm:
      case LayerKind::ReLU:
      case LayerKind::Add:
      case LayerKind::GlobalAvgPool:
        break;
    }
  }
  return total;
}

std::int64_t PrunableNetwork::filter_flops(const FilterRef& f) const {
  const int u = unit_of_layer(f.layer_index);
  if (u < 0) throw InvalidCandidateError("filter_flops: not a conv layer");
  std::int64_t total = 0;
  for (std::size_t i = 0; i < structure_->descs.size(); ++i) {
    const auto& d = structure_->descs[i];
    if (d.kind == LayerKind::Conv) {
      const int pu = structure_->producer_unit[static_cast<std::size_t>(d.inputs[0])];
      const int own = structure_->layer_unit[i];
      const auto& shape = structure_->shapes[i];
      if (own == u) {
        const int in_alive =
            pu < 0 ? structure_->shapes[static_cast<std::size_t>(d.inputs[0])].c
                   : alive_count(pu);
        total += static_cast<std::int64_t>(d.kh) * d.kw * in_alive * shape.h * shape.w;
      }
      if (pu == u && own != u)
        total += static_cast<std::int64_t>(d.kh) * d.kw * alive_count(own) * shape.h *
                 shape.w;
      // A conv consuming its own unit's channels (not present in the zoo)
      // would make single-channel contributions non-additive; count both
      // sides minus the overlap of the removed channel with itself.
      if (pu == u && own == u)
        total += static_cast<std::int64_t>(d.kh) * d.kw * (alive_count(own) - 1) *
                 shape.h * shape.w;
    } else if (d.kind == LayerKind::Dense) {
      const int pu = structure_->producer_unit[static_cast<std::size_t>(d.inputs[0])];
      if (pu == u) total += d.out_features;
    }
  }
  return total;
}

std::int64_t PrunableNetwork::param_count() const {
  std::int64_t total = 0;
  for (std::size_t i = 0; i < structure_->descs.size(); ++i) {
    const auto& d = structure_->descs[i];
    switch (d.kind) {
      case LayerKind::Conv: {
        const int pu = structure_->producer_unit[static_cast<std::size_t>(d.inputs[0])];
        const int in_alive =
            pu < 0 ? structure_->shapes[static_cast<std::size_t>(d.inputs[0])].c
                   : alive_count(pu);
        total += static_cast<std::int64_t>(d.kh) * d.kw * in_alive *
                 alive_count(structure_->layer_unit[i]);
        break;
      }
      case LayerKind::BatchNorm: {
        const int pu = structure_->producer_unit[i];
        const int alive = pu < 0 ? structure_->shapes[i].c : alive_count(pu);
        total += 2 * static_cast<std::int64_t>(alive);  // gamma, beta
        break;
      }
      case LayerKind::Dense: {
        const int pu = structure_->producer_unit[static_cast<std::size_t>(d.inputs[0])];
        const int in_alive =
            pu < 0 ? structure_->shapes[static_cast<std::size_t>(d.inputs[0])].c
                   : alive_count(pu);
        total += static_cast<std::int64_t>(in_alive) * d.out_features + d.out_features;
        break;
      }
      default:
        break;
    }
  }
  return total;
}

ForwardPass PrunableNetwork::forward(const ad::Tensor& x, const ForwardOptions& opt) const {
  const auto& s = *structure_;
  if (x.rank() != 4 || x.dim(1) != s.input.channels || x.dim(2) != s.input.height ||
      x.dim(3) != s.input.width)
    throw ShapeError("forward: batch shape " + x.shape_str() +
                     " does not match network input");

  ForwardPass pass;
  std::vector<ad::NodePtr> outs(s.descs.size());

  auto weight_node = [&](const std::string& key, const std::vector<std::uint8_t>* mask)
      -> ad::NodePtr {
    const auto& t = weights_->at(key);
    ad::Tensor eff = (mask && !all_alive(*mask)) ? masked_rows(t, *mask) : t;
    auto node = opt.params_require_grad ? ad::param(std::move(eff))
                                        : ad::constant(std::move(eff));
    if (opt.params_require_grad) pass.params.push_back(node);
    return node;
  };

  for (std::size_t i = 0; i < s.descs.size(); ++i) {
    const auto& d = s.descs[i];
    ad::NodePtr out;
    switch (d.kind) {
      case LayerKind::Input:
        out = ad::constant(x);
        break;
      case LayerKind::Conv: {
        const auto& m = unit_masks_[static_cast<std::size_t>(s.layer_unit[i])];
        auto w = weight_node(d.name + ".W", &m);
        out = ad::conv2d(outs[static_cast<std::size_t>(d.inputs[0])], w, d.stride, d.pad);
        break;
      }
      case LayerKind::BatchNorm: {
        const int pu = s.producer_unit[i];
        const std::vector<std::uint8_t>* m =
            pu >= 0 ? &unit_masks_[static_cast<std::size_t>(pu)] : nullptr;
        auto gamma = weight_node(d.name + ".gamma", m);
        auto beta = weight_node(d.name + ".beta", m);
        const auto& in = outs[static_cast<std::size_t>(d.inputs[0])];
        if (opt.bn == BatchNormMode::BatchStats) {
          auto bn = ad::batchnorm_train(in, gamma, beta, s.bn_eps);
          out = bn.y;
          pass.bn_stats.emplace(static_cast<int>(i), std::move(bn));
        } else {
          out = ad::batchnorm_eval(in, gamma, beta,
                                   weights_->at(d.name + ".running_mean"),
                                   weights_->at(d.name + ".running_var"), s.bn_eps);
        }
        break;
      }
      case LayerKind::ReLU:
        out = ad::relu(outs[static_cast<std::size_t>(d.inputs[0])]);
        break;
      case LayerKind::Add:
        out = ad::add(outs[static_cast<std::size_t>(d.inputs[0])],
                      outs[static_cast<std::size_t>(d.inputs[1])]);
        break;
      case LayerKind::GlobalAvgPool:
        out = ad::global_avg_pool(outs[static_cast<std::size_t>(d.inputs[0])]);
        break;
      case LayerKind::Dense: {
        auto w = weight_node(d.name + ".W", nullptr);
        auto b = weight_node(d.name + ".b", nullptr);
        out = ad::dense(outs[static_cast<std::size_t>(d.inputs[0])], w, b);
        break;
      }
    }
    if (opt.record_taps) {
      auto owners = s.tap_owners.find(static_cast<int>(i));
      if (owners != s.tap_owners.end()) {
        out = ad::grad_root(out);
        for (int conv_layer : owners->second) pass.taps.emplace(conv_layer, out);
      }
    }
    outs[i] = std::move(out);
  }
  pass.logits = outs.back();
  return pass;
}

ad::Tensor PrunableNetwork::infer(const ad::Tensor& x, BatchNormMode bn) const {
  ForwardOptions opt;
  opt.bn = bn;
  return forward(x, opt).logits->value;
}

const WeightStore& PrunableNetwork::weights() const { return *weights_; }

WeightStore& PrunableNetwork::weights_mut() {
  if (weights_.use_count() > 1) weights_ = std::make_shared<WeightStore>(*weights_);
  return *weights_;
}

const std::vector<std::string>& PrunableNetwork::trainable_names() const {
  return structure_->trainable;
}

std::vector<double> PrunableNetwork::flat_params() const {
  std::vector<double> out;
  for (const auto& name : structure_->trainable) {
    const auto& t = weights_->at(name);
    out.insert(out.end(), t.data(), t.data() + t.size());
  }
  return out;
}

std::size_t PrunableNetwork::flat_param_size() const {
  std::size_t n = 0;
  for (const auto& name : structure_->trainable) n += weights_->at(name).size();
  return n;
}

void PrunableNetwork::set_flat_params(const std::vector<double>& v) {
  if (v.size() != flat_param_size())
    throw ShapeError("set_flat_params: size mismatch");
  auto& w = weights_mut();
  std::size_t off = 0;
  for (const auto& name : structure_->trainable) {
    auto& t = w.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = v[off + i];
    off += t.size();
  }
}

PrunableNetwork PrunableNetwork::with_masks(
    const std::vector<std::vector<std::uint8_t>>& unit_masks) const {
  if (unit_masks.size() != unit_masks_.size())
    throw StructuralError("with_masks: unit count mismatch");
  PrunableNetwork out = *this;
  for (std::size_t u = 0; u < unit_masks.size(); ++u) {
    if (unit_masks[u].size() != unit_masks_[u].size())
      throw StructuralError("with_masks: channel count mismatch in unit " +
                            std::to_string(u));
    out.unit_masks_[u] = unit_masks[u];
  }
  for (std::size_t u = 0; u < out.unit_masks_.size(); ++u)
    if (out.alive_count(static_cast<int>(u)) == 0)
      throw EmptyLayerError("with_masks would empty unit " + std::to_string(u));
  return out;
}

PrunableNetwork PrunableNetwork::materialize() const {
  const auto& s = *structure_;
  // Kept channel indices per unit.
  std::vector<std::vector<int>> keep(s.units.size());
  for (std::size_t u = 0; u < s.units.size(); ++u)
    for (int j = 0; j < static_cast<int>(unit_masks_[u].size()); ++j)
      if (unit_masks_[u][static_cast<std::size_t>(j)]) keep[u].push_back(j);

  std::vector<LayerDesc> descs = s.descs;
  WeightStore w;
  for (std::size_t i = 0; i < s.descs.size(); ++i) {
    const auto& d = s.descs[i];
    switch (d.kind) {
      case LayerKind::Conv: {
        const int u = s.layer_unit[i];
        const int pu = s.producer_unit[static_cast<std::size_t>(d.inputs[0])];
        const auto& rows = keep[static_cast<std::size_t>(u)];
        std::vector<int> cols;
        if (pu >= 0)
          cols = keep[static_cast<std::size_t>(pu)];
        else
          for (int c = 0; c < s.shapes[static_cast<std::size_t>(d.inputs[0])].c; ++c)
            cols.push_back(c);
        const auto& W = weights_->at(d.name + ".W");
        const int cin = W.dim(1);
        ad::Tensor out({static_cast<int>(rows.size()), static_cast<int>(cols.size()),
                        d.kh, d.kw});
        const std::size_t k = static_cast<std::size_t>(d.kh) * d.kw;
        for (std::size_t r = 0; r < rows.size(); ++r)
          for (std::size_t c = 0; c < cols.size(); ++c)
            for (std::size_t j = 0; j < k; ++j)
              out[(r * cols.size() + c) * k + j] =
                  W[(static_cast<std::size_t>(rows[r]) * cin +
                     static_cast<std::size_t>(cols[c])) * k + j];
        w.emplace(d.name + ".W", std::move(out));
        descs[i].out_channels = static_cast<int>(rows.size());
        break;
      }
      case LayerKind::BatchNorm: {
        const int pu = s.producer_unit[i];
        std::vector<int> idx;
        if (pu >= 0)
          idx = keep[static_cast<std::size_t>(pu)];
        else
          for (int c = 0; c < s.shapes[i].c; ++c) idx.push_back(c);
        for (const char* part : {".gamma", ".beta", ".running_mean", ".running_var"}) {
          const auto& t = weights_->at(d.name + part);
          ad::Tensor out({static_cast<int>(idx.size())});
          for (std::size_t j = 0; j < idx.size(); ++j)
            out[j] = t[static_cast<std::size_t>(idx[j])];
          w.emplace(d.name + part, std::move(out));
        }
        break;
      }
      case LayerKind::Dense: {
        const int pu = s.producer_unit[static_cast<std::size_t>(d.inputs[0])];
        std::vector<int> cols;
        if (pu >= 0)
          cols = keep[static_cast<std::size_t>(pu)];
        else
          for (int c = 0; c < s.shapes[static_cast<std::size_t>(d.inputs[0])].c; ++c)
            cols.push_back(c);
        const auto& W = weights_->at(d.name + ".W");
        const int cin = W.dim(1);
        ad::Tensor out({d.out_features, static_cast<int>(cols.size())});
        for (int r = 0; r < d.out_features; ++r)
          for (std::size_t c = 0; c < cols.size(); ++c)
            out[static_cast<std::size_t>(r) * cols.size() + c] =
                W[static_cast<std::size_t>(r) * cin + static_cast<std::size_t>(cols[c])];
        w.emplace(d.name + ".W", std::move(out));
        w.emplace(d.name + ".b", weights_->at(d.name + ".b"));
        break;
      }
      default:
        break;
    }
  }
  return build_with_weights(std::move(descs), s.input, std::move(w));
}

}  // namespace ekp::net
