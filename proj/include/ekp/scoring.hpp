#pragma once
#include <filesystem>
#include <functional>
#include <map>
#include <vector>

#include "ekp/data.hpp"
#include "ekp/netcore.hpp"

namespace ekp::scoring {

// Builds the scalar reward node for one evaluation batch from a forward pass
// (with taps recorded). The search supplies its task+knowledge reward here;
// tests plug in analytic rewards.
using RewardFn =
    std::function<ad::NodePtr(const net::ForwardPass& pass, const data::Batch& batch)>;

struct ScoreTable {
  std::map<net::FilterRef, double> entries;
  int batch_count = 0;
};

// First-order Taylor estimate of the reward change when each alive filter's
// next-layer input feature map is zeroed: per batch the elementwise product
// of tap gradient and tap value is summed over batch elements and spatial
// positions, the absolute value taken, and the result averaged over batches.
// One backward pass per batch scores all filters at once.
ScoreTable score_filters(const net::PrunableNetwork& network, const RewardFn& reward,
                         const std::vector<data::Batch>& batches);

// The per-channel reduction, isolated so alternative aggregations can be
// compared against the default sum-then-abs.
double channel_score(const ad::Tensor& tap_grad, const ad::Tensor& tap_value,
                     int channel);

void write_score_csv(const std::filesystem::path& path, const ScoreTable& table);

}  // namespace ekp::scoring
