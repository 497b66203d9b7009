#pragma once
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ekp/autodiff.hpp"
#include "ekp/nnops.hpp"

namespace ekp::net {

enum class LayerKind { Input, Conv, BatchNorm, ReLU, Add, GlobalAvgPool, Dense };

const char* to_string(LayerKind k);
LayerKind layer_kind_from_string(const std::string& s);

struct LayerDesc {
  LayerKind kind = LayerKind::Input;
  std::string name;
  std::vector<int> inputs;  // producer layer indices, all < own index
  // Conv
  int out_channels = 0;
  int kh = 0, kw = 0, stride = 1, pad = 0;
  int coupling_group = -1;  // convs sharing a group are masked jointly
  // Dense
  int out_features = 0;
};

struct InputSpec {
  int channels = 1;
  int height = 8;
  int width = 8;
  int num_classes = 2;
};

// Identifies one filter (output channel) of a conv layer.
struct FilterRef {
  int layer_index = 0;
  int filter_index = 0;
  friend auto operator<=>(const FilterRef&, const FilterRef&) = default;
};

// Shape of a layer's output. Dense/GAP outputs have spatial == false.
struct LayerShape {
  int c = 0, h = 0, w = 0;
  bool spatial = true;
};

// Conv layers that share one mask: a residual coupling group or a singleton.
struct PrunableUnit {
  int id = 0;
  std::vector<int> conv_layers;
  int channels = 0;
};

enum class BatchNormMode { BatchStats, RunningStats };

using WeightStore = std::map<std::string, ad::Tensor>;

struct NetworkStructure;  // internal analysis result, defined in netcore.cpp

struct ForwardOptions {
  BatchNormMode bn = BatchNormMode::BatchStats;
  bool record_taps = false;
  bool params_require_grad = false;
};

struct ForwardPass {
  ad::NodePtr logits;
  // Parameter nodes, aligned with trainable_names(); only filled when
  // params_require_grad was set.
  std::vector<ad::NodePtr> params;
  // Per conv layer: the tensor its next consumer actually reads. Channel j of
  // taps[l] is the tap of FilterRef{l, j}.
  std::map<int, ad::NodePtr> taps;
  // Per BN layer: detached batch statistics for running-stat updates.
  std::map<int, ad::BatchNormOut> bn_stats;
};

// A trained CNN as a graph of prunable filter groups with masking, exact
// FLOPs accounting and feature-map taps. Instances are immutable views;
// mask/materialize return new values sharing unchanged weights.
class PrunableNetwork {
 public:
  PrunableNetwork() = default;

  static PrunableNetwork build(std::vector<LayerDesc> layers, InputSpec input,
                               std::uint64_t init_seed);
  static PrunableNetwork build_with_weights(std::vector<LayerDesc> layers,
                                            InputSpec input, WeightStore weights);

  const std::vector<LayerDesc>& layers() const;
  const InputSpec& input() const;
  const std::vector<PrunableUnit>& units() const;
  LayerShape shape_of(int layer) const;

  int unit_of_layer(int layer) const;  // -1 for non-conv layers
  const std::vector<std::uint8_t>& unit_mask(int unit) const;
  int alive_count(int unit) const;
  int total_alive() const;
  bool filter_alive(const FilterRef& f) const;
  std::vector<FilterRef> alive_filters() const;
  // Alive-filter histogram, one entry per unit.
  std::vector<int> alive_histogram() const;

  // Returns a view with the given filters (and their coupling partners)
  // removed from the computation. The receiver is untouched.
  PrunableNetwork mask(const std::vector<FilterRef>& filters) const;

  // Physically shrinks weight tensors to alive filters.
  PrunableNetwork materialize() const;

  std::int64_t flops() const;
  // Contribution of one alive filter under the current masks; exact for
  // removals within a single unit.
  std::int64_t filter_flops(const FilterRef& f) const;
  std::int64_t param_count() const;

  ForwardPass forward(const ad::Tensor& x, const ForwardOptions& opt) const;
  ad::Tensor infer(const ad::Tensor& x, BatchNormMode bn) const;

  const WeightStore& weights() const;
  WeightStore& weights_mut();  // copy-on-write

  // Trainable parameters in registry order (conv W, BN gamma/beta, dense W/b).
  const std::vector<std::string>& trainable_names() const;
  std::vector<double> flat_params() const;
  void set_flat_params(const std::vector<double>& v);
  std::size_t flat_param_size() const;

  // Applies this network's masks to another weight store with identical
  // structure (used to rebuild interim teachers from stored masks).
  PrunableNetwork with_masks(const std::vector<std::vector<std::uint8_t>>& unit_masks) const;
  const std::vector<std::vector<std::uint8_t>>& masks() const { return unit_masks_; }

 private:
  std::shared_ptr<const NetworkStructure> structure_;
  std::shared_ptr<WeightStore> weights_;
  std::vector<std::vector<std::uint8_t>> unit_masks_;
};

}  // namespace ekp::net
