#pragma once
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "ekp/tensor.hpp"
#include "ekp/util.hpp"

namespace ekp::data {

struct Dataset {
  ad::Tensor images;  // [N,C,H,W], raw values before normalization
  std::vector<int> labels;
  int num_classes = 0;
  // Channel statistics used for normalization; for test sets these are copied
  // from the training set.
  std::vector<double> channel_mean, channel_std;

  int count() const { return images.empty() ? 0 : images.dim(0); }
};

struct SplitSpec {
  int per_class_subset = 256;
  int per_class_val = 32;
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<int> subset;
  std::vector<int> val;
};

// Stratified, disjoint, deterministic under the seed. Throws
// InsufficientDataError when a class is too small.
SplitIndices make_splits(const Dataset& ds, const SplitSpec& spec);

void save_split(const std::filesystem::path& path, const std::vector<int>& ids);
std::vector<int> load_split(const std::filesystem::path& path);

enum class AugStage { Search, FinetuneBase, FinetuneExtra };

struct AugOp {
  enum class Kind { HorizontalFlip, PadCrop, Brightness, Contrast, Saturation };
  Kind kind = Kind::HorizontalFlip;
  double probability = 0.5;  // flip
  int pad = 4;               // pad-crop
  double magnitude = 0.2;    // jitter strength, relative
};

struct AugmentationPolicy {
  AugStage stage = AugStage::Search;
  std::vector<AugOp> ops;

  static AugmentationPolicy search();          // no augmentation
  static AugmentationPolicy finetune_base();   // flip + pad-crop
  static AugmentationPolicy finetune_extra();  // + brightness/contrast/saturation
  static AugmentationPolicy identity();        // finetune stage, no ops
  static AugmentationPolicy flip_always();     // finetune stage, p=1 flip
};

// image is [C,H,W]; label is untouched by construction.
ad::Tensor apply_augmentation(const ad::Tensor& image, const AugmentationPolicy& policy,
                              Rng& rng);

// Two independent stochastic draws of the same example.
std::pair<ad::Tensor, ad::Tensor> augment_pair(const ad::Tensor& image,
                                               const AugmentationPolicy& policy,
                                               Rng& rng);

struct Batch {
  ad::Tensor x;  // normalized [n,C,H,W]
  std::vector<int> labels;
  std::vector<int> ids;  // positions in the source dataset
};

// Fixed-order, normalized, unaugmented batches over the given indices.
std::vector<Batch> eval_batches(const Dataset& ds, const std::vector<int>& ids,
                                int batch_size);

// Normalized batch without augmentation.
Batch make_batch(const Dataset& ds, std::span<const int> ids);

// Two augmented views of the same examples (labels and ids shared).
std::pair<Batch, Batch> make_augmented_pair(const Dataset& ds, std::span<const int> ids,
                                            const AugmentationPolicy& policy, Rng& rng);

ad::Tensor example_image(const Dataset& ds, int id);  // raw [C,H,W]

struct SyntheticSpec {
  int classes = 4;
  int per_class = 300;
  int channels = 1;
  int height = 12;
  int width = 12;
  double noise = 0.15;
  std::uint64_t seed = 0;
};

// Gaussian class blobs rendered as small images; class centers sit on a
// circle, examples jitter around them. Runs without any downloads.
Dataset synthetic_dataset(const SyntheticSpec& spec);

struct TrainTest {
  Dataset train;
  Dataset test;
};

TrainTest synthetic_train_test(const SyntheticSpec& spec, int test_per_class);

// CIFAR-10 binary batches (data_batch_*.bin / test_batch.bin).
TrainTest load_cifar10(const std::filesystem::path& dir);

}  // namespace ekp::data
