#pragma once
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <vector>

#include "ekp/array_io.hpp"
#include "ekp/data.hpp"
#include "ekp/netcore.hpp"

namespace ekp::membank {

// Picks K interim iterations whose losses sit nearest the K uniform
// interpolation targets between the pruned network's loss (k=0 end) and the
// pre-trained network's loss (k=K end). Ties go to the later iteration.
std::vector<int> select_teachers(const std::map<int, double>& interim_losses,
                                 double l_star, double l_0, int k_teachers);

struct TeacherInfo {
  int k = 0;  // 1-based; k = K is the strongest teacher
  int source_iteration = 0;
  double teacher_loss = 0.0;
};

// K stored teacher output sets over the training set. Write-once, then
// read-only; loads memory-map the logit arrays.
class MemoryBank {
 public:
  MemoryBank() = default;

  int teacher_count() const { return static_cast<int>(teachers_.size()); }
  int train_count() const { return train_count_; }
  int classes() const { return classes_; }
  const std::vector<TeacherInfo>& teachers() const { return teachers_; }

  std::span<const double> teacher_logits(int k) const;  // [train_count * classes]
  std::span<const double> teacher_row(int k, int example_id) const;

  // Teachers whose stored loss <= current_loss; falls back to {K} when empty.
  std::vector<int> qualifying(double current_loss) const;

  // Per-example mean of qualifying teachers' logits: [ids.size(), classes].
  ad::Tensor ensemble_targets(double current_loss, std::span<const int> ids) const;

  // Runs each teacher over the full training set (no augmentation, batch-stats
  // BN, fixed order) and records its mean task loss from the stored logits.
  static MemoryBank build(const std::vector<net::PrunableNetwork>& teacher_nets,
                          const std::vector<int>& source_iterations,
                          const data::Dataset& train, int batch_size,
                          net::BatchNormMode bn_mode = net::BatchNormMode::BatchStats);

  void save(const std::filesystem::path& dir) const;
  static MemoryBank load(const std::filesystem::path& dir, bool use_mmap = true);

 private:
  std::vector<TeacherInfo> teachers_;
  int train_count_ = 0;
  int classes_ = 0;
  // Either owned or memory-mapped storage, one per teacher.
  std::vector<ad::Tensor> owned_;
  std::vector<std::shared_ptr<io::MappedArray>> mapped_;
};

// Exponential moving average of the student's training-batch task loss; the
// gate that decides which teachers currently qualify.
class EmaTracker {
 public:
  explicit EmaTracker(double decay = 0.99) : decay_(decay) {}
  void update(double x) {
    value_ = started_ ? decay_ * value_ + (1.0 - decay_) * x : x;
    started_ = true;
  }
  double value() const { return value_; }
  bool started() const { return started_; }

 private:
  double decay_;
  double value_ = 0.0;
  bool started_ = false;
};

}  // namespace ekp::membank
