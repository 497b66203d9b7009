#pragma once
#include <cstdint>
#include <optional>
#include <vector>

#include "ekp/data.hpp"
#include "ekp/membank.hpp"
#include "ekp/netcore.hpp"

namespace ekp::finetune {

struct LrSchedule {
  double initial = 1e-2;
  double decay = 0.2;
  std::vector<int> milestones{30, 60, 80};

  // initial * decay^(number of passed milestones), exactly.
  double at(int epoch) const;
  void validate(int epochs) const;
};

struct FinetuneConfig {
  int epochs = 100;
  int batch_size = 128;
  LrSchedule lr;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  bool nesterov = true;
  double kd_weight = 1.0;
  // The paper leaves the softening temperature unstated; the KD term is
  // scaled by temperature^2 so gradients stay comparable across settings.
  double kd_temperature = 4.0;
  bool per_view_kd = false;  // apply KD per view instead of to the view mean
  double ema_decay = 0.99;
  std::uint64_t seed = 0;
  data::AugmentationPolicy augmentation = data::AugmentationPolicy::finetune_extra();
};

// Dual-augmentation fine-tuning loss: the sum of the two views' task losses
// plus one distillation term against the ensemble targets (raw logits).
ad::NodePtr finetune_loss(const ad::NodePtr& logits_a, const ad::NodePtr& logits_b,
                          const std::vector<int>& labels, const ad::Tensor& kd_targets,
                          double kd_weight, double kd_temperature,
                          bool per_view_kd = false);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean task loss per view over the epoch
  double kd_loss = 0.0;
  double ema_loss = 0.0;  // student task-loss EMA used for the teacher gate
  int qualifying_teachers = 0;
  double val_acc = 0.0;
  double test_acc = 0.0;
};

struct FinetuneResult {
  net::PrunableNetwork network;
  std::vector<EpochLog> log;
};

struct EvalSplits {
  const data::Dataset* val_data = nullptr;
  std::vector<int> val_ids;
  const data::Dataset* test_data = nullptr;
};

// Fine-tunes over the full training set with SGD (momentum 0.9, Nesterov).
// bank == nullptr or kd_weight == 0 reproduces plain fine-tuning bit for bit
// (identical RNG stream consumption). Throws DivergenceError naming the epoch
// if the loss turns non-finite.
FinetuneResult run_finetune(const net::PrunableNetwork& start,
                            const membank::MemoryBank* bank,
                            const data::Dataset& train, const EvalSplits& eval,
                            const FinetuneConfig& cfg);

// Plain single-view task training, used for pre-training baselines and the
// one-epoch warm-up before the search.
struct PlainTrainConfig {
  int epochs = 1;
  int batch_size = 256;
  LrSchedule lr{1e-3, 1.0, {}};
  double weight_decay = 0.0;
  double momentum = 0.9;
  bool nesterov = true;
  data::AugmentationPolicy augmentation = data::AugmentationPolicy::search();
  std::uint64_t seed = 0;
};

void sgd_train(net::PrunableNetwork& network, const data::Dataset& data,
               const std::vector<int>& ids, const PlainTrainConfig& cfg);

double evaluate_accuracy(const net::PrunableNetwork& network, const data::Dataset& data,
                         const std::vector<int>& ids, int batch_size,
                         net::BatchNormMode bn);

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<EpochLog>& log);

}  // namespace ekp::finetune
