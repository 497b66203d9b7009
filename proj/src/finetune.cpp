#include "ekp/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "ekp/errors.hpp"
#include "ekp/nnops.hpp"

namespace ekp::finetune {

double LrSchedule::at(int epoch) const {
  int passed = 0;
  for (int m : milestones)
    if (epoch >= m) ++passed;
  return initial * std::pow(decay, passed);
}

void LrSchedule::validate(int epochs) const {
  if (initial <= 0.0 || decay <= 0.0)
    throw ConfigError("learning rates and decay must be positive");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] >= epochs)
      throw ConfigError("lr milestone " + std::to_string(milestones[i]) +
                        " is not below the epoch count");
    if (i > 0 && milestones[i] <= milestones[i - 1])
      throw ConfigError("lr milestones must be strictly increasing");
  }
}

ad::NodePtr finetune_loss(const ad::NodePtr& logits_a, const ad::NodePtr& logits_b,
                          const std::vector<int>& labels, const ad::Tensor& kd_targets,
                          double kd_weight, double kd_temperature, bool per_view_kd) {
  if (!logits_a->value.same_shape(logits_b->value))
    throw ShapeError("finetune_loss: view logits shapes differ");
  auto task = ad::add(ad::cross_entropy_mean(logits_a, labels),
                      ad::cross_entropy_mean(logits_b, labels));
  if (kd_weight == 0.0) return task;
  if (!kd_targets.same_shape(logits_a->value))
    throw ShapeError("finetune_loss: kd target shape mismatch");

  const double t = kd_temperature;
  ad::NodePtr kd;
  if (per_view_kd) {
    kd = ad::mul_scalar(ad::add(ad::kl_to_targets_mean(kd_targets, logits_a, t),
                                ad::kl_to_targets_mean(kd_targets, logits_b, t)),
                        0.5);
  } else {
    // KL between softened targets and the mean of the two softened views.
    auto qa = ad::softmax_rows(ad::mul_scalar(logits_a, 1.0 / t));
    auto qb = ad::softmax_rows(ad::mul_scalar(logits_b, 1.0 / t));
    auto q_mean = ad::mul_scalar(ad::add(qa, qb), 0.5);
    kd = ad::kl_probs_mean(ad::softmax_rows_value(kd_targets, t), q_mean);
  }
  return ad::add(task, ad::mul_scalar(kd, kd_weight * t * t));
}

namespace {

class SgdOptimizer {
 public:
  explicit SgdOptimizer(std::size_t dim) : velocity_(dim, 0.0) {}

  // g must already include weight decay. Nesterov step per the usual
  // momentum-buffer formulation.
  void step(std::vector<double>& w, const std::vector<double>& g, double lr,
            double momentum, bool nesterov) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      velocity_[i] = momentum * velocity_[i] + g[i];
      const double d = nesterov ? g[i] + momentum * velocity_[i] : velocity_[i];
      w[i] -= lr * d;
    }
  }

 private:
  std::vector<double> velocity_;
};

void update_running_stats(net::PrunableNetwork& network, const net::ForwardPass& pass,
                          double alpha = 0.9) {
  auto& w = network.weights_mut();
  for (const auto& [layer, bn] : pass.bn_stats) {
    const auto& name = network.layers()[static_cast<std::size_t>(layer)].name;
    auto& rm = w.at(name + ".running_mean");
    auto& rv = w.at(name + ".running_var");
    for (std::size_t i = 0; i < rm.size(); ++i) {
      rm[i] = alpha * rm[i] + (1.0 - alpha) * bn.batch_mean[i];
      rv[i] = alpha * rv[i] + (1.0 - alpha) * bn.batch_var[i];
    }
  }
}

std::vector<double> collect_grads(const net::PrunableNetwork& network,
                                  const std::vector<ad::NodePtr>& param_nodes,
                                  const std::vector<ad::NodePtr>& grads,
                                  double weight_decay) {
  std::vector<double> flat;
  flat.reserve(network.flat_param_size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& g = grads[i]->value;
    const auto& p = param_nodes[i]->value;
    for (std::size_t j = 0; j < g.size(); ++j)
      flat.push_back(g[j] + weight_decay * p[j]);
  }
  return flat;
}

// Gradient of the loss w.r.t. the network parameters when the same weights
// were instantiated as two node sets (one per augmented view).
std::vector<double> collect_grads_two_views(const net::PrunableNetwork& network,
                                            const net::ForwardPass& pa,
                                            const net::ForwardPass& pb,
                                            const ad::NodePtr& loss,
                                            double weight_decay) {
  std::vector<ad::NodePtr> wrt = pa.params;
  wrt.insert(wrt.end(), pb.params.begin(), pb.params.end());
  auto grads = ad::grad(loss, wrt);
  std::vector<double> flat;
  flat.reserve(network.flat_param_size());
  const std::size_t half = pa.params.size();
  for (std::size_t i = 0; i < half; ++i) {
    const auto& ga = grads[i]->value;
    const auto& gb = grads[half + i]->value;
    const auto& p = pa.params[i]->value;
    for (std::size_t j = 0; j < ga.size(); ++j)
      flat.push_back(ga[j] + gb[j] + weight_decay * p[j]);
  }
  return flat;
}

void apply_flat_update(net::PrunableNetwork& network, SgdOptimizer& opt,
                       const std::vector<double>& grads, double lr, double momentum,
                       bool nesterov) {
  auto w = network.flat_params();
  opt.step(w, grads, lr, momentum, nesterov);
  network.set_flat_params(w);
}

}  // namespace

FinetuneResult run_finetune(const net::PrunableNetwork& start,
                            const membank::MemoryBank* bank,
                            const data::Dataset& train, const EvalSplits& eval,
                            const FinetuneConfig& cfg) {
  cfg.lr.validate(std::max(cfg.epochs, 1));
  FinetuneResult result;
  result.network = start;
  if (cfg.epochs == 0) return result;

  const bool use_kd = bank != nullptr && cfg.kd_weight != 0.0;
  if (use_kd && bank->train_count() != train.count())
    throw CoverageError("memory bank does not cover the training set");

  auto& network = result.network;
  SgdOptimizer opt(network.flat_param_size());
  membank::EmaTracker ema(cfg.ema_decay);

  Rng shuffle_rng(mix_seed(cfg.seed, 0x5u));
  Rng aug_rng(mix_seed(cfg.seed, 0xau));

  std::vector<int> ids(static_cast<std::size_t>(train.count()));
  std::iota(ids.begin(), ids.end(), 0);

  net::ForwardOptions train_opt;
  train_opt.bn = net::BatchNormMode::BatchStats;
  train_opt.params_require_grad = true;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr.at(epoch);
    std::shuffle(ids.begin(), ids.end(), shuffle_rng);

    double task_sum = 0.0, kd_sum = 0.0;
    int steps = 0;
    for (std::size_t off = 0; off < ids.size(); off += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t n =
          std::min(static_cast<std::size_t>(cfg.batch_size), ids.size() - off);
      std::span<const int> batch_ids(ids.data() + off, n);
      auto [ba, bb] = data::make_augmented_pair(train, batch_ids, cfg.augmentation,
                                                aug_rng);
      auto pa = network.forward(ba.x, train_opt);
      auto pb = network.forward(bb.x, train_opt);
      auto ce_a = ad::cross_entropy_mean(pa.logits, ba.labels);
      auto ce_b = ad::cross_entropy_mean(pb.logits, bb.labels);
      const double task_value = 0.5 * (ce_a->value.item() + ce_b->value.item());
      if (!std::isfinite(task_value))
        throw DivergenceError("non-finite task loss at epoch " + std::to_string(epoch));
      ema.update(task_value);
      task_sum += task_value;

      ad::NodePtr loss = ad::add(ce_a, ce_b);
      if (use_kd) {
        auto targets = bank->ensemble_targets(ema.value(), batch_ids);
        auto total = finetune_loss(pa.logits, pb.logits, ba.labels, targets,
                                   cfg.kd_weight, cfg.kd_temperature, cfg.per_view_kd);
        // kd component for the log
        kd_sum += total->value.item() - loss->value.item();
        loss = total;
      }
      if (!std::isfinite(loss->value.item()))
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch));

      auto grads = collect_grads_two_views(network, pa, pb, loss, cfg.weight_decay);
      apply_flat_update(network, opt, grads, lr, cfg.momentum, cfg.nesterov);
      update_running_stats(network, pa);
      update_running_stats(network, pb);
      ++steps;
    }

    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    log.train_loss = task_sum / std::max(steps, 1);
    log.kd_loss = use_kd ? kd_sum / std::max(steps, 1) : 0.0;
    log.ema_loss = ema.value();
    log.qualifying_teachers =
        use_kd ? static_cast<int>(bank->qualifying(ema.value()).size()) : 0;
    if (eval.val_data)
      log.val_acc = evaluate_accuracy(network, *eval.val_data, eval.val_ids, 256,
                                      net::BatchNormMode::RunningStats);
    if (eval.test_data) {
      std::vector<int> all(static_cast<std::size_t>(eval.test_data->count()));
      std::iota(all.begin(), all.end(), 0);
      log.test_acc = evaluate_accuracy(network, *eval.test_data, all, 256,
                                       net::BatchNormMode::RunningStats);
    }
    result.log.push_back(log);
  }
  return result;
}

void sgd_train(net::PrunableNetwork& network, const data::Dataset& data,
               const std::vector<int>& ids, const PlainTrainConfig& cfg) {
  cfg.lr.validate(std::max(cfg.epochs, 1));
  SgdOptimizer opt(network.flat_param_size());
  Rng shuffle_rng(mix_seed(cfg.seed, 0x51u));
  Rng aug_rng(mix_seed(cfg.seed, 0xa1u));
  std::vector<int> order = ids;

  net::ForwardOptions train_opt;
  train_opt.bn = net::BatchNormMode::BatchStats;
  train_opt.params_require_grad = true;

  const bool augmented = !cfg.augmentation.ops.empty();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr.at(epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t n =
          std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - off);
      std::span<const int> batch_ids(order.data() + off, n);
      data::Batch batch;
      if (augmented) {
        const int c = data.images.dim(1), h = data.images.dim(2), w = data.images.dim(3);
        batch.x = ad::Tensor({static_cast<int>(n), c, h, w});
        // single stochastic view per example
        for (std::size_t i = 0; i < n; ++i) {
          auto img = data::apply_augmentation(data::example_image(data, batch_ids[i]),
                                              cfg.augmentation, aug_rng);
          auto one = data::make_batch(data, std::span<const int>(&batch_ids[i], 1));
          // normalize the augmented image through the dataset statistics
          for (int k = 0; k < c; ++k) {
            const double m = data.channel_mean[static_cast<std::size_t>(k)];
            const double s = data.channel_std[static_cast<std::size_t>(k)];
            const std::size_t hw = static_cast<std::size_t>(h) * w;
            for (std::size_t j = 0; j < hw; ++j)
              batch.x[(i * c + static_cast<std::size_t>(k)) * hw + j] =
                  (img[static_cast<std::size_t>(k) * hw + j] - m) / s;
          }
          batch.labels.push_back(data.labels[static_cast<std::size_t>(batch_ids[i])]);
          batch.ids.push_back(batch_ids[i]);
        }
      } else {
        batch = data::make_batch(data, batch_ids);
      }
      auto pass = network.forward(batch.x, train_opt);
      auto loss = ad::cross_entropy_mean(pass.logits, batch.labels);
      if (!std::isfinite(loss->value.item()))
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch));
      auto grads = ad::grad(loss, pass.params);
      auto flat = collect_grads(network, pass.params, grads, cfg.weight_decay);
      apply_flat_update(network, opt, flat, lr, cfg.momentum, cfg.nesterov);
      update_running_stats(network, pass);
    }
  }
}

double evaluate_accuracy(const net::PrunableNetwork& network, const data::Dataset& data,
                         const std::vector<int>& ids, int batch_size,
                         net::BatchNormMode bn) {
  double hits = 0.0;
  for (const auto& batch : data::eval_batches(data, ids, batch_size)) {
    auto logits = network.infer(batch.x, bn);
    hits += ad::accuracy_value(logits, batch.labels) *
            static_cast<double>(batch.labels.size());
  }
  return ids.empty() ? 0.0 : hits / static_cast<double>(ids.size());
}

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<EpochLog>& log) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << "epoch,lr,train_loss,kd_loss,qualifying_teachers,val_acc,test_acc,ema_loss\n";
  f.precision(12);
  for (const auto& e : log)
    f << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.kd_loss << ','
      << e.qualifying_teachers << ',' << e.val_acc << ',' << e.test_acc << ','
      << e.ema_loss << "\n";
  if (!f) throw IoError("short write: " + path.string());
}

}  // namespace ekp::finetune
