#pragma once
#include <vector>

#include "ekp/autodiff.hpp"

namespace ekp::ad {

// Composite network ops. Everything is expressed through the differentiable
// primitives, so second-order gradients (HVPs) work through all of them.

// x: [N,Cin,H,W], w: [Cout,Cin,kh,kw]. No bias; batch norm follows convs.
NodePtr conv2d(const NodePtr& x, const NodePtr& w, int stride, int pad);

// x: [N,Cin], w: [Cout,Cin], b: [Cout].
NodePtr dense(const NodePtr& x, const NodePtr& w, const NodePtr& b);

struct BatchNormOut {
  NodePtr y;
  Tensor batch_mean;  // detached batch statistics, for running-stat updates
  Tensor batch_var;   // biased variance
};

// Training-mode batch norm over (N,H,W) per channel.
BatchNormOut batchnorm_train(const NodePtr& x, const NodePtr& gamma,
                             const NodePtr& beta, double eps);

// Inference-mode batch norm with fixed running statistics.
NodePtr batchnorm_eval(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta,
                       const Tensor& running_mean, const Tensor& running_var,
                       double eps);

// Global average pool [N,C,H,W] -> [N,C].
NodePtr global_avg_pool(const NodePtr& x);

// Row-wise log-softmax of logits [N,C]; max-shifted for stability.
NodePtr log_softmax_rows(const NodePtr& z);

// Mean cross-entropy of logits [N,C] against integer labels.
NodePtr cross_entropy_mean(const NodePtr& z, const std::vector<int>& labels);

// Mean KL(p || softmax(z / temperature)) where p = softmax(targets / temperature)
// is a constant. The entropy term of p is included so the value is a true KL.
NodePtr kl_to_targets_mean(const Tensor& target_logits, const NodePtr& z,
                           double temperature);

// Mean KL(p || q) for an explicit constant target distribution p and a student
// probability node q (rows sum to 1).
NodePtr kl_probs_mean(const Tensor& target_probs, const NodePtr& q);

// Row-wise softmax as a plain value computation (no graph).
Tensor softmax_rows_value(const Tensor& logits, double temperature = 1.0);

// Plain value computations over stored logits.
double cross_entropy_value(const Tensor& logits, const std::vector<int>& labels);
double accuracy_value(const Tensor& logits, const std::vector<int>& labels);
// Mean KL(softmax(target) || softmax(student)) at temperature 1.
double kl_value(const Tensor& target_logits, const Tensor& student_logits);

// softmax of logits [N,C] as a node.
NodePtr softmax_rows(const NodePtr& z);

}  // namespace ekp::ad
