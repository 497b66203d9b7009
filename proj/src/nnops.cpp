#include "ekp/nnops.hpp"

#include <cmath>

namespace ekp::ad {

NodePtr conv2d(const NodePtr& x, const NodePtr& w, int stride, int pad) {
  if (x->value.rank() != 4 || w->value.rank() != 4)
    throw ShapeError("conv2d: expected 4-D input and kernel");
  if (x->value.dim(1) != w->value.dim(1))
    throw ShapeError("conv2d: input channels " + std::to_string(x->value.dim(1)) +
                     " != kernel channels " + std::to_string(w->value.dim(1)));
  ConvGeom g{x->value.dim(0), x->value.dim(1), x->value.dim(2), x->value.dim(3),
             w->value.dim(2), w->value.dim(3), stride, pad};
  const int cout = w->value.dim(0);
  auto cols = im2col(x, g);                                      // [N*Ho*Wo, Cin*kh*kw]
  auto wmat = reshape(w, {cout, g.c * g.kh * g.kw});             // [Cout, Cin*kh*kw]
  auto out = matmul(cols, transpose2d(wmat));                    // [N*Ho*Wo, Cout]
  return to_nchw(out, g.n, g.out_h(), g.out_w());
}

NodePtr dense(const NodePtr& x, const NodePtr& w, const NodePtr& b) {
  auto out = matmul(x, transpose2d(w));
  return add(out, bcast_rows(b, x->value.dim(0)));
}

BatchNormOut batchnorm_train(const NodePtr& x, const NodePtr& gamma,
                             const NodePtr& beta, double eps) {
  if (x->value.rank() != 4) throw ShapeError("batchnorm_train: rank != 4");
  const int n = x->value.dim(0), h = x->value.dim(2), w = x->value.dim(3);
  const double count = static_cast<double>(n) * h * w;
  auto mean = mul_scalar(reduce_nhw(x), 1.0 / count);            // [C]
  auto xc = sub(x, bcast_nhw(mean, n, h, w));
  auto var = mul_scalar(reduce_nhw(mul(xc, xc)), 1.0 / count);   // biased
  auto inv_std = div(constant(Tensor::full(var->value.shape(), 1.0)),
                     sqrt_(add_scalar(var, eps)));
  auto y = add(mul(xc, bcast_nhw(mul(gamma, inv_std), n, h, w)),
               bcast_nhw(beta, n, h, w));
  return BatchNormOut{y, mean->value, var->value};
}

NodePtr batchnorm_eval(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta,
                       const Tensor& running_mean, const Tensor& running_var,
                       double eps) {
  if (x->value.rank() != 4) throw ShapeError("batchnorm_eval: rank != 4");
  const int n = x->value.dim(0), h = x->value.dim(2), w = x->value.dim(3);
  Tensor inv_std(running_var.shape());
  for (std::size_t i = 0; i < inv_std.size(); ++i)
    inv_std[i] = 1.0 / std::sqrt(running_var[i] + eps);
  auto coef = mul(gamma, constant(inv_std));                    // [C]
  auto shift = sub(beta, mul(coef, constant(running_mean)));    // [C]
  return add(mul(x, bcast_nhw(coef, n, h, w)), bcast_nhw(shift, n, h, w));
}

NodePtr global_avg_pool(const NodePtr& x) {
  if (x->value.rank() != 4) throw ShapeError("global_avg_pool: rank != 4");
  const double hw = static_cast<double>(x->value.dim(2)) * x->value.dim(3);
  return mul_scalar(sum_hw(x), 1.0 / hw);
}

NodePtr log_softmax_rows(const NodePtr& z) {
  if (z->value.rank() != 2) throw ShapeError("log_softmax_rows: rank != 2");
  const int n = z->value.dim(0), c = z->value.dim(1);
  // Row max as a constant shift; exact for both value and all derivatives.
  Tensor m({n});
  for (int i = 0; i < n; ++i) {
    double best = z->value[static_cast<std::size_t>(i) * c];
    for (int j = 1; j < c; ++j)
      best = std::max(best, z->value[static_cast<std::size_t>(i) * c + j]);
    m[static_cast<std::size_t>(i)] = best;
  }
  auto zs = sub(z, bcast_cols(constant(m), c));
  auto lse = log_(rowsum(exp_(zs)));
  return sub(zs, bcast_cols(lse, c));
}

NodePtr cross_entropy_mean(const NodePtr& z, const std::vector<int>& labels) {
  auto logp = log_softmax_rows(z);
  auto nll = neg(gather_labels(logp, labels));
  return mul_scalar(sum_all(nll), 1.0 / static_cast<double>(labels.size()));
}

NodePtr softmax_rows(const NodePtr& z) { return exp_(log_softmax_rows(z)); }

Tensor softmax_rows_value(const Tensor& logits, double temperature) {
  const int n = logits.dim(0), c = logits.dim(1);
  Tensor out({n, c});
  for (int i = 0; i < n; ++i) {
    const double* row = logits.data() + static_cast<std::size_t>(i) * c;
    double m = row[0] / temperature;
    for (int j = 1; j < c; ++j) m = std::max(m, row[j] / temperature);
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
      const double e = std::exp(row[j] / temperature - m);
      out[static_cast<std::size_t>(i) * c + j] = e;
      s += e;
    }
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * c + j] /= s;
  }
  return out;
}

double cross_entropy_value(const Tensor& logits, const std::vector<int>& labels) {
  const int n = logits.dim(0), c = logits.dim(1);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* row = logits.data() + static_cast<std::size_t>(i) * c;
    double m = row[0];
    for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += std::exp(row[j] - m);
    total += m + std::log(s) - row[labels[static_cast<std::size_t>(i)]];
  }
  return total / n;
}

double accuracy_value(const Tensor& logits, const std::vector<int>& labels) {
  const int n = logits.dim(0), c = logits.dim(1);
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    const double* row = logits.data() + static_cast<std::size_t>(i) * c;
    int best = 0;
    for (int j = 1; j < c; ++j)
      if (row[j] > row[best]) best = j;
    if (best == labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / n;
}

NodePtr kl_probs_mean(const Tensor& target_probs, const NodePtr& q) {
  if (!target_probs.same_shape(q->value))
    throw ShapeError("kl_probs_mean: target/student shape mismatch");
  const int n = target_probs.dim(0);
  // sum p log p with 0 log 0 := 0, as a constant.
  double entropy_term = 0.0;
  for (std::size_t i = 0; i < target_probs.size(); ++i) {
    const double p = target_probs[i];
    if (p > 0.0) entropy_term += p * std::log(p);
  }
  auto cross = sum_all(mul(constant(target_probs), log_(q)));
  return add_scalar(mul_scalar(cross, -1.0 / n), entropy_term / n);
}

NodePtr kl_to_targets_mean(const Tensor& target_logits, const NodePtr& z,
                           double temperature) {
  if (!target_logits.same_shape(z->value))
    throw ShapeError("kl_to_targets_mean: target/student shape mismatch");
  const int n = target_logits.dim(0);
  Tensor p = softmax_rows_value(target_logits, temperature);
  double entropy_term = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) entropy_term += p[i] * std::log(p[i]);
  auto logq = log_softmax_rows(mul_scalar(z, 1.0 / temperature));
  auto cross = sum_all(mul(constant(p), logq));
  return add_scalar(mul_scalar(cross, -1.0 / n), entropy_term / n);
}

}  // namespace ekp::ad
