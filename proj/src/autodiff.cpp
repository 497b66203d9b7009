#include "ekp/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace ekp::ad {

namespace {

using Vjp = std::function<std::vector<NodePtr>(const NodePtr&)>;

NodePtr make(Tensor value, std::vector<NodePtr> parents, Vjp vjp) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p && p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  if (n->requires_grad) n->vjp = std::move(vjp);
  return n;
}

void check_same_shape(const NodePtr& a, const NodePtr& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw ShapeError(std::string(op) + ": shape mismatch " + a->value.shape_str() +
                     " vs " + b->value.shape_str());
}

using EigenMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenMat>;
using ConstMatMap = Eigen::Map<const EigenMat>;

}  // namespace

NodePtr constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = false;
  return n;
}

NodePtr param(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  return n;
}

NodePtr detach(const NodePtr& x) { return constant(x->value); }

NodePtr grad_root(const NodePtr& x) {
  auto n = std::make_shared<Node>();
  n->value = x->value;
  n->parents = {x};
  n->requires_grad = true;
  n->vjp = [](const NodePtr& g) { return std::vector<NodePtr>{g}; };
  return n;
}

NodePtr add(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a, b, "add");
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  return make(std::move(out), {a, b},
              [](const NodePtr& g) { return std::vector<NodePtr>{g, g}; });
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
  return make(std::move(out), {a, b},
              [](const NodePtr& g) { return std::vector<NodePtr>{g, neg(g)}; });
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
  return make(std::move(out), {a, b}, [a, b](const NodePtr& g) {
    return std::vector<NodePtr>{mul(g, b), mul(g, a)};
  });
}

NodePtr div(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a, b, "div");
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] / b->value[i];
  return make(std::move(out), {a, b}, [a, b](const NodePtr& g) {
    return std::vector<NodePtr>{div(g, b), neg(div(mul(g, a), mul(b, b)))};
  });
}

NodePtr neg(const NodePtr& a) {
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -a->value[i];
  return make(std::move(out), {a},
              [](const NodePtr& g) { return std::vector<NodePtr>{neg(g)}; });
}

NodePtr exp_(const NodePtr& a) {
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a->value[i]);
  return make(std::move(out), {a}, [a](const NodePtr& g) {
    return std::vector<NodePtr>{mul(g, exp_(a))};
  });
}

NodePtr log_(const NodePtr& a) {
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a->value[i]);
  return make(std::move(out), {a}, [a](const NodePtr& g) {
    return std::vector<NodePtr>{div(g, a)};
  });
}

NodePtr sqrt_(const NodePtr& a) {
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(a->value[i]);
  return make(std::move(out), {a}, [a](const NodePtr& g) {
    return std::vector<NodePtr>{mul_scalar(div(g, sqrt_(a)), 0.5)};
  });
}

NodePtr relu(const NodePtr& a) {
  Tensor out(a->value.shape());
  Tensor mask(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool pos = a->value[i] > 0.0;
    out[i] = pos ? a->value[i] : 0.0;
    mask[i] = pos ? 1.0 : 0.0;
  }
  // The mask is a constant of the linearization; second derivatives through
  // the kink are zero almost everywhere.
  return make(std::move(out), {a}, [mask](const NodePtr& g) {
    return std::vector<NodePtr>{mul(g, constant(mask))};
  });
}

NodePtr add_scalar(const NodePtr& a, double c) {
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + c;
  return make(std::move(out), {a},
              [](const NodePtr& g) { return std::vector<NodePtr>{g}; });
}

NodePtr mul_scalar(const NodePtr& a, double c) {
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * c;
  return make(std::move(out), {a}, [c](const NodePtr& g) {
    return std::vector<NodePtr>{mul_scalar(g, c)};
  });
}

NodePtr reshape(const NodePtr& a, std::vector<int> shape) {
  if (shape_size(shape) != a->value.size())
    throw ShapeError("reshape: size mismatch");
  Tensor out(std::move(shape), std::vector<double>(a->value.data(),
                                                   a->value.data() + a->value.size()));
  auto orig = a->value.shape();
  return make(std::move(out), {a}, [orig](const NodePtr& g) {
    return std::vector<NodePtr>{reshape(g, orig)};
  });
}

NodePtr transpose2d(const NodePtr& a) {
  if (a->value.rank() != 2) throw ShapeError("transpose2d: rank != 2");
  const int m = a->value.dim(0), n = a->value.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(j) * m + i] = a->value[static_cast<std::size_t>(i) * n + j];
  return make(std::move(out), {a}, [](const NodePtr& g) {
    return std::vector<NodePtr>{transpose2d(g)};
  });
}

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  if (a->value.rank() != 2 || b->value.rank() != 2 ||
      a->value.dim(1) != b->value.dim(0))
    throw ShapeError("matmul: incompatible shapes " + a->value.shape_str() + " x " +
                     b->value.shape_str());
  const int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
  Tensor out({m, n});
  ConstMatMap A(a->value.data(), m, k);
  ConstMatMap B(b->value.data(), k, n);
  MatMap C(out.data(), m, n);
  C.noalias() = A * B;
  return make(std::move(out), {a, b}, [a, b](const NodePtr& g) {
    return std::vector<NodePtr>{matmul(g, transpose2d(b)),
                                matmul(transpose2d(a), g)};
  });
}

static void check_geom(const NodePtr& x, const ConvGeom& g) {
  if (x->value.rank() != 4 || x->value.dim(0) != g.n || x->value.dim(1) != g.c ||
      x->value.dim(2) != g.h || x->value.dim(3) != g.w)
    throw ShapeError("im2col: input " + x->value.shape_str() +
                     " does not match geometry");
}

NodePtr im2col(const NodePtr& x, const ConvGeom& g) {
  check_geom(x, g);
  const int ho = g.out_h(), wo = g.out_w();
  Tensor out({g.n * ho * wo, g.c * g.kh * g.kw});
  const double* src = x->value.data();
  double* dst = out.data();
  const int cols = g.c * g.kh * g.kw;
  for (int n = 0; n < g.n; ++n) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double* row = dst + (static_cast<std::size_t>((n * ho + oy) * wo + ox)) * cols;
        for (int c = 0; c < g.c; ++c) {
          for (int ky = 0; ky < g.kh; ++ky) {
            const int iy = oy * g.stride + ky - g.pad;
            for (int kx = 0; kx < g.kw; ++kx) {
              const int ix = ox * g.stride + kx - g.pad;
              double v = 0.0;
              if (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                v = src[((static_cast<std::size_t>(n) * g.c + c) * g.h + iy) * g.w + ix];
              row[(c * g.kh + ky) * g.kw + kx] = v;
            }
          }
        }
      }
    }
  }
  return make(std::move(out), {x}, [g](const NodePtr& gr) {
    return std::vector<NodePtr>{col2im(gr, g)};
  });
}

NodePtr col2im(const NodePtr& cols, const ConvGeom& g) {
  const int ho = g.out_h(), wo = g.out_w();
  const int ncols = g.c * g.kh * g.kw;
  if (cols->value.rank() != 2 || cols->value.dim(0) != g.n * ho * wo ||
      cols->value.dim(1) != ncols)
    throw ShapeError("col2im: input shape mismatch");
  Tensor out({g.n, g.c, g.h, g.w});
  const double* src = cols->value.data();
  double* dst = out.data();
  for (int n = 0; n < g.n; ++n) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const double* row =
            src + (static_cast<std::size_t>((n * ho + oy) * wo + ox)) * ncols;
        for (int c = 0; c < g.c; ++c) {
          for (int ky = 0; ky < g.kh; ++ky) {
            const int iy = oy * g.stride + ky - g.pad;
            if (iy < 0 || iy >= g.h) continue;
            for (int kx = 0; kx < g.kw; ++kx) {
              const int ix = ox * g.stride + kx - g.pad;
              if (ix < 0 || ix >= g.w) continue;
              dst[((static_cast<std::size_t>(n) * g.c + c) * g.h + iy) * g.w + ix] +=
                  row[(c * g.kh + ky) * g.kw + kx];
            }
          }
        }
      }
    }
  }
  return make(std::move(out), {cols}, [g](const NodePtr& gr) {
    return std::vector<NodePtr>{im2col(gr, g)};
  });
}

NodePtr to_nchw(const NodePtr& rows, int n, int h, int w) {
  if (rows->value.rank() != 2 || rows->value.dim(0) != n * h * w)
    throw ShapeError("to_nchw: shape mismatch");
  const int c = rows->value.dim(1);
  Tensor out({n, c, h, w});
  const double* src = rows->value.data();
  double* dst = out.data();
  for (int in = 0; in < n; ++in)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double* row = src + (static_cast<std::size_t>((in * h + y) * w + x)) * c;
        for (int ic = 0; ic < c; ++ic)
          dst[((static_cast<std::size_t>(in) * c + ic) * h + y) * w + x] = row[ic];
      }
  return make(std::move(out), {rows}, [](const NodePtr& g) {
    return std::vector<NodePtr>{to_rows(g)};
  });
}

NodePtr to_rows(const NodePtr& x) {
  if (x->value.rank() != 4) throw ShapeError("to_rows: rank != 4");
  const int n = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2),
            w = x->value.dim(3);
  Tensor out({n * h * w, c});
  const double* src = x->value.data();
  double* dst = out.data();
  for (int in = 0; in < n; ++in)
    for (int y = 0; y < h; ++y)
      for (int ix = 0; ix < w; ++ix) {
        double* row = dst + (static_cast<std::size_t>((in * h + y) * w + ix)) * c;
        for (int ic = 0; ic < c; ++ic)
          row[ic] = src[((static_cast<std::size_t>(in) * c + ic) * h + y) * w + ix];
      }
  return make(std::move(out), {x}, [n, h, w](const NodePtr& g) {
    return std::vector<NodePtr>{to_nchw(g, n, h, w)};
  });
}

NodePtr sum_all(const NodePtr& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a->value.size(); ++i) s += a->value[i];
  auto shape = a->value.shape();
  return make(Tensor::scalar(s), {a}, [shape](const NodePtr& g) {
    return std::vector<NodePtr>{bcast_full(g, shape)};
  });
}

NodePtr bcast_full(const NodePtr& s, std::vector<int> shape) {
  if (s->value.size() != 1) throw ShapeError("bcast_full: source not scalar");
  Tensor out = Tensor::full(shape, s->value.item());
  return make(std::move(out), {s}, [](const NodePtr& g) {
    return std::vector<NodePtr>{sum_all(g)};
  });
}

NodePtr reduce_nhw(const NodePtr& x) {
  if (x->value.rank() != 4) throw ShapeError("reduce_nhw: rank != 4");
  const int n = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2),
            w = x->value.dim(3);
  Tensor out({c});
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      const double* p = x->value.data() + ((static_cast<std::size_t>(in) * c + ic) * h) * w;
      double s = 0.0;
      for (int i = 0; i < h * w; ++i) s += p[i];
      out[static_cast<std::size_t>(ic)] += s;
    }
  return make(std::move(out), {x}, [n, h, w](const NodePtr& g) {
    return std::vector<NodePtr>{bcast_nhw(g, n, h, w)};
  });
}

NodePtr bcast_nhw(const NodePtr& v, int n, int h, int w) {
  if (v->value.rank() != 1) throw ShapeError("bcast_nhw: rank != 1");
  const int c = v->value.dim(0);
  Tensor out({n, c, h, w});
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      double* p = out.data() + ((static_cast<std::size_t>(in) * c + ic) * h) * w;
      const double val = v->value[static_cast<std::size_t>(ic)];
      for (int i = 0; i < h * w; ++i) p[i] = val;
    }
  return make(std::move(out), {v}, [](const NodePtr& g) {
    return std::vector<NodePtr>{reduce_nhw(g)};
  });
}

NodePtr sum_hw(const NodePtr& x) {
  if (x->value.rank() != 4) throw ShapeError("sum_hw: rank != 4");
  const int n = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2),
            w = x->value.dim(3);
  Tensor out({n, c});
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      const double* p = x->value.data() + ((static_cast<std::size_t>(in) * c + ic) * h) * w;
      double s = 0.0;
      for (int i = 0; i < h * w; ++i) s += p[i];
      out[static_cast<std::size_t>(in) * c + ic] = s;
    }
  return make(std::move(out), {x}, [h, w](const NodePtr& g) {
    return std::vector<NodePtr>{bcast_hw(g, h, w)};
  });
}

NodePtr bcast_hw(const NodePtr& v, int h, int w) {
  if (v->value.rank() != 2) throw ShapeError("bcast_hw: rank != 2");
  const int n = v->value.dim(0), c = v->value.dim(1);
  Tensor out({n, c, h, w});
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      double* p = out.data() + ((static_cast<std::size_t>(in) * c + ic) * h) * w;
      const double val = v->value[static_cast<std::size_t>(in) * c + ic];
      for (int i = 0; i < h * w; ++i) p[i] = val;
    }
  return make(std::move(out), {v}, [](const NodePtr& g) {
    return std::vector<NodePtr>{sum_hw(g)};
  });
}

NodePtr rowsum(const NodePtr& x) {
  if (x->value.rank() != 2) throw ShapeError("rowsum: rank != 2");
  const int n = x->value.dim(0), c = x->value.dim(1);
  Tensor out({n});
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += x->value[static_cast<std::size_t>(i) * c + j];
    out[static_cast<std::size_t>(i)] = s;
  }
  return make(std::move(out), {x}, [c](const NodePtr& g) {
    return std::vector<NodePtr>{bcast_cols(g, c)};
  });
}

NodePtr bcast_cols(const NodePtr& v, int c) {
  if (v->value.rank() != 1) throw ShapeError("bcast_cols: rank != 1");
  const int n = v->value.dim(0);
  Tensor out({n, c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<std::size_t>(i) * c + j] = v->value[static_cast<std::size_t>(i)];
  return make(std::move(out), {v}, [](const NodePtr& g) {
    return std::vector<NodePtr>{rowsum(g)};
  });
}

NodePtr colsum(const NodePtr& x) {
  if (x->value.rank() != 2) throw ShapeError("colsum: rank != 2");
  const int n = x->value.dim(0), c = x->value.dim(1);
  Tensor out({c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<std::size_t>(j)] += x->value[static_cast<std::size_t>(i) * c + j];
  return make(std::move(out), {x}, [n](const NodePtr& g) {
    return std::vector<NodePtr>{bcast_rows(g, n)};
  });
}

NodePtr bcast_rows(const NodePtr& v, int n) {
  if (v->value.rank() != 1) throw ShapeError("bcast_rows: rank != 1");
  const int c = v->value.dim(0);
  Tensor out({n, c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<std::size_t>(i) * c + j] = v->value[static_cast<std::size_t>(j)];
  return make(std::move(out), {v}, [](const NodePtr& g) {
    return std::vector<NodePtr>{colsum(g)};
  });
}

NodePtr gather_labels(const NodePtr& x, std::vector<int> labels) {
  if (x->value.rank() != 2) throw ShapeError("gather_labels: rank != 2");
  const int n = x->value.dim(0), c = x->value.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw ShapeError("gather_labels: label count mismatch");
  Tensor out({n});
  for (int i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw ShapeError("gather_labels: label out of range");
    out[static_cast<std::size_t>(i)] = x->value[static_cast<std::size_t>(i) * c + y];
  }
  return make(std::move(out), {x}, [labels, c](const NodePtr& g) {
    return std::vector<NodePtr>{scatter_labels(g, labels, c)};
  });
}

NodePtr scatter_labels(const NodePtr& v, std::vector<int> labels, int c) {
  if (v->value.rank() != 1) throw ShapeError("scatter_labels: rank != 1");
  const int n = v->value.dim(0);
  Tensor out({n, c});
  for (int i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i) * c + labels[static_cast<std::size_t>(i)]] =
        v->value[static_cast<std::size_t>(i)];
  return make(std::move(out), {v}, [labels](const NodePtr& g) {
    return std::vector<NodePtr>{gather_labels(g, labels)};
  });
}

NodePtr dot(const NodePtr& a, const NodePtr& b) { return sum_all(mul(a, b)); }

NodePtr mean_all(const NodePtr& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a->value.size()));
}

std::vector<NodePtr> grad(const NodePtr& output, const std::vector<NodePtr>& wrt) {
  if (output->value.size() != 1)
    throw ShapeError("grad: output must be scalar");

  // Iterative post-order topological sort over the requires_grad subgraph.
  // Raw pointers stay valid: every visited node is owned by the output's
  // parent chains.
  std::vector<Node*> order;
  {
    std::unordered_map<Node*, int> state;  // 0 new, 1 open, 2 done
    std::vector<Node*> stack{output.get()};
    while (!stack.empty()) {
      Node* n = stack.back();
      int& st = state[n];
      if (st == 0) {
        st = 1;
        for (const auto& p : n->parents)
          if (p && p->requires_grad && state[p.get()] != 2)
            stack.push_back(p.get());
      } else {
        stack.pop_back();
        if (st == 1) {
          st = 2;
          order.push_back(n);
        }
      }
    }
  }

  std::unordered_map<Node*, NodePtr> adjoint;
  adjoint[output.get()] = constant(Tensor::scalar(1.0));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    auto found = adjoint.find(n);
    if (found == adjoint.end() || !n->vjp) continue;
    const NodePtr& g = found->second;
    auto parent_grads = n->vjp(g);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      const auto& p = n->parents[i];
      if (!p || !p->requires_grad || !parent_grads[i]) continue;
      auto a = adjoint.find(p.get());
      if (a == adjoint.end())
        adjoint[p.get()] = parent_grads[i];
      else
        a->second = add(a->second, parent_grads[i]);
    }
  }

  std::vector<NodePtr> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto a = adjoint.find(w.get());
    if (a != adjoint.end())
      result.push_back(a->second);
    else
      result.push_back(constant(Tensor(w->value.shape())));
  }
  return result;
}

}  // namespace ekp::ad
