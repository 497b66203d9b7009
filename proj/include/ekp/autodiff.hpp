#pragma once
#include <functional>
#include <memory>
#include <vector>

#include "ekp/tensor.hpp"

namespace ekp::ad {

// Reverse-mode autodiff over a dynamically built DAG. Every vjp is itself
// expressed through graph ops, so gradients are differentiable again; exact
// Hessian-vector products fall out of grad(grad(loss)·v).
struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  // Maps the adjoint of this node to adjoints of its parents. Null for leaves.
  std::function<std::vector<NodePtr>(const NodePtr&)> vjp;
};

NodePtr constant(Tensor v);
NodePtr param(Tensor v);  // leaf that receives gradients
NodePtr detach(const NodePtr& x);
// Identity that forces requires_grad, so gradients can be taken w.r.t. an
// intermediate tensor even when all leaves are constants.
NodePtr grad_root(const NodePtr& x);

// Elementwise; operands must have identical shapes.
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr div(const NodePtr& a, const NodePtr& b);
NodePtr neg(const NodePtr& a);
NodePtr exp_(const NodePtr& a);
NodePtr log_(const NodePtr& a);
NodePtr sqrt_(const NodePtr& a);
NodePtr relu(const NodePtr& a);
NodePtr add_scalar(const NodePtr& a, double c);
NodePtr mul_scalar(const NodePtr& a, double c);

// Shape.
NodePtr reshape(const NodePtr& a, std::vector<int> shape);
NodePtr transpose2d(const NodePtr& a);

// [m,k] x [k,n] -> [m,n].
NodePtr matmul(const NodePtr& a, const NodePtr& b);

// Convolution lowering. im2col([N,C,H,W]) -> [N*Ho*Wo, C*kh*kw]; col2im is
// its adjoint (scatter-add back to the image).
struct ConvGeom {
  int n = 0, c = 0, h = 0, w = 0;  // input image shape
  int kh = 0, kw = 0, stride = 1, pad = 0;
  int out_h() const { return (h + 2 * pad - kh) / stride + 1; }
  int out_w() const { return (w + 2 * pad - kw) / stride + 1; }
};
NodePtr im2col(const NodePtr& x, const ConvGeom& g);
NodePtr col2im(const NodePtr& cols, const ConvGeom& g);
// [N*Ho*Wo, C] <-> [N,C,Ho,Wo]
NodePtr to_nchw(const NodePtr& rows, int n, int h, int w);
NodePtr to_rows(const NodePtr& x);

// Reductions / broadcasts.
NodePtr sum_all(const NodePtr& a);                              // -> scalar
NodePtr bcast_full(const NodePtr& s, std::vector<int> shape);   // scalar -> shape
NodePtr reduce_nhw(const NodePtr& x);                           // [N,C,H,W] -> [C]
NodePtr bcast_nhw(const NodePtr& v, int n, int h, int w);       // [C] -> [N,C,H,W]
NodePtr sum_hw(const NodePtr& x);                               // [N,C,H,W] -> [N,C]
NodePtr bcast_hw(const NodePtr& v, int h, int w);               // [N,C] -> [N,C,H,W]
NodePtr rowsum(const NodePtr& x);                               // [N,C] -> [N]
NodePtr bcast_cols(const NodePtr& v, int c);                    // [N] -> [N,C]
NodePtr colsum(const NodePtr& x);                               // [N,C] -> [C]
NodePtr bcast_rows(const NodePtr& v, int n);                    // [C] -> [N,C]

// Per-row label gather: out[i] = x[i, labels[i]].
NodePtr gather_labels(const NodePtr& x, std::vector<int> labels);
NodePtr scatter_labels(const NodePtr& v, std::vector<int> labels, int c);

NodePtr dot(const NodePtr& a, const NodePtr& b);
NodePtr mean_all(const NodePtr& a);

// Gradients of a scalar output w.r.t. `wrt`. Results are graph nodes, so they
// can be differentiated again. Nodes unreachable from `output` get zeros.
std::vector<NodePtr> grad(const NodePtr& output, const std::vector<NodePtr>& wrt);

}  // namespace ekp::ad
