#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "fedleak/tensor.hpp"

namespace fedleak::ad {

class Node;
using Var = std::shared_ptr<Node>;

// A node in a define-by-run computation graph. The vector-Jacobian products
// are themselves expressed through graph ops, so differentiating the result
// of grad() again (gradients of gradients) works to any order. That property
// is load-bearing: gradient-matching objectives differentiate through the
// parameter-gradient computation.
class Node {
public:
    Tensor value;
    bool requires_grad = false;
    std::vector<Var> parents;
    // maps (self, upstream grad) -> per-parent gradient contributions
    std::function<std::vector<Var>(const Var&, const Var&)> vjp;
    const char* op = "leaf";

    const std::vector<int64_t>& shape() const { return value.shape(); }
    int64_t numel() const { return value.numel(); }
};

Var make_leaf(Tensor value, bool requires_grad = false);
Var constant(Tensor value);
Var constant_scalar(float v);

// ---- arithmetic (numpy-style broadcasting on add/sub/mul/div) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var add_scalar(const Var& a, float s);
Var mul_scalar(const Var& a, float s);

// ---- shape ops ----
Var reshape(const Var& a, std::vector<int64_t> shape);
Var transpose2d(const Var& a);
Var permute(const Var& a, std::vector<int> axes);
Var broadcast_to(const Var& a, std::vector<int64_t> shape);
Var narrow(const Var& a, int dim, int64_t start, int64_t len);
Var concat(const std::vector<Var>& parts, int dim);

// ---- reductions ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var reduce_sum(const Var& a, int axis, bool keepdim);
Var reduce_mean(const Var& a, int axis, bool keepdim);
// row-wise max over the last axis, detached (no gradient path); used for
// numerically stable softmax/logsumexp
Tensor detached_rowmax(const Var& a);

// ---- elementwise nonlinearities ----
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh_(const Var& a);
Var exp_(const Var& a);
Var log_(const Var& a);
Var sqrt_(const Var& a);
Var abs_(const Var& a);
Var clamp(const Var& a, float lo, float hi);  // clips value; gradient masked outside the box

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);  // (m,k) x (k,n)

// ---- convolution building blocks ----
struct ConvGeom {
    int64_t batch, in_channels, in_h, in_w;
    int kernel_h, kernel_w, stride, pad;
    int64_t out_h() const { return (in_h + 2 * pad - kernel_h) / stride + 1; }
    int64_t out_w() const { return (in_w + 2 * pad - kernel_w) / stride + 1; }
};
// (N,C,H,W) -> (C*kh*kw, N*Ho*Wo); adjoint pair with col2im
Var im2col(const Var& x, const ConvGeom& g);
Var col2im(const Var& cols, const ConvGeom& g);

// 2x2-style max pooling with stride = kernel; saves argmax indices
Var maxpool2d(const Var& x, int kernel, int stride);
Var avgpool2d_global(const Var& x);  // (N,C,H,W) -> (N,C)

// ---- composites ----
Var linear(const Var& x, const Var& weight, const Var& bias);  // x(N,D), W(out,D), b(out)
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
// weight (Ci, Co*kh*kw) viewed from a (Ci,Co,kh,kw) parameter
Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, int kernel, int stride,
                     int pad);
Var softmax_rows(const Var& logits);
Var log_softmax_rows(const Var& logits);
// mean cross-entropy against integer labels
Var cross_entropy(const Var& logits, const std::vector<int>& labels);
// mean cross-entropy against a (N,C) row-stochastic soft-label matrix
Var cross_entropy_soft(const Var& logits, const Var& soft_labels);
Var logcosh(const Var& a);
Var l2_norm_of(const Var& a);
Var dot_all(const Var& a, const Var& b);
Var cosine_similarity_flat(const Var& a, const Var& b, float eps = 1e-8f);
// anisotropic total variation of an image batch (N,C,H,W), summed
Var total_variation(const Var& x);

// ---- backward ----
// Gradient of a scalar `output` with respect to each node in `wrt`.
// Returned Vars stay connected to the graph, so they can be differentiated
// again. Nodes in `wrt` must have requires_grad set.
std::vector<Var> grad(const Var& output, const std::vector<Var>& wrt);

// convenience: value-level gradients (no further differentiation planned)
std::vector<Tensor> grad_values(const Var& output, const std::vector<Var>& wrt);

}  // namespace fedleak::ad
