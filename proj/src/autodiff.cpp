#include "fedleak/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_map>
#include <unordered_set>

namespace fedleak::ad {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

Var make_node(Tensor value, std::vector<Var> parents,
              std::function<std::vector<Var>(const Var&, const Var&)> vjp, const char* op) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    n->op = op;
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->vjp = std::move(vjp);
    return n;
}

std::vector<int64_t> broadcast_shape(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
    size_t nd = std::max(a.size(), b.size());
    std::vector<int64_t> out(nd);
    for (size_t i = 0; i < nd; ++i) {
        int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument("shapes not broadcastable");
        out[i] = std::max(da, db);
    }
    return out;
}

// element strides with 0 on broadcast axes, aligned right against out_shape
std::vector<int64_t> broadcast_strides(const std::vector<int64_t>& shape,
                                       const std::vector<int64_t>& out_shape) {
    size_t nd = out_shape.size();
    std::vector<int64_t> strides(nd, 0);
    int64_t s = 1;
    for (size_t i = shape.size(); i-- > 0;) {
        size_t oi = i + (nd - shape.size());
        strides[oi] = (shape[i] == 1) ? 0 : s;
        s *= shape[i];
    }
    // broadcast axes left of shape stay 0
    for (size_t i = 0; i < nd; ++i)
        if (out_shape[i] == 1) strides[i] = (i >= nd - shape.size() && shape[i - (nd - shape.size())] == 1) ? 0 : strides[i];
    return strides;
}

template <typename F>
Tensor binary_broadcast(const Tensor& a, const Tensor& b, F f) {
    if (a.same_shape(b)) {
        Tensor out(a.shape());
        const float* pa = a.data();
        const float* pb = b.data();
        float* po = out.data();
        int64_t n = a.numel();
        for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
        return out;
    }
    auto oshape = broadcast_shape(a.shape(), b.shape());
    Tensor out(oshape);
    auto sa = broadcast_strides(a.shape(), oshape);
    auto sb = broadcast_strides(b.shape(), oshape);
    size_t nd = oshape.size();
    std::vector<int64_t> idx(nd, 0);
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    int64_t n = out.numel();
    int64_t ia = 0, ib = 0;
    for (int64_t i = 0; i < n; ++i) {
        po[i] = f(pa[ia], pb[ib]);
        // odometer increment
        for (size_t d = nd; d-- > 0;) {
            idx[d]++;
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < oshape[d]) break;
            idx[d] = 0;
            ia -= sa[d] * oshape[d];
            ib -= sb[d] * oshape[d];
        }
    }
    return out;
}

// reduce a gradient to a parent's (possibly broadcast) shape
Var reduce_to_shape(const Var& g, const std::vector<int64_t>& target) {
    Var cur = g;
    while (cur->shape().size() > target.size()) cur = reduce_sum(cur, 0, false);
    for (size_t i = 0; i < target.size(); ++i) {
        if (target[i] == 1 && cur->shape()[i] != 1)
            cur = reduce_sum(cur, static_cast<int>(i), true);
    }
    if (cur->shape() != target) cur = reshape(cur, target);
    return cur;
}

Tensor ones_like_shape(const std::vector<int64_t>& shape) { return Tensor::full(shape, 1.0f); }

}  // namespace

Var make_leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->op = requires_grad ? "leaf" : "const";
    return n;
}

Var constant(Tensor value) { return make_leaf(std::move(value), false); }
Var constant_scalar(float v) { return constant(Tensor::scalar(v)); }

Var add(const Var& a, const Var& b) {
    Tensor out = binary_broadcast(a->value, b->value, [](float x, float y) { return x + y; });
    return make_node(std::move(out), {a, b},
                     [](const Var& self, const Var& g) -> std::vector<Var> {
                         std::vector<Var> out(2);
                         if (self->parents[0]->requires_grad)
                             out[0] = reduce_to_shape(g, self->parents[0]->shape());
                         if (self->parents[1]->requires_grad)
                             out[1] = reduce_to_shape(g, self->parents[1]->shape());
                         return out;
                     },
                     "add");
}

Var sub(const Var& a, const Var& b) {
    Tensor out = binary_broadcast(a->value, b->value, [](float x, float y) { return x - y; });
    return make_node(std::move(out), {a, b},
                     [](const Var& self, const Var& g) -> std::vector<Var> {
                         std::vector<Var> out(2);
                         if (self->parents[0]->requires_grad)
                             out[0] = reduce_to_shape(g, self->parents[0]->shape());
                         if (self->parents[1]->requires_grad)
                             out[1] = reduce_to_shape(neg(g), self->parents[1]->shape());
                         return out;
                     },
                     "sub");
}

Var mul(const Var& a, const Var& b) {
    Tensor out = binary_broadcast(a->value, b->value, [](float x, float y) { return x * y; });
    return make_node(std::move(out), {a, b},
                     [](const Var& self, const Var& g) -> std::vector<Var> {
                         const Var& a = self->parents[0];
                         const Var& b = self->parents[1];
                         std::vector<Var> out(2);
                         if (a->requires_grad) out[0] = reduce_to_shape(mul(g, b), a->shape());
                         if (b->requires_grad) out[1] = reduce_to_shape(mul(g, a), b->shape());
                         return out;
                     },
                     "mul");
}

Var div(const Var& a, const Var& b) {
    Tensor out = binary_broadcast(a->value, b->value, [](float x, float y) { return x / y; });
    return make_node(std::move(out), {a, b},
                     [](const Var& self, const Var& g) -> std::vector<Var> {
                         const Var& a = self->parents[0];
                         const Var& b = self->parents[1];
                         std::vector<Var> out(2);
                         if (a->requires_grad) out[0] = reduce_to_shape(div(g, b), a->shape());
                         if (b->requires_grad)
                             out[1] = reduce_to_shape(neg(div(mul(g, a), mul(b, b))), b->shape());
                         return out;
                     },
                     "div");
}

Var neg(const Var& a) { return mul_scalar(a, -1.0f); }

Var add_scalar(const Var& a, float s) {
    Tensor out = a->value;
    for (auto& v : out.vec()) v += s;
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& g) -> std::vector<Var> { return {g}; },
                     "add_scalar");
}

Var mul_scalar(const Var& a, float s) {
    Tensor out = a->value;
    for (auto& v : out.vec()) v *= s;
    return make_node(std::move(out), {a},
                     [s](const Var&, const Var& g) -> std::vector<Var> {
                         return {mul_scalar(g, s)};
                     },
                     "mul_scalar");
}

Var reshape(const Var& a, std::vector<int64_t> shape) {
    Tensor out = a->value.reshaped(shape);
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& g) -> std::vector<Var> {
                         return {reshape(g, self->parents[0]->shape())};
                     },
                     "reshape");
}

Var transpose2d(const Var& a) {
    const auto& sh = a->shape();
    if (sh.size() != 2) throw std::invalid_argument("transpose2d expects 2-d tensor");
    Tensor out({sh[1], sh[0]});
    CMapMat A(a->value.data(), sh[0], sh[1]);
    MapMat O(out.data(), sh[1], sh[0]);
    O = A.transpose();
    return make_node(std::move(out), {a},
                     [](const Var&, const Var& g) -> std::vector<Var> { return {transpose2d(g)}; },
                     "transpose2d");
}

Var permute(const Var& a, std::vector<int> axes) {
    const auto& sh = a->shape();
    size_t nd = sh.size();
    if (axes.size() != nd) throw std::invalid_argument("permute axes rank mismatch");
    std::vector<int64_t> oshape(nd);
    for (size_t i = 0; i < nd; ++i) oshape[i] = sh[axes[i]];
    std::vector<int64_t> in_strides(nd, 1);
    for (size_t i = nd - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * sh[i + 1];
    std::vector<int64_t> src_strides(nd);
    for (size_t i = 0; i < nd; ++i) src_strides[i] = in_strides[axes[i]];
    Tensor out(oshape);
    const float* pa = a->value.data();
    float* po = out.data();
    std::vector<int64_t> idx(nd, 0);
    int64_t n = out.numel();
    int64_t src = 0;
    for (int64_t i = 0; i < n; ++i) {
        po[i] = pa[src];
        for (size_t d = nd; d-- > 0;) {
            idx[d]++;
            src += src_strides[d];
            if (idx[d] < oshape[d]) break;
            idx[d] = 0;
            src -= src_strides[d] * oshape[d];
        }
    }
    std::vector<int> inv(nd);
    for (size_t i = 0; i < nd; ++i) inv[axes[i]] = static_cast<int>(i);
    return make_node(std::move(out), {a},
                     [inv](const Var&, const Var& g) -> std::vector<Var> {
                         return {permute(g, inv)};
                     },
                     "permute");
}

Var broadcast_to(const Var& a, std::vector<int64_t> shape) {
    Tensor zero = Tensor::zeros(shape);
    Tensor out = binary_broadcast(a->value, zero, [](float x, float) { return x; });
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& g) -> std::vector<Var> {
                         return {reduce_to_shape(g, self->parents[0]->shape())};
                     },
                     "broadcast_to");
}

namespace {
// shared implementation for narrow's forward and the zero-padding adjoint
void copy_slice(const float* src, float* dst, const std::vector<int64_t>& full_shape, int dim,
                int64_t start, int64_t len, bool narrow_dir) {
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < dim; ++i) outer *= full_shape[i];
    for (size_t i = dim + 1; i < full_shape.size(); ++i) inner *= full_shape[i];
    int64_t full_d = full_shape[dim];
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t j = 0; j < len; ++j) {
            const int64_t full_off = (o * full_d + start + j) * inner;
            const int64_t nar_off = (o * len + j) * inner;
            if (narrow_dir)
                std::memcpy(dst + nar_off, src + full_off, sizeof(float) * inner);
            else
                std::memcpy(dst + full_off, src + nar_off, sizeof(float) * inner);
        }
    }
}

Var pad_slice(const Var& g, int dim, int64_t start, std::vector<int64_t> full_shape);
}  // namespace

Var narrow(const Var& a, int dim, int64_t start, int64_t len) {
    const auto& sh = a->shape();
    if (dim < 0 || static_cast<size_t>(dim) >= sh.size() || start < 0 || start + len > sh[dim])
        throw std::invalid_argument("narrow out of range");
    std::vector<int64_t> oshape = sh;
    oshape[dim] = len;
    Tensor out(oshape);
    copy_slice(a->value.data(), out.data(), sh, dim, start, len, true);
    auto full_shape = sh;
    return make_node(std::move(out), {a},
                     [dim, start, full_shape](const Var&, const Var& g) -> std::vector<Var> {
                         return {pad_slice(g, dim, start, full_shape)};
                     },
                     "narrow");
}

namespace {
Var pad_slice(const Var& g, int dim, int64_t start, std::vector<int64_t> full_shape) {
    Tensor out = Tensor::zeros(full_shape);
    int64_t len = g->shape()[dim];
    copy_slice(g->value.data(), out.data(), full_shape, dim, start, len, false);
    return make_node(std::move(out), {g},
                     [dim, start, len](const Var&, const Var& gg) -> std::vector<Var> {
                         return {narrow(gg, dim, start, len)};
                     },
                     "pad_slice");
}
}  // namespace

Var concat(const std::vector<Var>& parts, int dim) {
    if (parts.empty()) throw std::invalid_argument("concat of nothing");
    Var acc;
    std::vector<int64_t> oshape = parts[0]->shape();
    int64_t total = 0;
    for (const auto& p : parts) total += p->shape()[dim];
    oshape[dim] = total;
    int64_t off = 0;
    for (const auto& p : parts) {
        Var padded = pad_slice(p, dim, off, oshape);
        acc = acc ? add(acc, padded) : padded;
        off += p->shape()[dim];
    }
    return acc;
}

Var sum_all(const Var& a) {
    double s = 0.0;
    for (float v : a->value.vec()) s += v;
    return make_node(Tensor::scalar(static_cast<float>(s)), {a},
                     [](const Var& self, const Var& g) -> std::vector<Var> {
                         return {broadcast_to(reshape(g, {1}), self->parents[0]->shape())};
                     },
                     "sum_all");
}

Var mean_all(const Var& a) { return mul_scalar(sum_all(a), 1.0f / static_cast<float>(a->numel())); }

Var reduce_sum(const Var& a, int axis, bool keepdim) {
    const auto& sh = a->shape();
    if (axis < 0 || static_cast<size_t>(axis) >= sh.size())
        throw std::invalid_argument("reduce_sum axis out of range");
    int64_t outer = 1, inner = 1, d = sh[axis];
    for (int i = 0; i < axis; ++i) outer *= sh[i];
    for (size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
    std::vector<int64_t> oshape;
    for (size_t i = 0; i < sh.size(); ++i) {
        if (static_cast<int>(i) == axis) {
            if (keepdim) oshape.push_back(1);
        } else {
            oshape.push_back(sh[i]);
        }
    }
    if (oshape.empty()) oshape.push_back(1);
    Tensor out(oshape);
    const float* pa = a->value.data();
    float* po = out.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < d; ++j) {
            const float* row = pa + (o * d + j) * inner;
            float* dst = po + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += row[i];
        }
    std::vector<int64_t> keep_shape = sh;
    keep_shape[axis] = 1;
    return make_node(std::move(out), {a},
                     [keep_shape](const Var& self, const Var& g) -> std::vector<Var> {
                         return {broadcast_to(reshape(g, keep_shape), self->parents[0]->shape())};
                     },
                     "reduce_sum");
}

Var reduce_mean(const Var& a, int axis, bool keepdim) {
    return mul_scalar(reduce_sum(a, axis, keepdim), 1.0f / static_cast<float>(a->shape()[axis]));
}

Tensor detached_rowmax(const Var& a) {
    const auto& sh = a->shape();
    int64_t cols = sh.back();
    int64_t rows = a->numel() / cols;
    std::vector<int64_t> oshape = sh;
    oshape.back() = 1;
    Tensor out(oshape);
    const float* p = a->value.data();
    for (int64_t r = 0; r < rows; ++r) {
        float m = p[r * cols];
        for (int64_t c = 1; c < cols; ++c) m = std::max(m, p[r * cols + c]);
        out[r] = m;
    }
    return out;
}

namespace {
template <typename F>
Tensor map_unary(const Tensor& a, F f) {
    Tensor out(a.shape());
    const float* pa = a.data();
    float* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
    return out;
}
}  // namespace

Var relu(const Var& a) {
    Tensor out = map_unary(a->value, [](float x) { return x > 0.f ? x : 0.f; });
    Tensor mask = map_unary(a->value, [](float x) { return x > 0.f ? 1.f : 0.f; });
    auto mask_node = constant(std::move(mask));
    return make_node(std::move(out), {a},
                     [mask_node](const Var&, const Var& g) -> std::vector<Var> {
                         return {mul(g, mask_node)};
                     },
                     "relu");
}

Var sigmoid(const Var& a) {
    Tensor out = map_unary(a->value, [](float x) {
        return x >= 0.f ? 1.f / (1.f + std::exp(-x)) : std::exp(x) / (1.f + std::exp(x));
    });
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& g) -> std::vector<Var> {
                         Var y = self;
                         return {mul(g, mul(y, add_scalar(neg(y), 1.0f)))};
                     },
                     "sigmoid");
}

Var tanh_(const Var& a) {
    Tensor out = map_unary(a->value, [](float x) { return std::tanh(x); });
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& g) -> std::vector<Var> {
                         Var y = self;
                         return {mul(g, add_scalar(neg(mul(y, y)), 1.0f))};
                     },
                     "tanh");
}

Var exp_(const Var& a) {
    Tensor out = map_unary(a->value, [](float x) { return std::exp(x); });
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& g) -> std::vector<Var> {
                         return {mul(g, self)};
                     },
                     "exp");
}

Var log_(const Var& a) {
    Tensor out = map_unary(a->value, [](float x) { return std::log(x); });
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& g) -> std::vector<Var> {
                         return {div(g, self->parents[0])};
                     },
                     "log");
}

Var sqrt_(const Var& a) {
    Tensor out = map_unary(a->value, [](float x) { return std::sqrt(x); });
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& g) -> std::vector<Var> {
                         return {div(mul_scalar(g, 0.5f), self)};
                     },
                     "sqrt");
}

Var abs_(const Var& a) {
    Tensor out = map_unary(a->value, [](float x) { return std::abs(x); });
    Tensor sgn = map_unary(a->value, [](float x) { return x > 0.f ? 1.f : (x < 0.f ? -1.f : 0.f); });
    auto sgn_node = constant(std::move(sgn));
    return make_node(std::move(out), {a},
                     [sgn_node](const Var&, const Var& g) -> std::vector<Var> {
                         return {mul(g, sgn_node)};
                     },
                     "abs");
}

Var clamp(const Var& a, float lo, float hi) {
    Tensor out = map_unary(a->value, [lo, hi](float x) { return std::min(hi, std::max(lo, x)); });
    Tensor mask =
        map_unary(a->value, [lo, hi](float x) { return (x > lo && x < hi) ? 1.f : 0.f; });
    auto mask_node = constant(std::move(mask));
    return make_node(std::move(out), {a},
                     [mask_node](const Var&, const Var& g) -> std::vector<Var> {
                         return {mul(g, mask_node)};
                     },
                     "clamp");
}

Var matmul(const Var& a, const Var& b) {
    const auto& sa = a->shape();
    const auto& sb = b->shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        throw std::invalid_argument("matmul shape mismatch " + a->value.shape_str() + " x " +
                                    b->value.shape_str());
    Tensor out({sa[0], sb[1]});
    CMapMat A(a->value.data(), sa[0], sa[1]);
    CMapMat B(b->value.data(), sb[0], sb[1]);
    MapMat O(out.data(), sa[0], sb[1]);
    O.noalias() = A * B;
    return make_node(std::move(out), {a, b},
                     [](const Var& self, const Var& g) -> std::vector<Var> {
                         const Var& a = self->parents[0];
                         const Var& b = self->parents[1];
                         std::vector<Var> out(2);
                         if (a->requires_grad) out[0] = matmul(g, transpose2d(b));
                         if (b->requires_grad) out[1] = matmul(transpose2d(a), g);
                         return out;
                     },
                     "matmul");
}

namespace {
// Precomputed linear index map between image and column layouts; -1 marks a
// padding cell. Shared by im2col/col2im so the two stay exact adjoints.
std::vector<int64_t> col_to_src_map(const ConvGeom& g) {
    const int64_t rows = g.in_channels * g.kernel_h * g.kernel_w;
    const int64_t ho = g.out_h(), wo = g.out_w();
    const int64_t cols = g.batch * ho * wo;
    std::vector<int64_t> map(static_cast<size_t>(rows * cols));
    int64_t chw = g.in_channels * g.in_h * g.in_w;
    for (int64_t r = 0; r < rows; ++r) {
        int64_t c = r / (g.kernel_h * g.kernel_w);
        int64_t rem = r % (g.kernel_h * g.kernel_w);
        int64_t ky = rem / g.kernel_w;
        int64_t kx = rem % g.kernel_w;
        for (int64_t n = 0; n < g.batch; ++n) {
            for (int64_t oy = 0; oy < ho; ++oy) {
                int64_t iy = oy * g.stride + ky - g.pad;
                for (int64_t ox = 0; ox < wo; ++ox) {
                    int64_t ix = ox * g.stride + kx - g.pad;
                    int64_t col = n * ho * wo + oy * wo + ox;
                    int64_t dst = r * cols + col;
                    if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w)
                        map[dst] = -1;
                    else
                        map[dst] = n * chw + c * g.in_h * g.in_w + iy * g.in_w + ix;
                }
            }
        }
    }
    return map;
}

struct GeomKey {
    int64_t v[8];
    bool operator==(const GeomKey& o) const { return std::memcmp(v, o.v, sizeof v) == 0; }
};
struct GeomKeyHash {
    size_t operator()(const GeomKey& k) const {
        size_t h = 1469598103934665603ULL;
        for (int64_t x : k.v) {
            h ^= static_cast<size_t>(x);
            h *= 1099511628211ULL;
        }
        return h;
    }
};

// geometry maps are reused across training steps; cache them
const std::vector<int64_t>& cached_map(const ConvGeom& g) {
    thread_local std::unordered_map<GeomKey, std::vector<int64_t>, GeomKeyHash> cache;
    GeomKey key{{g.batch, g.in_channels, g.in_h, g.in_w, g.kernel_h, g.kernel_w, g.stride, g.pad}};
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, col_to_src_map(g)).first;
    return it->second;
}
}  // namespace

Var im2col(const Var& x, const ConvGeom& g) {
    const auto& sh = x->shape();
    if (sh.size() != 4 || sh[0] != g.batch || sh[1] != g.in_channels || sh[2] != g.in_h ||
        sh[3] != g.in_w)
        throw std::invalid_argument("im2col geometry mismatch");
    const auto& map = cached_map(g);
    const int64_t rows = g.in_channels * g.kernel_h * g.kernel_w;
    const int64_t cols = g.batch * g.out_h() * g.out_w();
    Tensor out({rows, cols});
    const float* px = x->value.data();
    float* po = out.data();
    for (int64_t i = 0; i < rows * cols; ++i) {
        int64_t s = map[i];
        po[i] = s < 0 ? 0.f : px[s];
    }
    ConvGeom geom = g;
    return make_node(std::move(out), {x},
                     [geom](const Var&, const Var& gg) -> std::vector<Var> {
                         return {col2im(gg, geom)};
                     },
                     "im2col");
}

Var col2im(const Var& cols, const ConvGeom& g) {
    const int64_t rows = g.in_channels * g.kernel_h * g.kernel_w;
    const int64_t ncols = g.batch * g.out_h() * g.out_w();
    const auto& sh = cols->shape();
    if (sh.size() != 2 || sh[0] != rows || sh[1] != ncols)
        throw std::invalid_argument("col2im geometry mismatch");
    const auto& map = cached_map(g);
    Tensor out({g.batch, g.in_channels, g.in_h, g.in_w});
    const float* pc = cols->value.data();
    float* po = out.data();
    for (int64_t i = 0; i < rows * ncols; ++i) {
        int64_t s = map[i];
        if (s >= 0) po[s] += pc[i];
    }
    ConvGeom geom = g;
    return make_node(std::move(out), {cols},
                     [geom](const Var&, const Var& gg) -> std::vector<Var> {
                         return {im2col(gg, geom)};
                     },
                     "col2im");
}

namespace {
Var pool_scatter(const Var& g, std::shared_ptr<std::vector<int64_t>> idx,
                 std::vector<int64_t> out_shape);

Var pool_gather(const Var& big, std::shared_ptr<std::vector<int64_t>> idx,
                std::vector<int64_t> small_shape) {
    Tensor out(small_shape);
    const float* p = big->value.data();
    float* po = out.data();
    for (size_t i = 0; i < idx->size(); ++i) po[i] = p[(*idx)[i]];
    auto big_shape = big->shape();
    return make_node(std::move(out), {big},
                     [idx, big_shape](const Var&, const Var& gg) -> std::vector<Var> {
                         return {pool_scatter(gg, idx, big_shape)};
                     },
                     "pool_gather");
}

Var pool_scatter(const Var& g, std::shared_ptr<std::vector<int64_t>> idx,
                 std::vector<int64_t> out_shape) {
    Tensor out = Tensor::zeros(out_shape);
    const float* pg = g->value.data();
    float* po = out.data();
    for (size_t i = 0; i < idx->size(); ++i) po[(*idx)[i]] += pg[i];
    auto small_shape = g->shape();
    return make_node(std::move(out), {g},
                     [idx, small_shape](const Var&, const Var& gg) -> std::vector<Var> {
                         return {pool_gather(gg, idx, small_shape)};
                     },
                     "pool_scatter");
}
}  // namespace

Var maxpool2d(const Var& x, int kernel, int stride) {
    const auto& sh = x->shape();
    if (sh.size() != 4) throw std::invalid_argument("maxpool2d expects (N,C,H,W)");
    int64_t n = sh[0], c = sh[1], h = sh[2], w = sh[3];
    int64_t ho = (h - kernel) / stride + 1;
    int64_t wo = (w - kernel) / stride + 1;
    Tensor out({n, c, ho, wo});
    auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * c * ho * wo));
    const float* px = x->value.data();
    float* po = out.data();
    int64_t o = 0;
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci) {
            const float* plane = px + (ni * c + ci) * h * w;
            int64_t base = (ni * c + ci) * h * w;
            for (int64_t oy = 0; oy < ho; ++oy)
                for (int64_t ox = 0; ox < wo; ++ox) {
                    int64_t best = -1;
                    float bv = -std::numeric_limits<float>::infinity();
                    for (int ky = 0; ky < kernel; ++ky)
                        for (int kx = 0; kx < kernel; ++kx) {
                            int64_t iy = oy * stride + ky, ix = ox * stride + kx;
                            float v = plane[iy * w + ix];
                            if (v > bv) {
                                bv = v;
                                best = iy * w + ix;
                            }
                        }
                    po[o] = bv;
                    (*idx)[o] = base + best;
                    ++o;
                }
        }
    auto in_shape = sh;
    return make_node(std::move(out), {x},
                     [idx, in_shape](const Var&, const Var& g) -> std::vector<Var> {
                         return {pool_scatter(g, idx, in_shape)};
                     },
                     "maxpool2d");
}

Var avgpool2d_global(const Var& x) {
    const auto& sh = x->shape();
    if (sh.size() != 4) throw std::invalid_argument("avgpool expects (N,C,H,W)");
    Var flat = reshape(x, {sh[0], sh[1], sh[2] * sh[3]});
    return reduce_mean(flat, 2, false);
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
    Var y = matmul(x, transpose2d(weight));
    if (bias) y = add(y, bias);
    return y;
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
    const auto& xs = x->shape();
    const auto& ws = weight->shape();
    if (ws.size() != 4) throw std::invalid_argument("conv2d weight must be (Co,Ci,kh,kw)");
    ConvGeom g{xs[0], xs[1], xs[2], xs[3], static_cast<int>(ws[2]), static_cast<int>(ws[3]),
               stride, pad};
    if (ws[1] != xs[1]) throw std::invalid_argument("conv2d channel mismatch");
    Var cols = im2col(x, g);                                      // (Ci*kh*kw, N*Ho*Wo)
    Var w2 = reshape(weight, {ws[0], ws[1] * ws[2] * ws[3]});     // (Co, Ci*kh*kw)
    Var out2 = matmul(w2, cols);                                  // (Co, N*Ho*Wo)
    Var out = permute(reshape(out2, {ws[0], xs[0], g.out_h(), g.out_w()}), {1, 0, 2, 3});
    if (bias) out = add(out, reshape(bias, {1, ws[0], 1, 1}));
    return out;
}

Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, int kernel, int stride,
                     int pad) {
    const auto& xs = x->shape();
    const auto& ws = weight->shape();  // (Ci, Co, kh, kw)
    if (ws.size() != 4 || ws[0] != xs[1])
        throw std::invalid_argument("conv_transpose2d weight must be (Ci,Co,kh,kw)");
    int64_t n = xs[0], ci = xs[1], h = xs[2], w = xs[3], co = ws[1];
    int64_t ho = (h - 1) * stride - 2 * pad + kernel;
    int64_t wo = (w - 1) * stride - 2 * pad + kernel;
    Var x2 = reshape(permute(x, {1, 0, 2, 3}), {ci, n * h * w});
    Var w2 = reshape(weight, {ci, co * kernel * kernel});
    Var cols = matmul(transpose2d(w2), x2);  // (Co*k*k, N*H*W)
    ConvGeom g{n, co, ho, wo, kernel, kernel, stride, pad};
    Var out = col2im(cols, g);
    if (bias) out = add(out, reshape(bias, {1, co, 1, 1}));
    return out;
}

Var log_softmax_rows(const Var& logits) {
    Tensor rowmax = detached_rowmax(logits);
    Var centered = sub(logits, constant(std::move(rowmax)));
    Var lse = log_(reduce_sum(exp_(centered), static_cast<int>(logits->shape().size()) - 1, true));
    return sub(centered, lse);
}

Var softmax_rows(const Var& logits) { return exp_(log_softmax_rows(logits)); }

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
    const auto& sh = logits->shape();
    int64_t n = sh[0], c = sh[1];
    if (static_cast<int64_t>(labels.size()) != n)
        throw std::invalid_argument("labels size mismatch");
    Tensor onehot({n, c});
    for (int64_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= c) throw std::invalid_argument("label out of range");
        onehot[i * c + labels[i]] = 1.0f;
    }
    Var ls = log_softmax_rows(logits);
    return mul_scalar(sum_all(mul(ls, constant(std::move(onehot)))), -1.0f / static_cast<float>(n));
}

Var cross_entropy_soft(const Var& logits, const Var& soft_labels) {
    int64_t n = logits->shape()[0];
    Var ls = log_softmax_rows(logits);
    return mul_scalar(sum_all(mul(ls, soft_labels)), -1.0f / static_cast<float>(n));
}

Var logcosh(const Var& a) {
    // log cosh x = |x| + log(1 + exp(-2|x|)) - log 2, overflow-safe
    Var ax = abs_(a);
    Var t = log_(add_scalar(exp_(mul_scalar(ax, -2.0f)), 1.0f));
    return add_scalar(add(ax, t), -0.6931471805599453f);
}

Var l2_norm_of(const Var& a) { return sqrt_(sum_all(mul(a, a))); }

Var dot_all(const Var& a, const Var& b) { return sum_all(mul(a, b)); }

Var cosine_similarity_flat(const Var& a, const Var& b, float eps) {
    Var num = dot_all(a, b);
    Var den = add_scalar(mul(l2_norm_of(a), l2_norm_of(b)), eps);
    return div(num, den);
}

Var total_variation(const Var& x) {
    const auto& sh = x->shape();
    if (sh.size() != 4) throw std::invalid_argument("total_variation expects (N,C,H,W)");
    Var dh = sub(narrow(x, 2, 1, sh[2] - 1), narrow(x, 2, 0, sh[2] - 1));
    Var dw = sub(narrow(x, 3, 1, sh[3] - 1), narrow(x, 3, 0, sh[3] - 1));
    return add(sum_all(abs_(dh)), sum_all(abs_(dw)));
}

std::vector<Var> grad(const Var& output, const std::vector<Var>& wrt) {
    if (output->numel() != 1) throw std::invalid_argument("grad() needs a scalar output");
    for (const auto& w : wrt)
        if (!w->requires_grad) throw std::invalid_argument("grad() target lacks requires_grad");

    // iterative postorder DFS over the requires_grad subgraph
    std::vector<Var> order;
    std::unordered_set<Node*> seen;
    if (output->requires_grad) {
        std::vector<std::pair<Var, size_t>> stack{{output, 0}};
        seen.insert(output.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Var p = node->parents[next++];
                if (p->requires_grad && !seen.count(p.get())) {
                    seen.insert(p.get());
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }

    std::unordered_map<Node*, Var> grads;
    grads[output.get()] = constant(ones_like_shape(output->shape()));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const Var& node = *it;
        auto git = grads.find(node.get());
        if (git == grads.end() || !node->vjp) continue;
        Var g = git->second;
        std::vector<Var> pgrads = node->vjp(node, g);
        for (size_t i = 0; i < node->parents.size(); ++i) {
            if (i >= pgrads.size() || !pgrads[i]) continue;
            const Var& p = node->parents[i];
            if (!p->requires_grad) continue;
            auto pit = grads.find(p.get());
            if (pit == grads.end())
                grads[p.get()] = pgrads[i];
            else
                pit->second = add(pit->second, pgrads[i]);
        }
    }

    std::vector<Var> result;
    result.reserve(wrt.size());
    for (const auto& w : wrt) {
        auto it = grads.find(w.get());
        if (it == grads.end())
            result.push_back(constant(Tensor::zeros(w->shape())));
        else
            result.push_back(it->second);
    }
    return result;
}

std::vector<Tensor> grad_values(const Var& output, const std::vector<Var>& wrt) {
    auto gs = grad(output, wrt);
    std::vector<Tensor> out;
    out.reserve(gs.size());
    for (auto& g : gs) out.push_back(g->value);
    return out;
}

}  // namespace fedleak::ad
