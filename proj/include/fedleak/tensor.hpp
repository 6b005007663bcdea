#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedleak/rng.hpp"

namespace fedleak {

// Dense row-major float32 array. Value semantics; copies are explicit in the
// sense that assignment copies the buffer, so treat large tensors with moves.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(compute_numel(shape_)), 0.0f);
    }

    Tensor(std::vector<int64_t> shape, std::vector<float> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != compute_numel(shape_))
            throw std::invalid_argument("tensor data size does not match shape");
    }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    static Tensor full(std::vector<int64_t> shape, float v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor randn(std::vector<int64_t> shape, Rng& rng, float stddev = 1.0f) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = static_cast<float>(rng.normal()) * stddev;
        return t;
    }

    static Tensor rand_uniform(std::vector<int64_t> shape, Rng& rng, float lo, float hi) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = static_cast<float>(rng.uniform(lo, hi));
        return t;
    }

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t ndim() const { return shape_.size(); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& vec() { return data_; }
    const std::vector<float>& vec() const { return data_; }

    float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    float item() const {
        if (data_.size() != 1) throw std::logic_error("item() on non-scalar tensor");
        return data_[0];
    }

    Tensor reshaped(std::vector<int64_t> new_shape) const {
        if (compute_numel(new_shape) != numel())
            throw std::invalid_argument("reshape changes element count");
        Tensor t = *this;
        t.shape_ = std::move(new_shape);
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    static int64_t compute_numel(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            if (d < 0) throw std::invalid_argument("negative dimension");
            n *= d;
        }
        return n;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

private:
    std::vector<int64_t> shape_;
    std::vector<float> data_;
};

inline float l2_norm(const Tensor& t) {
    double s = 0.0;
    for (float v : t.vec()) s += static_cast<double>(v) * v;
    return static_cast<float>(std::sqrt(s));
}

inline float max_abs(const Tensor& t) {
    float m = 0.0f;
    for (float v : t.vec()) m = std::max(m, std::abs(v));
    return m;
}

}  // namespace fedleak
