#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "certood/errors.hpp"

namespace certood {

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

/// Dense row-major float32 tensor. The buffer is shared on copy; all public
/// operations treat tensors as immutable values, so sharing is safe across
/// threads. Code that mutates in place (optimizer updates, builders) must
/// hold the only reference.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          buf_(std::make_shared<std::vector<float>>(check_numel(shape_), 0.0f)) {}

    Tensor(Shape shape, std::vector<float> values)
        : shape_(std::move(shape)),
          buf_(std::make_shared<std::vector<float>>(std::move(values))) {
        if (static_cast<std::int64_t>(buf_->size()) != numel_of(shape_))
            throw DimensionError("tensor data length " + std::to_string(buf_->size()) +
                                 " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, float v) {
        Tensor t(std::move(shape));
        std::fill(t.mut().begin(), t.mut().end(), v);
        return t;
    }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return buf_ ? static_cast<std::int64_t>(buf_->size()) : 0; }
    bool defined() const { return static_cast<bool>(buf_); }

    const float* data() const { return buf_->data(); }
    float* data() { return buf_->data(); }

    float operator[](std::int64_t i) const { return (*buf_)[static_cast<std::size_t>(i)]; }
    float& operator[](std::int64_t i) { return (*buf_)[static_cast<std::size_t>(i)]; }

    float at(std::initializer_list<int> idx) const { return (*buf_)[flat(idx)]; }
    float& at(std::initializer_list<int> idx) { return (*buf_)[flat(idx)]; }

    /// Deep copy with an unshared buffer.
    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.buf_ = std::make_shared<std::vector<float>>(*buf_);
        return t;
    }

    /// Same buffer, new shape (element count must agree).
    Tensor reshaped(Shape shape) const {
        if (numel_of(shape) != numel())
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    bool all_finite() const {
        for (float v : *buf_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    std::vector<float>& mut() { return *buf_; }

    static std::size_t check_numel(const Shape& s) {
        for (int d : s)
            if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(s));
        return static_cast<std::size_t>(numel_of(s));
    }

    std::size_t flat(std::initializer_list<int> idx) const {
        assert(idx.size() == shape_.size());
        std::size_t off = 0, k = 0;
        for (int i : idx) {
            assert(i >= 0 && i < shape_[k]);
            off = off * static_cast<std::size_t>(shape_[k]) + static_cast<std::size_t>(i);
            ++k;
        }
        return off;
    }

    Shape shape_;
    std::shared_ptr<std::vector<float>> buf_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(what) + ": shape " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

/// Deterministic uniform [0,1) from the top 24 bits of an mt19937 draw.
/// Identical across platforms, unlike std::uniform_real_distribution.
inline float uniform01(std::mt19937& rng) {
    return static_cast<float>(rng() >> 8) * (1.0f / 16777216.0f);
}

inline float uniform_in(std::mt19937& rng, float lo, float hi) {
    return lo + (hi - lo) * uniform01(rng);
}

}  // namespace certood
