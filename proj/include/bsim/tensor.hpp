#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bsim/errors.hpp"

namespace bsim {

inline constexpr double kEpsNorm = 1e-12;

/// Dense row-major real64 array with shape. Values are immutable by
/// convention once the tensor is handed to a computation graph; plain
/// numeric code mutates freely through data().
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape);
    Tensor(std::vector<int64_t> shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int64_t> shape, double v);

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }
    int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }

    // 2-D accessors; throw ShapeError when the tensor is not a matrix.
    int64_t rows() const;
    int64_t cols() const;
    double at(int64_t i, int64_t j) const { return data_[i * cols() + j]; }
    double& at(int64_t i, int64_t j) { return data_[i * cols() + j]; }

    double operator[](int64_t i) const { return data_[i]; }
    double& operator[](int64_t i) { return data_[i]; }
    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }

    double item() const;  // value of a 1-element tensor

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;

private:
    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

// Plain (non-differentiable) numerics used throughout the immediate paths.
Tensor matmul(const Tensor& a, const Tensor& b);
double dot(const Tensor& a, const Tensor& b);
double norm2(const Tensor& a);

/// Scales a vector to unit Euclidean norm. Throws DegenerateNorm when
/// the input norm is at or below eps.
Tensor l2_normalize(const Tensor& v, double eps = kEpsNorm);
/// Row-wise unit normalization of a matrix.
Tensor l2_normalize_rows(const Tensor& m, double eps = kEpsNorm);

/// Cosine similarity, clamped to [-1, 1] to absorb rounding at the
/// boundary. Throws DegenerateNorm when either norm is <= eps.
double cosine_sim(const Tensor& a, const Tensor& b, double eps = kEpsNorm);

inline void check(bool cond, const char* msg) {
    if (!cond) throw ShapeError(msg);
}

}  // namespace bsim
