#include "bsim/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace bsim {

namespace {
int64_t shape_product(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0) throw ShapeError("tensor dimensions must be positive");
        n *= d;
    }
    return n;
}
}  // namespace

Tensor::Tensor(std::vector<int64_t> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_product(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != static_cast<int64_t>(data_.size()))
        throw ShapeError("tensor data length does not match shape");
}

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
}

int64_t Tensor::rows() const {
    if (shape_.size() != 2) throw ShapeError("expected a matrix");
    return shape_[0];
}

int64_t Tensor::cols() const {
    if (shape_.size() != 2) throw ShapeError("expected a matrix");
    return shape_[1];
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() requires a 1-element tensor");
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    const int64_t m = a.rows(), k = a.cols();
    if (b.ndim() == 1) {
        // matrix-vector product
        if (b.size() != k) throw ShapeError("matmul: inner dimensions do not match");
        Tensor out({m});
        for (int64_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p];
            out[i] = acc;
        }
        return out;
    }
    if (b.rows() != k) throw ShapeError("matmul: inner dimensions do not match");
    const int64_t n = b.cols();
    Tensor out({m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = out.data().data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) continue;
            const double* brow = pb + p * n;
            double* crow = pc + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return out;
}

double dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
    double acc = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

Tensor l2_normalize(const Tensor& v, double eps) {
    const double n = norm2(v);
    if (!(n > eps)) throw DegenerateNorm("l2_normalize: norm below eps");
    Tensor out = v;
    for (int64_t i = 0; i < out.size(); ++i) out[i] /= n;
    return out;
}

Tensor l2_normalize_rows(const Tensor& m, double eps) {
    const int64_t r = m.rows(), c = m.cols();
    Tensor out = m;
    for (int64_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < c; ++j) s += m.at(i, j) * m.at(i, j);
        const double n = std::sqrt(s);
        if (!(n > eps)) throw DegenerateNorm("l2_normalize_rows: row norm below eps");
        for (int64_t j = 0; j < c; ++j) out.at(i, j) /= n;
    }
    return out;
}

double cosine_sim(const Tensor& a, const Tensor& b, double eps) {
    const double na = norm2(a), nb = norm2(b);
    if (!(na > eps) || !(nb > eps)) throw DegenerateNorm("cosine_sim: norm below eps");
    const double c = dot(a, b) / (na * nb);
    return std::clamp(c, -1.0, 1.0);
}

}  // namespace bsim
