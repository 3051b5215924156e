// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "feddlp/error.hpp"

namespace feddlp {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::initializer_list<std::initializer_list<double>> init) {
        rows_ = init.size();
        cols_ = rows_ == 0 ? 0 : init.begin()->size();
        data_.reserve(rows_ * cols_);
        for (const auto& row : init) {
            if (row.size() != cols_) throw ShapeError("Matrix: ragged initializer");
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    bool same_shape(const Matrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline bool all_finite(std::span<const double> v) noexcept {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + shape_str(a) + " * " + shape_str(b));
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out_row = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto b_row = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
        }
    }
    return out;
}

/// y = m * x
inline Vector matvec(const Matrix& m, std::span<const double> x) {
    if (m.cols() != x.size()) {
        throw ShapeError("matvec: " + shape_str(m) + " * vector of " + std::to_string(x.size()));
    }
    Vector y(m.rows(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto r = m.row(i);
        y[i] = std::inner_product(r.begin(), r.end(), x.begin(), 0.0);
    }
    return y;
}

/// y = m^T * x
inline Vector matvec_transposed(const Matrix& m, std::span<const double> x) {
    if (m.rows() != x.size()) {
        throw ShapeError("matvec_transposed: " + shape_str(m) + "^T * vector of " +
                         std::to_string(x.size()));
    }
    Vector y(m.cols(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        auto r = m.row(i);
        for (std::size_t j = 0; j < m.cols(); ++j) y[j] += xi * r[j];
    }
    return y;
}

/// m += scale * u v^T
inline void add_outer(Matrix& m, double scale, std::span<const double> u, std::span<const double> v) {
    if (m.rows() != u.size() || m.cols() != v.size()) throw ShapeError("add_outer: shape mismatch");
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double s = scale * u[i];
        if (s == 0.0) continue;
        auto r = m.row(i);
        for (std::size_t j = 0; j < v.size(); ++j) r[j] += s * v[j];
    }
}

inline double dot(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw ShapeError("dot: length mismatch");
    return std::inner_product(u.begin(), u.end(), v.begin(), 0.0);
}

inline double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw ShapeError("cosine_similarity: length mismatch");
    const double nu = norm2(u);
    const double nv = norm2(v);
    if (nu == 0.0 || nv == 0.0) throw DegenerateInputError("cosine_similarity: zero-norm input");
    return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

inline Vector log_softmax(std::span<const double> logits) {
    if (logits.empty()) throw ShapeError("log_softmax: empty input");
    if (!all_finite(logits)) throw DegenerateInputError("log_softmax: non-finite logits");
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double s : logits) sum += std::exp(s - mx);
    const double lse = mx + std::log(sum);
    Vector out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

inline Vector softmax(std::span<const double> logits) {
    Vector out = log_softmax(logits);
    for (double& v : out) v = std::exp(v);
    return out;
}

inline double cross_entropy(std::span<const double> logits, std::size_t label) {
    if (label >= logits.size()) {
        throw IndexError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                         std::to_string(logits.size()) + " classes");
    }
    return std::max(0.0, -log_softmax(logits)[label]);
}

inline double entropy(std::span<const double> logits) {
    const Vector lp = log_softmax(logits);
    double h = 0.0;
    for (double v : lp) h -= std::exp(v) * v;
    return h;
}

/// KL(softmax(p_logits) || softmax(q_logits)).
inline double kl_divergence(std::span<const double> p_logits, std::span<const double> q_logits) {
    if (p_logits.size() != q_logits.size()) throw ShapeError("kl_divergence: length mismatch");
    const Vector lp = log_softmax(p_logits);
    const Vector lq = log_softmax(q_logits);
    double kl = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
    return std::max(0.0, kl);
}

} // namespace feddlp
