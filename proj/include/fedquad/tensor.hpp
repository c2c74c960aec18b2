#pragma once

// Dense row-major matrices and the handful of differentiable primitives the
// miniature model needs. Every reduction runs in ascending index order so the
// results are bitwise reproducible for identical inputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedquad/rng.hpp"

namespace fedquad {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) throw ShapeError("Matrix: data length does not match rows*cols");
    }
    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ == 0 ? 0 : rows.begin()->size();
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }
    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }
    static Matrix uniform(std::size_t rows, std::size_t cols, double lo, double hi, RngStream& rng) {
        Matrix m(rows, cols);
        for (auto& v : m.data_) v = rng.uniform(lo, hi);
        return m;
    }
    static Matrix normal(std::size_t rows, std::size_t cols, double stddev, RngStream& rng) {
        Matrix m(rows, cols);
        for (auto& v : m.data_) v = rng.normal(0.0, stddev);
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool operator==(const Matrix&) const = default;

    std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace detail {
inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}
}  // namespace detail

/// a * b. Entry (i,j) accumulates a(i,k)*b(k,j) for k = 0..K-1 in order.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: " + a.shape_str() + " x " + b.shape_str());
    Matrix out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* o = out.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            const double* br = b.row(k).data();
            for (std::size_t j = 0; j < n; ++j) o[j] += aik * br[j];
        }
    }
    return out;
}

/// a * b^T without materializing the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw ShapeError("matmul_nt: " + a.shape_str() + " x " + b.shape_str() + "^T");
    Matrix out(a.rows(), b.rows());
    const std::size_t kdim = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ar = a.row(i).data();
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* br = b.row(j).data();
            double s = 0.0;
            for (std::size_t k = 0; k < kdim; ++k) s += ar[k] * br[k];
            out(i, j) = s;
        }
    }
    return out;
}

/// a^T * b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw ShapeError("matmul_tn: " + a.shape_str() + "^T x " + b.shape_str());
    Matrix out(a.cols(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* br = b.row(k).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            double* o = out.row(i).data();
            for (std::size_t j = 0; j < n; ++j) o[j] += aki * br[j];
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    detail::require_same_shape(a, b, "add");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
    return out;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
    detail::require_same_shape(a, b, "sub");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
    return out;
}

inline Matrix scale(const Matrix& a, double s) {
    Matrix out = a;
    for (auto& v : out.data()) v *= s;
    return out;
}

/// dst += s * src
inline void axpy(Matrix& dst, double s, const Matrix& src) {
    detail::require_same_shape(dst, src, "axpy");
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += s * src.data()[i];
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    detail::require_same_shape(a, b, "hadamard");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.data()[i];
    return out;
}

/// Row vector (1 x cols) added to every row.
inline Matrix add_row_broadcast(const Matrix& a, const Matrix& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row_broadcast: " + row.shape_str());
    Matrix out = a;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) += row(0, j);
    return out;
}

/// Column sums as a 1 x cols row vector.
inline Matrix column_sum(const Matrix& a) {
    Matrix out(1, a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(0, j) += a(i, j);
    return out;
}

inline double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return std::sqrt(s);
}

inline bool all_finite(const Matrix& a) {
    return std::all_of(a.data().begin(), a.data().end(), [](double v) { return std::isfinite(v); });
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    detail::require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

// GELU, tanh approximation:
//   gelu(x) = 0.5 x (1 + tanh(k0 (x + k1 x^3))),  k0 = sqrt(2/pi), k1 = 0.044715
inline constexpr double kGeluK0 = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluK1 = 0.044715;

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluK0 * (x + kGeluK1 * x * x * x))); }

inline double gelu_grad_scalar(double x) {
    const double t = std::tanh(kGeluK0 * (x + kGeluK1 * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluK0 * (1.0 + 3.0 * kGeluK1 * x * x);
}

inline Matrix gelu(const Matrix& x) {
    Matrix out = x;
    for (auto& v : out.data()) v = gelu_scalar(v);
    return out;
}

inline Matrix gelu_backward(const Matrix& x, const Matrix& upstream) {
    detail::require_same_shape(x, upstream, "gelu_backward");
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = upstream.data()[i] * gelu_grad_scalar(x.data()[i]);
    return out;
}

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
    Matrix normalized;         // x_hat
    std::vector<double> rstd;  // 1 / sqrt(var + eps), per row
};

struct LayerNormResult {
    Matrix out;
    LayerNormCache cache;
};

struct LayerNormGrads {
    Matrix dx;
    Matrix dgain;
    Matrix dbias;
};

/// Per-row normalization (biased variance, eps = 1e-5) followed by gain/bias.
inline LayerNormResult layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias) {
    if (gain.rows() != 1 || gain.cols() != x.cols() || !gain.same_shape(bias))
        throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(x.cols()));
    const std::size_t n = x.cols();
    LayerNormResult res{Matrix(x.rows(), n), {Matrix(x.rows(), n), std::vector<double>(x.rows())}};
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto r = x.row(i);
        double mean = 0.0;
        for (double v : r) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : r) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        res.cache.rstd[i] = rstd;
        for (std::size_t j = 0; j < n; ++j) {
            const double xh = (r[j] - mean) * rstd;
            res.cache.normalized(i, j) = xh;
            res.out(i, j) = xh * gain(0, j) + bias(0, j);
        }
    }
    return res;
}

inline LayerNormGrads layer_norm_backward(const LayerNormCache& cache, const Matrix& gain, const Matrix& upstream) {
    const Matrix& xh = cache.normalized;
    detail::require_same_shape(xh, upstream, "layer_norm_backward");
    const std::size_t n = xh.cols();
    const double inv_n = 1.0 / static_cast<double>(n);
    LayerNormGrads g{Matrix(xh.rows(), n), Matrix(1, n), Matrix(1, n)};
    std::vector<double> dxh(n);
    for (std::size_t i = 0; i < xh.rows(); ++i) {
        double sum_dxh = 0.0;
        double sum_dxh_xh = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double dy = upstream(i, j);
            g.dgain(0, j) += dy * xh(i, j);
            g.dbias(0, j) += dy;
            dxh[j] = dy * gain(0, j);
            sum_dxh += dxh[j];
            sum_dxh_xh += dxh[j] * xh(i, j);
        }
        const double rs = cache.rstd[i];
        for (std::size_t j = 0; j < n; ++j)
            g.dx(i, j) = rs * inv_n * (static_cast<double>(n) * dxh[j] - sum_dxh - xh(i, j) * sum_dxh_xh);
    }
    return g;
}

struct CrossEntropyResult {
    double loss = 0.0;  // mean over rows
    Matrix dlogits;     // gradient of the mean loss
};

inline CrossEntropyResult softmax_cross_entropy(const Matrix& logits, std::span<const int> labels) {
    if (labels.size() != logits.rows()) throw ShapeError("softmax_cross_entropy: label count mismatch");
    const std::size_t n = logits.rows();
    const std::size_t c = logits.cols();
    CrossEntropyResult res{0.0, Matrix(n, c)};
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = logits.row(i);
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= c) throw std::out_of_range("softmax_cross_entropy: label out of range");
        double mx = r[0];
        for (double v : r) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : r) z += std::exp(v - mx);
        const double logz = std::log(z) + mx;
        res.loss += (logz - r[static_cast<std::size_t>(y)]) * inv_n;
        for (std::size_t j = 0; j < c; ++j) {
            const double p = std::exp(r[j] - logz);
            res.dlogits(i, j) = (p - (static_cast<std::size_t>(y) == j ? 1.0 : 0.0)) * inv_n;
        }
    }
    return res;
}

inline std::vector<int> argmax_rows(const Matrix& m) {
    std::vector<int> out(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const auto r = m.row(i);
        out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    }
    return out;
}

}  // namespace fedquad
