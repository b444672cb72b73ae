#pragma once

// Dense row-major matrices and the handful of neural-net primitives the
// reference denoiser needs. Everything is double precision and every loop has
// a fixed accumulation order, so identical inputs give bit-identical outputs.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <cstring>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "accelaes/errors.hpp"

namespace accelaes {

class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                             " does not match " + std::to_string(rows_) + "x" +
                             std::to_string(cols_));
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
    return t;
}

// C = A * B. For each output element the products are summed in increasing
// inner-index order starting from zero, exactly like the textbook triple loop.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + shape_str(a) + " * " + shape_str(b));
    }
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Matrix c(n, m);
    const double* ap = a.data().data();
    const double* bp = b.data().data();
    double* cp = c.data().data();
    // Register tiles of 8 rows x 8 columns; every element still accumulates
    // its k products in increasing p order, so tiling never changes a result.
    using v8 = double __attribute__((vector_size(64)));
    constexpr std::size_t kRows = 8, kCols = 8;
    std::size_t i = 0;
    for (; i + kRows <= n; i += kRows) {
        std::size_t j = 0;
        for (; j + kCols <= m; j += kCols) {
            v8 acc[kRows] = {};
            const double* a0 = ap + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                v8 bv;
                std::memcpy(&bv, bp + p * m + j, sizeof(v8));
                for (std::size_t r = 0; r < kRows; ++r) acc[r] += a0[r * k + p] * bv;
            }
            for (std::size_t r = 0; r < kRows; ++r) std::memcpy(cp + (i + r) * m + j, &acc[r], sizeof(v8));
        }
        for (std::size_t r = 0; r < kRows && j < m; ++r) {
            double* crow = cp + (i + r) * m;
            const double* arow = ap + (i + r) * k;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = arow[p];
                const double* brow = bp + p * m;
                for (std::size_t jj = j; jj < m; ++jj) crow[jj] += av * brow[jj];
            }
        }
    }
    for (; i < n; ++i) {
        double* crow = cp + i * m;
        const double* arow = ap + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = bp + p * m;
            for (std::size_t jj = 0; jj < m; ++jj) crow[jj] += av * brow[jj];
        }
    }
    return c;
}

// C = A * B^T, same accumulation order as matmul(a, transpose(b)).
inline Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_transposed: " + shape_str(a) + " * (" + shape_str(b) + ")^T");
    }
    return matmul(a, transpose(b));
}

// exp() built from plain arithmetic: round-to-nearest range reduction by
// ln 2, degree-13 Taylor polynomial, exponent assembled bitwise. Relative
// error stays below 1e-15 on [-708, 709]; arguments outside are clamped.
// Unlike the libm call it vectorizes, which matters for softmax and GELU.
inline double exp_det(double x) {
    constexpr double kLog2e = 1.4426950408889634;
    constexpr double kLn2Hi = 6.93147180369123816490e-01;
    constexpr double kLn2Lo = 1.90821492927058770002e-10;
    x = std::max(-708.0, std::min(x, 709.0));
    const double k = std::floor(x * kLog2e + 0.5);
    const double r = (x - k * kLn2Hi) - k * kLn2Lo;
    double p = 1.0 / 6227020800.0;
    p = p * r + 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    const auto bits = static_cast<std::uint64_t>(static_cast<std::int64_t>(k) + 1023) << 52;
    return p * std::bit_cast<double>(bits);
}

inline void row_softmax_inplace(Matrix& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        if (row.empty()) continue;
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (double& v : row) {
            v = exp_det(v - mx);
        }
        for (double v : row) sum += v;
        const double inv = 1.0 / sum;
        for (double& v : row) v *= inv;
    }
}

inline Matrix row_softmax(Matrix m) {
    row_softmax_inplace(m);
    return m;
}

inline constexpr double kLayerNormEps = 1e-5;

inline Matrix layer_norm(const Matrix& x, std::span<const double> gain, std::span<const double> bias,
                         double eps = kLayerNormEps) {
    if (gain.size() != x.cols() || bias.size() != x.cols()) {
        throw ShapeError("layer_norm: gain/bias length " + std::to_string(gain.size()) + "/" +
                         std::to_string(bias.size()) + " vs width " + std::to_string(x.cols()));
    }
    if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
    Matrix y(x.rows(), x.cols());
    const double n = static_cast<double>(x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        auto out = y.row(r);
        double mean = 0.0;
        for (double v : in) mean += v;
        mean /= n;
        double var = 0.0;
        for (double v : in) var += (v - mean) * (v - mean);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < in.size(); ++c) out[c] = (in[c] - mean) * inv * gain[c] + bias[c];
    }
    return y;
}

// tanh approximation of GELU, written as x * sigmoid(2u) with
// u = sqrt(2/pi) * (x + 0.044715 x^3), which equals 0.5 x (1 + tanh(u)).
inline double gelu(double x) {
    constexpr double kTwoAlpha = 1.5957691216057308;  // 2 * sqrt(2/pi)
    return x / (1.0 + exp_det(-kTwoAlpha * (x + 0.044715 * x * x * x)));
}

inline void gelu_inplace(Matrix& m) {
    double* p = m.data().data();
    const std::size_t n = m.size();
    for (std::size_t i = 0; i < n; ++i) p[i] = gelu(p[i]);
}

inline void add_row_bias(Matrix& m, std::span<const double> bias) {
    if (bias.size() != m.cols()) throw ShapeError("add_row_bias: width mismatch");
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
    }
}

inline void add_inplace(Matrix& acc, const Matrix& x) {
    if (!acc.same_shape(x)) throw ShapeError("add: " + shape_str(acc) + " + " + shape_str(x));
    for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += x.data()[i];
}

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
    Matrix out(idx.size(), m.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= m.rows()) throw ShapeError("gather_rows: index out of range");
        std::copy_n(m.row(idx[r]).begin(), m.cols(), out.row(r).begin());
    }
    return out;
}

// Writes row r of src into row idx[r] of dst.
inline void scatter_rows(Matrix& dst, const Matrix& src, std::span<const std::size_t> idx) {
    if (src.rows() != idx.size() || src.cols() != dst.cols()) throw ShapeError("scatter_rows: shape mismatch");
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= dst.rows()) throw ShapeError("scatter_rows: index out of range");
        std::copy_n(src.row(r).begin(), src.cols(), dst.row(idx[r]).begin());
    }
}

// Columns [begin, begin + count) as a new matrix.
inline Matrix column_block(const Matrix& m, std::size_t begin, std::size_t count) {
    if (begin + count > m.cols()) throw ShapeError("column_block: out of range");
    Matrix out(m.rows(), count);
    for (std::size_t r = 0; r < m.rows(); ++r)
        std::copy_n(m.row(r).begin() + static_cast<std::ptrdiff_t>(begin), count, out.row(r).begin());
    return out;
}

inline void set_column_block(Matrix& m, std::size_t begin, const Matrix& block) {
    if (block.rows() != m.rows() || begin + block.cols() > m.cols()) throw ShapeError("set_column_block: out of range");
    for (std::size_t r = 0; r < m.rows(); ++r)
        std::copy_n(block.row(r).begin(), block.cols(), m.row(r).begin() + static_cast<std::ptrdiff_t>(begin));
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: " + shape_str(a) + " vs " + shape_str(b));
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
    return d;
}

inline bool all_finite(const Matrix& m) {
    return std::all_of(m.data().begin(), m.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace accelaes
