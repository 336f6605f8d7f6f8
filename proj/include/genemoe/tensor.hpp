#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace genemoe {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape)
{
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0)
            s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Dense row-major array of doubles, rank 1 or 2.
///
/// A rank-1 tensor of extent n behaves as a 1 x n row wherever a matrix is
/// expected (broadcasting, rows()/cols()).
class Tensor {
public:
    Tensor() : shape_{1}, values_(1, 0.0) {}

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape))
    {
        validate_shape();
        values_.assign(element_count(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values))
    {
        validate_shape();
        if (values_.size() != element_count(shape_))
            throw DimensionError("tensor of shape " + shape_string(shape_) + " cannot hold " +
                                 std::to_string(values_.size()) + " values");
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    static Tensor vector(std::vector<double> values)
    {
        const std::size_t n = values.size();
        return Tensor({n}, std::move(values));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    {
        return Tensor({rows, cols}, std::move(values));
    }

    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows)
    {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        std::vector<double> v;
        v.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c)
                throw DimensionError("ragged initializer for tensor");
            v.insert(v.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(v));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return values_.size(); }
    std::size_t rows() const noexcept { return shape_.size() == 1 ? 1 : shape_[0]; }
    std::size_t cols() const noexcept { return shape_.size() == 1 ? shape_[0] : shape_[1]; }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    double* data() noexcept { return values_.data(); }
    const double* data() const noexcept { return values_.data(); }
    std::vector<double>& storage() noexcept { return values_; }
    const std::vector<double>& storage() const noexcept { return values_; }

    double& operator[](std::size_t i) noexcept { return values_[i]; }
    double operator[](std::size_t i) const noexcept { return values_[i]; }
    double& operator()(std::size_t r, std::size_t c) noexcept { return values_[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return values_[r * cols() + c]; }

    double item() const
    {
        if (values_.size() != 1)
            throw ContractError("item() on tensor of shape " + shape_string(shape_));
        return values_[0];
    }

    std::vector<double> row(std::size_t r) const
    {
        return {values_.begin() + static_cast<std::ptrdiff_t>(r * cols()),
                values_.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols())};
    }

    std::vector<double> column(std::size_t c) const
    {
        std::vector<double> out(rows());
        for (std::size_t r = 0; r < rows(); ++r)
            out[r] = (*this)(r, c);
        return out;
    }

    Tensor reshaped(Shape shape) const
    {
        Tensor t(std::move(shape));
        if (t.size() != size())
            throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(t.shape()));
        t.values_ = values_;
        return t;
    }

    void fill(double v) noexcept { std::fill(values_.begin(), values_.end(), v); }

    bool all_finite() const noexcept
    {
        return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
    }

    double sum() const noexcept { return std::accumulate(values_.begin(), values_.end(), 0.0); }

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    static std::size_t element_count(const Shape& shape)
    {
        std::size_t n = 1;
        for (auto d : shape)
            n *= d;
        return n;
    }

    void validate_shape() const
    {
        if (shape_.empty() || shape_.size() > 2)
            throw DimensionError("tensors must have rank 1 or 2, got " + shape_string(shape_));
        for (auto d : shape_)
            if (d == 0)
                throw DimensionError("zero extent in shape " + shape_string(shape_));
    }

    Shape shape_;
    std::vector<double> values_;
};

/// Select rows of a matrix, in the given order.
inline Tensor gather_rows(const Tensor& m, std::span<const std::size_t> indices)
{
    const std::size_t c = m.cols();
    Tensor out({indices.size(), c});
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy_n(m.data() + indices[i] * c, c, out.data() + i * c);
    return out;
}

namespace kernels {

// C (M x N) = beta * C + op(A) * op(B), row-major with leading dimensions.
inline void gemm(std::size_t M, std::size_t N, std::size_t K, const double* A, std::size_t lda, bool trans_a,
                 const double* B, std::size_t ldb, bool trans_b, double* C, std::size_t ldc, double beta)
{
    if (beta == 0.0) {
        for (std::size_t i = 0; i < M; ++i)
            std::fill_n(C + i * ldc, N, 0.0);
    } else if (beta != 1.0) {
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t j = 0; j < N; ++j)
                C[i * ldc + j] *= beta;
    }
    if (!trans_a && !trans_b) {
        for (std::size_t i = 0; i < M; ++i) {
            double* c = C + i * ldc;
            for (std::size_t p = 0; p < K; ++p) {
                const double a = A[i * lda + p];
                if (a == 0.0)
                    continue;
                const double* b = B + p * ldb;
                for (std::size_t j = 0; j < N; ++j)
                    c[j] += a * b[j];
            }
        }
    } else if (!trans_a && trans_b) {
        for (std::size_t i = 0; i < M; ++i) {
            const double* a = A + i * lda;
            for (std::size_t j = 0; j < N; ++j) {
                const double* b = B + j * ldb;
                double acc = 0.0;
                for (std::size_t p = 0; p < K; ++p)
                    acc += a[p] * b[p];
                C[i * ldc + j] += acc;
            }
        }
    } else if (trans_a && !trans_b) {
        for (std::size_t p = 0; p < K; ++p) {
            const double* b = B + p * ldb;
            for (std::size_t i = 0; i < M; ++i) {
                const double a = A[p * lda + i];
                if (a == 0.0)
                    continue;
                double* c = C + i * ldc;
                for (std::size_t j = 0; j < N; ++j)
                    c[j] += a * b[j];
            }
        }
    } else {
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t j = 0; j < N; ++j) {
                double acc = 0.0;
                for (std::size_t p = 0; p < K; ++p)
                    acc += A[p * lda + i] * B[j * ldb + p];
                C[i * ldc + j] += acc;
            }
    }
}

} // namespace kernels

/// Plain (non-differentiable) matrix product.
inline Tensor matmul_values(const Tensor& a, const Tensor& b)
{
    if (a.cols() != b.rows())
        throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    Tensor out({a.rows(), b.cols()});
    kernels::gemm(a.rows(), b.cols(), a.cols(), a.data(), a.cols(), false, b.data(), b.cols(), false, out.data(),
                  out.cols(), 0.0);
    return out;
}

} // namespace genemoe
