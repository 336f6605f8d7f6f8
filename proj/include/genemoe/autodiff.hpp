#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace genemoe {

/// Trainable array plus its gradient slot.
struct Parameter {
    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape(), 0.0) {}

    std::string name;
    Tensor value;
    Tensor grad;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    double item() const { return value().item(); }

    Tape* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Dynamic reverse-mode tape. Nodes are appended in evaluation order, so
/// walking them backwards is a reverse topological order.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value)
    {
        nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false, false});
        return {this, nodes_.size() - 1};
    }

    /// Leaf bound to a parameter. Repeated calls return the same node.
    Var param(const Parameter& p)
    {
        if (auto it = param_nodes_.find(&p); it != param_nodes_.end())
            return {this, it->second};
        nodes_.push_back(Node{p.value, {}, {}, &p, true, false});
        param_nodes_.emplace(&p, nodes_.size() - 1);
        return {this, nodes_.size() - 1};
    }

    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward)
    {
        bool needs = false;
        for (const auto& v : inputs) {
            check_owner(v);
            needs = needs || nodes_[v.id()].needs_grad;
        }
        nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : BackwardFn{}, nullptr, needs, false});
        return {this, nodes_.size() - 1};
    }

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }

    /// Gradient slot of a node, zero-initialized on first access.
    Tensor& grad(std::size_t id)
    {
        Node& n = nodes_[id];
        if (!n.has_grad) {
            n.grad = Tensor(n.value.shape(), 0.0);
            n.has_grad = true;
        }
        return n.grad;
    }

    bool has_grad(std::size_t id) const { return nodes_[id].has_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Propagates d(loss)/d(node) to every node that needs a gradient.
    void backward(const Var& loss)
    {
        check_owner(loss);
        if (loss.value().size() != 1)
            throw ContractError("backward requires a scalar loss, got shape " + shape_string(loss.shape()));
        for (auto& n : nodes_)
            n.has_grad = false;
        grad(loss.id()).fill(1.0);
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.has_grad && n.backward)
                n.backward(*this, i);
        }
    }

    /// backward() and then overwrite each listed parameter's grad with the
    /// gradient of its leaf. Parameters not reached get zero.
    void backward(const Var& loss, std::span<Parameter* const> params)
    {
        backward(loss);
        for (Parameter* p : params) {
            p->grad = Tensor(p->value.shape(), 0.0);
            if (auto it = param_nodes_.find(p); it != param_nodes_.end() && nodes_[it->second].has_grad)
                p->grad = nodes_[it->second].grad;
        }
    }

    void check_owner(const Var& v) const
    {
        if (v.tape() != this)
            throw ContractError("variable belongs to a different tape");
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        BackwardFn backward;
        const Parameter* param;
        bool needs_grad;
        bool has_grad;
    };

    std::deque<Node> nodes_;
    std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

inline const Tensor& Var::value() const
{
    if (!tape_)
        throw ContractError("use of an unbound variable");
    return tape_->value(id_);
}

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b)
{
    if (!a.valid() || a.tape() != b.tape())
        throw ContractError("operands live on different tapes");
    return *a.tape();
}

struct Broadcast {
    std::size_t rows, cols;
    bool a_row, a_col, b_row, b_col; // true if that operand varies along the axis
    Shape shape;
};

inline Broadcast broadcast_shapes(const Tensor& a, const Tensor& b)
{
    auto merge = [&](std::size_t x, std::size_t y) {
        if (x == y || y == 1)
            return x;
        if (x == 1)
            return y;
        throw DimensionError("cannot broadcast " + shape_string(a.shape()) + " with " + shape_string(b.shape()));
    };
    Broadcast br{};
    br.rows = merge(a.rows(), b.rows());
    br.cols = merge(a.cols(), b.cols());
    br.a_row = a.rows() != 1;
    br.a_col = a.cols() != 1;
    br.b_row = b.rows() != 1;
    br.b_col = b.cols() != 1;
    if (a.rank() == 1 && b.rank() == 1)
        br.shape = {br.cols};
    else
        br.shape = {br.rows, br.cols};
    return br;
}

// Elementwise binary op with broadcasting; da/db are partial derivatives
// evaluated at (x, y).
template <typename F, typename DA, typename DB>
Var binary(const Var& a, const Var& b, F f, DA da, DB db)
{
    Tape& t = same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const Broadcast br = broadcast_shapes(av, bv);
    Tensor out(br.shape);
    const std::size_t ac = av.cols(), bc = bv.cols();
    for (std::size_t i = 0; i < br.rows; ++i)
        for (std::size_t j = 0; j < br.cols; ++j)
            out[i * br.cols + j] = f(av[(br.a_row ? i : 0) * ac + (br.a_col ? j : 0)],
                                     bv[(br.b_row ? i : 0) * bc + (br.b_col ? j : 0)]);
    const std::size_t ia = a.id(), ib = b.id();
    return t.record(std::move(out), {a, b}, [ia, ib, br, f, da, db](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& x = tp.value(ia);
        const Tensor& y = tp.value(ib);
        const std::size_t xc = x.cols(), yc = y.cols();
        const bool need_a = tp.needs_grad(ia), need_b = tp.needs_grad(ib);
        Tensor* ga = need_a ? &tp.grad(ia) : nullptr;
        Tensor* gb = need_b ? &tp.grad(ib) : nullptr;
        for (std::size_t i = 0; i < br.rows; ++i)
            for (std::size_t j = 0; j < br.cols; ++j) {
                const double gij = g[i * br.cols + j];
                const std::size_t xa = (br.a_row ? i : 0) * xc + (br.a_col ? j : 0);
                const std::size_t yb = (br.b_row ? i : 0) * yc + (br.b_col ? j : 0);
                if (ga)
                    (*ga)[xa] += gij * da(x[xa], y[yb]);
                if (gb)
                    (*gb)[yb] += gij * db(x[xa], y[yb]);
            }
    });
}

// Elementwise unary op; df(x, y) is the derivative given input x and output y.
template <typename F, typename DF>
Var unary(const Var& a, F f, DF df)
{
    Tape& t = *a.tape();
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i)
        out[i] = f(av[i]);
    const std::size_t ia = a.id();
    return t.record(std::move(out), {a}, [ia, df](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& x = tp.value(ia);
        const Tensor& y = tp.value(self);
        Tensor& gx = tp.grad(ia);
        for (std::size_t i = 0; i < x.size(); ++i)
            gx[i] += g[i] * df(x[i], y[i]);
    });
}

inline double stable_softplus(double t)
{
    return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
}

inline double stable_sigmoid(double t)
{
    if (t >= 0.0)
        return 1.0 / (1.0 + std::exp(-t));
    const double e = std::exp(t);
    return e / (1.0 + e);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Binary arithmetic (broadcasting over rows/columns of extent 1)

inline Var add(const Var& a, const Var& b)
{
    return detail::binary(
        a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b)
{
    return detail::binary(
        a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b)
{
    return detail::binary(
        a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Var div(const Var& a, const Var& b)
{
    return detail::binary(
        a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

inline Var scale(const Var& a, double c)
{
    return detail::unary(
        a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& a, double c)
{
    return detail::unary(
        a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }
inline Var operator-(const Var& a, double c) { return add_scalar(a, -c); }
inline Var operator-(const Var& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Unary elementwise

inline Var relu(const Var& a)
{
    return detail::unary(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// log(1 + e^x), evaluated without overflow for large |x|.
inline Var softplus(const Var& a)
{
    return detail::unary(a, detail::stable_softplus, [](double x, double) { return detail::stable_sigmoid(x); });
}

inline Var sigmoid(const Var& a)
{
    return detail::unary(a, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(const Var& a)
{
    return detail::unary(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a)
{
    for (double v : a.value().values())
        if (!(v > 0.0))
            throw DomainError("log of non-positive value " + std::to_string(v));
    return detail::unary(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var tanh(const Var& a)
{
    return detail::unary(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var square(const Var& a)
{
    return detail::unary(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var sqrt(const Var& a)
{
    for (double v : a.value().values())
        if (v < 0.0)
            throw DomainError("sqrt of negative value " + std::to_string(v));
    return detail::unary(
        a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

/// |x|; the subgradient at 0 is taken as 0.
inline Var abs(const Var& a)
{
    return detail::unary(
        a, [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

/// Clamp to [lo, hi]; zero gradient where the clamp is active.
inline Var clamp(const Var& a, double lo, double hi)
{
    return detail::unary(
        a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

/// Standard normal CDF.
inline Var normal_cdf(const Var& a)
{
    return detail::unary(
        a, [](double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); },
        [](double x, double) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Var sum(const Var& a)
{
    const std::size_t ia = a.id();
    return a.tape()->record(Tensor::scalar(a.value().sum()), {a}, [ia](Tape& tp, std::size_t self) {
        const double g = tp.grad(self)[0];
        for (auto& v : tp.grad(ia).values())
            v += g;
    });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Sum over rows: [m x n] -> [1 x n].
inline Var sum_rows(const Var& a)
{
    const Tensor& v = a.value();
    Tensor out({1, v.cols()});
    for (std::size_t i = 0; i < v.rows(); ++i)
        for (std::size_t j = 0; j < v.cols(); ++j)
            out[j] += v(i, j);
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor& gx = tp.grad(ia);
        const std::size_t r = gx.rows(), c = gx.cols();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
                gx[i * c + j] += g[j];
    });
}

/// Sum over columns: [m x n] -> [m x 1].
inline Var sum_cols(const Var& a)
{
    const Tensor& v = a.value();
    Tensor out({v.rows(), 1});
    for (std::size_t i = 0; i < v.rows(); ++i)
        for (std::size_t j = 0; j < v.cols(); ++j)
            out[i] += v(i, j);
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor& gx = tp.grad(ia);
        const std::size_t r = gx.rows(), c = gx.cols();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
                gx[i * c + j] += g[i];
    });
}

inline Var reshape(const Var& a, Shape shape)
{
    Tensor out = a.value().reshaped(std::move(shape));
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor& gx = tp.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i)
            gx[i] += g[i];
    });
}

inline Var transpose(const Var& a)
{
    const Tensor& v = a.value();
    const std::size_t r = v.rows(), c = v.cols();
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
            out(j, i) = v(i, j);
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), {a}, [ia, r, c](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor& gx = tp.grad(ia);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
                gx[i * c + j] += g[j * r + i];
    });
}

/// Column j of a matrix as [m x 1].
inline Var column(const Var& a, std::size_t j)
{
    const Tensor& v = a.value();
    if (j >= v.cols())
        throw DimensionError("column " + std::to_string(j) + " out of range for " + shape_string(v.shape()));
    Tensor out({v.rows(), 1});
    for (std::size_t i = 0; i < v.rows(); ++i)
        out[i] = v(i, j);
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), {a}, [ia, j](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor& gx = tp.grad(ia);
        const std::size_t c = gx.cols();
        for (std::size_t i = 0; i < gx.rows(); ++i)
            gx[i * c + j] += g[i];
    });
}

/// out[i] = a[flat_index[i]], shaped as requested. Gradient scatters back.
inline Var gather(const Var& a, std::vector<std::size_t> flat_index, Shape shape)
{
    const Tensor& v = a.value();
    Tensor out(std::move(shape));
    if (out.size() != flat_index.size())
        throw DimensionError("gather: index count does not match output shape");
    for (std::size_t i = 0; i < flat_index.size(); ++i) {
        if (flat_index[i] >= v.size())
            throw DimensionError("gather: index out of range");
        out[i] = v[flat_index[i]];
    }
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), {a}, [ia, idx = std::move(flat_index)](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor& gx = tp.grad(ia);
        for (std::size_t i = 0; i < idx.size(); ++i)
            gx[idx[i]] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b)
{
    Tape& t = detail::same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols() != bv.rows())
        throw DimensionError("matmul shape mismatch: " + shape_string(av.shape()) + " x " +
                             shape_string(bv.shape()));
    const std::size_t M = av.rows(), K = av.cols(), N = bv.cols();
    Tensor out({M, N});
    kernels::gemm(M, N, K, av.data(), K, false, bv.data(), N, false, out.data(), N, 0.0);
    const std::size_t ia = a.id(), ib = b.id();
    return t.record(std::move(out), {a, b}, [ia, ib, M, K, N](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        if (tp.needs_grad(ia)) // dA = G * B^T
            kernels::gemm(M, K, N, g.data(), N, false, tp.value(ib).data(), N, true, tp.grad(ia).data(), K, 1.0);
        if (tp.needs_grad(ib)) // dB = A^T * G
            kernels::gemm(K, N, M, tp.value(ia).data(), K, true, g.data(), N, false, tp.grad(ib).data(), N, 1.0);
    });
}

/// Block-diagonal batched product over consecutive groups of `block` rows.
/// With transpose_b: a, b are [B*block x d], result [B*block x block] with
/// block i = A_i * B_i^T. Otherwise a is [B*block x block], b is
/// [B*block x d] and block i of the result is A_i * B_i.
inline Var block_matmul(const Var& a, const Var& b, std::size_t block, bool transpose_b)
{
    Tape& t = detail::same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (block == 0 || av.rows() % block != 0 || av.rows() != bv.rows())
        throw DimensionError("block_matmul: incompatible shapes " + shape_string(av.shape()) + ", " +
                             shape_string(bv.shape()));
    const std::size_t nb = av.rows() / block;
    const std::size_t ac = av.cols(), bc = bv.cols();
    std::size_t oc;
    if (transpose_b) {
        if (ac != bc)
            throw DimensionError("block_matmul: inner extents differ");
        oc = block;
    } else {
        if (ac != block)
            throw DimensionError("block_matmul: left blocks must be square");
        oc = bc;
    }
    Tensor out({av.rows(), oc});
    for (std::size_t k = 0; k < nb; ++k) {
        const double* A = av.data() + k * block * ac;
        const double* B = bv.data() + k * block * bc;
        double* C = out.data() + k * block * oc;
        if (transpose_b)
            kernels::gemm(block, block, ac, A, ac, false, B, bc, true, C, oc, 0.0);
        else
            kernels::gemm(block, bc, block, A, ac, false, B, bc, false, C, oc, 0.0);
    }
    const std::size_t ia = a.id(), ib = b.id();
    return t.record(std::move(out), {a, b}, [=](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& A = tp.value(ia);
        const Tensor& B = tp.value(ib);
        Tensor* gA = tp.needs_grad(ia) ? &tp.grad(ia) : nullptr;
        Tensor* gB = tp.needs_grad(ib) ? &tp.grad(ib) : nullptr;
        for (std::size_t k = 0; k < nb; ++k) {
            const double* Ak = A.data() + k * block * ac;
            const double* Bk = B.data() + k * block * bc;
            const double* Gk = g.data() + k * block * oc;
            if (transpose_b) {
                // S = A B^T: dA = G B, dB = G^T A
                if (gA)
                    kernels::gemm(block, ac, block, Gk, oc, false, Bk, bc, false, gA->data() + k * block * ac, ac, 1.0);
                if (gB)
                    kernels::gemm(block, bc, block, Gk, oc, true, Ak, ac, false, gB->data() + k * block * bc, bc, 1.0);
            } else {
                // O = A B: dA = G B^T, dB = A^T G
                if (gA)
                    kernels::gemm(block, block, bc, Gk, oc, false, Bk, bc, true, gA->data() + k * block * ac, ac, 1.0);
                if (gB)
                    kernels::gemm(block, bc, block, Ak, ac, true, Gk, oc, false, gB->data() + k * block * bc, bc, 1.0);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Softmax and top-k routing

/// Row-wise softmax. Entries equal to -inf map to exactly 0; a row with no
/// finite entry is rejected.
inline Var softmax_rows(const Var& a)
{
    const Tensor& v = a.value();
    const std::size_t r = v.rows(), c = v.cols();
    Tensor out(v.shape());
    for (std::size_t i = 0; i < r; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j)
            m = std::max(m, v[i * c + j]);
        if (!std::isfinite(m))
            throw DegenerateSliceError("softmax over a row without finite entries (row " + std::to_string(i) + ")");
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double e = std::exp(v[i * c + j] - m);
            out[i * c + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < c; ++j)
            out[i * c + j] /= z;
    }
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), {a}, [ia, r, c](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& y = tp.value(self);
        Tensor& gx = tp.grad(ia);
        for (std::size_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j)
                dot += g[i * c + j] * y[i * c + j];
            for (std::size_t j = 0; j < c; ++j)
                gx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
        }
    });
}

/// Indices of the k largest entries of a row; ties go to the lower index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> row, std::size_t k)
{
    std::vector<std::size_t> idx(row.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return row[x] > row[y]; });
    idx.resize(std::min(k, idx.size()));
    return idx;
}

/// Keep each row's top-k entries and set the rest to -inf. The selection is
/// piecewise constant: gradient flows only to the kept entries.
inline Var topk_mask(const Var& a, std::size_t k)
{
    const Tensor& v = a.value();
    const std::size_t r = v.rows(), c = v.cols();
    if (k == 0 || k > c)
        throw ContractError("top-k with k=" + std::to_string(k) + " over " + std::to_string(c) + " entries");
    Tensor out(v.shape(), -std::numeric_limits<double>::infinity());
    std::vector<char> keep(v.size(), 0);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j : top_k_indices(v.values().subspan(i * c, c), k)) {
            out[i * c + j] = v[i * c + j];
            keep[i * c + j] = 1;
        }
    }
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), {a}, [ia, keep = std::move(keep)](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor& gx = tp.grad(ia);
        for (std::size_t i = 0; i < keep.size(); ++i)
            if (keep[i])
                gx[i] += g[i];
    });
}

} // namespace genemoe
