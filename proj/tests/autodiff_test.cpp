#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "genemoe/autodiff.hpp"
#include "genemoe/gradcheck.hpp"
#include "genemoe/rng.hpp"

using namespace genemoe;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double sd = 1.0)
{
    return sample_gaussian(rng, {r, c}, 0.0, sd);
}

// Independent central-difference oracle for f(A) = sum(A x B) w.r.t. A.
Tensor fd_sum_product_grad(Tensor a, const Tensor& b, double eps)
{
    auto f = [&](const Tensor& x) { return matmul_values(x, b).sum(); };
    Tensor g(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double s = a[i];
        a[i] = s + eps;
        const double up = f(a);
        a[i] = s - eps;
        const double dn = f(a);
        a[i] = s;
        g[i] = (up - dn) / (2 * eps);
    }
    return g;
}

} // namespace

TEST(Matmul, IdentityTimesMatrix)
{
    Tape t;
    Var y = matmul(t.constant(Tensor::from_rows({{1, 0}, {0, 1}})), t.constant(Tensor::from_rows({{3, 4}, {5, 6}})));
    EXPECT_EQ(y.value(), Tensor::from_rows({{3, 4}, {5, 6}}));
}

TEST(Matmul, RowTimesColumn)
{
    Tape t;
    Var y = matmul(t.constant(Tensor::from_rows({{1, 2}})), t.constant(Tensor::from_rows({{3}, {4}})));
    EXPECT_DOUBLE_EQ(y.item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes)
{
    Tape t;
    try {
        matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({2, 3})));
        FAIL();
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos);
    }
}

TEST(Matmul, GradientMatchesFiniteDifferences)
{
    Rng rng(7);
    Parameter a("a", random_matrix(rng, 3, 3));
    const Tensor b = random_matrix(rng, 3, 3);
    Tape t;
    Var loss = sum(matmul(t.param(a), t.constant(b)));
    std::vector<Parameter*> ps{&a};
    t.backward(loss, ps);
    const Tensor fd = fd_sum_product_grad(a.value, b, 1e-5);
    for (std::size_t i = 0; i < fd.size(); ++i)
        EXPECT_NEAR(a.grad[i], fd[i], 1e-6 * std::max(1.0, std::abs(fd[i])));
}

TEST(Elementwise, ReluSignCases)
{
    Tape t;
    EXPECT_EQ(relu(t.constant(Tensor::vector({-1, 0, 2}))).value(), Tensor::vector({0, 0, 2}));
}

TEST(Elementwise, SoftplusValues)
{
    Tape t;
    EXPECT_NEAR(softplus(t.constant(Tensor::scalar(0.0))).item(), std::log(2.0), 1e-15);
    EXPECT_NEAR(softplus(t.constant(Tensor::scalar(50.0))).item(), 50.0, 1e-9);
    EXPECT_TRUE(std::isfinite(softplus(t.constant(Tensor::scalar(1000.0))).item()));
    EXPECT_GT(softplus(t.constant(Tensor::scalar(-800.0))).item(), -1e-300);
}

TEST(Elementwise, LogRejectsNonPositive)
{
    Tape t;
    EXPECT_THROW(log(t.constant(Tensor::vector({1.0, 0.0}))), DomainError);
    EXPECT_THROW(log(t.constant(Tensor::vector({-2.0}))), DomainError);
}

TEST(Elementwise, BroadcastEqualsExplicitTiling)
{
    Rng rng(3);
    const Tensor col = random_matrix(rng, 4, 1);
    const Tensor full = random_matrix(rng, 4, 5);
    Tensor tiled({4, 5});
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 5; ++j)
            tiled(i, j) = col(i, 0);
    Tape t;
    Var c = t.constant(col), f = t.constant(full), tl = t.constant(tiled);
    EXPECT_EQ(add(c, f).value(), add(tl, f).value());
    EXPECT_EQ(mul(f, c).value(), mul(f, tl).value());
    EXPECT_EQ(sub(c, f).value(), sub(tl, f).value());
    EXPECT_EQ(div(f, c).value(), div(f, tl).value());
}

TEST(Elementwise, BroadcastGradientReducesOverTiledAxis)
{
    Rng rng(4);
    Parameter col("col", random_matrix(rng, 3, 1));
    Parameter row("row", random_matrix(rng, 1, 4));
    const Tensor w = random_matrix(rng, 3, 4);
    auto f = [&](Tape& t) { return sum((t.param(col) * t.param(row) + t.param(col)) * t.constant(w)); };
    EXPECT_LT(check_gradients(f, {&col, &row}), 1e-8);
}

TEST(Elementwise, EveryUnaryOpPassesGradientCheck)
{
    Rng rng(11);
    Parameter p("p", sample_gaussian(rng, {3, 4}, 0.0, 1.0));
    Parameter q("q", Tensor({3, 4}));
    for (auto& v : q.value.values())
        v = 0.5 + rng.uniform();
    const Tensor w = random_matrix(rng, 3, 4);
    auto f = [&](Tape& t) {
        Var x = t.param(p);
        Var y = t.param(q);
        Var acc = softplus(x) + exp(x) * 0.1 + tanh(x) + sigmoid(x) + square(x) + log(y) + sqrt(y) +
                  normal_cdf(x) + x / y + relu(x) + abs(x);
        return sum(acc * t.constant(w));
    };
    EXPECT_LT(check_gradients(f, {&p, &q}), 1e-7);
}

TEST(Softmax, SymmetricPair)
{
    Tape t;
    EXPECT_EQ(softmax_rows(t.constant(Tensor::from_rows({{0, 0}}))).value(), Tensor::from_rows({{0.5, 0.5}}));
}

TEST(Softmax, NegativeInfinityMapsToExactZero)
{
    const double inf = std::numeric_limits<double>::infinity();
    Tape t;
    Tensor y = softmax_rows(t.constant(Tensor::from_rows({{2, 1, -inf}}))).value();
    const double e = std::exp(1.0);
    EXPECT_NEAR(y[0], e / (e + 1.0), 1e-15);
    EXPECT_NEAR(y[0], 0.7311, 1e-4);
    EXPECT_NEAR(y[1], 0.2689, 1e-4);
    EXPECT_EQ(y[2], 0.0);
}

TEST(Softmax, StableUnderLargeMagnitudes)
{
    Tape t;
    Tensor big = softmax_rows(t.constant(Tensor::from_rows({{1000, 999}}))).value();
    Tensor small = softmax_rows(t.constant(Tensor::from_rows({{1, 0}}))).value();
    EXPECT_NEAR(big[0], small[0], 1e-15);
    EXPECT_NEAR(big[1], small[1], 1e-15);
}

TEST(Softmax, AllNegativeInfinityRowIsRejected)
{
    const double inf = std::numeric_limits<double>::infinity();
    Tape t;
    EXPECT_THROW(softmax_rows(t.constant(Tensor::from_rows({{1, 2}, {-inf, -inf}}))), DegenerateSliceError);
}

TEST(Softmax, GradientCheck)
{
    Rng rng(5);
    Parameter p("p", random_matrix(rng, 4, 5));
    const Tensor w = random_matrix(rng, 4, 5);
    auto f = [&](Tape& t) { return sum(softmax_rows(t.param(p)) * t.constant(w)); };
    EXPECT_LT(check_gradients(f, {&p}), 1e-8);
}

TEST(Backward, SumGivesOnes)
{
    Parameter w("w", Tensor::vector({3, -1, 2}));
    Tape t;
    std::vector<Parameter*> ps{&w};
    t.backward(sum(t.param(w)), ps);
    EXPECT_EQ(w.grad, Tensor::vector({1, 1, 1}));
}

TEST(Backward, SquaredNorm)
{
    Parameter w("w", Tensor::from_rows({{1}, {2}}));
    Tape t;
    Var wv = t.param(w);
    std::vector<Parameter*> ps{&w};
    t.backward(matmul(transpose(wv), wv), ps);
    EXPECT_EQ(w.grad, Tensor::from_rows({{2}, {4}}));
}

TEST(Backward, UnreachableParameterGetsZero)
{
    Parameter used("used", Tensor::vector({1, 2}));
    Parameter unused("unused", Tensor::vector({5, 5}));
    unused.grad.fill(9.0);
    Tape t;
    std::vector<Parameter*> ps{&used, &unused};
    t.backward(sum(t.param(used)), ps);
    EXPECT_EQ(unused.grad, Tensor::vector({0, 0}));
}

TEST(Backward, FanOutAccumulates)
{
    Parameter w("w", Tensor::scalar(3.0));
    Tape t;
    Var x = t.param(w);
    std::vector<Parameter*> ps{&w};
    t.backward(x * x + x * 2.0 + x, ps);
    EXPECT_DOUBLE_EQ(w.grad[0], 2 * 3.0 + 2.0 + 1.0);
}

TEST(Backward, NonScalarLossIsContractError)
{
    Tape t;
    Parameter w("w", Tensor::vector({1, 2}));
    EXPECT_THROW(t.backward(t.param(w)), ContractError);
}

TEST(GradCheck, LinearIsExact)
{
    Parameter w("w", Tensor::vector({0.3, -1.2, 2.0}));
    const Tensor c = Tensor::vector({1.5, 2.5, -0.5});
    auto f = [&](Tape& t) { return sum(t.param(w) * t.constant(c)); };
    EXPECT_LE(check_gradients(f, {&w}), 1e-9);
}

TEST(GradCheck, SoftplusChain)
{
    Rng rng(19);
    Parameter w("w", random_matrix(rng, 3, 3));
    auto f = [&](Tape& t) { return sum(softplus(softplus(t.param(w)) * 2.0 - 1.0)); };
    EXPECT_LE(check_gradients(f, {&w}), 1e-5);
}

TEST(GradCheck, EpsilonOutOfRangeIsRejected)
{
    Parameter w("w", Tensor::scalar(1.0));
    auto f = [&](Tape& t) { return t.param(w); };
    EXPECT_THROW(check_gradients(f, {&w}, 1e-2), ContractError);
    EXPECT_THROW(check_gradients(f, {&w}, 1e-9), ContractError);
}

TEST(BlockMatmul, MatchesPerBlockProducts)
{
    Rng rng(23);
    Parameter a("a", random_matrix(rng, 6, 2));
    Parameter b("b", random_matrix(rng, 6, 2));
    const Tensor w = random_matrix(rng, 6, 2);
    Tape t;
    Tensor s = block_matmul(t.param(a), t.param(b), 3, true).value();
    for (std::size_t blk = 0; blk < 2; ++blk)
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) {
                double ref = 0.0;
                for (std::size_t p = 0; p < 2; ++p)
                    ref += a.value(blk * 3 + i, p) * b.value(blk * 3 + j, p);
                EXPECT_NEAR(s(blk * 3 + i, j), ref, 1e-14);
            }
    auto f = [&](Tape& tp) {
        Var sc = block_matmul(tp.param(a), tp.param(b), 3, true);
        Var o = block_matmul(softmax_rows(sc), tp.param(b), 3, false);
        return sum(o * tp.constant(w));
    };
    EXPECT_LT(check_gradients(f, {&a, &b}), 1e-7);
}

TEST(Gaussian, ZeroStddevIsConstant)
{
    Rng rng(1);
    EXPECT_EQ(sample_gaussian(rng, {2, 3}, 0.0, 0.0), Tensor({2, 3}, 0.0));
    EXPECT_THROW(sample_gaussian(rng, {2}, 0.0, -0.1), DomainError);
}

TEST(Gaussian, LawOfLargeNumbers)
{
    Rng rng(2024);
    const Tensor s = sample_gaussian(rng, {100000}, 0.0, 0.2);
    double m = 0.0;
    for (double v : s.values())
        m += v;
    m /= static_cast<double>(s.size());
    double var = 0.0;
    for (double v : s.values())
        var += (v - m) * (v - m);
    const double sd = std::sqrt(var / static_cast<double>(s.size() - 1));
    EXPECT_NEAR(m, 0.0, 0.005);
    EXPECT_NEAR(sd, 0.2, 0.005);
}

TEST(Gaussian, SameSeedSameTensor)
{
    Rng a(99), b(99);
    EXPECT_EQ(sample_gaussian(a, {4, 4}, 1.0, 2.0), sample_gaussian(b, {4, 4}, 1.0, 2.0));
}

TEST(Rng, StateRoundTripContinuesSequence)
{
    Rng a(5);
    a.normal();
    a.uniform();
    Rng b(0);
    b.restore(a.state());
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.normal(), b.normal());
    EXPECT_THROW(b.restore("pcg 1 2 3"), ParseError);
}
