#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <limits>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "layers.hpp"
#include "rng.hpp"

namespace genemoe {

/// Everything a gated layer's forward pass exposes to the balance losses.
struct GateOutput {
    Var gates;        // [batch x n_experts], rows on the simplex with k nonzeros
    Var clean;        // x * W
    Var logits;       // H: clean plus scaled noise when noisy
    Var noise_stddev; // softplus(x * W_noise); bound only when noisy
    bool noisy = false;
    std::size_t k = 0;
};

/// softmax(TopK(H, k)) row-wise.
inline Var gates_from_logits(const Var& logits, std::size_t k) { return softmax_rows(topk_mask(logits, k)); }

/// Noisy top-k gating network.
///
/// H_i(x) = (x W)_i + z * softplus((x W_noise)_i), z ~ N(0, 1) per entry when
/// noise is enabled, z = 0 otherwise. The gate keeps the k largest H per row
/// (ties to the lower expert index) and softmaxes them.
class NoisyTopKGate {
public:
    NoisyTopKGate(const std::string& name, std::size_t input_dim, std::size_t n_experts, std::size_t k, Rng& rng)
        : w(name + ".w", Tensor({input_dim, n_experts})), w_noise(name + ".w_noise", Tensor({input_dim, n_experts})),
          k(k)
    {
        if (n_experts < 2)
            throw ConfigError("a gated layer needs at least 2 experts");
        if (k < 1 || k > n_experts)
            throw ConfigError("top_k must lie in [1, n_experts], got " + std::to_string(k));
        const double s = 1.0 / std::sqrt(static_cast<double>(input_dim));
        for (auto& v : w.value.values())
            v = rng.normal(0.0, s);
    }

    std::size_t input_dim() const noexcept { return w.value.rows(); }
    std::size_t expert_count() const noexcept { return w.value.cols(); }

    GateOutput forward(Tape& tape, const Var& x, Rng* rng, bool noisy) const
    {
        GateOutput out;
        out.k = k;
        out.noisy = noisy;
        out.clean = matmul(x, tape.param(w));
        if (noisy) {
            if (!rng)
                throw ContractError("noisy gating requires a random source");
            out.noise_stddev = softplus(matmul(x, tape.param(w_noise)));
            Var z = tape.constant(sample_gaussian(*rng, out.clean.shape(), 0.0, 1.0));
            out.logits = out.clean + z * out.noise_stddev;
        } else {
            out.logits = out.clean;
        }
        out.gates = gates_from_logits(out.logits, k);
        return out;
    }

    std::vector<Parameter*> parameters() { return {&w, &w_noise}; }

    Parameter w;
    Parameter w_noise;
    std::size_t k;
};

/// ||sum over batch of gate rows||_2 / batch.
///
/// Ranges over [1/sqrt(n), 1]: the lower bound is perfectly even routing,
/// the upper bound all mass on one expert.
inline Var importance_loss(const Var& gates)
{
    const double batch = static_cast<double>(gates.rows());
    return scale(sqrt(sum(square(sum_rows(gates)))), 1.0 / batch);
}

/// Smooth load estimate per expert: sum over rows of the probability that the
/// expert stays in the top k when only its own noise is redrawn.
///
/// P(b, j) = Phi((clean_bj - threshold_bj) / noise_stddev_bj) where the
/// threshold is the k-th largest noisy logit among the other experts of row b.
inline Var expert_load(const GateOutput& g)
{
    if (!g.noisy)
        throw ContractError("load is only defined with gate noise enabled");
    Tape& tape = *g.logits.tape();
    const Tensor& h = g.logits.value();
    const std::size_t rows = h.rows(), n = h.cols();
    if (g.k >= n)
        return tape.constant(Tensor({1, n}, static_cast<double>(rows)));

    std::vector<std::size_t> threshold_index(rows * n);
    std::vector<std::size_t> others;
    others.reserve(n - 1);
    for (std::size_t b = 0; b < rows; ++b) {
        const double* row = h.data() + b * n;
        for (std::size_t j = 0; j < n; ++j) {
            others.clear();
            for (std::size_t o = 0; o < n; ++o)
                if (o != j)
                    others.push_back(o);
            std::nth_element(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(g.k - 1), others.end(),
                             [&](std::size_t x, std::size_t y) { return row[x] > row[y] || (row[x] == row[y] && x < y); });
            threshold_index[b * n + j] = b * n + others[g.k - 1];
        }
    }
    Var threshold = gather(g.logits, std::move(threshold_index), {rows, n});
    Var prob = normal_cdf((g.clean - threshold) / g.noise_stddev);
    return sum_rows(prob);
}

/// Squared coefficient of variation of the smooth load, var / mean^2.
inline Var load_loss(const GateOutput& g)
{
    Var load = expert_load(g);
    const double n = static_cast<double>(load.cols());
    Var m = scale(sum(load), 1.0 / n);
    Var var = scale(sum(square(load - m)), 1.0 / n);
    return var / (square(m) + 1e-10);
}

/// Coefficient of variation (population std / mean) of a vector.
inline double coefficient_of_variation(std::span<const double> v)
{
    double m = 0.0;
    for (double x : v)
        m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v)
        s += (x - m) * (x - m);
    s /= static_cast<double>(v.size());
    return m == 0.0 ? 0.0 : std::sqrt(s) / m;
}

/// Weighted sum of expert outputs, evaluating only experts that receive a
/// nonzero gate in at least one row. `run` maps (expert index) to its output.
template <typename RunExpert>
Var combine_experts(const Var& gates, std::size_t n_experts, RunExpert run, std::vector<std::size_t>& evaluated)
{
    const Tensor gv = gates.value();
    Var y;
    for (std::size_t j = 0; j < n_experts; ++j) {
        bool used = false;
        for (std::size_t b = 0; b < gv.rows() && !used; ++b)
            used = gv(b, j) > 0.0;
        if (!used)
            continue;
        evaluated.push_back(j);
        Var term = column(gates, j) * run(j);
        y = y.valid() ? y + term : term;
    }
    return y;
}

} // namespace genemoe
