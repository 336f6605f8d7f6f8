#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "config.hpp"
#include "data.hpp"
#include "rng.hpp"

namespace genemoe {

/// Low-rank expression generator with class signatures and proportional
/// hazards survival:
///   x = scale * sigmoid(signature[context, class] + marker[context]
///                       + latent * loadings + noise * eps)
///   T ~ Exp(exp(w . latent)), C ~ Exp(rate tuned to the censoring fraction).
struct SyntheticSpec {
    std::vector<std::size_t> samples_per_class{125, 125, 125, 125};
    std::size_t gene_count = 200;
    std::size_t latent_rank = 5;
    double class_signature_strength = 1.0;
    double loading_scale = 1.0;
    double noise = 0.1;
    bool survival = true;
    double survival_strength = 3.0;       // norm of w when survival_weights is empty
    std::vector<double> survival_weights; // one per latent coordinate
    double censoring_fraction = 0.25;
    double expression_scale = 1.0;
    std::size_t dead_gene_count = 0; // extra genes that are almost always zero
    std::size_t context_count = 1;   // hidden contexts, each with its own class signatures
    double context_strength = 2.0;   // scale of the per-context marker offsets
    std::uint64_t seed = 0;

    std::size_t n_classes() const { return samples_per_class.size(); }
    std::size_t samples() const
    {
        return std::accumulate(samples_per_class.begin(), samples_per_class.end(), std::size_t{0});
    }

    void validate() const
    {
        if (samples_per_class.empty())
            throw ConfigError("synthetic: at least one class is required");
        for (auto n : samples_per_class)
            if (n == 0)
                throw ConfigError("synthetic: every class needs at least one sample");
        if (latent_rank == 0 || gene_count < latent_rank)
            throw ConfigError("synthetic: need 1 <= latent_rank <= gene_count");
        if (!survival_weights.empty() && survival_weights.size() != latent_rank)
            throw ConfigError("synthetic: survival_weights must have latent_rank entries");
        if (!(censoring_fraction >= 0.0 && censoring_fraction < 1.0))
            throw ConfigError("synthetic: censoring_fraction must lie in [0, 1)");
        for (double v : {class_signature_strength, loading_scale, noise, survival_strength})
            if (!(v >= 0.0))
                throw ConfigError("synthetic: strengths and noise must be non-negative");
        if (!(expression_scale > 0.0))
            throw ConfigError("synthetic: expression_scale must be positive");
        if (context_count == 0)
            throw ConfigError("synthetic: context_count must be at least 1");
        if (!(context_strength >= 0.0))
            throw ConfigError("synthetic: context_strength must be non-negative");
    }

    void apply(const KeyValues& values)
    {
        kv::Reader r(values, "synthetic");
        r.read("samples_per_class", samples_per_class);
        r.read("gene_count", gene_count);
        r.read("latent_rank", latent_rank);
        r.read("class_signature_strength", class_signature_strength);
        r.read("loading_scale", loading_scale);
        r.read("noise", noise);
        r.read("survival", survival);
        r.read("survival_strength", survival_strength);
        r.read("survival_weights", survival_weights);
        r.read("censoring_fraction", censoring_fraction);
        r.read("expression_scale", expression_scale);
        r.read("dead_gene_count", dead_gene_count);
        r.read("context_count", context_count);
        r.read("context_strength", context_strength);
        r.read("seed", seed);
        r.finish();
    }
};

struct SyntheticData {
    ExpressionMatrix matrix;
    Tensor latent;                    // [samples x rank]
    Tensor signatures;                // [contexts * classes x genes], row context * classes + class
    Tensor loadings;                  // [rank x genes]
    std::vector<double> weights;      // survival weights
    std::vector<double> true_risk;    // w . latent per sample
    std::vector<std::size_t> classes; // class index per sample
    std::vector<std::size_t> contexts; // hidden context per sample
};

namespace detail {

/// Rate of an exponential censoring time giving the requested expected
/// censored fraction against the given event rates.
inline double censoring_rate(const std::vector<double>& event_rates, double fraction)
{
    if (fraction <= 0.0)
        return 0.0;
    auto censored = [&](double c) {
        double s = 0.0;
        for (double l : event_rates)
            s += c / (c + l);
        return s / static_cast<double>(event_rates.size());
    };
    double lo = -60.0, hi = 60.0; // log rate
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (censored(std::exp(mid)) < fraction ? lo : hi) = mid;
    }
    return std::exp(0.5 * (lo + hi));
}

} // namespace detail

inline SyntheticData generate_synthetic(const SyntheticSpec& spec)
{
    spec.validate();
    Rng rng(spec.seed);
    const std::size_t n = spec.samples(), g = spec.gene_count, k = spec.latent_rank;
    const std::size_t classes = spec.n_classes();

    SyntheticData d;
    const std::size_t contexts = spec.context_count;
    d.signatures = sample_gaussian(rng, {contexts * classes, g}, 0.0, spec.class_signature_strength);
    d.loadings = sample_gaussian(rng, {k, g}, 0.0, spec.loading_scale / std::sqrt(static_cast<double>(k)));
    d.latent = sample_gaussian(rng, {n, k}, 0.0, 1.0);
    if (spec.survival_weights.empty()) {
        d.weights.assign(k, spec.survival_strength / std::sqrt(static_cast<double>(k)));
        for (std::size_t j = 1; j < k; j += 2)
            d.weights[j] = -d.weights[j];
    } else {
        d.weights = spec.survival_weights;
    }

    const Tensor factor = matmul_values(d.latent, d.loadings);
    const Tensor eps = sample_gaussian(rng, {n, g}, 0.0, spec.noise);
    const std::size_t width = g + spec.dead_gene_count;
    Tensor markers;
    if (contexts > 1) {
        markers = sample_gaussian(rng, {contexts, g}, 0.0, spec.context_strength);
        for (std::size_t r = 0; r < n; ++r)
            d.contexts.push_back(rng.uniform_index(contexts));
    } else {
        d.contexts.assign(n, 0);
    }
    Tensor x({n, width});
    std::size_t row = 0;
    for (std::size_t c = 0; c < classes; ++c)
        for (std::size_t i = 0; i < spec.samples_per_class[c]; ++i, ++row) {
            d.classes.push_back(c);
            d.matrix.labels.push_back("type_" + std::to_string(c));
            const std::size_t k_ctx = d.contexts[row];
            for (std::size_t j = 0; j < g; ++j) {
                double logit = d.signatures(k_ctx * classes + c, j) + factor(row, j) + eps(row, j);
                if (contexts > 1)
                    logit += markers(k_ctx, j);
                x(row, j) = spec.expression_scale / (1.0 + std::exp(-logit));
            }
        }
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = g; j < width; ++j)
            x(r, j) = rng.uniform() < 0.9 ? 0.0 : 0.05 * spec.expression_scale * rng.uniform();
    for (std::size_t j = 0; j < width; ++j)
        d.matrix.gene_ids.push_back("gene_" + std::to_string(j));
    d.matrix.values = std::move(x);

    d.true_risk.resize(n);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < k; ++j)
            d.true_risk[r] += d.weights[j] * d.latent(r, j);

    if (spec.survival) {
        std::vector<double> rates(n);
        for (std::size_t r = 0; r < n; ++r)
            rates[r] = std::exp(d.true_risk[r]);
        const double c_rate = detail::censoring_rate(rates, spec.censoring_fraction);
        for (std::size_t r = 0; r < n; ++r) {
            const double t = std::max(rng.exponential(rates[r]), 1e-12);
            const double c = c_rate > 0.0 ? rng.exponential(c_rate) : std::numeric_limits<double>::infinity();
            d.matrix.survival.push_back({std::max(std::min(t, c), 1e-12), t <= c});
        }
    }
    return d;
}

} // namespace genemoe
