#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"

namespace genemoe {

/// Follow-up time and whether the event was observed (false = censored).
struct SurvivalOutcome {
    double time = 0.0;
    bool event = false;

    friend bool operator==(const SurvivalOutcome&, const SurvivalOutcome&) = default;
};

namespace detail {

inline void check_outcomes(std::span<const SurvivalOutcome> outcomes)
{
    for (const auto& o : outcomes)
        if (!(o.time > 0.0) || !std::isfinite(o.time))
            throw DomainError("survival times must be positive and finite");
}

inline std::vector<std::size_t> order_by_time(std::span<const SurvivalOutcome> outcomes)
{
    std::vector<std::size_t> idx(outcomes.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return outcomes[a].time < outcomes[b].time; });
    return idx;
}

} // namespace detail

/// Negative log partial likelihood, averaged over events, Breslow ties:
/// -(1/E) sum_{events i} [r_i - log sum_{t_j >= t_i} exp(r_j)].
inline Var cox_nll(const Var& risks, std::span<const SurvivalOutcome> outcomes)
{
    const Tensor& r = risks.value();
    const std::size_t n = r.size();
    if (n != outcomes.size())
        throw DimensionError("cox_nll: " + std::to_string(n) + " risks for " + std::to_string(outcomes.size()) +
                             " outcomes");
    if (n < 2)
        throw ContractError("cox_nll needs at least two samples");
    detail::check_outcomes(outcomes);
    std::size_t events = 0;
    for (const auto& o : outcomes)
        events += o.event;
    if (events == 0)
        throw ContractError("cox_nll needs at least one observed event");

    const double shift = *std::max_element(r.values().begin(), r.values().end());
    const std::vector<std::size_t> order = detail::order_by_time(outcomes);

    // group[k] = index of the distinct-time group of order[k]
    std::vector<std::size_t> group_start;
    for (std::size_t k = 0; k < n; ++k)
        if (k == 0 || outcomes[order[k]].time != outcomes[order[k - 1]].time)
            group_start.push_back(k);
    const std::size_t groups = group_start.size();
    group_start.push_back(n);

    // risk-set sums of exp(r - shift), one per group (everything at or after it)
    std::vector<double> risk_sum(groups);
    std::vector<std::size_t> group_events(groups, 0);
    double acc = 0.0;
    for (std::size_t g = groups; g-- > 0;) {
        for (std::size_t k = group_start[g]; k < group_start[g + 1]; ++k) {
            acc += std::exp(r[order[k]] - shift);
            group_events[g] += outcomes[order[k]].event;
        }
        risk_sum[g] = acc;
    }

    double loss = 0.0;
    for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t k = group_start[g]; k < group_start[g + 1]; ++k)
            if (outcomes[order[k]].event)
                loss -= r[order[k]] - shift - std::log(risk_sum[g]);
    const double inv_events = 1.0 / static_cast<double>(events);
    loss *= inv_events;

    // hazard[k]: sum over event groups at or before the sample's time of d_g / S_g
    std::vector<double> hazard(n);
    double cum = 0.0;
    for (std::size_t g = 0; g < groups; ++g) {
        cum += static_cast<double>(group_events[g]) / risk_sum[g];
        for (std::size_t k = group_start[g]; k < group_start[g + 1]; ++k)
            hazard[order[k]] = cum;
    }

    std::vector<bool> event(n);
    for (std::size_t i = 0; i < n; ++i)
        event[i] = outcomes[i].event;
    const std::size_t ir = risks.id();
    return risks.tape()->record(Tensor::scalar(loss), {risks},
                                [ir, shift, inv_events, hazard = std::move(hazard),
                                 event = std::move(event)](Tape& tp, std::size_t self) {
                                    const double g = tp.grad(self).item();
                                    const Tensor& rv = tp.value(ir);
                                    Tensor& gr = tp.grad(ir);
                                    for (std::size_t i = 0; i < gr.size(); ++i) {
                                        const double d = std::exp(rv[i] - shift) * hazard[i] - (event[i] ? 1.0 : 0.0);
                                        gr[i] += g * inv_events * d;
                                    }
                                });
}

/// Pair counts behind Harrell's concordance index.
struct ConcordanceCounts {
    std::uint64_t concordant = 0;
    std::uint64_t tied_risk = 0;
    std::uint64_t admissible = 0;

    double value() const
    {
        if (admissible == 0)
            throw UndefinedStatisticError("concordance index has no admissible pairs");
        return (static_cast<double>(concordant) + 0.5 * static_cast<double>(tied_risk)) /
               static_cast<double>(admissible);
    }
};

namespace detail {

class Fenwick {
public:
    explicit Fenwick(std::size_t n) : tree_(n + 1, 0) {}
    void add(std::size_t i)
    {
        for (++i; i < tree_.size(); i += i & (~i + 1))
            ++tree_[i];
    }
    // count of inserted positions < i
    std::uint64_t prefix(std::size_t i) const
    {
        std::uint64_t s = 0;
        for (; i > 0; i -= i & (~i + 1))
            s += tree_[i];
        return s;
    }

private:
    std::vector<std::uint64_t> tree_;
};

} // namespace detail

/// Admissible pairs: t_i < t_j with an event at i, or t_i = t_j with an event
/// at i only. Concordant when risk_i > risk_j; equal risks count one half.
inline ConcordanceCounts concordance_counts(std::span<const double> risks, std::span<const SurvivalOutcome> outcomes)
{
    const std::size_t n = risks.size();
    if (n != outcomes.size())
        throw DimensionError("concordance: risk and outcome counts differ");
    if (n < 2)
        throw ContractError("concordance needs at least two samples");
    detail::check_outcomes(outcomes);

    std::vector<double> sorted(risks.begin(), risks.end());
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    auto rank = [&](double v) {
        return static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), v) - sorted.begin());
    };

    const std::vector<std::size_t> order = detail::order_by_time(outcomes);
    detail::Fenwick later(sorted.size());
    std::uint64_t later_count = 0;
    ConcordanceCounts c;

    std::size_t end = n;
    while (end > 0) {
        std::size_t begin = end - 1;
        while (begin > 0 && outcomes[order[begin - 1]].time == outcomes[order[end - 1]].time)
            --begin;

        std::vector<double> censored_here;
        for (std::size_t k = begin; k < end; ++k)
            if (!outcomes[order[k]].event)
                censored_here.push_back(risks[order[k]]);
        std::sort(censored_here.begin(), censored_here.end());

        for (std::size_t k = begin; k < end; ++k) {
            const std::size_t i = order[k];
            if (!outcomes[i].event)
                continue;
            const std::size_t ri = rank(risks[i]);
            const std::uint64_t below = later.prefix(ri);
            const std::uint64_t equal = later.prefix(ri + 1) - below;
            c.concordant += below;
            c.tied_risk += equal;
            c.admissible += later_count;

            const auto lo = std::lower_bound(censored_here.begin(), censored_here.end(), risks[i]);
            const auto hi = std::upper_bound(censored_here.begin(), censored_here.end(), risks[i]);
            c.concordant += static_cast<std::uint64_t>(lo - censored_here.begin());
            c.tied_risk += static_cast<std::uint64_t>(hi - lo);
            c.admissible += censored_here.size();
        }
        for (std::size_t k = begin; k < end; ++k) {
            later.add(rank(risks[order[k]]));
            ++later_count;
        }
        end = begin;
    }
    return c;
}

inline double concordance_index(std::span<const double> risks, std::span<const SurvivalOutcome> outcomes)
{
    return concordance_counts(risks, outcomes).value();
}

struct KmPoint {
    double time;
    double survival;
    std::size_t at_risk;
};

/// Product-limit estimate, starting at (0, 1). One step per distinct event time.
inline std::vector<KmPoint> km_curve(std::span<const SurvivalOutcome> outcomes)
{
    if (outcomes.empty())
        throw ContractError("km_curve needs at least one record");
    detail::check_outcomes(outcomes);
    const std::vector<std::size_t> order = detail::order_by_time(outcomes);
    std::vector<KmPoint> curve{{0.0, 1.0, outcomes.size()}};
    double s = 1.0;
    std::size_t k = 0;
    while (k < order.size()) {
        const double t = outcomes[order[k]].time;
        const std::size_t at_risk = order.size() - k;
        std::size_t deaths = 0;
        for (; k < order.size() && outcomes[order[k]].time == t; ++k)
            deaths += outcomes[order[k]].event;
        if (deaths == 0)
            continue;
        s *= 1.0 - static_cast<double>(deaths) / static_cast<double>(at_risk);
        curve.push_back({t, s, at_risk});
    }
    return curve;
}

struct LogRankResult {
    double chi_square;
    double p_value;
};

/// Upper tail of the chi-square distribution with one degree of freedom.
inline double chi_square1_sf(double x)
{
    if (x < 0.0)
        throw DomainError("chi-square statistic must be non-negative");
    return std::erfc(std::sqrt(x / 2.0));
}

/// Two-group log-rank test against the hypergeometric expectation at every
/// distinct event time.
inline LogRankResult logrank_test(std::span<const SurvivalOutcome> a, std::span<const SurvivalOutcome> b)
{
    if (a.empty() || b.empty())
        throw ContractError("logrank_test needs two non-empty groups");
    detail::check_outcomes(a);
    detail::check_outcomes(b);

    std::vector<std::pair<SurvivalOutcome, bool>> pooled; // (outcome, in group a)
    for (const auto& o : a)
        pooled.emplace_back(o, true);
    for (const auto& o : b)
        pooled.emplace_back(o, false);
    std::stable_sort(pooled.begin(), pooled.end(),
                     [](const auto& x, const auto& y) { return x.first.time < y.first.time; });

    double at_risk = static_cast<double>(pooled.size());
    double at_risk_a = static_cast<double>(a.size());
    double observed = 0.0, expected = 0.0, variance = 0.0;
    std::size_t total_events = 0;
    std::size_t k = 0;
    while (k < pooled.size()) {
        const double t = pooled[k].first.time;
        double d = 0.0, d_a = 0.0, leaving = 0.0, leaving_a = 0.0;
        for (; k < pooled.size() && pooled[k].first.time == t; ++k) {
            const bool in_a = pooled[k].second;
            leaving += 1.0;
            leaving_a += in_a;
            if (pooled[k].first.event) {
                d += 1.0;
                d_a += in_a;
            }
        }
        if (d > 0.0) {
            total_events += static_cast<std::size_t>(d);
            observed += d_a;
            expected += d * at_risk_a / at_risk;
            if (at_risk > 1.0)
                variance += d * (at_risk_a / at_risk) * (1.0 - at_risk_a / at_risk) * (at_risk - d) / (at_risk - 1.0);
        }
        at_risk -= leaving;
        at_risk_a -= leaving_a;
    }
    if (total_events == 0)
        throw ContractError("logrank_test needs at least one event");
    if (!(variance > 0.0))
        throw UndefinedStatisticError("log-rank variance is zero");
    const double chi = (observed - expected) * (observed - expected) / variance;
    return {chi, chi_square1_sf(chi)};
}

struct RiskSplit {
    std::vector<std::size_t> high;
    std::vector<std::size_t> low;
    double threshold = 0.0;
    bool degenerate = false; // one group is empty
};

/// High risk: strictly above the mean risk.
inline RiskSplit risk_split(std::span<const double> risks)
{
    if (risks.size() < 2)
        throw ContractError("risk_split needs at least two samples");
    RiskSplit s;
    s.threshold = std::accumulate(risks.begin(), risks.end(), 0.0) / static_cast<double>(risks.size());
    for (std::size_t i = 0; i < risks.size(); ++i)
        (risks[i] > s.threshold ? s.high : s.low).push_back(i);
    s.degenerate = s.high.empty() || s.low.empty();
    return s;
}

/// Outcomes of the given rows.
inline std::vector<SurvivalOutcome> select(std::span<const SurvivalOutcome> outcomes,
                                           std::span<const std::size_t> rows)
{
    std::vector<SurvivalOutcome> out;
    out.reserve(rows.size());
    for (std::size_t r : rows)
        out.push_back(outcomes[r]);
    return out;
}

} // namespace genemoe
