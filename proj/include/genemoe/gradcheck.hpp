#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "autodiff.hpp"

namespace genemoe {

/// Scalar expression rebuilt on a fresh tape for every evaluation. It must be
/// deterministic (re-seed any random source inside).
using ScalarExpression = std::function<Var(Tape&)>;

/// Largest |analytic - central difference| / max(1, |analytic|) over every
/// coordinate of every listed parameter.
inline double check_gradients(const ScalarExpression& f, std::span<Parameter* const> params, double epsilon = 1e-6)
{
    if (!(epsilon >= 1e-7 && epsilon <= 1e-3))
        throw ContractError("check_gradients: epsilon must lie in [1e-7, 1e-3]");

    std::vector<Tensor> analytic;
    {
        Tape tape;
        Var loss = f(tape);
        tape.backward(loss, params);
        for (Parameter* p : params)
            analytic.push_back(p->grad);
    }

    auto evaluate = [&] {
        Tape tape;
        return f(tape).item();
    };

    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter& p = *params[k];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double saved = p.value[i];
            p.value[i] = saved + epsilon;
            const double up = evaluate();
            p.value[i] = saved - epsilon;
            const double down = evaluate();
            p.value[i] = saved;
            const double numeric = (up - down) / (2.0 * epsilon);
            const double a = analytic[k][i];
            worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
        }
    }
    return worst;
}

inline double check_gradients(const ScalarExpression& f, std::initializer_list<Parameter*> params,
                              double epsilon = 1e-6)
{
    std::vector<Parameter*> v(params);
    return check_gradients(f, std::span<Parameter* const>(v), epsilon);
}

} // namespace genemoe
