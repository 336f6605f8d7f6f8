#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "autodiff.hpp"

namespace genemoe {

/// Moments and step count of an Adam optimizer, ordered like its parameters.
struct AdamState {
    std::uint64_t step = 0;
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;

    friend bool operator==(const AdamState&, const AdamState&) = default;
};

class Adam {
public:
    Adam(std::vector<Parameter*> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps)
    {
        for (Parameter* p : params_) {
            state_.first_moment.emplace_back(p->value.shape(), 0.0);
            state_.second_moment.emplace_back(p->value.shape(), 0.0);
        }
    }

    std::span<Parameter* const> parameters() const noexcept { return params_; }

    /// One update using the gradients currently stored in the parameters.
    void step(double learning_rate)
    {
        ++state_.step;
        const double t = static_cast<double>(state_.step);
        const double c1 = 1.0 - std::pow(beta1_, t);
        const double c2 = 1.0 - std::pow(beta2_, t);
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Parameter& p = *params_[k];
            Tensor& m = state_.first_moment[k];
            Tensor& v = state_.second_moment[k];
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double g = p.grad[i];
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
                p.value[i] -= learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
            }
        }
    }

    const AdamState& state() const noexcept { return state_; }

    void restore(AdamState state)
    {
        if (state.first_moment.size() != params_.size() || state.second_moment.size() != params_.size())
            throw CheckpointShapeError("optimizer state does not match parameter count");
        for (std::size_t k = 0; k < params_.size(); ++k)
            if (state.first_moment[k].shape() != params_[k]->value.shape() ||
                state.second_moment[k].shape() != params_[k]->value.shape())
                throw CheckpointShapeError("optimizer moment shape mismatch for " + params_[k]->name);
        state_ = std::move(state);
    }

private:
    std::vector<Parameter*> params_;
    double beta1_, beta2_, eps_;
    AdamState state_;
};

} // namespace genemoe
