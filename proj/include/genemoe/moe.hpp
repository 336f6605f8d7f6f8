#pragma once

#include <string>
#include <vector>

#include "gating.hpp"
#include "layers.hpp"

namespace genemoe {

struct MoeOutput {
    Var y;
    GateOutput gate;
    std::vector<std::size_t> evaluated_experts;
};

/// Sparsely gated mixture of dense experts: y = sum_i G_i(x) * D_i(x).
class MoeLayer {
public:
    MoeLayer(const std::string& name, std::size_t input_dim, std::size_t output_dim, std::size_t n_experts,
             std::size_t k, Activation activation, Rng& rng)
        : gate(name + ".gate", input_dim, n_experts, k, rng)
    {
        experts.reserve(n_experts);
        for (std::size_t i = 0; i < n_experts; ++i)
            experts.emplace_back(name + ".expert" + std::to_string(i), input_dim, output_dim, activation, rng);
    }

    MoeOutput forward(Tape& tape, const Var& x, Rng* rng, bool training) const
    {
        MoeOutput out;
        out.gate = gate.forward(tape, x, rng, training);
        out.y = combine_experts(
            out.gate.gates, experts.size(), [&](std::size_t j) { return experts[j].forward(tape, x); },
            out.evaluated_experts);
        return out;
    }

    std::size_t input_dim() const noexcept { return gate.input_dim(); }
    std::size_t output_dim() const noexcept { return experts.front().output_dim(); }

    std::vector<Parameter*> parameters()
    {
        std::vector<Parameter*> ps = gate.parameters();
        for (auto& e : experts)
            for (Parameter* p : e.parameters())
                ps.push_back(p);
        return ps;
    }

    NoisyTopKGate gate;
    std::vector<DenseLayer> experts;
};

} // namespace genemoe
