#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gating.hpp"
#include "layers.hpp"
#include "moe.hpp"

namespace genemoe {

/// Residual single-head self-attention over a flat feature vector.
///
/// Each row of width d_model is split into `tokens` contiguous tokens of
/// width d_model / tokens. Output = x + flatten(softmax(Q K^T / sqrt(d_t)) V Wo).
class AttentionExpert {
public:
    AttentionExpert(const std::string& name, std::size_t model_dim, std::size_t tokens, Rng& rng)
        : tokens(tokens), token_dim(validated_token_dim(model_dim, tokens)),
          wq(name + ".wq", init(rng)), wk(name + ".wk", init(rng)), wv(name + ".wv", init(rng)),
          wo(name + ".wo", init(rng))
    {
    }

    std::size_t model_dim() const noexcept { return tokens * token_dim; }

    Var forward(Tape& tape, const Var& x) const
    {
        if (x.cols() != model_dim())
            throw DimensionError("attention expert expects width " + std::to_string(model_dim()) + ", got " +
                                 shape_string(x.shape()));
        const std::size_t batch = x.rows();
        Var probs = attention(tape, x);
        Var tok = reshape(x, {batch * tokens, token_dim});
        Var v = matmul(tok, tape.param(wv));
        Var mixed = matmul(block_matmul(probs, v, tokens, false), tape.param(wo));
        return x + reshape(mixed, {batch, model_dim()});
    }

    /// Attention weights [batch * tokens x tokens]; each row sums to one.
    Var attention(Tape& tape, const Var& x) const
    {
        const std::size_t batch = x.rows();
        Var tok = reshape(x, {batch * tokens, token_dim});
        Var q = matmul(tok, tape.param(wq));
        Var k = matmul(tok, tape.param(wk));
        Var scores = scale(block_matmul(q, k, tokens, true), 1.0 / std::sqrt(static_cast<double>(token_dim)));
        return softmax_rows(scores);
    }

    std::vector<Parameter*> parameters() { return {&wq, &wk, &wv, &wo}; }

    std::size_t tokens;
    std::size_t token_dim;
    Parameter wq, wk, wv, wo;

private:
    static std::size_t validated_token_dim(std::size_t model_dim, std::size_t tokens)
    {
        if (tokens == 0 || model_dim % tokens != 0)
            throw ConfigError("attention width " + std::to_string(model_dim) + " is not divisible by token count " +
                              std::to_string(tokens));
        return model_dim / tokens;
    }

    Tensor init(Rng& rng) const { return glorot_uniform(rng, token_dim, token_dim); }
};

/// Mixture of attention experts under a noisy top-k gate.
class MoaeLayer {
public:
    MoaeLayer(const std::string& name, std::size_t model_dim, std::size_t n_experts, std::size_t k,
              std::size_t tokens, Rng& rng)
        : gate(name + ".gate", model_dim, n_experts, k, rng)
    {
        experts.reserve(n_experts);
        for (std::size_t i = 0; i < n_experts; ++i)
            experts.emplace_back(name + ".expert" + std::to_string(i), model_dim, tokens, rng);
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

    std::size_t model_dim() const noexcept { return gate.input_dim(); }

    std::vector<Parameter*> parameters()
    {
        std::vector<Parameter*> ps = gate.parameters();
        for (auto& e : experts)
            for (Parameter* p : e.parameters())
                ps.push_back(p);
        return ps;
    }

    NoisyTopKGate gate;
    std::vector<AttentionExpert> experts;
};

} // namespace genemoe
