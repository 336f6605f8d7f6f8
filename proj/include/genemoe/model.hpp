#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "config.hpp"
#include "gating.hpp"
#include "layers.hpp"
#include "moae.hpp"
#include "moe.hpp"

namespace genemoe {

/// Wasserstein critic: dense stack ending in a single linear output.
class Critic {
public:
    Critic(std::size_t input_dim, const std::vector<std::size_t>& hidden, Rng& rng)
    {
        std::size_t width = input_dim;
        for (std::size_t i = 0; i < hidden.size(); ++i) {
            layers.emplace_back("critic.layer" + std::to_string(i), width, hidden[i], Activation::relu, rng);
            width = hidden[i];
        }
        layers.emplace_back("critic.out", width, 1, Activation::identity, rng);
    }

    /// Scores [batch x 1].
    Var forward(Tape& tape, const Var& u) const
    {
        Var h = u;
        for (const auto& l : layers)
            h = l.forward(tape, h);
        return h;
    }

    /// d critic(u) / d u per row, [batch x input_dim], recorded on the tape so
    /// it can itself be differentiated w.r.t. the critic weights. ReLU masks
    /// are taken from the forward pass at u and carry no gradient.
    Var input_gradient(Tape& tape, const Tensor& u) const
    {
        std::vector<Tensor> masks;
        Tensor h = u;
        for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
            Tensor pre = matmul_values(h, layers[i].weight.value);
            const Tensor& b = layers[i].bias.value;
            Tensor mask(pre.shape());
            for (std::size_t r = 0; r < pre.rows(); ++r)
                for (std::size_t c = 0; c < pre.cols(); ++c) {
                    double& v = pre(r, c);
                    v += b[c];
                    mask(r, c) = v > 0.0 ? 1.0 : 0.0;
                    v = v > 0.0 ? v : 0.0;
                }
            masks.push_back(std::move(mask));
            h = std::move(pre);
        }
        Var g = matmul(tape.constant(Tensor({u.rows(), 1}, 1.0)), transpose(tape.param(layers.back().weight)));
        for (std::size_t i = layers.size() - 1; i-- > 0;)
            g = matmul(g * tape.constant(masks[i]), transpose(tape.param(layers[i].weight)));
        return g;
    }

    std::vector<Parameter*> parameters()
    {
        std::vector<Parameter*> ps;
        for (auto& l : layers)
            for (Parameter* p : l.parameters())
                ps.push_back(p);
        return ps;
    }

    std::vector<DenseLayer> layers;
};

struct EncodeResult {
    Var backbone;  // output of the gated stack, [batch x hidden_dims.back()]
    Var mu;        // [batch x latent_dim]
    Var log_sigma; // clamped to [-7, 4]
    std::vector<GateOutput> gates;
    std::vector<std::vector<std::size_t>> evaluated_experts;
};

inline constexpr double log_sigma_min = -7.0;
inline constexpr double log_sigma_max = 4.0;

/// Encoder (gated backbone + Gaussian latent heads), dense decoder and critic.
class GeneMoeModel {
public:
    explicit GeneMoeModel(GeneMoeConfig cfg) : config_(validated(std::move(cfg))), rng_(config_.init_seed),
        mu_head(make_head("encoder.mu")), log_sigma_head(make_head("encoder.log_sigma")),
        critic(config_.input_dim, config_.critic_hidden, rng_)
    {
        build_encoder();
        build_decoder();
    }

    const GeneMoeConfig& config() const noexcept { return config_; }

    EncodeResult encode(Tape& tape, const Var& x, Rng& rng, bool training) const
    {
        if (x.cols() != config_.input_dim)
            throw ConfigError("encoder expects " + std::to_string(config_.input_dim) + " genes, got " +
                              shape_string(x.shape()));
        EncodeResult out;
        Var h = x;
        for (const auto& l : dense_stack) {
            h = l.forward(tape, h);
            if (training)
                h = dropout(tape, h, config_.dropout_rate, rng);
        }
        for (const auto& l : moe_stack) {
            MoeOutput m = l.forward(tape, h, &rng, training);
            out.gates.push_back(m.gate);
            out.evaluated_experts.push_back(std::move(m.evaluated_experts));
            h = m.y;
            if (training)
                h = dropout(tape, h, config_.dropout_rate, rng);
        }
        if (moae) {
            MoeOutput m = moae->forward(tape, h, &rng, training);
            out.gates.push_back(m.gate);
            out.evaluated_experts.push_back(std::move(m.evaluated_experts));
            h = m.y;
        }
        out.backbone = h;
        out.mu = mu_head.forward(tape, h);
        out.log_sigma = clamp(log_sigma_head.forward(tape, h), log_sigma_min, log_sigma_max);
        return out;
    }

    /// Reconstruction in [0, 1] per gene.
    Var decode(Tape& tape, const Var& z) const
    {
        Var h = z;
        for (const auto& l : decoder)
            h = l.forward(tape, h);
        return h;
    }

    std::size_t gated_layer_count() const noexcept { return moe_stack.size() + (moae ? 1 : 0); }

    /// Encoder stack plus the latent heads.
    std::vector<Parameter*> backbone_parameters()
    {
        std::vector<Parameter*> ps;
        auto append = [&](std::vector<Parameter*> v) { ps.insert(ps.end(), v.begin(), v.end()); };
        for (auto& l : dense_stack)
            append(l.parameters());
        for (auto& l : moe_stack)
            append(l.parameters());
        if (moae)
            append(moae->parameters());
        append(mu_head.parameters());
        append(log_sigma_head.parameters());
        return ps;
    }

    std::vector<Parameter*> generator_parameters()
    {
        std::vector<Parameter*> ps = backbone_parameters();
        for (auto& l : decoder)
            for (Parameter* p : l.parameters())
                ps.push_back(p);
        return ps;
    }

    std::vector<Parameter*> critic_parameters() { return critic.parameters(); }

    /// Generator then critic parameters; names are unique.
    std::vector<Parameter*> all_parameters()
    {
        std::vector<Parameter*> ps = generator_parameters();
        for (Parameter* p : critic_parameters())
            ps.push_back(p);
        return ps;
    }

    std::vector<DenseLayer> dense_stack;
    std::vector<MoeLayer> moe_stack;
    std::optional<MoaeLayer> moae;

private:
    static GeneMoeConfig validated(GeneMoeConfig c)
    {
        c.validate();
        return c;
    }

    DenseLayer make_head(const std::string& name)
    {
        return DenseLayer(name, config_.hidden_dims.back(), config_.latent_dim, Activation::identity, rng_);
    }

    void build_encoder()
    {
        std::size_t width = config_.input_dim;
        for (std::size_t i = 0; i < config_.hidden_dims.size(); ++i) {
            const std::string name = "encoder.layer" + std::to_string(i);
            const std::size_t out = config_.hidden_dims[i];
            if (config_.encoder == EncoderKind::dense)
                dense_stack.emplace_back(name, width, out, Activation::relu, rng_);
            else
                moe_stack.emplace_back(name, width, out, config_.n_experts, config_.top_k, Activation::relu, rng_);
            width = out;
        }
        if (config_.encoder == EncoderKind::moe_moae)
            moae.emplace("encoder.moae", width, config_.moae_experts, config_.moae_top_k, config_.token_count, rng_);
    }

    void build_decoder()
    {
        std::size_t width = config_.latent_dim;
        const auto& hidden = config_.hidden_dims;
        for (std::size_t i = hidden.size(); i-- > 0;) {
            decoder.emplace_back("decoder.layer" + std::to_string(hidden.size() - 1 - i), width, hidden[i],
                                 Activation::relu, rng_);
            width = hidden[i];
        }
        decoder.emplace_back("decoder.out", width, config_.input_dim, Activation::sigmoid, rng_);
    }

    GeneMoeConfig config_;
    Rng rng_; // initialization only

public:
    DenseLayer mu_head;
    DenseLayer log_sigma_head;
    std::vector<DenseLayer> decoder;
    Critic critic;
};

// ---------------------------------------------------------------------------
// Latent sampling and loss terms

inline constexpr double min_sigma = 1e-6;

/// Training: mu + sigma * eps with sigma = exp(log_sigma) floored at 1e-6.
/// Evaluation: mu.
inline Var reparameterize(Tape& tape, const Var& mu, const Var& log_sigma, Rng& rng, bool training)
{
    if (!training)
        return mu;
    Var sigma = exp(clamp(log_sigma, std::log(min_sigma), 700.0));
    Var eps = tape.constant(sample_gaussian(rng, mu.shape(), 0.0, 1.0));
    return mu + sigma * eps;
}

/// Batch mean of sum over latent dims of mu^2 + sigma^2 - log sigma^2 - 1.
inline Var kl_loss(const Var& mu, const Var& log_sigma)
{
    Var terms = square(mu) + exp(scale(log_sigma, 2.0)) - scale(log_sigma, 2.0) - 1.0;
    return scale(sum(terms), 1.0 / static_cast<double>(mu.rows()));
}

/// Mean absolute difference over every entry.
inline Var l1_recon_loss(const Var& recon, const Var& target)
{
    if (recon.shape() != target.shape())
        throw DimensionError("l1 loss shape mismatch: " + shape_string(recon.shape()) + " vs " +
                             shape_string(target.shape()));
    return mean(abs(recon - target));
}

/// E[(||grad_u D(u)||_2 - 1)^2] at u = t * real + (1 - t) * fake, t ~ U(0, 1)
/// per row.
inline Var gradient_penalty(Tape& tape, const Critic& critic, const Tensor& real, const Tensor& fake, Rng& rng)
{
    if (real.rows() < 2)
        throw ContractError("gradient penalty needs a batch of at least 2 rows");
    if (real.shape() != fake.shape())
        throw DimensionError("gradient penalty: real " + shape_string(real.shape()) + " vs fake " +
                             shape_string(fake.shape()));
    Tensor u(real.shape());
    const std::size_t cols = real.cols();
    for (std::size_t r = 0; r < real.rows(); ++r) {
        const double t = rng.uniform();
        for (std::size_t c = 0; c < cols; ++c)
            u(r, c) = t * real(r, c) + (1.0 - t) * fake(r, c);
    }
    Var g = critic.input_gradient(tape, u);
    Var norm = sqrt(sum_cols(square(g)) + 1e-12);
    return mean(square(norm - 1.0));
}

/// Scalar values of every pre-training loss term.
struct LossBreakdown {
    double gan_g = 0.0;      // -E[D(G(x^))]
    double gan_d = 0.0;      // E[D(G(x^))] - E[D(x^)], minimized by the critic
    double gp = 0.0;         // gradient penalty
    double kl = 0.0;
    double l1 = 0.0;
    double importance = 0.0; // summed over gated layers
    double load = 0.0;       // summed over gated layers
    double total = 0.0;      // generator objective

    /// gan_g + l_kl * kl + l_l1 * l1 + l_balance * (importance + load),
    /// evaluated in the same order as the tape.
    double recompose(const GeneMoeConfig& c) const
    {
        return gan_g + c.lambda_kl * kl + c.lambda_l1 * l1 + c.lambda_balance * (importance + load);
    }

    friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

struct GeneratorPass {
    Var objective;
    Var recon;
    EncodeResult encoded;
    LossBreakdown parts;
};

/// Builds the generator objective on the tape. `target` is what the decoder
/// should reproduce (the augmented input unless reconstruct_clean is set).
inline GeneratorPass generator_pass(Tape& tape, const GeneMoeModel& model, const Tensor& x_hat, const Tensor& target,
                                    Rng& rng, bool training = true)
{
    const GeneMoeConfig& c = model.config();
    GeneratorPass out;
    Var x = tape.constant(x_hat);
    out.encoded = model.encode(tape, x, rng, training);
    Var z = reparameterize(tape, out.encoded.mu, out.encoded.log_sigma, rng, training);
    out.recon = model.decode(tape, z);

    Var gan_g = -mean(model.critic.forward(tape, out.recon));
    Var kl = kl_loss(out.encoded.mu, out.encoded.log_sigma);
    Var l1 = l1_recon_loss(out.recon, tape.constant(target));
    Var importance = tape.constant(Tensor::scalar(0.0));
    Var load = tape.constant(Tensor::scalar(0.0));
    for (const auto& g : out.encoded.gates) {
        importance = importance + importance_loss(g.gates);
        if (g.noisy)
            load = load + load_loss(g);
    }
    out.objective = gan_g + c.lambda_kl * kl + c.lambda_l1 * l1 + c.lambda_balance * (importance + load);

    out.parts.gan_g = gan_g.item();
    out.parts.kl = kl.item();
    out.parts.l1 = l1.item();
    out.parts.importance = importance.item();
    out.parts.load = load.item();
    out.parts.total = out.objective.item();
    return out;
}

/// Critic objective gan_d + lambda_gp * gp (minimized). Fills gan_d and gp.
inline Var critic_pass(Tape& tape, const GeneMoeModel& model, const Tensor& real, const Tensor& fake, Rng& rng,
                       LossBreakdown& parts)
{
    Var d_real = mean(model.critic.forward(tape, tape.constant(real)));
    Var d_fake = mean(model.critic.forward(tape, tape.constant(fake)));
    Var gan_d = d_fake - d_real;
    Var gp = gradient_penalty(tape, model.critic, real, fake, rng);
    parts.gan_d = gan_d.item();
    parts.gp = gp.item();
    return gan_d + model.config().lambda_gp * gp;
}

/// Every loss term for one batch in training mode.
inline LossBreakdown total_loss(const GeneMoeModel& model, const Tensor& x_hat, Rng& rng,
                                const Tensor* clean = nullptr)
{
    Tape tape;
    const Tensor& target = (model.config().reconstruct_clean && clean) ? *clean : x_hat;
    GeneratorPass g = generator_pass(tape, model, x_hat, target, rng, true);
    LossBreakdown parts = g.parts;
    critic_pass(tape, model, x_hat, g.recon.value(), rng, parts);
    return parts;
}

/// Evaluation-mode latent mean for every row of `x`.
inline Tensor encode_mean(const GeneMoeModel& model, const Tensor& x)
{
    Tape tape;
    Rng unused(0);
    return model.encode(tape, tape.constant(x), unused, false).mu.value();
}

/// Evaluation-mode reconstruction (decoder applied to the latent mean).
inline Tensor reconstruct(const GeneMoeModel& model, const Tensor& x)
{
    Tape tape;
    Rng unused(0);
    EncodeResult e = model.encode(tape, tape.constant(x), unused, false);
    return model.decode(tape, e.mu).value();
}

} // namespace genemoe
