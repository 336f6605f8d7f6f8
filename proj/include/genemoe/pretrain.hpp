#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "checkpoint.hpp"
#include "config.hpp"
#include "model.hpp"
#include "optim.hpp"

namespace genemoe {

/// x + N(0, sigma^2) noise, unclamped.
inline Tensor augment(const Tensor& x, Rng& rng, double noise_sigma)
{
    Tensor out = x;
    if (noise_sigma == 0.0)
        return out;
    const Tensor z = sample_gaussian(rng, x.shape(), 0.0, noise_sigma);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] += z[i];
    return out;
}

/// Constant until the decay knee, then linear towards 0 at `epochs`.
inline double lr_schedule(std::size_t epoch, const TrainConfig& cfg)
{
    if (epoch >= cfg.epochs)
        throw ContractError("lr_schedule: epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(cfg.epochs) + ")");
    const std::size_t knee = cfg.decay_start();
    if (epoch < knee || knee == cfg.epochs)
        return cfg.learning_rate;
    return cfg.learning_rate * (static_cast<double>(cfg.epochs - epoch) / static_cast<double>(cfg.epochs - knee));
}

struct EpochLog {
    std::size_t epoch = 0;
    double learning_rate = 0.0;
    LossBreakdown loss;                          // mean over batches
    std::vector<std::vector<double>> importance; // per gated layer, per expert, summed over the epoch
    std::vector<double> importance_cv;           // per gated layer
    std::size_t generator_steps = 0;
    std::size_t critic_steps = 0;
    double wall_seconds = 0.0; // not part of the JSON record

    nlohmann::ordered_json to_json() const
    {
        nlohmann::ordered_json j;
        j["epoch"] = epoch;
        j["learning_rate"] = learning_rate;
        j["loss"] = {{"gan_g", loss.gan_g}, {"gan_d", loss.gan_d}, {"gp", loss.gp},
                     {"kl", loss.kl},       {"l1", loss.l1},       {"importance", loss.importance},
                     {"load", loss.load},   {"total", loss.total}};
        j["importance"] = importance;
        j["importance_cv"] = importance_cv;
        j["generator_steps"] = generator_steps;
        j["critic_steps"] = critic_steps;
        return j;
    }
};

struct TrainLog {
    std::vector<EpochLog> epochs;

    /// One JSON object per epoch, newline-delimited.
    std::string to_jsonl() const
    {
        std::string s;
        for (const auto& e : epochs)
            s += e.to_json().dump() + "\n";
        return s;
    }
};

/// Optimizer and random-stream state needed to resume training exactly.
struct TrainState {
    std::size_t next_epoch = 0;
    AdamState generator;
    AdamState critic;
    std::string rng_state;
};

struct PretrainOptions {
    std::optional<TrainState> resume;
    std::function<void(const EpochLog&)> on_epoch; // progress hook
};

struct PretrainResult {
    TrainLog log;
    TrainState state;
};

inline Checkpoint training_checkpoint(GeneMoeModel& model, const TrainState& s)
{
    Checkpoint c = checkpoint_of(model);
    c.optimizers = {{"generator", s.generator}, {"critic", s.critic}};
    c.rng_state = s.rng_state;
    c.epoch = s.next_epoch;
    return c;
}

inline TrainState train_state_of(const Checkpoint& c)
{
    const AdamState* g = c.optimizer("generator");
    const AdamState* d = c.optimizer("critic");
    if (!g || !d)
        throw CheckpointFormatError("checkpoint carries no optimizer state to resume from");
    return {static_cast<std::size_t>(c.epoch), *g, *d, c.rng_state};
}

namespace detail {

inline void check_finite(double v, const char* term, std::size_t epoch)
{
    if (!std::isfinite(v))
        throw NumericError("non-finite " + std::string(term) + " loss at epoch " + std::to_string(epoch));
}

inline void check_finite(const LossBreakdown& p, std::size_t epoch)
{
    check_finite(p.gan_g, "gan_g", epoch);
    check_finite(p.kl, "kl", epoch);
    check_finite(p.l1, "l1", epoch);
    check_finite(p.importance, "importance", epoch);
    check_finite(p.load, "load", epoch);
    check_finite(p.total, "total", epoch);
}

/// Batches of row indices; a trailing single row is dropped.
inline std::vector<std::vector<std::size_t>> batches(std::vector<std::size_t> order, std::size_t batch_size)
{
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        if (end - start >= 2)
            out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

} // namespace detail

/// Alternating WGAN-GP training: per batch, `critic_steps` critic updates on
/// a fixed fake batch, then one generator update on the full objective.
inline PretrainResult pretrain(GeneMoeModel& model, const Tensor& data, const TrainConfig& cfg,
                               const PretrainOptions& options = {})
{
    cfg.validate();
    const GeneMoeConfig& mc = model.config();
    if (data.cols() != mc.input_dim)
        throw ConfigError("training data has " + std::to_string(data.cols()) + " genes, model expects " +
                          std::to_string(mc.input_dim));
    if (cfg.batch_size > data.rows())
        throw ConfigError("batch_size " + std::to_string(cfg.batch_size) + " exceeds the " +
                          std::to_string(data.rows()) + " training rows");

    Adam gen_opt(model.generator_parameters(), cfg.beta1, cfg.beta2);
    Adam critic_opt(model.critic_parameters(), cfg.beta1, cfg.beta2);
    Rng rng(cfg.seed);
    std::size_t first_epoch = 0;
    if (options.resume) {
        gen_opt.restore(options.resume->generator);
        critic_opt.restore(options.resume->critic);
        rng.restore(options.resume->rng_state);
        first_epoch = options.resume->next_epoch;
    }
    const std::vector<Parameter*> gen_params = model.generator_parameters();
    const std::vector<Parameter*> critic_params = model.critic_parameters();

    PretrainResult result;
    auto snapshot = [&](std::size_t next_epoch) {
        return TrainState{next_epoch, gen_opt.state(), critic_opt.state(), rng.state()};
    };

    for (std::size_t epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        const double lr = lr_schedule(epoch, cfg);
        std::vector<std::size_t> order(data.rows());
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order);

        EpochLog log;
        log.epoch = epoch;
        log.learning_rate = lr;
        log.importance.assign(model.gated_layer_count(), {});
        const auto groups = detail::batches(std::move(order), cfg.batch_size);
        for (const auto& rows : groups) {
            const Tensor x = gather_rows(data, rows);
            const Tensor x_hat = augment(x, rng, mc.noise_sigma);
            const Tensor& target = mc.reconstruct_clean ? x : x_hat;

            LossBreakdown parts;
            Tensor fake;
            {
                Tape tape;
                fake = generator_pass(tape, model, x_hat, target, rng, true).recon.value();
            }
            for (std::size_t s = 0; s < cfg.critic_steps; ++s) {
                Tape tape;
                Var objective = critic_pass(tape, model, x_hat, fake, rng, parts);
                detail::check_finite(parts.gan_d, "gan_d", epoch);
                detail::check_finite(parts.gp, "gp", epoch);
                tape.backward(objective, critic_params);
                critic_opt.step(lr);
                ++log.critic_steps;
            }

            Tape tape;
            GeneratorPass g = generator_pass(tape, model, x_hat, target, rng, true);
            detail::check_finite(g.parts, epoch);
            tape.backward(g.objective, gen_params);
            gen_opt.step(lr);
            ++log.generator_steps;

            LossBreakdown& m = log.loss;
            m.gan_g += g.parts.gan_g;
            m.kl += g.parts.kl;
            m.l1 += g.parts.l1;
            m.importance += g.parts.importance;
            m.load += g.parts.load;
            m.total += g.parts.total;
            m.gan_d += parts.gan_d;
            m.gp += parts.gp;
            for (std::size_t layer = 0; layer < g.encoded.gates.size(); ++layer) {
                const Tensor& gates = g.encoded.gates[layer].gates.value();
                auto& acc = log.importance[layer];
                acc.resize(gates.cols(), 0.0);
                for (std::size_t r = 0; r < gates.rows(); ++r)
                    for (std::size_t c = 0; c < gates.cols(); ++c)
                        acc[c] += gates(r, c);
            }
        }
        const double nb = static_cast<double>(groups.size());
        for (double* v : {&log.loss.gan_g, &log.loss.gan_d, &log.loss.gp, &log.loss.kl, &log.loss.l1,
                          &log.loss.importance, &log.loss.load, &log.loss.total})
            *v /= nb;
        for (const auto& imp : log.importance)
            log.importance_cv.push_back(coefficient_of_variation(imp));
        log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

        const bool periodic = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
        if (!cfg.checkpoint_path.empty() && (periodic || epoch + 1 == cfg.epochs))
            save_checkpoint(cfg.checkpoint_path, training_checkpoint(model, snapshot(epoch + 1)));
        if (options.on_epoch)
            options.on_epoch(log);
        result.log.epochs.push_back(std::move(log));
    }
    result.state = snapshot(cfg.epochs);
    return result;
}

} // namespace genemoe
