#pragma once

#include <numeric>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "classification.hpp"
#include "config.hpp"
#include "data.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "pretrain.hpp"
#include "survival.hpp"

namespace genemoe {

/// Linear log-hazard on the latent mean; no bias since the partial
/// likelihood ignores constant shifts.
struct CoxHead {
    CoxHead(std::size_t latent_dim, Rng& rng) : theta("cox.theta", glorot_uniform(rng, latent_dim, 1)) {}

    Var forward(Tape& tape, const Var& latent) const { return matmul(latent, tape.param(theta)); }
    std::vector<Parameter*> parameters() { return {&theta}; }

    Parameter theta; // [latent x 1]
};

struct ClassifierHead {
    ClassifierHead(std::size_t latent_dim, std::size_t classes, double gamma, Rng& rng)
        : layer("classifier", latent_dim, classes, Activation::identity, rng), gamma(gamma)
    {
        if (classes < 2)
            throw ConfigError("classifier needs at least two classes");
    }

    Var forward(Tape& tape, const Var& latent) const { return layer.forward(tape, latent); }
    std::vector<Parameter*> parameters() { return layer.parameters(); }
    std::size_t classes() const noexcept { return layer.output_dim(); }

    DenseLayer layer;
    double gamma;
};

/// Split, then min-max fitted on the training rows only.
struct FoldData {
    ExpressionMatrix train;
    ExpressionMatrix test;
    NormalizationStats stats;
};

inline FoldData split_and_normalize(const ExpressionMatrix& data, std::uint64_t seed)
{
    const SplitIndices s = stratified_split(split_strata(data), seed);
    FoldData f;
    const ExpressionMatrix train = subset(data, s.train);
    f.stats = fit_minmax(train);
    f.train = apply_normalization(train, f.stats);
    f.test = apply_normalization(subset(data, s.test), f.stats);
    return f;
}

namespace detail {

/// Latent mean in evaluation mode plus the optional gate-importance penalty.
struct HeadInput {
    Var latent;
    Var balance;
};

inline HeadInput head_input(Tape& tape, const GeneMoeModel& model, const Tensor& x, double balance_weight)
{
    Rng unused(0);
    EncodeResult e = model.encode(tape, tape.constant(x), unused, false);
    HeadInput in{e.mu, {}};
    if (balance_weight > 0.0 && !e.gates.empty()) {
        Var b = importance_loss(e.gates[0].gates);
        for (std::size_t i = 1; i < e.gates.size(); ++i)
            b = b + importance_loss(e.gates[i].gates);
        in.balance = scale(b, balance_weight);
    }
    return in;
}

inline Var with_penalties(Var loss, const HeadInput& in, std::span<Parameter* const> head, double weight_decay)
{
    if (in.balance.valid())
        loss = loss + in.balance;
    if (weight_decay > 0.0) {
        Tape& tape = *loss.tape();
        for (Parameter* p : head)
            loss = loss + scale(sum(square(tape.param(*p))), weight_decay);
    }
    return loss;
}

inline std::vector<Parameter*> trainable(GeneMoeModel& model, std::vector<Parameter*> head, bool freeze)
{
    if (!freeze) {
        std::vector<Parameter*> ps = model.backbone_parameters();
        ps.insert(ps.end(), head.begin(), head.end());
        return ps;
    }
    return head;
}

inline void check_width(const GeneMoeModel& model, const ExpressionMatrix& data)
{
    if (data.genes() != model.config().input_dim)
        throw ConfigError("data has " + std::to_string(data.genes()) + " genes, backbone expects " +
                          std::to_string(model.config().input_dim));
}

} // namespace detail

// ---------------------------------------------------------------------------
// survival

inline std::vector<double> predict_risk(const GeneMoeModel& model, const CoxHead& head, const Tensor& x)
{
    Tape tape;
    Rng unused(0);
    const Tensor r = head.forward(tape, model.encode(tape, tape.constant(x), unused, false).mu).value();
    return {r.values().begin(), r.values().end()};
}

/// Full-batch Cox training; returns the per-epoch objective.
inline std::vector<double> train_cox(GeneMoeModel& model, CoxHead& head, const Tensor& x,
                                     std::span<const SurvivalOutcome> outcomes, const FinetuneConfig& cfg)
{
    const std::vector<Parameter*> params = detail::trainable(model, head.parameters(), cfg.freeze_backbone);
    Adam opt(params);
    std::vector<double> losses;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Tape tape;
        const detail::HeadInput in = detail::head_input(tape, model, x, cfg.balance_weight);
        Var loss = detail::with_penalties(cox_nll(head.forward(tape, in.latent), outcomes), in, head.parameters(),
                                          cfg.weight_decay);
        if (!std::isfinite(loss.item()))
            throw NumericError("non-finite cox loss at epoch " + std::to_string(epoch));
        tape.backward(loss, params);
        opt.step(cfg.learning_rate);
        losses.push_back(loss.item());
    }
    return losses;
}

struct SurvivalRun {
    std::uint64_t split_seed = 0;
    double train_concordance = 0.0;
    double test_concordance = 0.0;
    std::vector<double> losses;
};

struct SurvivalFit {
    GeneMoeModel model; // from the first repeat
    CoxHead head;
    NormalizationStats stats;
    std::vector<SurvivalRun> runs;
    double mean_test_concordance = 0.0;
};

/// Repeats split -> normalize -> fit with split seeds seed, seed+1, ...
/// `data` must carry survival outcomes and match the backbone's genes.
inline SurvivalFit fit_survival(const GeneMoeModel& backbone, const ExpressionMatrix& data,
                                const FinetuneConfig& cfg)
{
    cfg.validate();
    data.validate();
    if (!data.has_survival())
        throw DataError("survival fitting needs time and event columns");
    detail::check_width(backbone, data);

    std::optional<SurvivalFit> out;
    std::vector<SurvivalRun> runs;
    for (std::size_t r = 0; r < cfg.repeats; ++r) {
        const std::uint64_t seed = cfg.seed + r;
        const FoldData f = split_and_normalize(data, seed);
        GeneMoeModel model = backbone;
        Rng rng(seed);
        CoxHead head(model.config().latent_dim, rng);
        SurvivalRun run;
        run.split_seed = seed;
        run.losses = train_cox(model, head, f.train.values, f.train.survival, cfg);
        run.train_concordance = concordance_index(predict_risk(model, head, f.train.values), f.train.survival);
        run.test_concordance = concordance_index(predict_risk(model, head, f.test.values), f.test.survival);
        runs.push_back(std::move(run));
        if (!out)
            out.emplace(SurvivalFit{std::move(model), std::move(head), f.stats, {}, 0.0});
    }
    out->runs = std::move(runs);
    double total = 0.0;
    for (const auto& run : out->runs)
        total += run.test_concordance;
    out->mean_test_concordance = total / static_cast<double>(out->runs.size());
    return std::move(*out);
}

// ---------------------------------------------------------------------------
// classification

inline Tensor predict_logits(const GeneMoeModel& model, const ClassifierHead& head, const Tensor& x)
{
    Tape tape;
    Rng unused(0);
    return head.forward(tape, model.encode(tape, tape.constant(x), unused, false).mu).value();
}

/// Mini-batch focal-loss training; returns the per-epoch mean loss.
inline std::vector<double> train_classifier(GeneMoeModel& model, ClassifierHead& head, const Tensor& x,
                                            std::span<const std::size_t> labels, const FinetuneConfig& cfg, Rng& rng)
{
    const std::vector<Parameter*> params = detail::trainable(model, head.parameters(), cfg.freeze_backbone);
    Adam opt(params);
    std::vector<double> losses;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(x.rows());
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order);
        double total = 0.0;
        const auto groups = detail::batches(std::move(order), cfg.batch_size);
        for (const auto& rows : groups) {
            std::vector<std::size_t> y;
            y.reserve(rows.size());
            for (std::size_t r : rows)
                y.push_back(labels[r]);
            Tape tape;
            const detail::HeadInput in = detail::head_input(tape, model, gather_rows(x, rows), cfg.balance_weight);
            Var loss = detail::with_penalties(focal_loss(head.forward(tape, in.latent), y, head.gamma), in,
                                              head.parameters(), cfg.weight_decay);
            if (!std::isfinite(loss.item()))
                throw NumericError("non-finite focal loss at epoch " + std::to_string(epoch));
            tape.backward(loss, params);
            opt.step(cfg.learning_rate);
            total += loss.item();
        }
        losses.push_back(total / static_cast<double>(groups.size()));
    }
    return losses;
}

struct ClassificationRun {
    std::uint64_t split_seed = 0;
    MetricsReport metrics; // held-out split
    std::vector<double> losses;
};

struct ClassificationFit {
    GeneMoeModel model; // from the first repeat
    ClassifierHead head;
    NormalizationStats stats;
    std::vector<std::string> classes;
    std::vector<ClassificationRun> runs;
    double mean_accuracy = 0.0;
};

inline MetricsReport evaluate_classifier(const GeneMoeModel& model, const ClassifierHead& head, const Tensor& x,
                                         std::span<const std::size_t> labels)
{
    const std::vector<std::size_t> pred = argmax_rows(predict_logits(model, head, x));
    return metrics_from_confusion(confusion_matrix(labels, pred, head.classes()));
}

/// Stratified repeats as in fit_survival; every class must reach the
/// training split.
inline ClassificationFit fit_classifier(const GeneMoeModel& backbone, const ExpressionMatrix& data,
                                        const FinetuneConfig& cfg)
{
    cfg.validate();
    data.validate();
    if (!data.has_labels())
        throw DataError("classification needs a label column");
    detail::check_width(backbone, data);
    const std::vector<std::string> classes = data.classes();
    if (classes.size() < 2)
        throw StratificationError("classification needs at least two classes, found " +
                                  std::to_string(classes.size()));

    std::optional<ClassificationFit> out;
    std::vector<ClassificationRun> runs;
    for (std::size_t r = 0; r < cfg.repeats; ++r) {
        const std::uint64_t seed = cfg.seed + r;
        const FoldData f = split_and_normalize(data, seed);
        if (f.train.classes() != classes)
            throw StratificationError("a class is missing from the training split");
        const std::vector<std::size_t> y_train = f.train.label_indices(classes);
        const std::vector<std::size_t> y_test = f.test.label_indices(classes);

        GeneMoeModel model = backbone;
        Rng rng(seed);
        ClassifierHead head(model.config().latent_dim, classes.size(), cfg.gamma, rng);
        ClassificationRun run;
        run.split_seed = seed;
        run.losses = train_classifier(model, head, f.train.values, y_train, cfg, rng);
        run.metrics = evaluate_classifier(model, head, f.test.values, y_test);
        runs.push_back(std::move(run));
        if (!out)
            out.emplace(ClassificationFit{std::move(model), std::move(head), f.stats, classes, {}, 0.0});
    }
    out->runs = std::move(runs);
    double total = 0.0;
    for (const auto& run : out->runs)
        total += run.metrics.accuracy_overall;
    out->mean_accuracy = total / static_cast<double>(out->runs.size());
    return std::move(*out);
}

// ---------------------------------------------------------------------------
// persistence of fine-tuned models

/// Backbone plus head tensors; the class list and head kind go in metadata.
inline Checkpoint head_checkpoint(GeneMoeModel& model, std::span<Parameter* const> head, const std::string& kind,
                                  const std::vector<std::string>& classes = {})
{
    Checkpoint c = checkpoint_of(model);
    for (Parameter* p : head)
        c.tensors.emplace_back(p->name, p->value);
    c.metadata["head"] = kind;
    if (!classes.empty()) {
        std::string joined;
        for (const auto& name : classes) {
            if (name.find(',') != std::string::npos)
                throw DataError("class name '" + name + "' contains a comma");
            joined += (joined.empty() ? "" : ",") + name;
        }
        c.metadata["classes"] = joined;
    }
    return c;
}

inline std::string metadata_value(const Checkpoint& c, const std::string& key)
{
    const auto it = c.metadata.find(key);
    return it == c.metadata.end() ? std::string{} : it->second;
}

inline CoxHead cox_head_from(const Checkpoint& c)
{
    Rng unused(0);
    CoxHead head(c.config.latent_dim, unused);
    load_parameters(head.parameters(), c);
    return head;
}

inline ClassifierHead classifier_head_from(const Checkpoint& c, double gamma = 2.0)
{
    const Tensor* w = c.find("classifier.weight");
    if (!w)
        throw CheckpointShapeError("checkpoint has no classifier head");
    Rng unused(0);
    ClassifierHead head(c.config.latent_dim, w->cols(), gamma, unused);
    load_parameters(head.parameters(), c);
    return head;
}

inline std::vector<std::string> checkpoint_classes(const Checkpoint& c)
{
    std::vector<std::string> out;
    std::string s = metadata_value(c, "classes");
    std::size_t start = 0;
    while (!s.empty()) {
        const std::size_t comma = s.find(',', start);
        out.push_back(s.substr(start, comma - start));
        if (comma == std::string::npos)
            break;
        start = comma + 1;
    }
    return out;
}

} // namespace genemoe
