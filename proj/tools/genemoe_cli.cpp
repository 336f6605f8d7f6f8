#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "genemoe/genemoe.hpp"

using namespace genemoe;
using ordered_json = nlohmann::ordered_json;

namespace {

enum ExitCode { ok = 0, failure = 1, bad_input = 2, numeric = 3, io = 4 };

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = ".";
    std::string data;
    std::string checkpoint;
    std::string resume;
};

/// Every section a config file may carry, already applied.
struct Settings {
    GeneMoeConfig model;
    TrainConfig training;
    FinetuneConfig finetune;
    SyntheticSpec synthetic;
    FilterSpec filter;
    std::optional<std::size_t> leading_features;
    double correlation_threshold = 0.4;
};

Settings load_settings(const Options& o)
{
    Settings s;
    if (o.config.empty())
        return s;
    for (const auto& [section, values] : read_config_file(o.config)) {
        if (section == "model")
            s.model.apply(values);
        else if (section == "training")
            s.training.apply(values);
        else if (section == "finetune")
            s.finetune.apply(values);
        else if (section == "synthetic")
            s.synthetic.apply(values);
        else if (section == "data")
            s.filter.apply(values);
        else if (section == "analysis") {
            kv::Reader r(values, "analysis");
            r.read("leading_features", s.leading_features);
            r.read("threshold", s.correlation_threshold);
            r.finish();
        } else
            throw ConfigError("unknown config section [" + section + "]");
    }
    if (o.seed) {
        s.training.seed = *o.seed;
        s.finetune.seed = *o.seed;
        s.synthetic.seed = *o.seed;
    }
    return s;
}

void require_file(const std::string& path, const char* what)
{
    if (path.empty())
        throw ConfigError(std::string("--") + what + " is required");
    if (!std::filesystem::is_regular_file(path))
        throw IoError(std::string(what) + " file not found: " + path);
}

std::string out_path(const Options& o, const std::string& name)
{
    std::error_code ec;
    std::filesystem::create_directories(o.out, ec);
    if (ec)
        throw IoError("cannot create output directory " + o.out + ": " + ec.message());
    return (std::filesystem::path(o.out) / name).string();
}

void write_json(const std::string& path, const ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

// normalization stats travel inside checkpoints under a "norm." prefix

void store_stats(Checkpoint& c, const NormalizationStats& s)
{
    for (const auto& [k, v] : s.to_key_values())
        c.metadata["norm." + k] = v;
}

std::optional<NormalizationStats> stored_stats(const Checkpoint& c)
{
    KeyValues kvs;
    for (const auto& [k, v] : c.metadata)
        if (k.rfind("norm.", 0) == 0)
            kvs[k.substr(5)] = v;
    if (kvs.empty())
        return std::nullopt;
    return NormalizationStats::from_key_values(kvs);
}

/// Columns of `m` in the order of `genes`; every gene must be present.
ExpressionMatrix select_genes(const ExpressionMatrix& m, const std::vector<std::string>& genes)
{
    std::map<std::string, std::size_t> where;
    for (std::size_t j = 0; j < m.gene_ids.size(); ++j)
        where[m.gene_ids[j]] = j;
    ExpressionMatrix out = m;
    out.gene_ids = genes;
    out.values = Tensor({m.samples(), genes.size()});
    for (std::size_t k = 0; k < genes.size(); ++k) {
        auto it = where.find(genes[k]);
        if (it == where.end())
            throw DataError("data lacks gene '" + genes[k] + "' required by the checkpoint");
        for (std::size_t r = 0; r < m.samples(); ++r)
            out.values(r, k) = m.values(r, it->second);
    }
    return out;
}

/// Backbone from a checkpoint (genes chosen to match it) or a fresh model
/// sized to the filtered data.
struct Backbone {
    GeneMoeModel model;
    ExpressionMatrix data; // raw values, columns aligned with the model
};

Backbone backbone_for(const Options& o, const Settings& s, const ExpressionMatrix& raw)
{
    if (!o.checkpoint.empty()) {
        require_file(o.checkpoint, "checkpoint");
        const Checkpoint c = load_checkpoint(o.checkpoint);
        const auto stats = stored_stats(c);
        if (!stats)
            throw CheckpointFormatError("checkpoint " + o.checkpoint + " carries no gene list");
        return {model_from_checkpoint(c), select_genes(raw, stats->gene_ids)};
    }
    ExpressionMatrix data = filter_genes(raw, s.filter);
    GeneMoeConfig cfg = s.model;
    cfg.input_dim = data.genes();
    return {GeneMoeModel(cfg), std::move(data)};
}

std::string km_csv(const std::vector<std::pair<std::string, std::vector<KmPoint>>>& groups)
{
    std::string s = "group,time,survival,at_risk\n";
    for (const auto& [name, curve] : groups)
        for (const auto& p : curve)
            s += name + "," + kv::format(p.time) + "," + kv::format(p.survival) + "," + std::to_string(p.at_risk) +
                 "\n";
    return s;
}

/// Mean-threshold risk groups, their KM curves and the log-rank test.
ordered_json risk_groups(const std::vector<double>& risks, const std::vector<SurvivalOutcome>& outcomes,
                         const Options& o, const std::string& prefix)
{
    const RiskSplit split = risk_split(risks);
    ordered_json j;
    j["threshold"] = split.threshold;
    j["high_count"] = split.high.size();
    j["low_count"] = split.low.size();
    j["degenerate"] = split.degenerate;
    const auto high = select(outcomes, split.high), low = select(outcomes, split.low);
    std::vector<std::pair<std::string, std::vector<KmPoint>>> curves;
    if (!high.empty())
        curves.emplace_back("high", km_curve(high));
    if (!low.empty())
        curves.emplace_back("low", km_curve(low));
    write_text(out_path(o, prefix + "km.csv"), km_csv(curves));
    try {
        const LogRankResult lr = logrank_test(high, low);
        j["logrank"] = {{"chi_square", lr.chi_square}, {"p_value", lr.p_value}};
    } catch (const Error& e) {
        j["logrank"] = nullptr;
        j["logrank_unavailable"] = e.what();
    }
    return j;
}

// ---------------------------------------------------------------------------
// subcommands

void run_synth(const Options& o, const Settings& s)
{
    const SyntheticData d = generate_synthetic(s.synthetic);
    save_tsv(out_path(o, "data.tsv"), d.matrix);
    std::string truth = "sample,class,context,true_risk\n";
    for (std::size_t i = 0; i < d.classes.size(); ++i)
        truth += std::to_string(i) + "," + std::to_string(d.classes[i]) + "," + std::to_string(d.contexts[i]) + "," +
                 kv::format(d.true_risk[i]) + "\n";
    write_text(out_path(o, "truth.csv"), truth);
    std::cout << "wrote " << d.matrix.samples() << " x " << d.matrix.genes() << " matrix to " << o.out << "\n";
}

void run_pretrain(const Options& o, const Settings& s)
{
    require_file(o.data, "data");
    const PreparedData prep = prepare(load_tsv(o.data), s.filter, s.training.seed);
    GeneMoeConfig cfg = s.model;
    cfg.input_dim = prep.train.genes();
    TrainConfig t = s.training;
    t.checkpoint_path = out_path(o, "model.ckpt");

    PretrainOptions options;
    std::optional<GeneMoeModel> model;
    if (!o.resume.empty()) {
        require_file(o.resume, "resume");
        const Checkpoint c = load_checkpoint(o.resume);
        model.emplace(model_from_checkpoint(c));
        if (model->config().input_dim != cfg.input_dim)
            throw ConfigError("resume checkpoint expects " + std::to_string(model->config().input_dim) +
                              " genes, prepared data has " + std::to_string(cfg.input_dim));
        options.resume = train_state_of(c);
    } else {
        model.emplace(cfg);
    }
    options.on_epoch = [](const EpochLog& e) {
        std::cerr << "epoch " << e.epoch << " l1 " << e.loss.l1 << " kl " << e.loss.kl << " ("
                  << e.wall_seconds << "s)\n";
    };
    const PretrainResult r = pretrain(*model, prep.train.values, t, options);

    Checkpoint c = training_checkpoint(*model, r.state);
    store_stats(c, prep.stats);
    save_checkpoint(t.checkpoint_path, c);
    write_text(out_path(o, "train_log.jsonl"), r.log.to_jsonl());
    write_text(out_path(o, "normalization.txt"), kv::to_text(prep.stats.to_key_values()));

    ordered_json j;
    j["genes"] = prep.train.genes();
    j["dropped_genes"] = prep.train.dropped_genes.size();
    j["train_samples"] = prep.train.samples();
    j["test_samples"] = prep.test.samples();
    j["leak_free"] = prep.leak_free;
    j["epochs"] = t.epochs;
    if (!r.log.epochs.empty()) {
        j["first_epoch_l1"] = r.log.epochs.front().loss.l1;
        j["final_epoch_l1"] = r.log.epochs.back().loss.l1;
    }
    j["test_reconstruction_mae"] = reconstructions(*model, prep.test).mean_abs_error();
    write_json(out_path(o, "pretrain.json"), j);
}

void run_survival(const Options& o, const Settings& s)
{
    require_file(o.data, "data");
    Backbone b = backbone_for(o, s, load_tsv(o.data));
    SurvivalFit fit = fit_survival(b.model, b.data, s.finetune);

    const FoldData fold = split_and_normalize(b.data, s.finetune.seed);
    ordered_json j = to_json(fit);
    j["first_split_groups"] = risk_groups(predict_risk(fit.model, fit.head, fold.test.values), fold.test.survival, o, "");
    write_json(out_path(o, "survival.json"), j);

    Checkpoint c = head_checkpoint(fit.model, fit.head.parameters(), "cox");
    store_stats(c, fit.stats);
    save_checkpoint(out_path(o, "survival.ckpt"), c);
}

void run_classify(const Options& o, const Settings& s)
{
    require_file(o.data, "data");
    Backbone b = backbone_for(o, s, load_tsv(o.data));
    ClassificationFit fit = fit_classifier(b.model, b.data, s.finetune);
    write_json(out_path(o, "classification.json"), to_json(fit));

    Checkpoint c = head_checkpoint(fit.model, fit.head.parameters(), "classifier", fit.classes);
    store_stats(c, fit.stats);
    save_checkpoint(out_path(o, "classifier.ckpt"), c);
}

/// Normalized data aligned with a checkpoint; stats from the checkpoint
/// when present, otherwise fitted on the data itself.
ExpressionMatrix aligned_data(const Checkpoint& c, const ExpressionMatrix& raw, const Settings& s)
{
    if (const auto stats = stored_stats(c))
        return apply_normalization(select_genes(raw, stats->gene_ids), *stats);
    ExpressionMatrix data = filter_genes(raw, s.filter);
    return apply_normalization(data, fit_minmax(data));
}

void run_eval(const Options& o, const Settings& s)
{
    require_file(o.checkpoint, "checkpoint");
    require_file(o.data, "data");
    const Checkpoint c = load_checkpoint(o.checkpoint);
    const ExpressionMatrix data = aligned_data(c, load_tsv(o.data), s);
    const GeneMoeModel model = model_from_checkpoint(c);
    const std::string kind = metadata_value(c, "head");
    ordered_json j;
    j["head"] = kind;
    j["samples"] = data.samples();
    if (kind == "classifier") {
        if (!data.has_labels())
            throw DataError("evaluating a classifier needs a label column");
        const ClassifierHead head = classifier_head_from(c, s.finetune.gamma);
        const std::vector<std::string> classes = checkpoint_classes(c);
        j["classes"] = classes;
        j["metrics"] = to_json(evaluate_classifier(model, head, data.values, data.label_indices(classes)));
        const std::vector<std::size_t> pred = argmax_rows(predict_logits(model, head, data.values));
        std::string csv = "sample,label,predicted\n";
        for (std::size_t i = 0; i < pred.size(); ++i)
            csv += std::to_string(i) + "," + data.labels[i] + "," + classes[pred[i]] + "\n";
        write_text(out_path(o, "predictions.csv"), csv);
    } else if (kind == "cox") {
        if (!data.has_survival())
            throw DataError("evaluating a Cox head needs time and event columns");
        const std::vector<double> risks = predict_risk(model, cox_head_from(c), data.values);
        j["concordance"] = concordance_index(risks, data.survival);
        j["groups"] = risk_groups(risks, data.survival, o, "eval_");
        std::string csv = "sample,risk\n";
        for (std::size_t i = 0; i < risks.size(); ++i)
            csv += std::to_string(i) + "," + kv::format(risks[i]) + "\n";
        write_text(out_path(o, "predictions.csv"), csv);
    } else {
        throw ConfigError("checkpoint " + o.checkpoint + " has no fine-tuned head; run survival or classify first");
    }
    write_json(out_path(o, "eval.json"), j);
}

void run_analyze(const Options& o, const Settings& s)
{
    require_file(o.checkpoint, "checkpoint");
    require_file(o.data, "data");
    const Checkpoint c = load_checkpoint(o.checkpoint);
    const ExpressionMatrix data = aligned_data(c, load_tsv(o.data), s);
    const GeneMoeModel model = model_from_checkpoint(c);
    const std::size_t v = s.leading_features.value_or(std::min<std::size_t>(20, model.config().latent_dim));

    const CorrelationReport rep = correlation_report(model, data, v, s.correlation_threshold);
    write_text(out_path(o, "correlation.csv"), rep.to_csv());
    write_json(out_path(o, "correlation.json"), rep.to_json());
    for (const auto& w : rep.warnings)
        std::cerr << "warning: " << w << "\n";

    const Reconstructions r = export_reconstructions(model, data, o.out);
    std::vector<std::string> names;
    for (std::size_t k = 0; k < model.config().latent_dim; ++k)
        names.push_back("z" + std::to_string(k));
    write_text(out_path(o, "latent.csv"), matrix_csv(names, encode_mean(model, data.values)));

    ordered_json j;
    j["samples"] = data.samples();
    j["genes"] = data.genes();
    j["reconstruction_mae"] = r.mean_abs_error();
    j["strong_gene_count"] = rep.strong_genes.size();
    write_json(out_path(o, "analyze.json"), j);
}

void run_ablate(const Options& o, const Settings& s)
{
    require_file(o.data, "data");
    const ExpressionMatrix data = filter_genes(load_tsv(o.data), s.filter);
    const AblationTable table = ablate(data, s.model, s.training, s.finetune);
    write_json(out_path(o, "ablation.json"), table.to_json());
}

int guarded(const std::function<void()>& body)
{
    try {
        body();
        return ok;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return numeric;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return io;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return bad_input;
    } catch (const std::exception& e) {
        std::cerr << "unexpected failure: " << e.what() << "\n";
        return failure;
    }
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Gene-MOE: sparse mixture-of-experts models for gene-expression data"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "INI config with [model], [training], [finetune], [synthetic], "
                                              "[data] and [analysis] sections");
        sub->add_option("--seed", o.seed, "overrides every seed in the config");
        sub->add_option("--out", o.out, "output directory")->capture_default_str();
    };
    struct Command {
        const char* name;
        const char* help;
        void (*run)(const Options&, const Settings&);
        bool data;
        bool checkpoint;
    };
    const Command commands[] = {
        {"synth", "generate a synthetic expression matrix", run_synth, false, false},
        {"pretrain", "adversarial pre-training of the backbone", run_pretrain, true, false},
        {"survival", "fit a Cox head and report concordance", run_survival, true, true},
        {"classify", "fit a classification head with focal loss", run_classify, true, true},
        {"eval", "evaluate a fine-tuned checkpoint on a dataset", run_eval, true, true},
        {"analyze", "latent/gene correlations and reconstruction export", run_analyze, true, true},
        {"ablate", "dense / moe / moe_moae / pre-trained comparison", run_ablate, true, false},
    };
    std::vector<std::pair<CLI::App*, const Command*>> subs;
    for (const Command& c : commands) {
        CLI::App* sub = app.add_subcommand(c.name, c.help);
        common(sub);
        if (c.data)
            sub->add_option("--data", o.data, "expression TSV (gene columns plus label / time / event)");
        if (c.checkpoint)
            sub->add_option("--checkpoint", o.checkpoint, "model checkpoint");
        if (std::string(c.name) == "pretrain")
            sub->add_option("--resume", o.resume, "continue from a training checkpoint");
        subs.emplace_back(sub, &c);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return bad_input;
    }

    for (const auto& [sub, command] : subs)
        if (sub->parsed())
            return guarded([&] { command->run(o, load_settings(o)); });
    return failure;
}
