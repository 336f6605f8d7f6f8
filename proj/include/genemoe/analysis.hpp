#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "finetune.hpp"
#include "pretrain.hpp"

namespace genemoe {

// ---------------------------------------------------------------------------
// latent feature analysis

/// Unbiased variance of every column.
inline std::vector<double> column_variances(const Tensor& m)
{
    if (m.rows() < 2)
        throw ContractError("column variance needs at least two rows");
    std::vector<double> out(m.cols());
    for (std::size_t j = 0; j < m.cols(); ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < m.rows(); ++i)
            mean += m(i, j);
        mean /= static_cast<double>(m.rows());
        double ss = 0.0;
        for (std::size_t i = 0; i < m.rows(); ++i)
            ss += (m(i, j) - mean) * (m(i, j) - mean);
        out[j] = ss / static_cast<double>(m.rows() - 1);
    }
    return out;
}

/// Columns with the v largest variances, largest first, ties to the lower index.
inline std::vector<std::size_t> leading_features(const Tensor& latents, std::size_t v = 20)
{
    if (v > latents.cols())
        throw ContractError("leading_features: asked for " + std::to_string(v) + " of " +
                            std::to_string(latents.cols()) + " latent features");
    const std::vector<double> var = column_variances(latents);
    std::vector<std::size_t> idx(var.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return var[a] > var[b]; });
    idx.resize(v);
    return idx;
}

inline double pearson(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size())
        throw DimensionError("pearson: vectors of length " + std::to_string(a.size()) + " and " +
                             std::to_string(b.size()));
    if (a.size() < 2)
        throw ContractError("pearson needs at least two observations");
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0)
        throw UndefinedStatisticError("pearson correlation of a constant vector");
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

struct StrongGene {
    std::string gene_id;
    double mean_abs_correlation = 0.0;
};

struct CorrelationReport {
    std::vector<std::size_t> leading_features;  // latent indices actually correlated
    std::vector<std::size_t> excluded_features; // constant coordinates among the requested ones
    std::vector<std::string> gene_ids;
    Tensor correlation;                         // [leading x genes], NaN for a constant gene
    double threshold = 0.4;
    std::vector<StrongGene> strong_genes;       // mean |rho| > threshold, in gene order
    std::vector<std::string> warnings;

    nlohmann::ordered_json to_json() const
    {
        nlohmann::ordered_json j;
        j["leading_features"] = leading_features;
        j["excluded_features"] = excluded_features;
        j["threshold"] = threshold;
        j["gene_count"] = gene_ids.size();
        j["strong_genes"] = nlohmann::ordered_json::array();
        for (const auto& g : strong_genes)
            j["strong_genes"].push_back({{"gene_id", g.gene_id}, {"mean_abs_correlation", g.mean_abs_correlation}});
        j["warnings"] = warnings;
        return j;
    }

    /// Heat-map matrix: one row per leading feature, one column per gene.
    std::string to_csv() const
    {
        std::string s = "feature";
        for (const auto& g : gene_ids)
            s += "," + g;
        s += "\n";
        for (std::size_t r = 0; r < leading_features.size(); ++r) {
            s += "z" + std::to_string(leading_features[r]);
            for (std::size_t c = 0; c < gene_ids.size(); ++c)
                s += "," + (std::isnan(correlation(r, c)) ? std::string("nan") : kv::format(correlation(r, c)));
            s += "\n";
        }
        return s;
    }
};

/// Pearson matrix between the v highest-variance latent columns and every
/// gene. Constant latent columns are dropped with a warning; constant genes
/// get NaN and never count as strong.
inline CorrelationReport correlation_report(const Tensor& latents, const ExpressionMatrix& data, std::size_t v = 20,
                                            double threshold = 0.4)
{
    data.validate();
    if (latents.rows() != data.samples())
        throw DimensionError("correlation_report: " + std::to_string(latents.rows()) + " latent rows for " +
                             std::to_string(data.samples()) + " samples");
    CorrelationReport rep;
    rep.threshold = threshold;
    rep.gene_ids = data.gene_ids;
    const std::vector<double> var = column_variances(latents);
    for (std::size_t f : leading_features(latents, v)) {
        if (var[f] == 0.0) {
            rep.excluded_features.push_back(f);
            rep.warnings.push_back("latent feature " + std::to_string(f) + " is constant and was excluded");
        } else {
            rep.leading_features.push_back(f);
        }
    }

    const std::size_t genes = data.genes(), n = data.samples();
    rep.correlation = Tensor({std::max<std::size_t>(rep.leading_features.size(), 1), genes},
                             std::numeric_limits<double>::quiet_NaN());
    std::vector<double> a(n), b(n);
    const std::vector<double> gene_var = column_variances(data.values);
    for (std::size_t r = 0; r < rep.leading_features.size(); ++r) {
        for (std::size_t i = 0; i < n; ++i)
            a[i] = latents(i, rep.leading_features[r]);
        for (std::size_t g = 0; g < genes; ++g) {
            if (gene_var[g] == 0.0)
                continue;
            for (std::size_t i = 0; i < n; ++i)
                b[i] = data.values(i, g);
            rep.correlation(r, g) = pearson(a, b);
        }
    }
    if (rep.leading_features.empty()) {
        rep.warnings.push_back("no non-constant latent feature; no genes can be strong");
        return rep;
    }
    for (std::size_t g = 0; g < genes; ++g) {
        if (gene_var[g] == 0.0)
            continue;
        double m = 0.0;
        for (std::size_t r = 0; r < rep.leading_features.size(); ++r)
            m += std::abs(rep.correlation(r, g));
        m /= static_cast<double>(rep.leading_features.size());
        if (m > threshold)
            rep.strong_genes.push_back({data.gene_ids[g], m});
    }
    return rep;
}

inline CorrelationReport correlation_report(const GeneMoeModel& model, const ExpressionMatrix& data,
                                            std::size_t v = 20, double threshold = 0.4)
{
    detail::check_width(model, data);
    return correlation_report(encode_mean(model, data.values), data, v, threshold);
}

// ---------------------------------------------------------------------------
// matrix export

inline std::string matrix_csv(const std::vector<std::string>& header, const Tensor& m)
{
    if (header.size() != m.cols())
        throw DimensionError("csv header has " + std::to_string(header.size()) + " names for " +
                             std::to_string(m.cols()) + " columns");
    std::string s;
    for (std::size_t c = 0; c < header.size(); ++c)
        s += (c ? "," : "") + header[c];
    s += "\n";
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c)
            s += (c ? "," : "") + kv::format(m(r, c));
        s += "\n";
    }
    return s;
}

inline void write_text(const std::string& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot write " + path);
    out << text;
    if (!out)
        throw IoError("write failed for " + path);
}

struct Reconstructions {
    Tensor real;
    Tensor reconstructed;

    double mean_abs_error() const
    {
        double s = 0.0;
        for (std::size_t i = 0; i < real.size(); ++i)
            s += std::abs(real[i] - reconstructed[i]);
        return s / static_cast<double>(real.size());
    }
};

inline Reconstructions reconstructions(const GeneMoeModel& model, const ExpressionMatrix& data)
{
    detail::check_width(model, data);
    return {data.values, reconstruct(model, data.values)};
}

/// Writes real.csv and reconstructed.csv, row-aligned, into `dir`.
inline Reconstructions export_reconstructions(const GeneMoeModel& model, const ExpressionMatrix& data,
                                              const std::string& dir)
{
    Reconstructions r = reconstructions(model, data);
    write_text(dir + "/real.csv", matrix_csv(data.gene_ids, r.real));
    write_text(dir + "/reconstructed.csv", matrix_csv(data.gene_ids, r.reconstructed));
    return r;
}

// ---------------------------------------------------------------------------
// JSON reports

inline nlohmann::ordered_json to_json(const MetricsReport& m)
{
    nlohmann::ordered_json j;
    j["accuracy_overall"] = m.accuracy_overall;
    j["accuracy_macro"] = m.accuracy_macro;
    j["precision_macro"] = m.precision_macro;
    j["recall_macro"] = m.recall_macro;
    j["f1_macro"] = m.f1_macro;
    j["confusion"] = m.confusion;
    j["undefined_precision"] = m.undefined_precision;
    j["undefined_recall"] = m.undefined_recall;
    return j;
}

inline nlohmann::ordered_json to_json(const ClassificationFit& f)
{
    nlohmann::ordered_json j;
    j["classes"] = f.classes;
    j["runs"] = nlohmann::ordered_json::array();
    for (const auto& r : f.runs) {
        nlohmann::ordered_json run;
        run["split_seed"] = r.split_seed;
        run["final_loss"] = r.losses.back();
        run["metrics"] = to_json(r.metrics);
        j["runs"].push_back(std::move(run));
    }
    j["mean_accuracy"] = f.mean_accuracy;
    return j;
}

inline nlohmann::ordered_json to_json(const SurvivalFit& f)
{
    nlohmann::ordered_json j;
    j["runs"] = nlohmann::ordered_json::array();
    for (const auto& r : f.runs)
        j["runs"].push_back({{"split_seed", r.split_seed},
                             {"final_loss", r.losses.back()},
                             {"train_concordance", r.train_concordance},
                             {"test_concordance", r.test_concordance}});
    j["mean_test_concordance"] = f.mean_test_concordance;
    return j;
}

// ---------------------------------------------------------------------------
// ablation ladder

struct AblationRow {
    std::string variant;
    EncoderKind encoder = EncoderKind::dense;
    std::size_t gated_layers = 0;
    bool pretrained = false;
    std::optional<ClassificationFit> classification;
    std::optional<SurvivalFit> survival;
};

struct AblationTable {
    std::vector<AblationRow> rows;

    nlohmann::ordered_json to_json() const
    {
        nlohmann::ordered_json j;
        j["variants"] = nlohmann::ordered_json::array();
        for (const auto& r : rows) {
            nlohmann::ordered_json row;
            row["variant"] = r.variant;
            row["encoder"] = to_string(r.encoder);
            row["gated_layers"] = r.gated_layers;
            row["pretrained"] = r.pretrained;
            if (r.classification)
                row["classification"] = genemoe::to_json(*r.classification);
            if (r.survival)
                row["survival"] = genemoe::to_json(*r.survival);
            j["variants"].push_back(std::move(row));
        }
        return j;
    }
};

/// baseline (dense) -> moe -> moe_moae -> moe_moae pre-trained, all with the
/// same initialization seed and fine-tuning budget. Labels give a
/// classification column, survival outcomes a Cox column. Pre-training sees
/// only the training rows of the first split, normalized on those rows.
inline AblationTable ablate(const ExpressionMatrix& data, GeneMoeConfig base, const TrainConfig& pretrain_cfg,
                            const FinetuneConfig& finetune_cfg)
{
    data.validate();
    if (!data.has_labels() && !data.has_survival())
        throw DataError("ablation needs labels or survival outcomes");
    base.input_dim = data.genes();

    struct Variant {
        const char* name;
        EncoderKind kind;
        bool pretrained;
    };
    const Variant ladder[] = {{"baseline", EncoderKind::dense, false},
                              {"moe", EncoderKind::moe, false},
                              {"moe_moae", EncoderKind::moe_moae, false},
                              {"moe_moae_pretrained", EncoderKind::moe_moae, true}};

    AblationTable table;
    for (const Variant& v : ladder) {
        GeneMoeConfig cfg = base;
        cfg.encoder = v.kind;
        GeneMoeModel model(cfg);
        if (v.pretrained) {
            const FoldData f = split_and_normalize(data, finetune_cfg.seed);
            TrainConfig t = pretrain_cfg;
            t.checkpoint_path.clear();
            t.batch_size = std::min(t.batch_size, f.train.samples());
            pretrain(model, f.train.values, t);
        }
        AblationRow row;
        row.variant = v.name;
        row.encoder = v.kind;
        row.gated_layers = model.gated_layer_count();
        row.pretrained = v.pretrained;
        if (data.has_labels())
            row.classification = fit_classifier(model, data, finetune_cfg);
        if (data.has_survival())
            row.survival = fit_survival(model, data, finetune_cfg);
        table.rows.push_back(std::move(row));
    }
    return table;
}

} // namespace genemoe
