#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "survival.hpp"
#include "tensor.hpp"

namespace genemoe {

/// Samples x genes, with optional class labels and survival outcomes.
struct ExpressionMatrix {
    std::vector<std::string> gene_ids;
    Tensor values;                         // [samples x genes]
    std::vector<std::string> labels;       // empty when absent
    std::vector<SurvivalOutcome> survival; // empty when absent
    std::vector<std::string> dropped_genes;

    std::size_t samples() const { return values.rows(); }
    std::size_t genes() const { return values.cols(); }
    bool has_labels() const { return !labels.empty(); }
    bool has_survival() const { return !survival.empty(); }

    /// Distinct labels in sorted order.
    std::vector<std::string> classes() const
    {
        std::set<std::string> s(labels.begin(), labels.end());
        return {s.begin(), s.end()};
    }

    /// Label of every row as an index into classes().
    std::vector<std::size_t> label_indices(const std::vector<std::string>& class_names) const
    {
        std::vector<std::size_t> out;
        out.reserve(labels.size());
        for (const auto& l : labels) {
            auto it = std::find(class_names.begin(), class_names.end(), l);
            if (it == class_names.end())
                throw DataError("unknown class label '" + l + "'");
            out.push_back(static_cast<std::size_t>(it - class_names.begin()));
        }
        return out;
    }

    void validate() const
    {
        if (gene_ids.size() != values.cols())
            throw DataError("gene id count does not match matrix width");
        if (has_labels() && labels.size() != samples())
            throw DataError("label count does not match sample count");
        if (has_survival() && survival.size() != samples())
            throw DataError("survival record count does not match sample count");
    }
};

inline ExpressionMatrix subset(const ExpressionMatrix& m, std::span<const std::size_t> rows)
{
    if (rows.empty())
        throw ContractError("subset needs at least one row");
    ExpressionMatrix out;
    out.gene_ids = m.gene_ids;
    out.dropped_genes = m.dropped_genes;
    out.values = gather_rows(m.values, rows);
    for (std::size_t r : rows) {
        if (m.has_labels())
            out.labels.push_back(m.labels[r]);
        if (m.has_survival())
            out.survival.push_back(m.survival[r]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// TSV input / output

inline constexpr const char* label_column = "label";
inline constexpr const char* time_column = "time";
inline constexpr const char* event_column = "event";

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line)
{
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos)
            return out;
        start = tab + 1;
    }
}

inline double parse_cell(const std::string& cell, std::size_t line, const std::string& column)
{
    const std::string t = kv::trim(cell);
    if (t.empty())
        throw ParseError("line " + std::to_string(line) + ": empty cell in column '" + column + "'");
    double v = 0.0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc{} || p != t.data() + t.size() || !std::isfinite(v))
        throw ParseError("line " + std::to_string(line) + ": non-numeric cell '" + t + "' in column '" + column +
                         "'");
    return v;
}

} // namespace detail

/// Tab-separated matrix: header of gene ids plus the optional reserved
/// columns label, time and event; one sample per following line.
inline ExpressionMatrix parse_tsv(std::istream& in)
{
    std::string line;
    std::size_t line_no = 1;
    if (!std::getline(in, line))
        throw ParseError("line 1: missing header");
    if (!line.empty() && line.back() == '\r')
        line.pop_back();
    const std::vector<std::string> header = detail::split_tabs(line);

    ExpressionMatrix m;
    std::ptrdiff_t label_col = -1, time_col = -1, event_col = -1;
    std::vector<std::size_t> gene_cols;
    std::set<std::string> seen;
    for (std::size_t c = 0; c < header.size(); ++c) {
        const std::string name = kv::trim(header[c]);
        if (name.empty())
            throw ParseError("line 1: empty column name at position " + std::to_string(c + 1));
        if (!seen.insert(name).second)
            throw ParseError("line 1: duplicate column '" + name + "'");
        if (name == label_column)
            label_col = static_cast<std::ptrdiff_t>(c);
        else if (name == time_column)
            time_col = static_cast<std::ptrdiff_t>(c);
        else if (name == event_column)
            event_col = static_cast<std::ptrdiff_t>(c);
        else {
            gene_cols.push_back(c);
            m.gene_ids.push_back(name);
        }
    }
    if ((time_col < 0) != (event_col < 0))
        throw ParseError("line 1: 'time' and 'event' columns must appear together");
    if (gene_cols.empty())
        throw ParseError("line 1: no gene columns");

    std::vector<double> values;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty())
            continue;
        const std::vector<std::string> cells = detail::split_tabs(line);
        if (cells.size() != header.size())
            throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                             " fields, got " + std::to_string(cells.size()));
        for (std::size_t c : gene_cols)
            values.push_back(detail::parse_cell(cells[c], line_no, header[c]));
        if (label_col >= 0) {
            const std::string l = kv::trim(cells[static_cast<std::size_t>(label_col)]);
            if (l.empty())
                throw ParseError("line " + std::to_string(line_no) + ": empty label");
            m.labels.push_back(l);
        }
        if (time_col >= 0) {
            const double t = detail::parse_cell(cells[static_cast<std::size_t>(time_col)], line_no, time_column);
            const double e = detail::parse_cell(cells[static_cast<std::size_t>(event_col)], line_no, event_column);
            if (!(t > 0.0))
                throw ParseError("line " + std::to_string(line_no) + ": survival time must be positive");
            if (e != 0.0 && e != 1.0)
                throw ParseError("line " + std::to_string(line_no) + ": event must be 0 or 1");
            m.survival.push_back({t, e == 1.0});
        }
    }
    const std::size_t rows = values.size() / gene_cols.size();
    if (rows == 0)
        throw ParseError("no sample rows");
    m.values = Tensor::matrix(rows, gene_cols.size(), std::move(values));
    return m;
}

inline ExpressionMatrix load_tsv(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open " + path);
    try {
        return parse_tsv(in);
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what());
    }
}

inline void write_tsv(std::ostream& out, const ExpressionMatrix& m)
{
    m.validate();
    for (std::size_t g = 0; g < m.genes(); ++g)
        out << (g ? "\t" : "") << m.gene_ids[g];
    if (m.has_labels())
        out << '\t' << label_column;
    if (m.has_survival())
        out << '\t' << time_column << '\t' << event_column;
    out << '\n';
    for (std::size_t r = 0; r < m.samples(); ++r) {
        for (std::size_t g = 0; g < m.genes(); ++g)
            out << (g ? "\t" : "") << kv::format(m.values(r, g));
        if (m.has_labels())
            out << '\t' << m.labels[r];
        if (m.has_survival())
            out << '\t' << kv::format(m.survival[r].time) << '\t' << (m.survival[r].event ? 1 : 0);
        out << '\n';
    }
}

inline void save_tsv(const std::string& path, const ExpressionMatrix& m)
{
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot write " + path);
    write_tsv(out, m);
    if (!out)
        throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// gene filter

/// A gene is dropped when its variance AND its mean are both below the
/// thresholds; with `conjunctive` false either condition suffices.
struct FilterSpec {
    double variance_threshold = 0.4;
    double mean_threshold = 0.8;
    bool conjunctive = true;

    void validate() const
    {
        if (!(variance_threshold >= 0.0) || !(mean_threshold >= 0.0))
            throw ConfigError("filter thresholds must be non-negative");
    }

    void apply(const KeyValues& values)
    {
        kv::Reader r(values, "data");
        r.read("variance_threshold", variance_threshold);
        r.read("mean_threshold", mean_threshold);
        r.read("conjunctive", conjunctive);
        r.finish();
    }
};

struct GeneMoments {
    std::vector<double> mean;
    std::vector<double> variance; // unbiased (n - 1)
};

inline GeneMoments gene_moments(const Tensor& values)
{
    const std::size_t n = values.rows(), g = values.cols();
    if (n < 2)
        throw ContractError("gene statistics need at least two samples");
    GeneMoments s{std::vector<double>(g, 0.0), std::vector<double>(g, 0.0)};
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < g; ++c)
            s.mean[c] += values(r, c);
    for (auto& m : s.mean)
        m /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < g; ++c) {
            const double d = values(r, c) - s.mean[c];
            s.variance[c] += d * d;
        }
    for (auto& v : s.variance)
        v /= static_cast<double>(n - 1);
    return s;
}

inline ExpressionMatrix filter_genes(const ExpressionMatrix& m, const FilterSpec& spec = {})
{
    spec.validate();
    m.validate();
    const GeneMoments s = gene_moments(m.values);
    std::vector<std::size_t> keep;
    ExpressionMatrix out;
    out.labels = m.labels;
    out.survival = m.survival;
    out.dropped_genes = m.dropped_genes;
    for (std::size_t g = 0; g < m.genes(); ++g) {
        const bool low_var = s.variance[g] < spec.variance_threshold;
        const bool low_mean = s.mean[g] < spec.mean_threshold;
        const bool drop = spec.conjunctive ? (low_var && low_mean) : (low_var || low_mean);
        if (drop) {
            out.dropped_genes.push_back(m.gene_ids[g]);
        } else {
            keep.push_back(g);
            out.gene_ids.push_back(m.gene_ids[g]);
        }
    }
    if (keep.empty())
        throw DataError("gene filter removed every gene");
    Tensor v({m.samples(), keep.size()});
    for (std::size_t r = 0; r < m.samples(); ++r)
        for (std::size_t k = 0; k < keep.size(); ++k)
            v(r, k) = m.values(r, keep[k]);
    out.values = std::move(v);
    return out;
}

// ---------------------------------------------------------------------------
// min-max normalization

struct NormalizationStats {
    std::vector<std::string> gene_ids;
    std::vector<double> min;
    std::vector<double> max;

    friend bool operator==(const NormalizationStats&, const NormalizationStats&) = default;

    KeyValues to_key_values() const
    {
        KeyValues kvs;
        kvs["genes"] = std::to_string(gene_ids.size());
        for (std::size_t g = 0; g < gene_ids.size(); ++g)
            kvs["gene." + std::to_string(g)] = gene_ids[g] + "," + kv::format(min[g]) + "," + kv::format(max[g]);
        return kvs;
    }

    static NormalizationStats from_key_values(const KeyValues& kvs)
    {
        auto count_it = kvs.find("genes");
        if (count_it == kvs.end())
            throw ParseError("normalization stats: missing 'genes'");
        const std::size_t n = kv::parse_uint("genes", count_it->second);
        if (kvs.size() != n + 1)
            throw ParseError("normalization stats: expected " + std::to_string(n) + " gene entries");
        NormalizationStats s;
        for (std::size_t g = 0; g < n; ++g) {
            const std::string key = "gene." + std::to_string(g);
            auto it = kvs.find(key);
            if (it == kvs.end())
                throw ParseError("normalization stats: missing '" + key + "'");
            const std::string& text = it->second;
            const auto c2 = text.rfind(',');
            const auto c1 = c2 == std::string::npos || c2 == 0 ? std::string::npos : text.rfind(',', c2 - 1);
            if (c1 == std::string::npos)
                throw ParseError("normalization stats: malformed '" + key + "'");
            s.gene_ids.push_back(text.substr(0, c1));
            s.min.push_back(kv::parse_double(key, text.substr(c1 + 1, c2 - c1 - 1)));
            s.max.push_back(kv::parse_double(key, text.substr(c2 + 1)));
        }
        return s;
    }
};

/// Per-gene (min, max) of the given matrix; a constant gene is an error.
inline NormalizationStats fit_minmax(const ExpressionMatrix& m)
{
    m.validate();
    NormalizationStats s{m.gene_ids, std::vector<double>(m.genes()), std::vector<double>(m.genes())};
    for (std::size_t g = 0; g < m.genes(); ++g) {
        double lo = m.values(0, g), hi = lo;
        for (std::size_t r = 1; r < m.samples(); ++r) {
            lo = std::min(lo, m.values(r, g));
            hi = std::max(hi, m.values(r, g));
        }
        if (!(lo < hi))
            throw DataError("gene '" + m.gene_ids[g] + "' is constant on the fitting rows; min-max is undefined");
        s.min[g] = lo;
        s.max[g] = hi;
    }
    return s;
}

/// (g - min) / (max - min), clamped to [0, 1].
inline ExpressionMatrix apply_normalization(const ExpressionMatrix& m, const NormalizationStats& s)
{
    if (m.gene_ids != s.gene_ids)
        throw DataError("normalization stats were fitted on a different gene set");
    ExpressionMatrix out = m;
    for (std::size_t r = 0; r < m.samples(); ++r)
        for (std::size_t g = 0; g < m.genes(); ++g) {
            const double v = (m.values(r, g) - s.min[g]) / (s.max[g] - s.min[g]);
            out.values(r, g) = std::clamp(v, 0.0, 1.0);
        }
    return out;
}

inline Tensor denormalize(const Tensor& values, const NormalizationStats& s)
{
    if (values.cols() != s.min.size())
        throw DimensionError("denormalize: width does not match the stats");
    Tensor out = values;
    for (std::size_t r = 0; r < values.rows(); ++r)
        for (std::size_t g = 0; g < values.cols(); ++g)
            out(r, g) = s.min[g] + values(r, g) * (s.max[g] - s.min[g]);
    return out;
}

// ---------------------------------------------------------------------------
// splitting

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/// Number of rows a stratum of size n contributes to the test split.
inline std::size_t test_count(std::size_t n) { return (n + 4) / 5; }

/// Per stratum: shuffle, put ceil(n/5) rows in test and the rest in train.
/// Strata are visited in sorted key order.
inline SplitIndices stratified_split(const std::vector<std::string>& strata, std::uint64_t seed)
{
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < strata.size(); ++i)
        groups[strata[i]].push_back(i);
    Rng rng(seed);
    SplitIndices s;
    for (auto& [name, rows] : groups) {
        if (rows.size() < 2)
            throw StratificationError("class '" + name + "' has " + std::to_string(rows.size()) +
                                      " sample; at least 2 are needed for a train/test split");
        rng.shuffle(rows);
        const std::size_t nt = test_count(rows.size());
        s.test.insert(s.test.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(nt));
        s.train.insert(s.train.end(), rows.begin() + static_cast<std::ptrdiff_t>(nt), rows.end());
    }
    return s;
}

/// Strata used to split a matrix: class labels when present, otherwise the
/// event indicator, otherwise a single stratum.
inline std::vector<std::string> split_strata(const ExpressionMatrix& m)
{
    if (m.has_labels())
        return m.labels;
    std::vector<std::string> s(m.samples(), "all");
    if (m.has_survival())
        for (std::size_t i = 0; i < s.size(); ++i)
            s[i] = m.survival[i].event ? "event" : "censored";
    return s;
}

struct PreparedData {
    ExpressionMatrix train; // normalized
    ExpressionMatrix test;  // normalized with the train statistics, clamped
    NormalizationStats stats;
    SplitIndices rows;      // into the filtered input
    bool leak_free = false; // stats reproduce exactly from the train rows alone
};

/// filter -> split -> fit min-max on train -> apply to both.
inline PreparedData prepare(const ExpressionMatrix& raw, const FilterSpec& filter, std::uint64_t seed)
{
    const ExpressionMatrix filtered = filter_genes(raw, filter);
    PreparedData p;
    p.rows = stratified_split(split_strata(filtered), seed);
    const ExpressionMatrix train_raw = subset(filtered, p.rows.train);
    const ExpressionMatrix test_raw = subset(filtered, p.rows.test);
    p.stats = fit_minmax(train_raw);
    p.train = apply_normalization(train_raw, p.stats);
    p.test = apply_normalization(test_raw, p.stats);

    std::vector<std::size_t> a = p.rows.train, b = p.rows.test;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::size_t> both;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
    p.leak_free = both.empty() && fit_minmax(subset(filtered, p.rows.train)) == p.stats;
    return p;
}

} // namespace genemoe
