#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "genemoe/data.hpp"
#include "genemoe/synthetic.hpp"

using namespace genemoe;

namespace {

ExpressionMatrix parse(const std::string& text)
{
    std::istringstream in(text);
    return parse_tsv(in);
}

std::string error_of(const std::string& text)
{
    try {
        parse(text);
    } catch (const ParseError& e) {
        return e.what();
    }
    return "";
}

ExpressionMatrix matrix_of(std::vector<std::string> genes, std::size_t rows, std::vector<double> values)
{
    ExpressionMatrix m;
    m.gene_ids = std::move(genes);
    m.values = Tensor::matrix(rows, m.gene_ids.size(), std::move(values));
    return m;
}

ExpressionMatrix labelled(std::size_t per_class_a, std::size_t per_class_b, Rng& rng)
{
    const std::size_t n = per_class_a + per_class_b;
    ExpressionMatrix m;
    m.gene_ids = {"g0", "g1", "g2"};
    m.values = Tensor({n, 3});
    for (auto& v : m.values.values())
        v = 5.0 * rng.uniform();
    for (std::size_t i = 0; i < n; ++i)
        m.labels.push_back(i < per_class_a ? "a" : "b");
    return m;
}

} // namespace

// ---------------------------------------------------------------------------
// TSV

TEST(Tsv, WellFormedRoundTrip)
{
    const ExpressionMatrix m = parse("g1\tg2\n0.1\t2.5\n-3\t1e-300\n");
    EXPECT_EQ(m.gene_ids, (std::vector<std::string>{"g1", "g2"}));
    EXPECT_EQ(m.values, Tensor::from_rows({{0.1, 2.5}, {-3, 1e-300}}));

    std::ostringstream out;
    write_tsv(out, m);
    const ExpressionMatrix back = parse(out.str());
    EXPECT_EQ(back.values, m.values);
    EXPECT_EQ(back.gene_ids, m.gene_ids);
}

TEST(Tsv, ReservedColumns)
{
    const ExpressionMatrix m = parse("time\tg1\tlabel\tevent\n3.5\t0.2\tLUAD\t1\n1\t0.4\tBRCA\t0\n");
    EXPECT_EQ(m.gene_ids, std::vector<std::string>{"g1"});
    EXPECT_EQ(m.labels, (std::vector<std::string>{"LUAD", "BRCA"}));
    EXPECT_EQ(m.survival, (std::vector<SurvivalOutcome>{{3.5, true}, {1.0, false}}));
    std::ostringstream out;
    write_tsv(out, m);
    const ExpressionMatrix back = parse(out.str());
    EXPECT_EQ(back.labels, m.labels);
    EXPECT_EQ(back.survival, m.survival);
}

TEST(Tsv, RaggedRowNamesLine)
{
    EXPECT_NE(error_of("a\tb\n1\t2\n3\n").find("line 3"), std::string::npos);
}

TEST(Tsv, DuplicateGeneNamesId)
{
    EXPECT_NE(error_of("TP53\tEGFR\tTP53\n1\t2\t3\n").find("TP53"), std::string::npos);
}

TEST(Tsv, BadCells)
{
    EXPECT_NE(error_of("a\tb\n1\t\n").find("line 2"), std::string::npos);
    EXPECT_NE(error_of("a\tb\n1\t2\n1\tx\n").find("line 3"), std::string::npos);
    EXPECT_NE(error_of("a\ttime\tevent\n1\t2\t3\n").find("event"), std::string::npos);
    EXPECT_NE(error_of("a\ttime\tevent\n1\t0\t1\n").find("positive"), std::string::npos);
    EXPECT_NE(error_of("a\ttime\n1\t2\n").find("together"), std::string::npos);
    EXPECT_NE(error_of("a\n").find("no sample"), std::string::npos);
}

TEST(Tsv, MissingFileIsIoError)
{
    EXPECT_THROW(load_tsv("/nonexistent/file.tsv"), IoError);
}

// ---------------------------------------------------------------------------
// filter

TEST(Filter, ConjunctiveRule)
{
    // g_zero: var 0 mean 0 (drop); g_high_mean: var 0.3 mean 2 (keep);
    // g_high_var: var 0.5 mean 0.1 (keep)
    const double a = std::sqrt(0.3), b = std::sqrt(0.5); // m - a, m, m + a has unbiased variance a^2
    ExpressionMatrix m = matrix_of({"g_zero", "g_high_mean", "g_high_var"}, 3,
                                   {0, 2 - a, 0.1 - b, 0, 2, 0.1, 0, 2 + a, 0.1 + b});
    const GeneMoments s = gene_moments(m.values);
    EXPECT_NEAR(s.variance[1], 0.3, 1e-12);
    EXPECT_NEAR(s.variance[2], 0.5, 1e-12);
    const ExpressionMatrix f = filter_genes(m);
    EXPECT_EQ(f.gene_ids, (std::vector<std::string>{"g_high_mean", "g_high_var"}));
    EXPECT_EQ(f.dropped_genes, std::vector<std::string>{"g_zero"});
    EXPECT_EQ(f.values(1, 0), 2.0);

    FilterSpec either;
    either.conjunctive = false;
    EXPECT_THROW(filter_genes(m, either), DataError);
}

TEST(Filter, PreservesOrderAndRows)
{
    Rng rng(1);
    ExpressionMatrix m;
    for (int g = 0; g < 30; ++g)
        m.gene_ids.push_back("g" + std::to_string(g));
    m.values = Tensor({12, 30});
    for (std::size_t r = 0; r < 12; ++r)
        for (std::size_t g = 0; g < 30; ++g)
            m.values(r, g) = g % 3 == 0 ? 0.01 * rng.uniform() : 4.0 * rng.uniform();
    m.labels.assign(12, "x");
    const ExpressionMatrix f = filter_genes(m);
    EXPECT_EQ(f.genes(), 20u);
    EXPECT_EQ(f.dropped_genes.size(), 10u);
    EXPECT_TRUE(std::is_sorted(f.gene_ids.begin(), f.gene_ids.end(), [](const auto& x, const auto& y) {
        return std::stoi(x.substr(1)) < std::stoi(y.substr(1));
    }));
    EXPECT_EQ(f.labels, m.labels);
}

// ---------------------------------------------------------------------------
// min-max

TEST(MinMax, ColumnExample)
{
    ExpressionMatrix m = matrix_of({"g"}, 3, {2, 4, 6});
    const NormalizationStats s = fit_minmax(m);
    EXPECT_EQ(apply_normalization(m, s).values, Tensor::from_rows({{0}, {0.5}, {1}}));
}

TEST(MinMax, ClampOutOfRange)
{
    const NormalizationStats s = fit_minmax(matrix_of({"g"}, 2, {2, 6}));
    EXPECT_EQ(apply_normalization(matrix_of({"g"}, 2, {1, 9}), s).values, Tensor::from_rows({{0}, {1}}));
}

TEST(MinMax, RoundTrip)
{
    Rng rng(2);
    ExpressionMatrix m = labelled(10, 10, rng);
    const NormalizationStats s = fit_minmax(m);
    const Tensor back = denormalize(apply_normalization(m, s).values, s);
    for (std::size_t i = 0; i < back.size(); ++i)
        EXPECT_NEAR(back[i], m.values[i], 1e-12);
}

TEST(MinMax, ConstantGeneRejected)
{
    EXPECT_THROW(fit_minmax(matrix_of({"flat"}, 3, {1, 1, 1})), DataError);
}

TEST(MinMax, StatsTextRoundTrip)
{
    Rng rng(3);
    NormalizationStats s = fit_minmax(labelled(4, 4, rng));
    s.gene_ids[1] = "id,with,commas";
    EXPECT_EQ(NormalizationStats::from_key_values(kv::from_text(kv::to_text(s.to_key_values()))), s);
}

TEST(MinMax, WrongGeneSetRejected)
{
    const NormalizationStats s = fit_minmax(matrix_of({"a"}, 2, {0, 1}));
    EXPECT_THROW(apply_normalization(matrix_of({"b"}, 2, {0, 1}), s), DataError);
}

// ---------------------------------------------------------------------------
// split

TEST(Split, CeilRule)
{
    for (std::size_t n = 2; n <= 30; ++n) {
        const SplitIndices s = stratified_split(std::vector<std::string>(n, "c"), 4);
        EXPECT_EQ(s.test.size(), (n + 4) / 5);
        EXPECT_EQ(s.train.size() + s.test.size(), n);
    }
    EXPECT_EQ(stratified_split(std::vector<std::string>(5, "c"), 0).train.size(), 4u);
    EXPECT_EQ(stratified_split(std::vector<std::string>(6, "c"), 0).test.size(), 2u);
}

TEST(Split, PartitionAndCoverage)
{
    Rng rng(5);
    std::vector<std::string> strata;
    for (int i = 0; i < 57; ++i)
        strata.push_back("c" + std::to_string(static_cast<int>(rng.uniform() * 4)));
    const SplitIndices s = stratified_split(strata, 9);
    std::vector<std::size_t> all = s.train;
    all.insert(all.end(), s.test.begin(), s.test.end());
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> expect(57);
    std::iota(expect.begin(), expect.end(), std::size_t{0});
    EXPECT_EQ(all, expect);
    std::set<std::string> in_train, in_test;
    for (auto i : s.train)
        in_train.insert(strata[i]);
    for (auto i : s.test)
        in_test.insert(strata[i]);
    EXPECT_EQ(in_train, in_test);
}

TEST(Split, DeterministicUnderSeed)
{
    const std::vector<std::string> strata{"a", "b", "a", "b", "a", "b", "a", "a"};
    EXPECT_EQ(stratified_split(strata, 3).test, stratified_split(strata, 3).test);
}

TEST(Split, SingletonClassNamed)
{
    try {
        stratified_split({"a", "a", "lonely"}, 0);
        FAIL();
    } catch (const StratificationError& e) {
        EXPECT_NE(std::string(e.what()).find("lonely"), std::string::npos);
    }
}

TEST(Prepare, StatsComeFromTrainRowsOnly)
{
    Rng rng(6);
    ExpressionMatrix m = labelled(20, 15, rng);
    const PreparedData p = prepare(m, {}, 11);
    EXPECT_TRUE(p.leak_free);
    // perturbing test rows to extreme values changes nothing in the stats
    ExpressionMatrix poisoned = m;
    for (std::size_t r : p.rows.test)
        for (std::size_t g = 0; g < m.genes(); ++g)
            poisoned.values(r, g) = 1e6;
    const PreparedData q = prepare(poisoned, {}, 11);
    EXPECT_EQ(q.stats, p.stats);
    EXPECT_EQ(q.train.values, p.train.values);
    for (double v : q.test.values.values())
        EXPECT_EQ(v, 1.0);
    for (double v : p.train.values.values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Prepare, DeterministicAndOrderStable)
{
    Rng rng(7);
    ExpressionMatrix m = labelled(9, 13, rng);
    const PreparedData a = prepare(m, {}, 3), b = prepare(m, {}, 3);
    EXPECT_EQ(a.train.values, b.train.values);
    EXPECT_EQ(a.test.labels, b.test.labels);
    EXPECT_EQ(a.rows.train, b.rows.train);
}

// ---------------------------------------------------------------------------
// synthetic generator

TEST(Synthetic, SameSeedSameMatrix)
{
    SyntheticSpec s;
    s.samples_per_class = {10, 12};
    s.gene_count = 20;
    s.seed = 4;
    const SyntheticData a = generate_synthetic(s), b = generate_synthetic(s);
    EXPECT_EQ(a.matrix.values, b.matrix.values);
    EXPECT_EQ(a.matrix.survival, b.matrix.survival);
    s.seed = 5;
    EXPECT_NE(generate_synthetic(s).matrix.values, a.matrix.values);
}

TEST(Synthetic, ValuesAndShapes)
{
    SyntheticSpec s;
    s.samples_per_class = {7, 3, 5};
    s.gene_count = 12;
    s.dead_gene_count = 4;
    s.expression_scale = 10.0;
    const SyntheticData d = generate_synthetic(s);
    EXPECT_EQ(d.matrix.samples(), 15u);
    EXPECT_EQ(d.matrix.genes(), 16u);
    EXPECT_EQ(d.matrix.classes().size(), 3u);
    for (double v : d.matrix.values.values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 10.0);
    }
    const ExpressionMatrix f = filter_genes(d.matrix);
    EXPECT_EQ(f.dropped_genes.size(), 4u);
}

TEST(Synthetic, SeparableWithoutNoise)
{
    SyntheticSpec s;
    s.samples_per_class = {50, 50, 50, 50};
    s.gene_count = 40;
    s.noise = 0.0;
    s.class_signature_strength = 3.0;
    const SyntheticData d = generate_synthetic(s);
    // nearest true class centroid is a linear rule
    const std::size_t c = 4, g = 40;
    std::vector<std::vector<double>> centroid(c, std::vector<double>(g, 0.0));
    std::vector<double> count(c, 0.0);
    for (std::size_t r = 0; r < d.matrix.samples(); ++r) {
        count[d.classes[r]] += 1.0;
        for (std::size_t j = 0; j < g; ++j)
            centroid[d.classes[r]][j] += d.matrix.values(r, j);
    }
    for (std::size_t k = 0; k < c; ++k)
        for (auto& v : centroid[k])
            v /= count[k];
    std::size_t correct = 0;
    for (std::size_t r = 0; r < d.matrix.samples(); ++r) {
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t k = 0; k < c; ++k) {
            double dist = 0.0;
            for (std::size_t j = 0; j < g; ++j)
                dist += std::pow(d.matrix.values(r, j) - centroid[k][j], 2);
            if (dist < best_d) {
                best_d = dist;
                best = k;
            }
        }
        correct += best == d.classes[r];
    }
    EXPECT_EQ(correct, d.matrix.samples());
}

TEST(Synthetic, TrueRiskIsConcordant)
{
    SyntheticSpec s;
    s.samples_per_class = {500};
    s.seed = 8;
    const SyntheticData d = generate_synthetic(s);
    EXPECT_GE(concordance_index(d.true_risk, d.matrix.survival), 0.85);
    std::size_t censored = 0;
    for (const auto& o : d.matrix.survival)
        censored += !o.event;
    EXPECT_NEAR(static_cast<double>(censored) / 500.0, 0.25, 0.06);
}

TEST(Synthetic, OneFeatureCoxRecoversPositiveEffect)
{
    SyntheticSpec s;
    s.samples_per_class = {500};
    s.seed = 9;
    const SyntheticData d = generate_synthetic(s);
    Parameter theta("theta", Tensor::scalar(0.0));
    const Tensor risk = Tensor::matrix(500, 1, d.true_risk);
    std::vector<Parameter*> ps{&theta};
    for (int step = 0; step < 300; ++step) {
        Tape t;
        t.backward(cox_nll(t.constant(risk) * t.param(theta), d.matrix.survival), ps);
        theta.value[0] -= 0.5 * theta.grad[0];
    }
    EXPECT_GT(theta.value[0], 0.5);
    std::vector<double> fitted(500);
    for (std::size_t i = 0; i < 500; ++i)
        fitted[i] = theta.value[0] * d.true_risk[i];
    EXPECT_GE(concordance_index(fitted, d.matrix.survival), 0.8);
}

TEST(Synthetic, InvalidSpecRejected)
{
    SyntheticSpec s;
    s.latent_rank = 0;
    EXPECT_THROW(generate_synthetic(s), ConfigError);
    s = {};
    s.censoring_fraction = 1.0;
    EXPECT_THROW(generate_synthetic(s), ConfigError);
}
