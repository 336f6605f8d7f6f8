#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "genemoe/analysis.hpp"
#include "genemoe/synthetic.hpp"
#include "test_support.hpp"

using namespace genemoe;
using genemoe::testing::tiny_config;
using genemoe::testing::uniform_matrix;

namespace {

ExpressionMatrix matrix_of(Tensor values)
{
    ExpressionMatrix m;
    for (std::size_t j = 0; j < values.cols(); ++j)
        m.gene_ids.push_back("g" + std::to_string(j));
    m.values = std::move(values);
    return m;
}

std::vector<double> column_of(const Tensor& t, std::size_t j)
{
    std::vector<double> v(t.rows());
    for (std::size_t i = 0; i < t.rows(); ++i)
        v[i] = t(i, j);
    return v;
}

std::string slurp(const std::string& path)
{
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST(LeadingFeatures, SingleVaryingCoordinate)
{
    Tensor z({4, 3}, 1.0);
    for (std::size_t i = 0; i < 4; ++i)
        z(i, 2) = static_cast<double>(i);
    EXPECT_EQ(leading_features(z, 1), std::vector<std::size_t>{2});
}

TEST(LeadingFeatures, AllCoordinatesSortedByVariance)
{
    Tensor z({3, 4}, std::vector<double>{0, 0, 0, 0, 1, 3, 2, 0, 2, 6, 4, 0});
    EXPECT_EQ(leading_features(z, 4), (std::vector<std::size_t>{1, 2, 0, 3}));
}

TEST(LeadingFeatures, TiesGoToLowerIndex)
{
    Tensor z({2, 3}, std::vector<double>{0, 0, 0, 1, 1, 1});
    EXPECT_EQ(leading_features(z, 2), (std::vector<std::size_t>{0, 1}));
}

TEST(LeadingFeatures, MatchesBruteForceSort)
{
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor z = sample_gaussian(rng, {9, 5}, 0.0, 1.0);
        std::vector<std::pair<double, std::size_t>> keyed;
        for (std::size_t j = 0; j < 5; ++j) {
            const auto c = column_of(z, j);
            double m = 0.0, s = 0.0;
            for (double v : c)
                m += v / 9.0;
            for (double v : c)
                s += (v - m) * (v - m);
            keyed.emplace_back(-s, j);
        }
        std::sort(keyed.begin(), keyed.end());
        std::vector<std::size_t> want;
        for (std::size_t i = 0; i < 3; ++i)
            want.push_back(keyed[i].second);
        EXPECT_EQ(leading_features(z, 3), want);
    }
}

TEST(LeadingFeatures, TooManyRequestedIsContractError)
{
    EXPECT_THROW(leading_features(Tensor({3, 2}, 0.0), 3), ContractError);
    EXPECT_THROW(leading_features(Tensor({1, 2}, 0.0), 1), ContractError);
}

TEST(Pearson, HandValues)
{
    const std::vector<double> a{1, 2, 3}, neg{-1, -2, -3}, b{1, 2, 4};
    EXPECT_DOUBLE_EQ(pearson(a, a), 1.0);
    EXPECT_DOUBLE_EQ(pearson(a, neg), -1.0);
    // sample covariance 1.5, standard deviations 1 and sqrt(7/3)
    EXPECT_NEAR(pearson(a, b), 1.5 / std::sqrt(7.0 / 3.0), 1e-12);
    EXPECT_NEAR(pearson(a, b), 0.9819, 1e-4);
}

TEST(Pearson, ConstantInputIsUndefined)
{
    const std::vector<double> a{1, 2, 3}, c{2, 2, 2};
    EXPECT_THROW(pearson(a, c), UndefinedStatisticError);
    EXPECT_THROW(pearson(std::vector<double>{1}, std::vector<double>{1}), ContractError);
    EXPECT_THROW(pearson(a, std::vector<double>{1, 2}), DimensionError);
}

TEST(CorrelationReport, PlantedGeneIsStrong)
{
    Rng rng(5);
    const ExpressionMatrix data = matrix_of(uniform_matrix(rng, 30, 6));
    Tensor latents({30, 2}, 0.25); // column 1 stays constant
    for (std::size_t i = 0; i < 30; ++i)
        latents(i, 0) = 2.0 * data.values(i, 0) + 1.0;
    const CorrelationReport rep = correlation_report(latents, data, 2, 0.4);
    EXPECT_EQ(rep.leading_features, std::vector<std::size_t>{0});
    EXPECT_EQ(rep.excluded_features, std::vector<std::size_t>{1});
    ASSERT_EQ(rep.warnings.size(), 1u);
    ASSERT_FALSE(rep.strong_genes.empty());
    EXPECT_EQ(rep.strong_genes[0].gene_id, "g0");
    EXPECT_NEAR(rep.strong_genes[0].mean_abs_correlation, 1.0, 1e-12);
}

TEST(CorrelationReport, ThresholdOneIsEmpty)
{
    Rng rng(6);
    const ExpressionMatrix data = matrix_of(uniform_matrix(rng, 20, 4));
    Tensor latents = data.values; // perfect copies
    EXPECT_TRUE(correlation_report(latents, data, 4, 1.0).strong_genes.empty());
}

TEST(CorrelationReport, CoefficientsMatchDirectPearson)
{
    Rng rng(7);
    const ExpressionMatrix data = matrix_of(uniform_matrix(rng, 25, 5));
    const Tensor latents = sample_gaussian(rng, {25, 4}, 0.0, 1.0);
    const CorrelationReport rep = correlation_report(latents, data, 3, 0.0);
    ASSERT_EQ(rep.leading_features.size(), 3u);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t g = 0; g < 5; ++g) {
            const double rho = rep.correlation(r, g);
            EXPECT_GE(rho, -1.0);
            EXPECT_LE(rho, 1.0);
            EXPECT_EQ(rho, pearson(column_of(latents, rep.leading_features[r]), column_of(data.values, g)));
        }
    EXPECT_EQ(rep.strong_genes.size(), 5u);
}

TEST(CorrelationReport, ConstantGeneIsNeverStrong)
{
    Rng rng(8);
    Tensor v = uniform_matrix(rng, 10, 3);
    for (std::size_t i = 0; i < 10; ++i)
        v(i, 1) = 0.5;
    const ExpressionMatrix data = matrix_of(v);
    const CorrelationReport rep = correlation_report(data.values, data, 3, 0.0);
    EXPECT_TRUE(std::isnan(rep.correlation(0, 1)));
    for (const auto& g : rep.strong_genes)
        EXPECT_NE(g.gene_id, "g1");
    EXPECT_NE(rep.to_csv().find("nan"), std::string::npos);
}

TEST(CorrelationReport, CsvShapeAndJsonFields)
{
    Rng rng(9);
    const ExpressionMatrix data = matrix_of(uniform_matrix(rng, 12, 3));
    const CorrelationReport rep = correlation_report(sample_gaussian(rng, {12, 2}, 0.0, 1.0), data, 2);
    std::istringstream csv(rep.to_csv());
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "feature,g0,g1,g2");
    int rows = 0;
    while (std::getline(csv, line))
        ++rows;
    EXPECT_EQ(rows, 2);
    const auto j = rep.to_json();
    EXPECT_EQ(j.at("gene_count"), 3);
    EXPECT_EQ(j.at("threshold"), 0.4);
}

TEST(CorrelationReport, UntrainedModelCompletes)
{
    Rng rng(10);
    const ExpressionMatrix data = matrix_of(uniform_matrix(rng, 15, 6));
    const GeneMoeModel m(tiny_config());
    const CorrelationReport rep = correlation_report(m, data, 3);
    EXPECT_EQ(rep.leading_features.size() + rep.excluded_features.size(), 3u);
    EXPECT_THROW(correlation_report(m, data, 4), ContractError);
}

TEST(Reconstructions, ExportedMatricesAreRowAligned)
{
    Rng rng(11);
    const ExpressionMatrix data = matrix_of(uniform_matrix(rng, 7, 6));
    const GeneMoeModel m(tiny_config());
    const std::string dir = (std::filesystem::temp_directory_path() / "genemoe_recon").string();
    std::filesystem::create_directories(dir);
    const Reconstructions r = export_reconstructions(m, data, dir);
    EXPECT_EQ(r.reconstructed.rows(), 7u);
    for (double v : r.reconstructed.values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    for (const char* name : {"/real.csv", "/reconstructed.csv"}) {
        std::istringstream in(slurp(dir + name));
        std::string line;
        int n = 0;
        while (std::getline(in, line))
            ++n;
        EXPECT_EQ(n, 8) << name;
    }
    EXPECT_EQ(slurp(dir + "/real.csv"), matrix_csv(data.gene_ids, data.values));
    std::filesystem::remove_all(dir);
    EXPECT_THROW(export_reconstructions(m, data, "/nonexistent/dir"), IoError);
}

TEST(Ablation, FourVariantsWithExpectedArchitecture)
{
    SyntheticSpec s;
    s.samples_per_class = {10, 10};
    s.gene_count = 6;
    s.latent_rank = 2;
    s.seed = 12;
    const SyntheticData d = generate_synthetic(s);
    TrainConfig t;
    t.epochs = 1;
    t.batch_size = 8;
    t.critic_steps = 1;
    FinetuneConfig f;
    f.epochs = 2;
    f.repeats = 1;
    f.batch_size = 8;
    const AblationTable table = ablate(d.matrix, tiny_config(), t, f);
    ASSERT_EQ(table.rows.size(), 4u);
    const char* names[] = {"baseline", "moe", "moe_moae", "moe_moae_pretrained"};
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(table.rows[i].variant, names[i]);
        EXPECT_TRUE(table.rows[i].classification.has_value());
        EXPECT_TRUE(table.rows[i].survival.has_value());
    }
    EXPECT_EQ(table.rows[0].gated_layers, 0u);
    EXPECT_EQ(table.rows[1].gated_layers, 2u);
    EXPECT_EQ(table.rows[2].gated_layers, 3u);
    EXPECT_TRUE(table.rows[3].pretrained);
    const auto j = table.to_json();
    EXPECT_EQ(j.at("variants").size(), 4u);
    EXPECT_EQ(j.at("variants")[0].at("encoder"), "dense");
}
