#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "genemoe/pretrain.hpp"
#include "test_support.hpp"

using namespace genemoe;
using genemoe::testing::tiny_config;
using genemoe::testing::uniform_matrix;

namespace {

std::string temp_path(const std::string& name)
{
    return (std::filesystem::temp_directory_path() / ("genemoe_" + name)).string();
}

TrainConfig quick_train(std::size_t epochs, std::size_t batch)
{
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = batch;
    t.critic_steps = 2;
    t.learning_rate = 1e-3;
    t.seed = 3;
    return t;
}

std::string read_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

} // namespace

TEST(Augment, ZeroSigmaIsIdentity)
{
    Rng rng(1);
    const Tensor x = uniform_matrix(rng, 3, 4);
    EXPECT_EQ(augment(x, rng, 0.0), x);
}

TEST(Augment, NoiseMoments)
{
    Rng rng(2);
    const Tensor x({1000, 100}, 0.5);
    const Tensor y = augment(x, rng, 0.2);
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i)
        m += y[i] - x[i];
    m /= static_cast<double>(y.size());
    for (std::size_t i = 0; i < y.size(); ++i)
        v += (y[i] - x[i] - m) * (y[i] - x[i] - m);
    v /= static_cast<double>(y.size() - 1);
    EXPECT_NEAR(m, 0.0, 0.002);
    EXPECT_NEAR(v, 0.04, 0.001);
}

TEST(Augment, SameSeedSameOutput)
{
    const Tensor x({4, 4}, 0.3);
    Rng a(5), b(5);
    EXPECT_EQ(augment(x, a, 0.2), augment(x, b, 0.2));
}

TEST(LrSchedule, DefaultKneeAtHalf)
{
    const TrainConfig cfg;
    EXPECT_EQ(lr_schedule(0, cfg), 2e-4);
    EXPECT_EQ(lr_schedule(99, cfg), 2e-4);
    EXPECT_EQ(lr_schedule(100, cfg), 2e-4);
    EXPECT_NEAR(lr_schedule(199, cfg), 2e-4 / 100.0, 1e-20);
    EXPECT_GT(lr_schedule(199, cfg), 0.0);
    EXPECT_THROW(lr_schedule(200, cfg), ContractError);
}

TEST(LrSchedule, NonIncreasing)
{
    TrainConfig cfg;
    cfg.epochs = 37;
    cfg.decay_start_epoch = 11;
    for (std::size_t e = 1; e < cfg.epochs; ++e)
        EXPECT_LE(lr_schedule(e, cfg), lr_schedule(e - 1, cfg));
}

TEST(Pretrain, StepBookkeeping)
{
    GeneMoeModel m(tiny_config());
    Rng rng(3);
    const TrainConfig cfg = quick_train(1, 2);
    const PretrainResult r = pretrain(m, uniform_matrix(rng, 4, 6), cfg);
    ASSERT_EQ(r.log.epochs.size(), 1u);
    EXPECT_EQ(r.log.epochs[0].generator_steps, 2u);
    EXPECT_EQ(r.log.epochs[0].critic_steps, 2u * cfg.critic_steps);
    EXPECT_EQ(r.state.generator.step, 2u);
    EXPECT_EQ(r.state.critic.step, 4u);
    EXPECT_EQ(r.log.epochs[0].importance.size(), m.gated_layer_count());
}

TEST(Pretrain, IdenticalSeedsIdenticalRuns)
{
    Rng rng(4);
    const Tensor data = uniform_matrix(rng, 10, 6);
    GeneMoeModel a(tiny_config()), b(tiny_config());
    const PretrainResult ra = pretrain(a, data, quick_train(3, 4));
    const PretrainResult rb = pretrain(b, data, quick_train(3, 4));
    EXPECT_EQ(ra.log.to_jsonl(), rb.log.to_jsonl());
    EXPECT_EQ(serialize_checkpoint(checkpoint_of(a)), serialize_checkpoint(checkpoint_of(b)));
}

TEST(Pretrain, LogIsNewlineDelimitedJson)
{
    Rng rng(5);
    GeneMoeModel m(tiny_config());
    const PretrainResult r = pretrain(m, uniform_matrix(rng, 8, 6), quick_train(2, 4));
    std::istringstream lines(r.log.to_jsonl());
    std::string line;
    std::size_t n = 0;
    while (std::getline(lines, line)) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j.at("epoch").get<std::size_t>(), n);
        EXPECT_TRUE(j.at("loss").contains("l1"));
        ++n;
    }
    EXPECT_EQ(n, 2u);
}

TEST(Pretrain, NonFiniteLossAbortsNamingTermAndEpoch)
{
    GeneMoeModel m(tiny_config());
    m.decoder.back().bias.value[0] = std::nan("");
    Rng rng(6);
    try {
        pretrain(m, uniform_matrix(rng, 4, 6), quick_train(1, 2));
        FAIL();
    } catch (const NumericError& e) {
        const std::string what = e.what();
        EXPECT_NE(what.find("epoch 0"), std::string::npos) << what;
        EXPECT_NE(what.find("l1"), std::string::npos) << what;
    }
}

TEST(Pretrain, ResumeMatchesUninterruptedRun)
{
    Rng rng(7);
    const Tensor data = uniform_matrix(rng, 8, 6);
    GeneMoeModel straight(tiny_config());
    pretrain(straight, data, quick_train(4, 4));

    const std::string path = temp_path("resume.ckpt");
    GeneMoeModel first(tiny_config());
    TrainConfig half = quick_train(4, 4);
    half.checkpoint_every = 2;
    half.checkpoint_path = path;
    // run only the first two epochs by stopping from the progress hook
    PretrainOptions stop;
    stop.on_epoch = [](const EpochLog& e) {
        if (e.epoch == 1)
            throw std::runtime_error("stop");
    };
    EXPECT_THROW(pretrain(first, data, half, stop), std::runtime_error);

    const Checkpoint c = load_checkpoint(path);
    EXPECT_EQ(c.epoch, 2u);
    GeneMoeModel resumed = model_from_checkpoint(c);
    PretrainOptions resume;
    resume.resume = train_state_of(c);
    pretrain(resumed, data, quick_train(4, 4), resume);
    EXPECT_EQ(serialize_checkpoint(checkpoint_of(resumed)), serialize_checkpoint(checkpoint_of(straight)));
    std::filesystem::remove(path);
}

TEST(Pretrain, RejectsOversizedBatch)
{
    GeneMoeModel m(tiny_config());
    Rng rng(8);
    EXPECT_THROW(pretrain(m, uniform_matrix(rng, 3, 6), quick_train(1, 4)), ConfigError);
}

// ---------------------------------------------------------------------------
// checkpoints

TEST(Checkpoint, RoundTripIsBitExact)
{
    GeneMoeModel m(tiny_config());
    Rng rng(9);
    const Tensor x = uniform_matrix(rng, 5, 6);
    Checkpoint c = checkpoint_of(m);
    c.rng_state = rng.state();
    c.epoch = 12;
    c.metadata = {{"note", "x = y"}};
    c.optimizers = {{"generator", AdamState{3, {Tensor({2, 2}, 0.25)}, {Tensor({2, 2}, 1e-300)}}}};
    const std::string path = temp_path("roundtrip.ckpt");
    save_checkpoint(path, c);
    const Checkpoint back = load_checkpoint(path);
    EXPECT_EQ(back, c);
    const GeneMoeModel loaded = model_from_checkpoint(back);
    EXPECT_EQ(reconstruct(loaded, x), reconstruct(m, x));
    EXPECT_EQ(encode_mean(loaded, x), encode_mean(m, x));
    std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptHeaderIsFormatError)
{
    GeneMoeModel m(tiny_config());
    std::string bytes = serialize_checkpoint(checkpoint_of(m));
    std::string bad = bytes;
    bad[2] = 'X';
    EXPECT_THROW(deserialize_checkpoint(bad), CheckpointFormatError);
    bad = bytes;
    bad[8] = 7; // version
    EXPECT_THROW(deserialize_checkpoint(bad), CheckpointFormatError);
    EXPECT_THROW(deserialize_checkpoint(bytes + "junk"), CheckpointFormatError);
}

TEST(Checkpoint, TruncationDetectedAtEveryLength)
{
    GeneMoeConfig cfg = tiny_config(EncoderKind::dense);
    cfg.hidden_dims = {4};
    cfg.critic_hidden = {};
    GeneMoeModel m(cfg);
    const std::string bytes = serialize_checkpoint(checkpoint_of(m));
    for (std::size_t len = 0; len < bytes.size(); ++len)
        EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, len)), IoError) << len;
    const std::string path = temp_path("truncated.ckpt");
    write_file(path, bytes.substr(0, bytes.size() / 2));
    EXPECT_THROW(load_checkpoint(path), CheckpointTruncatedError);
    std::filesystem::remove(path);
}

TEST(Checkpoint, ShapeMismatchNamesTensor)
{
    GeneMoeModel small(tiny_config());
    GeneMoeConfig other = tiny_config();
    other.latent_dim = 4;
    GeneMoeModel big(other);
    try {
        load_into(big, checkpoint_of(small));
        FAIL();
    } catch (const CheckpointShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("encoder.mu.weight"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, MissingFileIsIoError)
{
    EXPECT_THROW(load_checkpoint("/nonexistent/model.ckpt"), IoError);
}

TEST(Checkpoint, SavedTrainingFilesAreIdentical)
{
    Rng rng(10);
    const Tensor data = uniform_matrix(rng, 6, 6);
    const std::string p1 = temp_path("det1.ckpt"), p2 = temp_path("det2.ckpt");
    for (const auto& p : {p1, p2}) {
        GeneMoeModel m(tiny_config());
        TrainConfig t = quick_train(2, 3);
        t.checkpoint_path = p;
        pretrain(m, data, t);
    }
    EXPECT_EQ(read_file(p1), read_file(p2));
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}
