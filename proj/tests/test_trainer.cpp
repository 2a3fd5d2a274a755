#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "hvad/synth.hpp"
#include "hvad/trainer.hpp"
#include "test_util.hpp"

using namespace hvad;

namespace {

TrainConfig small_config(bool adversarial = true) {
    TrainConfig c;
    c.model.frame_width = 40;
    c.model.frame_height = 40;
    c.model.use_adversarial = adversarial;
    c.batch_size = 32;
    c.epochs = 2;
    c.checkpoint_every = 0;
    c.seed = 9;
    return c;
}

Batch<float> random_batch(std::size_t n, std::size_t gw, std::size_t gh, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Batch<float> b;
    b.cuboids = Tensor<float>(Shape{n, 10, 10, 3});
    for (auto& v : b.cuboids.storage()) v = u(rng);
    for (std::size_t k = 0; k < n; ++k) {
        b.labels.x.push_back(rng() % gw);
        b.labels.y.push_back(rng() % gh);
    }
    return b;
}

std::vector<Tensor<float>> snapshot(const std::vector<Parameter<float>*>& ps) {
    std::vector<Tensor<float>> out;
    for (auto* p : ps) out.push_back(p->value);
    return out;
}

// 40x40 corpus of 2 train videos x 5 frames: 2 * 3 * 16 = 96 samples.
ManifestFile small_corpus(const TempDir& dir) {
    SynthSpec spec;
    spec.frame_width = 40;
    spec.frame_height = 40;
    spec.train_videos = 2;
    spec.test_videos = 1;
    spec.frames = 5;
    spec.anomaly_first = 1;
    spec.anomaly_last = 2;
    return synth_corpus(spec, dir / "corpus");
}

}  // namespace

TEST(TrainConfig, DefaultsAndInvariants) {
    TrainConfig c;
    EXPECT_EQ(c.epochs, 40u);
    EXPECT_EQ(c.batch_size, 3072u);
    EXPECT_EQ(c.adam.lr, 2e-4);
    EXPECT_EQ(c.sgd.lr, 1e-4);
    EXPECT_EQ(c.weights.lambda_l2, 1.0);
    EXPECT_EQ(c.weights.lambda_grad, 1.0 / 3.0);
    EXPECT_EQ(c.weights.lambda_G, 0.25);
    EXPECT_NO_THROW(c.validate());
    c.epochs = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c.epochs = 1;
    c.model.use_decoder = false;
    EXPECT_THROW(c.validate(), ConfigError);
    c.model.use_adversarial = false;
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.effective_weights().lambda_G, 0.0);
}

TEST(TrainConfig, JsonRoundTrip) {
    TrainConfig c = small_config(false);
    c.lr_decay = 0.5;
    const TrainConfig back = TrainConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
    EXPECT_EQ(back.to_json(), c.to_json());
    EXPECT_EQ(back.weights.lambda_G, 0.0);  // the echoed config records the effective weight
}

TEST(TrainStep, OverfitsASingleCuboid) {
    std::mt19937_64 rng(1);
    const TrainConfig cfg = small_config();
    HybridModel<float> model(cfg.model, init_seed(cfg.seed));
    Trainer<float> tr(model, cfg);
    const Batch<float> one = random_batch(1, 4, 4, rng);
    std::vector<double> losses;
    for (std::uint64_t s = 0; s < 50; ++s) {
        const StepResult r = tr.step(one, s);
        ASSERT_TRUE(r.accepted) << r.incident;
        losses.push_back(r.report.total_G);
    }
    const double head = std::accumulate(losses.begin(), losses.begin() + 10, 0.0);
    const double tail = std::accumulate(losses.end() - 10, losses.end(), 0.0);
    EXPECT_LT(losses.back(), losses.front());
    EXPECT_LT(tail, 0.9 * head);  // noise target with dropout active: a steady but modest decline
}

TEST(TrainStep, AdversarialOffLeavesDiscriminatorBitUnchanged) {
    std::mt19937_64 rng(2);
    const TrainConfig cfg = small_config(false);
    HybridModel<float> model(cfg.model, init_seed(cfg.seed));
    ASSERT_TRUE(model.has_discriminator());
    const auto disc_before = snapshot(model.discriminator_parameters());
    const auto gen_before = snapshot(model.generator_parameters());
    Trainer<float> tr(model, cfg);
    for (std::uint64_t s = 0; s < 3; ++s) {
        const StepResult r = tr.step(random_batch(16, 4, 4, rng), s);
        EXPECT_EQ(r.report.adversarial_G, 0.0);
        EXPECT_EQ(r.report.discriminator, 0.0);
    }
    EXPECT_EQ(snapshot(model.discriminator_parameters()), disc_before);
    EXPECT_NE(snapshot(model.generator_parameters()), gen_before);
    EXPECT_EQ(tr.sgd().steps(), 0u);
    EXPECT_EQ(tr.adam().steps(), 3u);
}

TEST(TrainStep, AdversarialOnAlternatesOneToOne) {
    std::mt19937_64 rng(3);
    const TrainConfig cfg = small_config(true);
    HybridModel<float> model(cfg.model, init_seed(cfg.seed));
    const auto disc_before = snapshot(model.discriminator_parameters());
    Trainer<float> tr(model, cfg);
    const StepResult r = tr.step(random_batch(16, 4, 4, rng), 0);
    EXPECT_TRUE(r.accepted);
    EXPECT_GT(r.report.adversarial_G, 0.0);
    EXPECT_GT(r.report.discriminator, 0.0);
    EXPECT_NE(snapshot(model.discriminator_parameters()), disc_before);
    EXPECT_EQ(tr.sgd().steps(), 1u);
    EXPECT_EQ(tr.adam().steps(), 1u);
}

TEST(TrainStep, NonFiniteInputRollsBackEverything) {
    std::mt19937_64 rng(4);
    const TrainConfig cfg = small_config(true);
    HybridModel<float> model(cfg.model, init_seed(cfg.seed));
    Trainer<float> tr(model, cfg);
    tr.step(random_batch(8, 4, 4, rng), 0);
    const auto params = snapshot(model.parameters());
    std::vector<Tensor<float>> buffers;
    for (auto& [name, b] : model.buffers()) buffers.push_back(*b);
    Batch<float> bad = random_batch(8, 4, 4, rng);
    bad.cuboids[5] = std::numeric_limits<float>::quiet_NaN();
    const StepResult r = tr.step(bad, 1);
    EXPECT_FALSE(r.accepted);
    EXPECT_FALSE(r.incident.empty());
    EXPECT_EQ(snapshot(model.parameters()), params);
    std::size_t k = 0;
    for (auto& [name, b] : model.buffers()) EXPECT_EQ(*b, buffers[k++]) << name;
    EXPECT_EQ(tr.sgd().steps(), 1u);
    EXPECT_EQ(tr.adam().steps(), 1u);
}

TEST(TrainStep, FixedSeedGivesIdenticalReports) {
    auto run = [] {
        std::mt19937_64 rng(5);
        const TrainConfig cfg = small_config(true);
        HybridModel<float> model(cfg.model, init_seed(cfg.seed));
        Trainer<float> tr(model, cfg);
        std::vector<double> trace;
        for (std::uint64_t s = 0; s < 3; ++s) {
            const auto r = tr.step(random_batch(8, 4, 4, rng), s).report;
            trace.insert(trace.end(), {r.recon_l2, r.recon_grad, r.classification, r.adversarial_G, r.discriminator,
                                       r.total_G});
        }
        return trace;
    };
    EXPECT_EQ(run(), run());
}

TEST(Train, WritesLogsAndCheckpoints) {
    TempDir dir("train");
    const auto mf = small_corpus(dir);
    FrameStore<float> store(mf.train);
    TrainConfig cfg = small_config(true);
    cfg.epochs = 3;
    cfg.checkpoint_every = 1;
    std::vector<std::string> lines;
    TrainOptions opt;
    opt.log = [&](const std::string& s) { lines.push_back(s); };
    const TrainResult r = train(store, cfg, dir / "run", opt);
    EXPECT_TRUE(r.finished);
    EXPECT_EQ(r.state.epoch, 3u);
    EXPECT_EQ(r.state.global_step, 9u);
    EXPECT_EQ(r.epoch_total_G.size(), 3u);
    EXPECT_TRUE(fs::exists(dir / "run/model.ckpt"));
    EXPECT_TRUE(fs::exists(dir / "run/checkpoints/epoch_001.ckpt"));
    EXPECT_TRUE(fs::exists(dir / "run/checkpoints/epoch_002.ckpt"));
    EXPECT_FALSE(fs::exists(dir / "run/checkpoints/epoch_003.ckpt"));
    const std::string log = slurp(dir / "run/loss.csv");
    EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 10);
    EXPECT_EQ(log.substr(0, log.find('\n')), kLossLogHeader);
    EXPECT_EQ(lines.size(), 4u);
    const Checkpoint ck = load_checkpoint(dir / "run/model.ckpt");
    EXPECT_EQ(ck.state, r.state);
    EXPECT_EQ(ck.train.at("seed").get<std::uint64_t>(), 9u);
    EXPECT_FALSE(ck.state.best.empty());

    // The final statistics are already the population statistics of the
    // training cuboids, so another calibration pass reproduces them.
    HybridModel<float> model = model_from_checkpoint<float>(ck);
    calibrate_batchnorm(model, store, cfg.batch_size, cfg.stride);
    HybridModel<float> saved = model_from_checkpoint<float>(ck);
    auto now = model.buffers();
    auto before = saved.buffers();
    ASSERT_EQ(now.size(), before.size());
    for (std::size_t i = 0; i < now.size(); ++i) EXPECT_EQ(*now[i].second, *before[i].second) << now[i].first;
}

TEST(Train, RejectsMismatchedFrameSize) {
    TempDir dir("train_size");
    const auto mf = small_corpus(dir);
    FrameStore<float> store(mf.train);
    TrainConfig cfg = small_config(true);
    cfg.model.frame_width = 80;
    EXPECT_THROW(train(store, cfg, dir / "run"), ConfigError);
}

TEST(Train, ResumeMidEpochMatchesUninterruptedRun) {
    TempDir dir("resume");
    const auto mf = small_corpus(dir);
    FrameStore<float> store(mf.train);
    const TrainConfig cfg = small_config(true);

    const TrainResult full = train(store, cfg, dir / "full");

    TrainOptions stop;
    stop.stop_after_steps = 4;  // epoch 1, batch 1
    const TrainResult part = train(store, cfg, dir / "part", stop);
    EXPECT_FALSE(part.finished);
    EXPECT_EQ(part.state.batch_in_epoch, 1u);
    TrainOptions resume;
    resume.resume = part.checkpoint;
    fs::copy_file(part.checkpoint, dir / "resume_from.ckpt");
    resume.resume = dir / "resume_from.ckpt";
    const TrainResult rest = train(store, cfg, dir / "part", resume);
    EXPECT_TRUE(rest.finished);

    EXPECT_EQ(slurp(dir / "full/model.ckpt"), slurp(dir / "part/model.ckpt"));
    EXPECT_EQ(slurp(dir / "full/loss.csv"), slurp(dir / "part/loss.csv"));
}

TEST(Train, ResumeRejectsAnotherConfiguration) {
    TempDir dir("resume_cfg");
    const auto mf = small_corpus(dir);
    FrameStore<float> store(mf.train);
    TrainConfig cfg = small_config(true);
    TrainOptions stop;
    stop.stop_after_steps = 1;
    const TrainResult part = train(store, cfg, dir / "a", stop);
    cfg.seed = 10;
    TrainOptions resume;
    resume.resume = part.checkpoint;
    EXPECT_THROW(train(store, cfg, dir / "b", resume), ConfigError);
}

TEST(Train, IdenticalSeedsGiveByteIdenticalCheckpoints) {
    TempDir dir("determinism");
    const auto mf = small_corpus(dir);
    FrameStore<float> store(mf.train);
    TrainConfig cfg = small_config(true);
    cfg.epochs = 1;
    train(store, cfg, dir / "a");
    train(store, cfg, dir / "b");
    EXPECT_EQ(slurp(dir / "a/model.ckpt"), slurp(dir / "b/model.ckpt"));
    cfg.seed = 10;
    train(store, cfg, dir / "c");
    EXPECT_NE(slurp(dir / "a/model.ckpt"), slurp(dir / "c/model.ckpt"));
}
