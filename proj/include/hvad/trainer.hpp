#pragma once

// Alternating discriminator/generator optimization, the epoch loop with
// checkpointing and resume, and the loss log.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hvad/checkpoint.hpp"
#include "hvad/data.hpp"
#include "hvad/errors.hpp"
#include "hvad/hash.hpp"
#include "hvad/losses.hpp"
#include "hvad/model.hpp"
#include "hvad/optim.hpp"

namespace hvad {

struct TrainConfig {
    std::size_t epochs = 40;
    std::size_t batch_size = kDefaultBatchSize;
    AdamOptions adam;  // generator
    SgdOptions sgd;    // discriminator
    LossWeights weights;
    ModelConfig model;
    std::uint64_t seed = 1;
    std::size_t checkpoint_every = 10;  // epochs; 0 writes only the final checkpoint
    std::size_t stride = 1;             // temporal stride between training triples
    std::size_t disc_steps = 1;         // discriminator updates per generator update
    double lr_decay = 1.0;              // per-epoch multiplier; 1 keeps the rate constant

    void validate() const {
        if (epochs == 0) throw ConfigError("epochs must be at least 1");
        if (batch_size == 0) throw ConfigError("batch size must be positive");
        if (!(adam.lr > 0.0) || !(sgd.lr > 0.0)) throw ConfigError("learning rates must be positive");
        if (stride == 0) throw ConfigError("temporal stride must be positive");
        if (disc_steps == 0) throw ConfigError("disc_steps must be positive");
        if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must be in (0, 1]");
        weights.validate();
        model.validate();
    }

    /// Weights actually optimized: the adversarial term is zero without adversarial training.
    LossWeights effective_weights() const {
        LossWeights w = weights;
        if (!model.use_adversarial) w.lambda_G = 0.0;
        return w;
    }

    double lr_scale(std::uint64_t epoch) const { return std::pow(lr_decay, static_cast<double>(epoch)); }

    nlohmann::json to_json() const {
        const LossWeights w = effective_weights();
        return {{"epochs", epochs},
                {"batch_size", batch_size},
                {"adam", {{"lr", adam.lr}, {"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}},
                {"sgd", {{"lr", sgd.lr}}},
                {"weights",
                 {{"lambda_l2", w.lambda_l2},
                  {"lambda_grad", w.lambda_grad},
                  {"lambda_G", w.lambda_G},
                  {"lambda_R", w.lambda_R},
                  {"lambda_C", w.lambda_C}}},
                {"model", model.to_json()},
                {"seed", seed},
                {"checkpoint_every", checkpoint_every},
                {"stride", stride},
                {"disc_steps", disc_steps},
                {"lr_decay", lr_decay}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.epochs = j.at("epochs").get<std::size_t>();
        c.batch_size = j.at("batch_size").get<std::size_t>();
        const auto& a = j.at("adam");
        c.adam = {a.at("lr").get<double>(), a.at("beta1").get<double>(), a.at("beta2").get<double>(),
                  a.at("eps").get<double>()};
        c.sgd.lr = j.at("sgd").at("lr").get<double>();
        const auto& w = j.at("weights");
        c.weights = {w.at("lambda_l2").get<double>(), w.at("lambda_grad").get<double>(), w.at("lambda_G").get<double>(),
                     w.at("lambda_R").get<double>(), w.at("lambda_C").get<double>()};
        c.model = ModelConfig::from_json(j.at("model"));
        c.seed = j.at("seed").get<std::uint64_t>();
        c.checkpoint_every = j.at("checkpoint_every").get<std::size_t>();
        c.stride = j.at("stride").get<std::size_t>();
        c.disc_steps = j.at("disc_steps").get<std::size_t>();
        c.lr_decay = j.at("lr_decay").get<double>();
        return c;
    }
};

/// Seed for the model's initial weights; fixed by the run seed.
inline std::uint64_t init_seed(std::uint64_t run_seed) { return mix_seed(run_seed, 0x1417); }

/// Dropout masks of step s come from this seed alone.
inline std::uint64_t dropout_seed(std::uint64_t run_seed, std::uint64_t step) {
    return mix_seed(mix_seed(run_seed, 0xd20), step);
}

struct StepResult {
    LossReport report;
    bool accepted = true;
    std::string incident;  // why the step was rolled back
};

namespace detail {

template <class T>
bool grads_finite(const std::vector<Parameter<T>*>& ps) {
    for (auto* p : ps)
        if (!p->grad.all_finite()) return false;
    return true;
}

template <class T>
void zero_grads(const std::vector<Parameter<T>*>& ps) {
    for (auto* p : ps) p->zero_grad();
}

template <class T>
Tensor<T> concat_batch(const Tensor<T>& a, const Tensor<T>& b) {
    Shape s = a.shape();
    s[0] += b.dim(0);
    Tensor<T> out(s);
    std::copy(a.data(), a.data() + a.size(), out.data());
    std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
    return out;
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& t, std::size_t begin, std::size_t count) {
    Shape s = t.shape();
    const std::size_t row = t.size() / s[0];
    s[0] = count;
    Tensor<T> out(s);
    std::copy(t.data() + begin * row, t.data() + (begin + count) * row, out.data());
    return out;
}

}  // namespace detail

/// Owns the optimizers of one run and performs training steps.
template <class T>
class Trainer {
public:
    Trainer(HybridModel<T>& model, const TrainConfig& cfg) : model_(&model), cfg_(cfg), adam_(cfg.adam), sgd_(cfg.sgd) {
        cfg_.validate();
        if (model.config().hash() != cfg.model.hash()) throw ConfigError("model and training config disagree");
    }

    Adam& adam() { return adam_; }
    Sgd& sgd() { return sgd_; }
    const TrainConfig& config() const { return cfg_; }

    /// One update: with adversarial training, `disc_steps` discriminator
    /// updates on real cuboids and detached reconstructions, then one generator
    /// update scored by the updated discriminator. A non-finite loss or
    /// gradient restores every parameter, buffer and optimizer counter.
    StepResult step(const Batch<T>& batch, std::uint64_t global_step, double lr_scale = 1.0) {
        HybridModel<T>& m = *model_;
        const LossWeights w = cfg_.effective_weights();
        const bool adversarial = cfg_.model.use_adversarial;
        auto gen = m.generator_parameters();
        auto disc = adversarial ? m.discriminator_parameters() : std::vector<Parameter<T>*>{};

        // Undo information: discriminator values (small) and every buffer. The
        // generator is only touched once all checks have passed.
        std::vector<Tensor<T>> disc_backup;
        for (auto* p : disc) disc_backup.push_back(p->value);
        std::vector<Tensor<T>> buffer_backup;
        for (auto& [name, b] : m.buffers()) buffer_backup.push_back(*b);
        const std::uint64_t sgd_steps = sgd_.steps();
        auto reject = [&](std::string why, const LossReport& r) {
            for (std::size_t i = 0; i < disc.size(); ++i) disc[i]->value = disc_backup[i];
            auto bufs = m.buffers();
            for (std::size_t i = 0; i < bufs.size(); ++i) *bufs[i].second = buffer_backup[i];
            sgd_.set_steps(sgd_steps);
            return StepResult{r, false, std::move(why)};
        };

        m.seed_dropout(dropout_seed(cfg_.seed, global_step));
        const ForwardOutputs<T> out = m.forward_generator(batch.cuboids, Mode::train);
        const std::size_t n = batch.cuboids.dim(0);

        LossReport report;
        Tensor<T> d_fake;
        if (adversarial) {
            const Tensor<T> both = detail::concat_batch(batch.cuboids, *out.reconstruction);
            for (std::size_t k = 0; k < cfg_.disc_steps; ++k) {
                const Tensor<T> scores = m.forward_discriminator(both, Mode::train);
                Tensor<T> g_real, g_fake;
                const Tensor<T> s_real = detail::slice_rows(scores, 0, n), s_fake = detail::slice_rows(scores, n, n);
                report.discriminator = discriminator_loss_batch(s_real, s_fake, &g_real, &g_fake);
                if (!std::isfinite(report.discriminator)) return reject("non-finite discriminator loss", report);
                detail::zero_grads(disc);
                m.backward_discriminator(detail::concat_batch(g_real, g_fake));
                if (!detail::grads_finite(disc)) return reject("non-finite discriminator gradient", report);
                sgd_.step(std::span<Parameter<T>* const>(disc), lr_scale);
            }
            d_fake = m.forward_discriminator(*out.reconstruction, Mode::train);
        }

        GeneratorLossGrads<T> g;
        const double d_loss = report.discriminator;
        report = generator_loss(batch.cuboids, out, batch.labels, w, adversarial ? &d_fake : nullptr, &g);
        report.discriminator = d_loss;
        if (!report.finite()) return reject("non-finite generator loss", report);

        if (adversarial && !g.d_score.empty()) {
            const Tensor<T> dm = m.backward_discriminator(g.d_score);
            for (std::size_t i = 0; i < dm.size(); ++i) g.reconstruction[i] += dm[i];
        }
        detail::zero_grads(gen);
        m.backward_generator({out.reconstruction ? &g.reconstruction : nullptr, &g.probs_x, &g.probs_y});
        if (!detail::grads_finite(gen)) return reject("non-finite generator gradient", report);
        adam_.step(std::span<Parameter<T>* const>(gen), lr_scale);
        return {report, true, {}};
    }

private:
    HybridModel<T>* model_;
    TrainConfig cfg_;
    Adam adam_;
    Sgd sgd_;
};

/// Knobs that change how a run is executed but not what it computes.
/// Replaces the generator's batchnorm running statistics with the pooled
/// statistics of every training cuboid under the current weights. The moving
/// averages lag far behind the weights when an epoch is only a few steps.
/// Batches hold whole triples, so each has at least one full grid of cuboids.
template <class T>
void calibrate_batchnorm(HybridModel<T>& model, const FrameStore<T>& store, std::size_t batch_size,
                         std::size_t stride) {
    constexpr std::size_t block = kPatch * kPatch * kDepth;
    const std::size_t cells = store.grid_w() * store.grid_h();
    const std::size_t per_batch = std::max<std::size_t>(1, batch_size / cells);
    std::vector<T> pending;
    auto flush = [&] {
        if (pending.empty()) return;
        Tensor<T> batch(Shape{pending.size() / block, kPatch, kPatch, kDepth});
        std::copy(pending.begin(), pending.end(), batch.data());
        model.forward_generator(batch, Mode::calibrate);
        pending.clear();
    };
    for (std::size_t v = 0; v < store.videos(); ++v) {
        const auto& f = store.frames(v);
        for (std::size_t t = 0; t + kDepth <= f.size(); t += std::max<std::size_t>(stride, 1)) {
            const Tensor<T> triple = triple_batch(f[t], f[t + 1], f[t + 2]);
            pending.insert(pending.end(), triple.data(), triple.data() + triple.size());
            if (pending.size() >= per_batch * cells * block) flush();
        }
    }
    flush();
}

struct TrainOptions {
    std::optional<std::filesystem::path> resume;     // checkpoint to continue from
    std::optional<std::uint64_t> stop_after_steps;   // simulate an interruption
    std::function<void(const std::string&)> log;     // progress lines
    std::uint64_t manifest_hash = 0;
};

struct TrainResult {
    std::filesystem::path checkpoint;
    TrainState state;
    LossReport last;
    std::vector<double> epoch_total_G;  // mean total_G per completed epoch of this invocation
    double seconds = 0.0;
    bool finished = false;  // false when stopped early
};

namespace detail {

inline std::string loss_row(std::uint64_t step, std::uint64_t epoch, std::uint64_t batch, const LossReport& r,
                            bool accepted) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%llu,%llu,%llu,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                  static_cast<unsigned long long>(step), static_cast<unsigned long long>(epoch),
                  static_cast<unsigned long long>(batch), accepted ? 1 : 0, r.recon_l2, r.recon_grad,
                  r.reconstruction, r.classification, r.adversarial_G, r.discriminator, r.total_G);
    return buf;
}

/// Keeps the header and the rows of steps before `steps`, dropping rows logged
/// after the checkpoint being resumed.
inline void truncate_loss_log(const std::filesystem::path& path, std::uint64_t steps) {
    std::ifstream in(path);
    if (!in) return;
    std::string header, line, kept;
    std::getline(in, header);
    kept = header + "\n";
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (std::stoull(line.substr(0, line.find(','))) < steps) kept += line + "\n";
    }
    in.close();
    std::ofstream out(path, std::ios::trunc);
    out << kept;
}

}  // namespace detail

inline constexpr const char* kLossLogHeader =
    "step,epoch,batch,accepted,recon_l2,recon_grad,reconstruction,classification,adversarial_G,discriminator,total_G";

/// Trains on `train` and writes into `out_dir`:
///   model.ckpt            final (or interrupted) state
///   checkpoints/epoch_NNN.ckpt at the configured cadence
///   loss.csv              one row per step
///   incidents.log         rolled-back steps, if any
template <class T = float>
TrainResult train(const FrameStore<T>& store, const TrainConfig& cfg, const std::filesystem::path& out_dir,
                  const TrainOptions& opt = {}) {
    namespace fs = std::filesystem;
    cfg.validate();
    if (store.manifest().frame_width != cfg.model.frame_width || store.manifest().frame_height != cfg.model.frame_height) {
        throw ConfigError("training config frame size differs from the manifest's");
    }
    const auto t0 = std::chrono::steady_clock::now();
    auto log = [&](const std::string& s) {
        if (opt.log) opt.log(s);
    };
    fs::create_directories(out_dir);

    HybridModel<T> model(cfg.model, init_seed(cfg.seed));
    TrainState state;
    state.seed = cfg.seed;
    Trainer<T> trainer(model, cfg);
    nlohmann::json config_json = cfg.to_json();
    config_json["manifest_hash"] = hex64(opt.manifest_hash);

    const fs::path loss_path = out_dir / "loss.csv";
    if (opt.resume) {
        const Checkpoint c = load_checkpoint(*opt.resume);
        if (c.train.value("seed", std::uint64_t{0}) != cfg.seed || c.model_hash != cfg.model.hash()) {
            throw ConfigError("checkpoint " + opt.resume->string() + " was written by a different configuration");
        }
        restore(model, c);
        state = c.state;
        trainer.adam().set_steps(state.adam_steps);
        trainer.sgd().set_steps(state.sgd_steps);
        detail::truncate_loss_log(loss_path, state.global_step);
        log("resumed at epoch " + std::to_string(state.epoch) + ", batch " + std::to_string(state.batch_in_epoch));
    } else {
        std::ofstream(loss_path, std::ios::trunc) << kLossLogHeader << '\n';
        std::error_code ec;
        fs::remove(out_dir / "incidents.log", ec);
    }

    BatchStream<T> stream(store, cfg.batch_size, cfg.seed, cfg.stride);
    std::ofstream loss_log(loss_path, std::ios::app);
    TrainResult result;

    auto write_checkpoint = [&](const fs::path& path) {
        state.adam_steps = trainer.adam().steps();
        state.sgd_steps = trainer.sgd().steps();
        loss_log.flush();
        save_checkpoint(path, make_checkpoint(model, config_json, state));
    };

    Batch<T> batch;
    for (; state.epoch < cfg.epochs; ++state.epoch, state.batch_in_epoch = 0) {
        stream.begin_epoch(state.epoch);
        stream.skip(state.batch_in_epoch);
        const double lr_scale = cfg.lr_scale(state.epoch);
        while (stream.next(batch)) {
            if (opt.stop_after_steps && state.global_step >= *opt.stop_after_steps) {
                result.checkpoint = out_dir / "model.ckpt";
                write_checkpoint(result.checkpoint);
                result.state = state;
                result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                log("stopped after step " + std::to_string(state.global_step));
                return result;
            }
            const StepResult r = trainer.step(batch, state.global_step, lr_scale);
            loss_log << detail::loss_row(state.global_step, state.epoch, state.batch_in_epoch, r.report, r.accepted)
                     << '\n';
            if (!r.accepted) {
                ++state.rejected_steps;
                std::ofstream(out_dir / "incidents.log", std::ios::app)
                    << "step " << state.global_step << " (epoch " << state.epoch << ", batch "
                    << state.batch_in_epoch << "): " << r.incident << "; step rolled back\n";
                log("step " + std::to_string(state.global_step) + " rolled back: " + r.incident);
            } else {
                result.last = r.report;
                state.epoch_loss_sum += r.report.total_G;
                ++state.epoch_steps;
                for (const auto& [k, v] : {std::pair{"total_G", r.report.total_G},
                                           std::pair{"reconstruction", r.report.reconstruction},
                                           std::pair{"classification", r.report.classification},
                                           std::pair{"adversarial_G", r.report.adversarial_G},
                                           std::pair{"discriminator", r.report.discriminator}}) {
                    auto it = state.running.find(k);
                    state.running[k] = it == state.running.end() ? v : 0.9 * it->second + 0.1 * v;
                }
            }
            ++state.global_step;
            ++state.batch_in_epoch;
        }
        const double mean =
            state.epoch_steps ? state.epoch_loss_sum / static_cast<double>(state.epoch_steps) : 0.0;
        state.epoch_loss_sum = 0.0;
        state.epoch_steps = 0;
        result.epoch_total_G.push_back(mean);
        char line[160];
        std::snprintf(line, sizeof line, "epoch %zu/%zu  total_G %.5f  classification %.5f  reconstruction %.5f",
                      static_cast<std::size_t>(state.epoch + 1), cfg.epochs, mean, state.running["classification"],
                      state.running["reconstruction"]);
        log(line);
        const bool last = state.epoch + 1 == cfg.epochs;
        if (cfg.checkpoint_every && (state.epoch + 1) % cfg.checkpoint_every == 0 && !last) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%03zu.ckpt", static_cast<std::size_t>(state.epoch + 1));
            fs::create_directories(out_dir / "checkpoints");
            const fs::path p = out_dir / "checkpoints" / name;
            if (state.best.empty() || mean < state.best_loss) {
                state.best = (fs::path("checkpoints") / name).string();
                state.best_loss = mean;
            }
            ++state.epoch;  // the checkpoint records the epoch as complete
            state.batch_in_epoch = 0;
            write_checkpoint(p);
            --state.epoch;
        }
    }
    state.batch_in_epoch = 0;
    calibrate_batchnorm(model, store, cfg.batch_size, cfg.stride);
    log("batchnorm statistics re-estimated over the training cuboids");
    result.checkpoint = out_dir / "model.ckpt";
    write_checkpoint(result.checkpoint);
    result.state = state;
    result.finished = true;
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

}  // namespace hvad
