#pragma once

// Glue between the modules: staged output directories, cached fusion
// weights, split-level scoring and evaluation, the ablation matrix and run
// summaries. Everything here is deterministic given its inputs.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "hvad/checkpoint.hpp"
#include "hvad/data.hpp"
#include "hvad/errors.hpp"
#include "hvad/evaluation.hpp"
#include "hvad/hash.hpp"
#include "hvad/scoring.hpp"
#include "hvad/trainer.hpp"

namespace hvad {

using LogFn = std::function<void(const std::string&)>;

/// Directory populated under "<target>.partial" and renamed onto `target` by
/// commit(). An existing target is replaced only when `force` is set; an
/// uncommitted staging directory is removed on destruction.
class StagedDir {
public:
    StagedDir(fs::path target, bool force) : target_(std::move(target)), force_(force) {
        if (fs::exists(target_) && !force_) {
            throw ConfigError("output directory " + target_.string() + " exists; pass --force to replace it");
        }
        staging_ = target_;
        staging_ += ".partial";
        fs::remove_all(staging_);
        fs::create_directories(staging_);
    }
    StagedDir(const StagedDir&) = delete;
    StagedDir& operator=(const StagedDir&) = delete;
    ~StagedDir() {
        if (!committed_) {
            std::error_code ec;
            fs::remove_all(staging_, ec);
        }
    }

    const fs::path& path() const { return staging_; }
    const fs::path& target() const { return target_; }
    fs::path operator/(const fs::path& rel) const { return staging_ / rel; }

    void commit() {
        if (fs::exists(target_)) {
            if (!force_) throw ConfigError("output directory " + target_.string() + " appeared while writing");
            fs::remove_all(target_);
        }
        if (target_.has_parent_path()) fs::create_directories(target_.parent_path());
        fs::rename(staging_, target_);
        committed_ = true;
    }

private:
    fs::path target_;
    fs::path staging_;
    bool force_;
    bool committed_ = false;
};

/// `$HVAD_OUTPUT_ROOT/<name>`, or `runs/<name>` when the variable is unset.
inline fs::path default_output(const std::string& name) {
    const char* root = std::getenv("HVAD_OUTPUT_ROOT");
    return fs::path(root && *root ? root : "runs") / name;
}

/// Writes `text` to a temporary sibling and renames it into place.
inline void write_text_atomic(const fs::path& path, const std::string& text) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IngestionError("cannot write " + tmp.string());
        out << text;
        if (!out) throw IngestionError("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

/// Everything one CLI invocation acts on.
struct RunConfig {
    TrainConfig train;
    fs::path manifest;
    fs::path output;
    std::vector<FusionMode> modes{FusionMode::xy};
    std::optional<std::pair<std::size_t, std::size_t>> resolution;  // width, height
    bool force = false;

    /// Modes R and Rxy need the reconstruction branch.
    void validate_modes(bool has_decoder) const {
        if (modes.empty()) throw ConfigError("no score mode selected");
        for (FusionMode m : modes) {
            if (!has_decoder && m != FusionMode::xy) {
                throw ConfigError("score mode " + mode_name(m) + " needs a checkpoint trained with the decoder");
            }
        }
    }
};

/// Applies a resolution override to a manifest split.
inline DatasetManifest with_resolution(DatasetManifest m,
                                       const std::optional<std::pair<std::size_t, std::size_t>>& res) {
    if (res) {
        m.frame_width = res->first;
        m.frame_height = res->second;
        m.validate();
    }
    return m;
}

/// Provenance of a checkpoint as recorded in score and evaluation summaries.
inline nlohmann::json checkpoint_identity(const Checkpoint& c, const fs::path& path) {
    return {{"path", path.string()},
            {"file_hash", hex64(c.file_hash)},
            {"model_hash", c.model_hash},
            {"config_hash", hex64(fnv1a(c.train.dump()))},
            {"epoch", c.state.epoch},
            {"global_step", c.state.global_step}};
}

/// Sidecar beside the checkpoint, keyed by the checkpoint bytes and the
/// manifest the weights were fitted on.
inline fs::path weights_sidecar(const fs::path& checkpoint, std::uint64_t checkpoint_hash,
                                std::uint64_t manifest_hash) {
    return checkpoint.parent_path() /
           (checkpoint.stem().string() + ".weights-" + hex64(checkpoint_hash) + "-" + hex64(manifest_hash) + ".json");
}

struct FittedWeights {
    WeightMaps weights;
    fs::path sidecar;
    bool cached = false;
};

/// Loads the cached weight maps for (checkpoint, manifest) or fits and caches
/// them. `load_train` returns the training FrameStore and runs only on a miss.
template <class T, class LoadTrain>
FittedWeights cached_weights(HybridModel<T>& model, const fs::path& checkpoint_path, std::uint64_t checkpoint_hash,
                             const ManifestFile& mf, LoadTrain&& load_train, const LogFn& log = {}) {
    FittedWeights out;
    out.sidecar = weights_sidecar(checkpoint_path, checkpoint_hash, mf.hash);
    if (fs::exists(out.sidecar)) {
        std::ifstream in(out.sidecar);
        try {
            const auto j = nlohmann::json::parse(in);
            out.weights = WeightMaps::from_json(j.at("weights"));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(out.sidecar.string() + ": malformed weight cache: " + e.what());
        }
        if (out.weights.grid_w != model.grid_w() || out.weights.grid_h != model.grid_h() ||
            out.weights.R.has_value() != model.has_decoder()) {
            throw DataError(out.sidecar.string() + ": cached weights do not fit the checkpoint's model");
        }
        out.cached = true;
        return out;
    }
    const FrameStore<T>& train = load_train();
    if (train.videos() == 0) throw ConfigError("fusion weights need a training split in the manifest");
    out.weights = fit_weights(model, train, 1, kDefaultAlpha, kDefaultBeta, log);
    const nlohmann::json j = {{"checkpoint_hash", hex64(checkpoint_hash)},
                              {"manifest_hash", hex64(mf.hash)},
                              {"weights", out.weights.to_json()}};
    write_text_atomic(out.sidecar, j.dump() + "\n");
    return out;
}

struct SplitScores {
    std::vector<VideoScores> videos;
    PositionAccuracy accuracy;
};

/// Scores every video of a split; `sink` receives the fused maps per frame.
template <class T>
SplitScores score_split(HybridModel<T>& model, const FrameStore<T>& store, const WeightMaps& w,
                        const MapSink& sink = {}) {
    if (store.grid_w() != model.grid_w() || store.grid_h() != model.grid_h()) {
        throw ConfigError("test frames and checkpoint disagree on the grid size (" +
                          std::to_string(store.grid_w()) + "x" + std::to_string(store.grid_h()) + " vs " +
                          std::to_string(model.grid_w()) + "x" + std::to_string(model.grid_h()) + ")");
    }
    SplitScores out;
    const auto& videos = store.manifest().videos;
    for (std::size_t v = 0; v < store.videos(); ++v) {
        out.videos.push_back(
            score_video(model, videos[v].id, store.frames(v), videos[v].ground_truth, w, &out.accuracy, sink));
    }
    return out;
}

inline nlohmann::json accuracy_json(const PositionAccuracy& a) {
    return {{"cuboids", a.total}, {"x", a.x()}, {"y", a.y()}, {"both", a.both()}};
}

struct Metrics {
    FusionMode mode = FusionMode::xy;
    double auc = 0.0;
    double ap = 0.0;
    std::size_t positives = 0;
    std::size_t negatives = 0;

    nlohmann::json to_json() const {
        return {{"mode", mode_name(mode)}, {"auc", auc}, {"ap", ap}, {"n_pos", positives}, {"n_neg", negatives}};
    }
};

inline Metrics evaluate(const std::vector<VideoScores>& videos, FusionMode mode) {
    const LabeledScores d = gather(videos, mode);
    return {mode, roc_auc(d), pr_ap(d), d.positives(), d.negatives()};
}

/// Choices the results depend on that a reader cannot see in the numbers.
inline nlohmann::json labeled_assumptions() {
    return nlohmann::json::array({
        "frame t is scored from the triple starting at t; the last two frames inherit the last triple's score",
        "frame scores are the population SD of the fused map, divided by the per-video maximum",
        "fusion weights are 1 minus the mean training score per position, clamped at 0",
        "held-out accuracy counts cuboids of test triples whose three frames are all normal; 'both' needs x and y "
        "correct",
        "AUC treats tied scores as half-ordered; AP is the step-wise sum over distinct thresholds",
        "the discriminator only shapes training and never contributes to scores",
    });
}

/// One row of the ablation matrix.
struct AblationRow {
    std::string name;
    bool use_decoder = true;
    bool use_adversarial = true;
    double lambda_G = 0.0;
    PositionAccuracy accuracy;
    std::vector<Metrics> metrics;  // xy always; Rxy when the decoder is present
    bool discriminator_unchanged = false;
    double train_seconds = 0.0;
};

/// The full model, the model without adversarial training and the
/// classifier-only model, each trained from `base` on the same data.
inline std::vector<std::pair<std::string, TrainConfig>> ablation_variants(const TrainConfig& base) {
    TrainConfig full = base, no_adv = base, no_dec = base;
    full.model.use_decoder = true;
    full.model.use_adversarial = true;
    no_adv.model.use_decoder = true;
    no_adv.model.use_adversarial = false;
    no_dec.model.use_decoder = false;
    no_dec.model.use_adversarial = false;
    return {{"full", full}, {"no_adversarial", no_adv}, {"no_decoder", no_dec}};
}

/// True when every discriminator tensor in the checkpoint equals a fresh
/// initialization from the same seed (vacuously true without a discriminator).
inline bool discriminator_untouched(const Checkpoint& c, std::uint64_t run_seed) {
    HybridModel<float> fresh(c.model, init_seed(run_seed));
    for (Parameter<float>* p : fresh.discriminator_parameters()) {
        const auto it = c.tensors.find("param/" + p->name);
        if (it == c.tensors.end()) return false;
        if (it->second.values != std::vector<float>(p->value.data(), p->value.data() + p->value.size())) return false;
    }
    return true;
}

/// Trains, scores and evaluates each variant under `out_dir/<name>/` and
/// writes `out_dir/ablation.csv`.
template <class T = float>
std::vector<AblationRow> run_ablation(const ManifestFile& mf, const FrameStore<T>& train_store,
                                      const FrameStore<T>& test_store, const TrainConfig& base, const fs::path& out_dir,
                                      const LogFn& log = {}) {
    std::vector<AblationRow> rows;
    for (const auto& [name, cfg] : ablation_variants(base)) {
        if (log) log("ablation: training " + name);
        TrainOptions opt;
        opt.log = log;
        opt.manifest_hash = mf.hash;
        const TrainResult tr = train(train_store, cfg, out_dir / name, opt);
        const Checkpoint ck = load_checkpoint(tr.checkpoint);
        HybridModel<T> model = model_from_checkpoint<T>(ck);
        const FittedWeights fw = cached_weights(
            model, tr.checkpoint, ck.file_hash, mf, [&]() -> const FrameStore<T>& { return train_store; }, log);
        const SplitScores ss = score_split(model, test_store, fw.weights);

        AblationRow row;
        row.name = name;
        row.use_decoder = cfg.model.use_decoder;
        row.use_adversarial = cfg.model.use_adversarial;
        row.lambda_G = cfg.effective_weights().lambda_G;
        row.accuracy = ss.accuracy;
        row.metrics.push_back(evaluate(ss.videos, FusionMode::xy));
        if (model.has_decoder()) row.metrics.push_back(evaluate(ss.videos, FusionMode::Rxy));
        row.discriminator_unchanged = discriminator_untouched(ck, cfg.seed);
        row.train_seconds = tr.seconds;
        rows.push_back(std::move(row));
    }

    std::string csv = "variant,decoder,adversarial,lambda_G,acc_x,acc_y,acc_both,auc_xy,ap_xy,auc_Rxy,ap_Rxy,"
                      "discriminator_unchanged\n";
    char buf[512];
    for (const auto& r : rows) {
        const Metrics& xy = r.metrics.front();
        std::string rxy = ",";
        if (r.metrics.size() > 1) {
            std::snprintf(buf, sizeof buf, "%.6f,%.6f", r.metrics[1].auc, r.metrics[1].ap);
            rxy = buf;
        }
        std::snprintf(buf, sizeof buf, "%s,%d,%d,%g,%.6f,%.6f,%.6f,%.6f,%.6f,%s,%d\n", r.name.c_str(), r.use_decoder,
                      r.use_adversarial, r.lambda_G, r.accuracy.x(), r.accuracy.y(), r.accuracy.both(), xy.auc, xy.ap,
                      rxy.c_str(), r.discriminator_unchanged);
        csv += buf;
    }
    write_text_atomic(out_dir / "ablation.csv", csv);
    return rows;
}

}  // namespace hvad
