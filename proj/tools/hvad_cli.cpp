// hvad: synthesize a corpus, train, score, evaluate and inspect models.
//
// Exit codes: 0 success, 1 usage or configuration, 2 data/ingestion/evaluation,
// 3 numeric failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "hvad/checkpoint.hpp"
#include "hvad/filters.hpp"
#include "hvad/pipeline.hpp"
#include "hvad/synth.hpp"

using namespace hvad;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

void progress(const std::string& line) { std::cerr << line << '\n'; }

std::pair<std::size_t, std::size_t> parse_size(const std::string& s) {
    static const std::regex re(R"((\d+)x(\d+))");
    std::smatch m;
    if (!std::regex_match(s, m, re)) throw ConfigError("size must look like WIDTHxHEIGHT, got '" + s + "'");
    return {std::stoul(m[1]), std::stoul(m[2])};
}

fs::path output_or_default(const std::string& flag, const std::string& name) {
    return flag.empty() ? default_output(name) : fs::path(flag);
}

void write_json(const fs::path& path, const json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
    std::string out, size = "80x60";
    std::size_t train_videos = 4, test_videos = 2, frames = 100, first = 40, last = 60;
    std::uint64_t seed = 7;
    bool force = false;
};

int cmd_synth(const SynthArgs& a) {
    SynthSpec spec;
    std::tie(spec.frame_width, spec.frame_height) = parse_size(a.size);
    spec.train_videos = a.train_videos;
    spec.test_videos = a.test_videos;
    spec.frames = a.frames;
    spec.anomaly_first = a.first;
    spec.anomaly_last = a.last;
    spec.seed = a.seed;
    spec.validate();
    StagedDir out(output_or_default(a.out, "synth"), a.force);
    const ManifestFile mf = synth_corpus(spec, out.path());
    out.commit();
    std::cout << "manifest " << (out.target() / "manifest.json").string() << '\n'
              << "train videos " << mf.train.videos.size() << ", test videos " << mf.test.videos.size() << ", "
              << spec.frames << " frames each, grid " << spec.grid_w() << "x" << spec.grid_h() << '\n';
    return kOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    std::string manifest, out, size, resume;
    std::optional<std::size_t> epochs, batch_size, checkpoint_every;
    std::optional<std::uint64_t> seed, max_steps;
    std::optional<bool> adversarial;
    bool no_decoder = false;
    bool force = false;
};

void print_train_summary(const TrainResult& r) {
    std::printf("checkpoint %s\n", r.checkpoint.string().c_str());
    std::printf("epochs %llu  steps %llu  rejected %llu  seconds %.1f\n",
                static_cast<unsigned long long>(r.state.epoch), static_cast<unsigned long long>(r.state.global_step),
                static_cast<unsigned long long>(r.state.rejected_steps), r.seconds);
    if (!r.epoch_total_G.empty()) std::printf("final epoch mean total_G %.6f\n", r.epoch_total_G.back());
    std::printf("last step: reconstruction %.6f  classification %.6f  adversarial_G %.6f  discriminator %.6f  "
                "total_G %.6f\n",
                r.last.reconstruction, r.last.classification, r.last.adversarial_G, r.last.discriminator,
                r.last.total_G);
    if (!r.finished) std::printf("stopped early; continue with --resume %s\n", r.checkpoint.string().c_str());
}

int cmd_train(const TrainArgs& a) {
    RunConfig rc;
    rc.manifest = a.manifest;
    rc.force = a.force;
    if (!a.size.empty()) rc.resolution = parse_size(a.size);
    const ManifestFile mf = load_manifest(rc.manifest);
    const DatasetManifest split = with_resolution(mf.train, rc.resolution);
    if (split.videos.empty()) throw DataError(rc.manifest.string() + ": no training videos");

    TrainOptions opt;
    opt.log = progress;
    opt.manifest_hash = mf.hash;
    opt.stop_after_steps = a.max_steps;

    if (!a.resume.empty()) {
        // Continue in the run directory that owns the checkpoint, under its
        // recorded configuration; only the epoch budget may change.
        const fs::path ckpt = a.resume;
        const Checkpoint c = load_checkpoint(ckpt);
        rc.train = TrainConfig::from_json(c.train);
        if (a.epochs) rc.train.epochs = *a.epochs;
        if (a.seed || a.batch_size || a.adversarial || a.no_decoder || a.checkpoint_every) {
            throw ConfigError("--resume takes its configuration from the checkpoint; only --epochs may change");
        }
        fs::path run = ckpt.parent_path();
        if (run.filename() == "checkpoints") run = run.parent_path();
        if (!a.out.empty() && fs::weakly_canonical(a.out) != fs::weakly_canonical(run)) {
            throw ConfigError("--resume continues in " + run.string() + "; --out must be omitted or match");
        }
        opt.resume = ckpt;
        FrameStore<float> store(split);
        const TrainResult r = train(store, rc.train, run, opt);
        print_train_summary(r);
        return kOk;
    }

    TrainConfig& cfg = rc.train;
    cfg.model.frame_width = split.frame_width;
    cfg.model.frame_height = split.frame_height;
    cfg.model.use_decoder = !a.no_decoder;
    cfg.model.use_adversarial = a.adversarial.value_or(!a.no_decoder);
    if (a.epochs) cfg.epochs = *a.epochs;
    if (a.batch_size) cfg.batch_size = *a.batch_size;
    if (a.checkpoint_every) cfg.checkpoint_every = *a.checkpoint_every;
    if (a.seed) cfg.seed = *a.seed;
    cfg.validate();

    FrameStore<float> store(split);
    StagedDir out(output_or_default(a.out, "train"), rc.force);
    const TrainResult staged = train(store, cfg, out.path(), opt);
    out.commit();
    TrainResult r = staged;
    r.checkpoint = out.target() / staged.checkpoint.lexically_relative(out.path());
    print_train_summary(r);
    return kOk;
}

// ---------------------------------------------------------------- score

struct ScoreArgs {
    std::string checkpoint, manifest, out;
    std::vector<std::string> modes;
    bool dump_maps = false;
    bool force = false;
};

int cmd_score(const ScoreArgs& a) {
    RunConfig rc;
    rc.manifest = a.manifest;
    rc.force = a.force;
    rc.modes.clear();
    for (const auto& m : a.modes.empty() ? std::vector<std::string>{"xy"} : a.modes) rc.modes.push_back(parse_mode(m));

    const fs::path ckpt_path = a.checkpoint;
    const Checkpoint ck = load_checkpoint(ckpt_path);
    rc.validate_modes(ck.model.use_decoder);
    HybridModel<float> model = model_from_checkpoint<float>(ck);
    rc.resolution = std::pair{ck.model.frame_width, ck.model.frame_height};

    const ManifestFile mf = load_manifest(rc.manifest);
    const DatasetManifest test_split = with_resolution(mf.test, rc.resolution);
    if (test_split.videos.empty()) throw DataError(rc.manifest.string() + ": no test videos");

    std::optional<FrameStore<float>> train_store;
    const FittedWeights fw = cached_weights(
        model, ckpt_path, ck.file_hash, mf,
        [&]() -> const FrameStore<float>& {
            progress("fitting fusion weights on the training split");
            return train_store.emplace(with_resolution(mf.train, rc.resolution));
        },
        progress);
    progress(std::string(fw.cached ? "using cached" : "cached") + " fusion weights " + fw.sidecar.string());

    const FrameStore<float> test(test_split);
    StagedDir out(output_or_default(a.out, "score"), rc.force);
    const bool dump_rxy =
        std::find(rc.modes.begin(), rc.modes.end(), FusionMode::Rxy) != rc.modes.end() && model.has_decoder();
    MapSink sink;
    if (a.dump_maps) {
        sink = [&](const std::string& video, std::size_t frame, const ScoreMap& xy, const std::optional<ScoreMap>& rxy) {
            const fs::path dir = out / "maps" / video;
            fs::create_directories(dir);
            char name[32];
            std::snprintf(name, sizeof name, "%05zu_xy.csv", frame);
            write_map_csv(dir / name, xy);
            if (dump_rxy && rxy) {
                std::snprintf(name, sizeof name, "%05zu_Rxy.csv", frame);
                write_map_csv(dir / name, *rxy);
            }
        };
    }
    const SplitScores ss = score_split(model, test, fw.weights, sink);

    json videos = json::array();
    for (const auto& v : ss.videos) {
        write_score_table(out / (v.id + ".csv"), v);
        videos.push_back({{"id", v.id}, {"frames", v.frames()}, {"ground_truth", !v.ground_truth.empty()}});
    }
    json modes = json::array();
    for (FusionMode m : rc.modes) modes.push_back(mode_name(m));
    write_json(out / "scores.json", {{"checkpoint", checkpoint_identity(ck, ckpt_path)},
                                     {"manifest", {{"path", rc.manifest.string()}, {"hash", hex64(mf.hash)}}},
                                     {"weights", {{"sidecar", fw.sidecar.string()}, {"clamped", fw.weights.clamped}}},
                                     {"modes", modes},
                                     {"decoder", model.has_decoder()},
                                     {"accuracy", accuracy_json(ss.accuracy)},
                                     {"videos", videos},
                                     {"assumptions", labeled_assumptions()}});
    out.commit();
    std::printf("scores %s  (%zu videos)\n", out.target().string().c_str(), ss.videos.size());
    if (ss.accuracy.total) {
        std::printf("held-out position accuracy: x %.4f  y %.4f  both %.4f  over %zu cuboids\n", ss.accuracy.x(),
                    ss.accuracy.y(), ss.accuracy.both(), ss.accuracy.total);
    }
    return kOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
    std::string scores, out, mode;
    std::vector<std::string> metrics;
    bool force = false;
};

int cmd_eval(const EvalArgs& a) {
    const fs::path dir = a.scores;
    const json meta = read_json(dir / "scores.json");
    const FusionMode mode = parse_mode(a.mode.empty() ? meta.at("modes").at(0).get<std::string>() : a.mode);
    if (mode != FusionMode::xy && !meta.value("decoder", false)) {
        throw ConfigError("score mode " + mode_name(mode) + " needs scores from a checkpoint with the decoder");
    }
    std::vector<std::string> metrics = a.metrics.empty() ? std::vector<std::string>{"auc", "ap"} : a.metrics;

    std::vector<VideoScores> videos;
    for (const auto& v : meta.at("videos")) videos.push_back(read_score_table(dir / (v.at("id").get<std::string>() + ".csv")));
    const LabeledScores d = gather(videos, mode);

    StagedDir out(output_or_default(a.out, "eval"), a.force);
    json results = json::object();
    for (const auto& m : metrics) {
        const bool auc = m == "auc";
        const double value = auc ? roc_auc(d) : pr_ap(d);
        export_curve(d, auc ? CurveKind::roc : CurveKind::pr, out / ((auc ? "roc_" : "pr_") + mode_name(mode) + ".csv"));
        std::cout << append_eval_log(out / "eval.log", m, value, d) << '\n';
        results[m] = value;
    }
    const json& ckpt = meta.at("checkpoint");
    write_json(out / "summary.json", {{"config_hash", ckpt.at("config_hash")},
                                      {"model_hash", ckpt.at("model_hash")},
                                      {"checkpoint", ckpt},
                                      {"scores", dir.string()},
                                      {"mode", mode_name(mode)},
                                      {"metrics", results},
                                      {"n_pos", d.positives()},
                                      {"n_neg", d.negatives()},
                                      {"accuracy", meta.at("accuracy")},
                                      {"assumptions", meta.at("assumptions")}});
    out.commit();
    return kOk;
}

// ---------------------------------------------------------------- ablate

struct AblateArgs {
    std::string manifest, out;
    std::optional<std::size_t> epochs, batch_size;
    std::optional<std::uint64_t> seed;
    bool force = false;
};

int cmd_ablate(const AblateArgs& a) {
    const ManifestFile mf = load_manifest(a.manifest);
    TrainConfig base;
    base.model.frame_width = mf.train.frame_width;
    base.model.frame_height = mf.train.frame_height;
    base.checkpoint_every = 0;
    if (a.epochs) base.epochs = *a.epochs;
    if (a.batch_size) base.batch_size = *a.batch_size;
    if (a.seed) base.seed = *a.seed;
    const FrameStore<float> train_store(mf.train), test_store(mf.test);
    StagedDir out(output_or_default(a.out, "ablate"), a.force);
    const auto rows = run_ablation(mf, train_store, test_store, base, out.path(), progress);

    json summary = {{"config", base.to_json()}, {"manifest_hash", hex64(mf.hash)}, {"variants", json::array()}};
    std::printf("%-15s %-8s %-8s %-9s %-9s %-9s %-9s\n", "variant", "lambda_G", "acc", "auc_xy", "ap_xy", "auc_Rxy",
                "D_same");
    for (const auto& r : rows) {
        json v = {{"name", r.name},
                  {"decoder", r.use_decoder},
                  {"adversarial", r.use_adversarial},
                  {"lambda_G", r.lambda_G},
                  {"accuracy", accuracy_json(r.accuracy)},
                  {"discriminator_unchanged", r.discriminator_unchanged},
                  {"train_seconds", r.train_seconds},
                  {"metrics", json::array()}};
        for (const auto& m : r.metrics) v["metrics"].push_back(m.to_json());
        summary["variants"].push_back(v);
        const std::string rxy = r.metrics.size() > 1 ? std::to_string(r.metrics[1].auc) : "-";
        std::printf("%-15s %-8g %-8.4f %-9.4f %-9.4f %-9s %-9s\n", r.name.c_str(), r.lambda_G, r.accuracy.both(),
                    r.metrics[0].auc, r.metrics[0].ap, rxy.c_str(), r.discriminator_unchanged ? "yes" : "no");
    }
    summary["assumptions"] = labeled_assumptions();
    write_json(out / "summary.json", summary);
    out.commit();
    return kOk;
}

// ---------------------------------------------------------------- export-filters

struct FilterArgs {
    std::string checkpoint, before, out;
    std::size_t columns = 8, scale = 8;
    bool force = false;
};

int cmd_export_filters(const FilterArgs& a) {
    auto first_filters = [](const fs::path& p) {
        HybridModel<float> m = model_from_checkpoint<float>(load_checkpoint(p));
        return m.first_layer_filters().value;
    };
    Tensor<float> filters = first_filters(a.checkpoint);
    if (!a.before.empty()) filters = filter_difference(filters, first_filters(a.before));
    const fs::path out = a.out.empty() ? default_output("filters.pgm") : fs::path(a.out);
    if (fs::exists(out) && !a.force) throw ConfigError(out.string() + " exists; pass --force to replace it");
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    FilterGridOptions opt;
    opt.columns = a.columns;
    opt.scale = a.scale;
    export_filter_grid(out, filters, opt);
    std::cout << "filters " << out.string() << " (" << shape_string(filters.shape()) << ")\n";
    return kOk;
}

// ---------------------------------------------------------------- dump

struct DumpArgs {
    std::string checkpoint, size = "160x120";
    bool no_decoder = false;
    bool tensors = false;
};

int cmd_dump(const DumpArgs& a) {
    ModelConfig cfg;
    if (!a.checkpoint.empty()) {
        const Checkpoint c = load_checkpoint(a.checkpoint);
        cfg = c.model;
        std::cout << "model " << c.model.to_json().dump() << '\n'
                  << "model_hash " << c.model_hash << '\n'
                  << "train " << c.train.dump() << '\n'
                  << "state " << c.state.to_json().dump() << '\n'
                  << "file_hash " << hex64(c.file_hash) << '\n';
        if (a.tensors) {
            for (const auto& [name, rec] : c.tensors) std::cout << "tensor " << name << ' ' << shape_string(rec.shape) << '\n';
        }
    } else {
        std::tie(cfg.frame_width, cfg.frame_height) = parse_size(a.size);
        cfg.use_decoder = !a.no_decoder;
        cfg.use_adversarial = !a.no_decoder;
        cfg.validate();
    }
    HybridModel<float> model(cfg);
    std::printf("%-14s %-22s %-14s %s\n", "component", "layer", "parameter", "output");
    for (const auto& r : model.shape_trace()) {
        std::printf("%-14s %-22s %-14s %s\n", r.component.c_str(), r.layer.c_str(), r.parameter.c_str(),
                    r.output.c_str());
    }
    std::printf("parameters %zu\n", model.parameter_count());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Frame-level video anomaly detection with a hybrid autoencoder and patch-position classifier"};
    app.require_subcommand(1);
    int code = kOk;

    SynthArgs sy;
    auto* synth = app.add_subcommand("synth", "Write a seeded synthetic corpus with injected anomalies");
    synth->add_option("--out", sy.out, "Output directory (default $HVAD_OUTPUT_ROOT/synth)");
    synth->add_option("--size", sy.size, "Frame size WIDTHxHEIGHT")->capture_default_str();
    synth->add_option("--train-videos", sy.train_videos)->capture_default_str();
    synth->add_option("--test-videos", sy.test_videos)->capture_default_str();
    synth->add_option("--frames", sy.frames, "Frames per video")->capture_default_str();
    synth->add_option("--anomaly-first", sy.first, "First anomalous test frame")->capture_default_str();
    synth->add_option("--anomaly-last", sy.last, "Last anomalous test frame (inclusive)")->capture_default_str();
    synth->add_option("--seed", sy.seed)->capture_default_str();
    synth->add_flag("--force", sy.force, "Replace an existing output directory");
    synth->callback([&] { code = cmd_synth(sy); });

    TrainArgs tr;
    auto* train = app.add_subcommand("train", "Train a model on the manifest's training split");
    train->add_option("--manifest", tr.manifest, "Dataset manifest (JSON)")->required();
    train->add_option("--out", tr.out, "Run directory (default $HVAD_OUTPUT_ROOT/train)");
    train->add_option("--epochs", tr.epochs, "Epochs (default 40)");
    train->add_option("--batch-size", tr.batch_size, "Cuboids per batch (default 3072)");
    train->add_option("--checkpoint-every", tr.checkpoint_every, "Epochs between checkpoints; 0 for final only");
    train->add_option("--seed", tr.seed, "Run seed (default 0)");
    train->add_option("--size", tr.size, "Resize frames to WIDTHxHEIGHT instead of the manifest size");
    auto* adv = train->add_flag_function(
        "--adversarial", [&](std::int64_t) { tr.adversarial = true; }, "Enable adversarial training (default)");
    train->add_flag_function("--no-adversarial", [&](std::int64_t) { tr.adversarial = false; },
                             "Disable adversarial training (lambda_G = 0)")
        ->excludes(adv);
    train->add_flag("--no-decoder", tr.no_decoder, "Train the position classifier alone");
    train->add_option("--resume", tr.resume, "Continue from a checkpoint of an earlier run");
    train->add_option("--max-steps", tr.max_steps, "Stop after this many global steps (for staged runs)");
    train->add_flag("--force", tr.force, "Replace an existing run directory");
    train->callback([&] { code = cmd_train(tr); });

    ScoreArgs sc;
    auto* score = app.add_subcommand("score", "Score the manifest's test split with a checkpoint");
    score->add_option("--checkpoint", sc.checkpoint)->required();
    score->add_option("--manifest", sc.manifest)->required();
    score->add_option("--mode", sc.modes, "R, xy or Rxy; repeatable (default xy)");
    score->add_option("--out", sc.out, "Output directory (default $HVAD_OUTPUT_ROOT/score)");
    score->add_flag("--dump-maps", sc.dump_maps, "Write each frame's fused map as a CSV grid");
    score->add_flag("--force", sc.force, "Replace an existing output directory");
    score->callback([&] { code = cmd_score(sc); });

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "Compute frame-level AUC and AP from score tables");
    eval->add_option("--scores", ev.scores, "Directory written by score")->required();
    eval->add_option("--metric", ev.metrics, "auc or ap; repeatable (default both)")
        ->check(CLI::IsMember({"auc", "ap"}));
    eval->add_option("--mode", ev.mode, "Fusion mode to evaluate (default: first scored mode)");
    eval->add_option("--out", ev.out, "Output directory (default $HVAD_OUTPUT_ROOT/eval)");
    eval->add_flag("--force", ev.force, "Replace an existing output directory");
    eval->callback([&] { code = cmd_eval(ev); });

    AblateArgs ab;
    auto* ablate = app.add_subcommand("ablate", "Train and evaluate the full, no-adversarial and no-decoder variants");
    ablate->add_option("--manifest", ab.manifest)->required();
    ablate->add_option("--out", ab.out, "Output directory (default $HVAD_OUTPUT_ROOT/ablate)");
    ablate->add_option("--epochs", ab.epochs);
    ablate->add_option("--batch-size", ab.batch_size);
    ablate->add_option("--seed", ab.seed);
    ablate->add_flag("--force", ab.force);
    ablate->callback([&] { code = cmd_ablate(ab); });

    FilterArgs fi;
    auto* filt = app.add_subcommand("export-filters", "Render the first convolution's filters as a PGM mosaic");
    filt->add_option("--checkpoint", fi.checkpoint)->required();
    filt->add_option("--before", fi.before, "Earlier checkpoint; renders the difference");
    filt->add_option("--out", fi.out, "PGM path (default $HVAD_OUTPUT_ROOT/filters.pgm)");
    filt->add_option("--columns", fi.columns)->capture_default_str();
    filt->add_option("--scale", fi.scale)->capture_default_str();
    filt->add_flag("--force", fi.force);
    filt->callback([&] { code = cmd_export_filters(fi); });

    DumpArgs du;
    auto* dump = app.add_subcommand("dump", "Print a checkpoint header and the model's shape trace");
    dump->add_option("--checkpoint", du.checkpoint);
    dump->add_option("--size", du.size, "Frame size when no checkpoint is given")->capture_default_str();
    dump->add_flag("--no-decoder", du.no_decoder);
    dump->add_flag("--tensors", du.tensors, "List stored tensors");
    dump->callback([&] { code = cmd_dump(du); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kUsage;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    }
    return code;
}
