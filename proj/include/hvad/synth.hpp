#pragma once

// Deterministic synthetic video corpus for desk-scale end-to-end runs.
//
// Every grid cell carries a texture that encodes its position: the top half of
// the cell holds a level that grows with the column, the bottom half a level
// that grows with the row. A small travelling ripple plus a global flicker
// make consecutive frames differ smoothly. Test anomalies act on a 2x2 block
// of cells during a marked frame range, either inverting the intensities or
// swapping the block with the block half a grid away.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "hvad/data.hpp"
#include "hvad/errors.hpp"
#include "hvad/hash.hpp"
#include "hvad/image.hpp"
#include "hvad/tensor.hpp"

namespace hvad {

struct SynthSpec {
    std::size_t frame_width = 80;
    std::size_t frame_height = 60;
    std::size_t train_videos = 4;
    std::size_t test_videos = 2;
    std::size_t frames = 100;
    std::size_t anomaly_first = 40;  // inclusive
    std::size_t anomaly_last = 60;   // inclusive
    std::size_t clean_test_videos = 0;  // trailing test videos without anomalies
    std::uint64_t seed = 7;

    std::size_t grid_w() const { return frame_width / kPatch; }
    std::size_t grid_h() const { return frame_height / kPatch; }

    void validate() const {
        if (frame_width % kPatch || frame_height % kPatch || frame_width == 0 || frame_height == 0) {
            throw ConfigError("synthetic frame size must be a positive multiple of " + std::to_string(kPatch));
        }
        if (grid_w() < 4 || grid_h() < 4) throw ConfigError("synthetic grid must be at least 4x4 cells");
        if (frames < kDepth) throw ConfigError("synthetic videos need at least " + std::to_string(kDepth) + " frames");
        if (train_videos == 0) throw ConfigError("synthetic corpus needs a training video");
        if (clean_test_videos > test_videos) throw ConfigError("more clean test videos than test videos");
        if (test_videos > clean_test_videos && (anomaly_first > anomaly_last || anomaly_last >= frames)) {
            throw ConfigError("anomaly range must lie inside the video");
        }
    }
};

enum class AnomalyKind { none, invert, swap };

struct SynthAnomaly {
    AnomalyKind kind = AnomalyKind::none;
    std::size_t cell_x = 0;  // top-left cell of the 2x2 block
    std::size_t cell_y = 0;
};

/// Parameters of one generated video.
struct SynthVideo {
    double phase = 0.0;
    SynthAnomaly anomaly;
};

inline SynthVideo synth_video(const SynthSpec& spec, bool test, std::size_t index) {
    std::mt19937_64 rng(mix_seed(spec.seed, (test ? 1000 : 0) + index));
    SynthVideo v;
    v.phase = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
    if (test && index < spec.test_videos - spec.clean_test_videos) {
        v.anomaly.kind = index % 2 == 0 ? AnomalyKind::invert : AnomalyKind::swap;
        // Left/top quarter, so inversion and the swap partner land on clearly
        // different position codes.
        v.anomaly.cell_x = std::uniform_int_distribution<std::size_t>(0, spec.grid_w() / 2 - 2)(rng);
        v.anomaly.cell_y = std::uniform_int_distribution<std::size_t>(0, spec.grid_h() / 2 - 2)(rng);
    }
    return v;
}

/// Normal (anomaly-free) intensity at pixel (x,y) of frame t.
inline double synth_normal_pixel(const SynthSpec& spec, double phase, std::size_t x, std::size_t y, std::size_t t) {
    const std::size_t i = x / kPatch, j = y / kPatch, u = x % kPatch, w = y % kPatch;
    const double base = w < kPatch / 2 ? 0.1 + 0.8 * static_cast<double>(i) / static_cast<double>(spec.grid_w() - 1)
                                       : 0.1 + 0.8 * static_cast<double>(j) / static_cast<double>(spec.grid_h() - 1);
    constexpr double two_pi = 2.0 * std::numbers::pi;
    const double td = static_cast<double>(t);
    const double ripple = 0.06 * std::sin(two_pi * static_cast<double>(u + w) / 5.0 + two_pi * td / 20.0 + phase);
    const double flicker = 0.03 * std::sin(two_pi * td / 50.0 + phase);
    return std::clamp(base + ripple + flicker, 0.0, 1.0);
}

inline bool synth_in_anomaly(const SynthSpec& spec, const SynthVideo& v, std::size_t t) {
    return v.anomaly.kind != AnomalyKind::none && t >= spec.anomaly_first && t <= spec.anomaly_last;
}

/// Frame t of a video as [H,W,1].
inline Tensor<double> synth_frame(const SynthSpec& spec, const SynthVideo& v, std::size_t t) {
    const std::size_t W = spec.frame_width, H = spec.frame_height;
    Tensor<double> f(Shape{H, W, 1});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) f.at(y, x, std::size_t{0}) = synth_normal_pixel(spec, v.phase, x, y, t);
    if (!synth_in_anomaly(spec, v, t)) return f;

    const std::size_t x0 = v.anomaly.cell_x * kPatch, y0 = v.anomaly.cell_y * kPatch;
    const std::size_t dx = (spec.grid_w() / 2) * kPatch, dy = (spec.grid_h() / 2) * kPatch;
    for (std::size_t y = y0; y < y0 + 2 * kPatch; ++y)
        for (std::size_t x = x0; x < x0 + 2 * kPatch; ++x) {
            auto& a = f.at(y, x, std::size_t{0});
            if (v.anomaly.kind == AnomalyKind::invert) {
                a = 1.0 - a;
            } else {
                std::swap(a, f.at(y + dy, x + dx, std::size_t{0}));
            }
        }
    return f;
}

inline std::vector<int> synth_ground_truth(const SynthSpec& spec, const SynthVideo& v) {
    std::vector<int> gt(spec.frames, 0);
    for (std::size_t t = 0; t < spec.frames; ++t) gt[t] = synth_in_anomaly(spec, v, t);
    return gt;
}

inline std::string anomaly_kind_name(AnomalyKind k) {
    switch (k) {
        case AnomalyKind::invert: return "invert";
        case AnomalyKind::swap: return "swap";
        default: return "none";
    }
}

/// Writes the corpus under `dir` (frames as 8-bit PGM, ground-truth text
/// files, manifest.json) and returns the parsed manifest.
inline ManifestFile synth_corpus(const SynthSpec& spec, const fs::path& dir) {
    spec.validate();
    fs::create_directories(dir);
    nlohmann::json manifest = {{"format", "hvad-manifest"},
                               {"version", 1},
                               {"frame_width", spec.frame_width},
                               {"frame_height", spec.frame_height},
                               {"train", nlohmann::json::array()},
                               {"test", nlohmann::json::array()},
                               {"synth",
                                {{"seed", spec.seed},
                                 {"frames", spec.frames},
                                 {"anomaly_first", spec.anomaly_first},
                                 {"anomaly_last", spec.anomaly_last}}}};

    auto emit = [&](bool test, std::size_t index) {
        const SynthVideo v = synth_video(spec, test, index);
        char id[16];
        std::snprintf(id, sizeof id, "%s%02zu", test ? "t" : "v", index);
        const std::string split = test ? "test" : "train";
        const fs::path vdir = dir / split / id;
        fs::create_directories(vdir);
        for (std::size_t t = 0; t < spec.frames; ++t) {
            char name[32];
            std::snprintf(name, sizeof name, "%05zu.pgm", t);
            write_pgm(vdir / name, spec.frame_width, spec.frame_height, synth_frame(spec, v, t).storage());
        }
        nlohmann::json entry = {{"id", id}, {"frames", split + "/" + id + "/*.pgm"}};
        if (test) {
            const std::string gt = split + "/" + std::string(id) + ".txt";
            write_ground_truth(dir / gt, synth_ground_truth(spec, v));
            entry["ground_truth"] = gt;
            entry["anomaly"] = {{"kind", anomaly_kind_name(v.anomaly.kind)},
                                {"cell", {v.anomaly.cell_x, v.anomaly.cell_y}}};
        }
        manifest[split].push_back(entry);
    };
    for (std::size_t v = 0; v < spec.train_videos; ++v) emit(false, v);
    for (std::size_t v = 0; v < spec.test_videos; ++v) emit(true, v);

    const fs::path path = dir / "manifest.json";
    std::ofstream out(path);
    if (!out) throw IngestionError("cannot write " + path.string());
    out << manifest.dump(2) << '\n';
    out.close();
    return load_manifest(path);
}

}  // namespace hvad
