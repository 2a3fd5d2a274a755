#pragma once

// Cuboid-level normality scores, per-position fusion weights fitted on
// training data, weighted fusion, standard-deviation frame scores and per-video
// max normalization.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hvad/data.hpp"
#include "hvad/errors.hpp"
#include "hvad/model.hpp"
#include "hvad/ops.hpp"
#include "hvad/tensor.hpp"

namespace hvad {

inline constexpr double kDefaultAlpha = 1.0;
inline constexpr double kDefaultBeta = 2.0;

/// Score of a reconstruction: max over elements of |c - m|^alpha.
template <class T>
double reconstruction_score(std::span<const T> c, std::span<const T> m, double alpha = kDefaultAlpha) {
    if (c.size() != m.size()) throw DataError("reconstruction_score: size mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(c[i]) - static_cast<double>(m[i])));
    }
    return std::pow(worst, alpha);  // |.|^alpha is monotone, so the max commutes
}

/// Score of one position head: mean over classes of |onehot(label) - p|^beta.
template <class T>
double position_score(std::span<const T> probs, std::size_t label, double beta = kDefaultBeta) {
    if (label >= probs.size()) throw DataError("position_score: label outside the class range");
    double acc = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) {
        acc += std::pow(std::abs((k == label ? 1.0 : 0.0) - static_cast<double>(probs[k])), beta);
    }
    return acc / static_cast<double>(probs.size());
}

enum class ScoreKind { R, x, y, fused };

inline std::string kind_name(ScoreKind k) {
    switch (k) {
        case ScoreKind::R: return "R";
        case ScoreKind::x: return "x";
        case ScoreKind::y: return "y";
        default: return "fused";
    }
}

/// A grid of scores of one kind for one frame; values are row-major (j*grid_w + i).
struct ScoreMap {
    ScoreKind kind = ScoreKind::fused;
    std::size_t grid_w = 0;
    std::size_t grid_h = 0;
    std::vector<double> values;
    std::string video;
    std::size_t frame = 0;

    ScoreMap() = default;
    ScoreMap(ScoreKind k, std::size_t gw, std::size_t gh) : kind(k), grid_w(gw), grid_h(gh), values(gw * gh, 0.0) {}

    double& at(std::size_t i, std::size_t j) { return values[j * grid_w + i]; }
    double at(std::size_t i, std::size_t j) const { return values[j * grid_w + i]; }
};

/// The per-kind maps of one frame triple. R is absent without a decoder.
struct FrameMaps {
    std::optional<ScoreMap> R;
    ScoreMap x;
    ScoreMap y;
    std::vector<std::size_t> pred_x, pred_y;  // argmax class per cell

    const ScoreMap* get(ScoreKind k) const {
        switch (k) {
            case ScoreKind::R: return R ? &*R : nullptr;
            case ScoreKind::x: return &x;
            case ScoreKind::y: return &y;
            default: return nullptr;
        }
    }
};

/// Which kinds enter the fused map.
enum class FusionMode { R, xy, Rxy };

inline std::string mode_name(FusionMode m) {
    switch (m) {
        case FusionMode::R: return "R";
        case FusionMode::xy: return "xy";
        default: return "Rxy";
    }
}

inline FusionMode parse_mode(const std::string& s) {
    if (s == "R") return FusionMode::R;
    if (s == "xy") return FusionMode::xy;
    if (s == "Rxy") return FusionMode::Rxy;
    throw ConfigError("unknown fusion mode '" + s + "' (expected R, xy or Rxy)");
}

inline bool mode_includes(FusionMode m, ScoreKind k) {
    switch (k) {
        case ScoreKind::R: return m != FusionMode::xy;
        case ScoreKind::x:
        case ScoreKind::y: return m != FusionMode::R;
        default: return false;
    }
}

namespace detail {

template <class T>
std::size_t argmax(const T* p, std::size_t n) {
    return static_cast<std::size_t>(std::max_element(p, p + n) - p);
}

}  // namespace detail

/// Scores of every cuboid in `batch` (all cells of one or more frame triples
/// in extraction order), written into one FrameMaps per triple.
template <class T>
std::vector<FrameMaps> score_batch(HybridModel<T>& model, const Tensor<T>& batch, double alpha = kDefaultAlpha,
                                   double beta = kDefaultBeta) {
    const std::size_t gw = model.grid_w(), gh = model.grid_h(), cells = gw * gh;
    const std::size_t n = batch.dim(0);
    if (n % cells) throw DataError("score_batch: batch is not a whole number of frame triples");
    const auto out = model.forward_generator(batch, Mode::eval);
    constexpr std::size_t block = kPatch * kPatch * kDepth;
    std::vector<FrameMaps> maps(n / cells);
    for (std::size_t f = 0; f < maps.size(); ++f) {
        auto& m = maps[f];
        m.x = ScoreMap(ScoreKind::x, gw, gh);
        m.y = ScoreMap(ScoreKind::y, gw, gh);
        if (out.reconstruction) m.R = ScoreMap(ScoreKind::R, gw, gh);
        m.pred_x.resize(cells);
        m.pred_y.resize(cells);
        for (std::size_t c = 0; c < cells; ++c) {
            const std::size_t k = f * cells + c;
            const std::size_t i = c % gw, j = c / gw;
            if (m.R) {
                m.R->values[c] = reconstruction_score<T>({batch.data() + k * block, block},
                                                         {out.reconstruction->data() + k * block, block}, alpha);
            }
            m.x.values[c] = position_score<T>({out.probs_x.data() + k * gw, gw}, i, beta);
            m.y.values[c] = position_score<T>({out.probs_y.data() + k * gh, gh}, j, beta);
            m.pred_x[c] = detail::argmax(out.probs_x.data() + k * gw, gw);
            m.pred_y[c] = detail::argmax(out.probs_y.data() + k * gh, gh);
        }
    }
    return maps;
}

/// Per-position fusion weights, one map per kind. R is absent without a decoder.
struct WeightMaps {
    std::size_t grid_w = 0;
    std::size_t grid_h = 0;
    std::optional<std::vector<double>> R;
    std::vector<double> x;
    std::vector<double> y;
    std::size_t clamped = 0;  // weights raised to 0 from negative values

    const std::vector<double>* get(ScoreKind k) const {
        switch (k) {
            case ScoreKind::R: return R ? &*R : nullptr;
            case ScoreKind::x: return &x;
            case ScoreKind::y: return &y;
            default: return nullptr;
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"grid_w", grid_w}, {"grid_h", grid_h}, {"x", x}, {"y", y}, {"clamped", clamped}};
        if (R) j["R"] = *R;
        return j;
    }

    static WeightMaps from_json(const nlohmann::json& j) {
        WeightMaps w;
        w.grid_w = j.at("grid_w").get<std::size_t>();
        w.grid_h = j.at("grid_h").get<std::size_t>();
        w.x = j.at("x").get<std::vector<double>>();
        w.y = j.at("y").get<std::vector<double>>();
        if (j.contains("R")) w.R = j.at("R").get<std::vector<double>>();
        w.clamped = j.value("clamped", std::size_t{0});
        const std::size_t cells = w.grid_w * w.grid_h;
        if (w.x.size() != cells || w.y.size() != cells || (w.R && w.R->size() != cells)) {
            throw DataError("weight maps do not match their grid size");
        }
        return w;
    }
};

/// Streaming per-position means of training score maps.
class WeightAccumulator {
public:
    WeightAccumulator(std::size_t gw, std::size_t gh, bool with_r)
        : gw_(gw), gh_(gh), x_(gw * gh, 0.0), y_(gw * gh, 0.0) {
        if (with_r) r_.emplace(gw * gh, 0.0);
    }

    void add(const FrameMaps& m) {
        if (m.x.values.size() != x_.size() || m.y.values.size() != y_.size() || m.R.has_value() != r_.has_value()) {
            throw DataError("weight accumulator: map layout mismatch");
        }
        ++count_;
        update(x_, m.x.values);
        update(y_, m.y.values);
        if (r_) update(*r_, m.R->values);
    }

    std::size_t count() const { return count_; }

    /// weight = 1 - mean; negative weights are clamped to 0 and counted.
    WeightMaps finish(const std::function<void(const std::string&)>& warn = {}) const {
        if (count_ == 0) throw ConfigError("cannot fit fusion weights: training set has no frame triples");
        WeightMaps w;
        w.grid_w = gw_;
        w.grid_h = gh_;
        auto convert = [&](const std::vector<double>& mean, ScoreKind k) {
            std::vector<double> out(mean.size());
            for (std::size_t c = 0; c < mean.size(); ++c) {
                out[c] = 1.0 - mean[c];
                if (out[c] < 0.0) {
                    if (warn) {
                        warn("weight of kind " + kind_name(k) + " at (" + std::to_string(c % gw_) + "," +
                             std::to_string(c / gw_) + ") is negative; clamped to 0");
                    }
                    out[c] = 0.0;
                    ++w.clamped;
                }
            }
            return out;
        };
        w.x = convert(x_, ScoreKind::x);
        w.y = convert(y_, ScoreKind::y);
        if (r_) w.R = convert(*r_, ScoreKind::R);
        return w;
    }

private:
    // Welford-style running mean keeps the magnitude bounded.
    void update(std::vector<double>& mean, const std::vector<double>& v) const {
        const double inv = 1.0 / static_cast<double>(count_);
        for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += (v[c] - mean[c]) * inv;
    }

    std::size_t gw_, gh_;
    std::vector<double> x_, y_;
    std::optional<std::vector<double>> r_;
    std::size_t count_ = 0;
};

/// Number of frame triples scored per forward pass.
inline constexpr std::size_t kScoreTriplesPerPass = 16;

/// Calls `visit(t, maps)` for every frame triple start t of one video, in order.
template <class T, class Visit>
void score_video_triples(HybridModel<T>& model, const std::vector<Tensor<T>>& frames, std::size_t stride,
                         Visit&& visit, double alpha = kDefaultAlpha, double beta = kDefaultBeta) {
    if (stride == 0) throw ConfigError("temporal stride must be positive");
    const std::size_t cells = model.grid_w() * model.grid_h();
    constexpr std::size_t block = kPatch * kPatch * kDepth;
    std::vector<std::size_t> starts;
    for (std::size_t t = 0; t + kDepth <= frames.size(); t += stride) starts.push_back(t);
    for (std::size_t s = 0; s < starts.size(); s += kScoreTriplesPerPass) {
        const std::size_t k = std::min(kScoreTriplesPerPass, starts.size() - s);
        Tensor<T> batch(Shape{k * cells, kPatch, kPatch, kDepth});
        for (std::size_t q = 0; q < k; ++q) {
            const std::size_t t = starts[s + q];
            const Tensor<T> one = triple_batch(frames[t], frames[t + 1], frames[t + 2]);
            std::copy(one.data(), one.data() + cells * block, batch.data() + q * cells * block);
        }
        auto maps = score_batch(model, batch, alpha, beta);
        for (std::size_t q = 0; q < k; ++q) visit(starts[s + q], maps[q]);
    }
}

/// Fits fusion weights from the training split in eval mode.
template <class T>
WeightMaps fit_weights(HybridModel<T>& model, const FrameStore<T>& train, std::size_t stride = 1,
                       double alpha = kDefaultAlpha, double beta = kDefaultBeta,
                       const std::function<void(const std::string&)>& warn = {}) {
    if (train.grid_w() != model.grid_w() || train.grid_h() != model.grid_h()) {
        throw ConfigError("training frames and model disagree on the grid size");
    }
    WeightAccumulator acc(model.grid_w(), model.grid_h(), model.has_decoder());
    for (std::size_t v = 0; v < train.videos(); ++v) {
        score_video_triples(
            model, train.frames(v), stride, [&](std::size_t, const FrameMaps& m) { acc.add(m); }, alpha, beta);
    }
    return acc.finish(warn);
}

/// fused(pos) = sum over included kinds of weight_k(pos) * S_k(pos).
inline ScoreMap fuse(const FrameMaps& maps, const WeightMaps& w, FusionMode mode) {
    ScoreMap out(ScoreKind::fused, maps.x.grid_w, maps.x.grid_h);
    out.video = maps.x.video;
    out.frame = maps.x.frame;
    for (ScoreKind k : {ScoreKind::R, ScoreKind::x, ScoreKind::y}) {
        if (!mode_includes(mode, k)) continue;
        const ScoreMap* s = maps.get(k);
        const std::vector<double>* wk = w.get(k);
        if (!s || !wk) throw ConfigError("fusion mode " + mode_name(mode) + " needs kind " + kind_name(k));
        if (s->grid_w != out.grid_w || s->grid_h != out.grid_h || wk->size() != out.values.size()) {
            throw std::logic_error("fuse: grid mismatch for kind " + kind_name(k));
        }
        for (std::size_t c = 0; c < out.values.size(); ++c) out.values[c] += (*wk)[c] * s->values[c];
    }
    return out;
}

/// Population standard deviation of the map entries.
inline double frame_score(const ScoreMap& m) {
    if (m.values.empty()) throw ConfigError("frame_score: empty map");
    const double n = static_cast<double>(m.values.size());
    double mean = 0.0;
    for (double v : m.values) mean += v;
    mean /= n;
    double ss = 0.0;
    for (double v : m.values) ss += (v - mean) * (v - mean);
    return std::sqrt(ss / n);
}

/// Divides by the per-video maximum; an all-zero video stays all zeros.
inline std::vector<double> normalize_video(const std::vector<double>& scores) {
    double mx = 0.0;
    for (double s : scores) mx = std::max(mx, s);
    std::vector<double> out(scores.size(), 0.0);
    if (mx == 0.0) return out;
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] / mx;
    return out;
}

/// Frame-level scores of one video. Frame t is scored from the triple
/// starting at t; the last two frames inherit the last triple's score.
struct VideoScores {
    std::string id;
    std::vector<int> ground_truth;  // empty when unknown
    std::vector<double> sd_R, sd_xy, sd_Rxy;  // raw SD frame scores; sd_R and sd_Rxy empty without a decoder
    std::vector<double> norm_R, norm_xy, norm_Rxy;

    std::size_t frames() const { return sd_xy.size(); }
    bool has_R() const { return !sd_R.empty(); }

    const std::vector<double>& normalized(FusionMode m) const {
        switch (m) {
            case FusionMode::R: return norm_R;
            case FusionMode::xy: return norm_xy;
            default: return norm_Rxy;
        }
    }
};

/// Held-out classification tallies over cuboids of normal test triples.
struct PositionAccuracy {
    std::size_t total = 0;
    std::size_t correct_x = 0;
    std::size_t correct_y = 0;
    std::size_t correct_both = 0;

    double x() const { return total ? static_cast<double>(correct_x) / static_cast<double>(total) : 0.0; }
    double y() const { return total ? static_cast<double>(correct_y) / static_cast<double>(total) : 0.0; }
    double both() const { return total ? static_cast<double>(correct_both) / static_cast<double>(total) : 0.0; }

    void merge(const PositionAccuracy& o) {
        total += o.total;
        correct_x += o.correct_x;
        correct_y += o.correct_y;
        correct_both += o.correct_both;
    }
};

/// Optional per-frame fused-map sink (for heatmaps).
using MapSink = std::function<void(const std::string& video, std::size_t frame, const ScoreMap& fused_xy,
                                   const std::optional<ScoreMap>& fused_rxy)>;

/// Scores every frame of one video. When the video has ground truth, cuboids of
/// triples whose three frames are all normal also contribute to `accuracy`.
template <class T>
VideoScores score_video(HybridModel<T>& model, const std::string& id, const std::vector<Tensor<T>>& frames,
                        const std::vector<int>& ground_truth, const WeightMaps& w, PositionAccuracy* accuracy = nullptr,
                        const MapSink& sink = {}, double alpha = kDefaultAlpha, double beta = kDefaultBeta) {
    if (frames.size() < kDepth) throw DataError("video '" + id + "' is shorter than one frame triple");
    if (w.grid_w != model.grid_w() || w.grid_h != model.grid_h()) {
        throw ConfigError("weight maps and model disagree on the grid size");
    }
    if (model.has_decoder() != w.R.has_value()) throw ConfigError("weight maps and model disagree on the R kind");
    VideoScores vs;
    vs.id = id;
    vs.ground_truth = ground_truth;
    const std::size_t gw = model.grid_w(), gh = model.grid_h();
    if (!ground_truth.empty() && ground_truth.size() != frames.size()) {
        throw DataError("video '" + id + "': ground truth length differs from the frame count");
    }
    score_video_triples(
        model, frames, 1,
        [&](std::size_t t, FrameMaps& m) {
            m.x.video = m.y.video = id;
            m.x.frame = m.y.frame = t;
            const ScoreMap fxy = fuse(m, w, FusionMode::xy);
            vs.sd_xy.push_back(frame_score(fxy));
            std::optional<ScoreMap> frxy;
            if (m.R) {
                vs.sd_R.push_back(frame_score(fuse(m, w, FusionMode::R)));
                frxy = fuse(m, w, FusionMode::Rxy);
                vs.sd_Rxy.push_back(frame_score(*frxy));
            }
            if (sink) sink(id, t, fxy, frxy);
            if (accuracy && !ground_truth.empty() && !ground_truth[t] && !ground_truth[t + 1] && !ground_truth[t + 2]) {
                for (std::size_t c = 0; c < gw * gh; ++c) {
                    const bool ok_x = m.pred_x[c] == c % gw, ok_y = m.pred_y[c] == c / gw;
                    ++accuracy->total;
                    accuracy->correct_x += ok_x;
                    accuracy->correct_y += ok_y;
                    accuracy->correct_both += ok_x && ok_y;
                }
            }
        },
        alpha, beta);
    // Tail frames inherit the last triple's score.
    for (auto* v : {&vs.sd_R, &vs.sd_xy, &vs.sd_Rxy}) {
        if (!v->empty()) v->resize(frames.size(), v->back());
    }
    vs.norm_xy = normalize_video(vs.sd_xy);
    if (vs.has_R()) {
        vs.norm_R = normalize_video(vs.sd_R);
        vs.norm_Rxy = normalize_video(vs.sd_Rxy);
    }
    return vs;
}

/// Writes one video's frame scores as CSV. Columns for R and Rxy appear only
/// when the model has a decoder; the gt column is blank when unknown.
inline void write_score_table(const fs::path& path, const VideoScores& vs) {
    std::ofstream out(path);
    if (!out) throw IngestionError("cannot write " + path.string());
    const bool r = vs.has_R();
    out << (r ? "frame,gt,sd_R,sd_xy,sd_Rxy,norm_R,norm_xy,norm_Rxy\n" : "frame,gt,sd_xy,norm_xy\n");
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << ',' << buf;
    };
    for (std::size_t t = 0; t < vs.frames(); ++t) {
        out << t << ',';
        if (!vs.ground_truth.empty()) out << vs.ground_truth[t];
        if (r) {
            num(vs.sd_R[t]);
            num(vs.sd_xy[t]);
            num(vs.sd_Rxy[t]);
            num(vs.norm_R[t]);
            num(vs.norm_xy[t]);
            num(vs.norm_Rxy[t]);
        } else {
            num(vs.sd_xy[t]);
            num(vs.norm_xy[t]);
        }
        out << '\n';
    }
    if (!out) throw IngestionError("write failed: " + path.string());
}

inline VideoScores read_score_table(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot read score table " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw DataError(path.string() + ": empty score table");
    const bool r = line == "frame,gt,sd_R,sd_xy,sd_Rxy,norm_R,norm_xy,norm_Rxy";
    if (!r && line != "frame,gt,sd_xy,norm_xy") throw DataError(path.string() + ": unrecognized header");
    VideoScores vs;
    vs.id = path.stem().string();
    bool any_gt = false, missing_gt = false;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
        if (line.back() == ',') cells.emplace_back();
        const std::size_t want = r ? 8 : 4;
        if (cells.size() != want) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(want) +
                            " columns");
        }
        try {
            if (std::stoul(cells[0]) != vs.frames()) throw DataError("frames out of order");
            if (cells[1].empty()) {
                missing_gt = true;
            } else {
                any_gt = true;
                vs.ground_truth.push_back(std::stoi(cells[1]) != 0);
            }
            auto d = [&](std::size_t c) { return std::stod(cells[c]); };
            if (r) {
                vs.sd_R.push_back(d(2));
                vs.sd_xy.push_back(d(3));
                vs.sd_Rxy.push_back(d(4));
                vs.norm_R.push_back(d(5));
                vs.norm_xy.push_back(d(6));
                vs.norm_Rxy.push_back(d(7));
            } else {
                vs.sd_xy.push_back(d(2));
                vs.norm_xy.push_back(d(3));
            }
        } catch (const std::logic_error&) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
        }
    }
    if (any_gt && missing_gt) throw DataError(path.string() + ": ground truth present for only some frames");
    return vs;
}

/// Row-major grid dump of a fused map, one row of cells per line.
inline void write_map_csv(const fs::path& path, const ScoreMap& m) {
    std::ofstream out(path);
    if (!out) throw IngestionError("cannot write " + path.string());
    char buf[64];
    for (std::size_t j = 0; j < m.grid_h; ++j) {
        for (std::size_t i = 0; i < m.grid_w; ++i) {
            std::snprintf(buf, sizeof buf, "%.17g", m.at(i, j));
            out << (i ? "," : "") << buf;
        }
        out << '\n';
    }
}

}  // namespace hvad
