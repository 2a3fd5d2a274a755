#pragma once

// Frame-level ROC AUC and average precision over normalized frame scores,
// curve export for plotting, and the evaluation log.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "hvad/errors.hpp"
#include "hvad/scoring.hpp"

namespace hvad {

struct VideoSpan {
    std::string id;
    std::size_t begin = 0;
    std::size_t end = 0;
};

/// Scores with binary labels (1 = anomalous), concatenated over videos.
struct LabeledScores {
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<VideoSpan> videos;

    std::size_t positives() const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1)); }
    std::size_t negatives() const { return labels.size() - positives(); }

    std::string video_set() const {
        if (videos.empty()) return "[unnamed]";
        std::string s = "[";
        for (std::size_t i = 0; i < videos.size(); ++i) s += (i ? ", " : "") + videos[i].id;
        return s + "]";
    }

    void validate() const {
        if (scores.size() != labels.size()) throw EvaluationError("scores and labels differ in length");
        for (int l : labels) {
            if (l != 0 && l != 1) throw EvaluationError("labels must be 0 or 1");
        }
        for (double s : scores) {
            if (!std::isfinite(s)) throw EvaluationError("non-finite score over videos " + video_set());
        }
    }
};

/// Concatenates the normalized scores of the chosen fusion mode.
inline LabeledScores gather(const std::vector<VideoScores>& videos, FusionMode mode) {
    LabeledScores d;
    for (const auto& v : videos) {
        if (v.ground_truth.empty()) throw EvaluationError("video '" + v.id + "' has no ground truth");
        const auto& s = v.normalized(mode);
        if (s.size() != v.ground_truth.size()) {
            throw EvaluationError("video '" + v.id + "' has no " + mode_name(mode) + " scores");
        }
        const std::size_t begin = d.scores.size();
        d.scores.insert(d.scores.end(), s.begin(), s.end());
        d.labels.insert(d.labels.end(), v.ground_truth.begin(), v.ground_truth.end());
        d.videos.push_back({v.id, begin, d.scores.size()});
    }
    return d;
}

namespace detail {

/// Groups of equal scores, highest first: (positives, negatives) per group.
inline std::vector<std::pair<std::size_t, std::size_t>> descending_groups(const LabeledScores& d) {
    std::vector<std::size_t> idx(d.scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return d.scores[a] > d.scores[b]; });
    std::vector<std::pair<std::size_t, std::size_t>> groups;
    for (std::size_t k = 0; k < idx.size();) {
        std::size_t pos = 0, neg = 0, e = k;
        while (e < idx.size() && d.scores[idx[e]] == d.scores[idx[k]]) (d.labels[idx[e++]] ? pos : neg) += 1;
        groups.emplace_back(pos, neg);
        k = e;
    }
    return groups;
}

inline void require_both_classes(const LabeledScores& d) {
    d.validate();
    if (d.positives() == 0 || d.negatives() == 0) {
        throw EvaluationError("ROC AUC is undefined: only one class present over videos " + d.video_set());
    }
}

}  // namespace detail

/// Mann-Whitney statistic: P(pos > neg) + P(pos == neg) / 2, by a sorted sweep.
inline double roc_auc(const LabeledScores& d) {
    detail::require_both_classes(d);
    double wins = 0.0, neg_below = 0.0;
    const auto groups = detail::descending_groups(d);
    // Sweep from the lowest group so negatives below are already counted.
    for (auto it = groups.rbegin(); it != groups.rend(); ++it) {
        const double pos = static_cast<double>(it->first), neg = static_cast<double>(it->second);
        wins += pos * neg_below + 0.5 * pos * neg;
        neg_below += neg;
    }
    return wins / (static_cast<double>(d.positives()) * static_cast<double>(d.negatives()));
}

/// AP = sum over threshold groups of (R_i - R_{i-1}) * P_i, descending scores.
inline double pr_ap(const LabeledScores& d) {
    d.validate();
    if (d.positives() == 0) throw EvaluationError("average precision is undefined: no positives over videos " +
                                                  d.video_set());
    const double P = static_cast<double>(d.positives());
    double tp = 0.0, fp = 0.0, prev_recall = 0.0, ap = 0.0;
    for (const auto& [pos, neg] : detail::descending_groups(d)) {
        tp += static_cast<double>(pos);
        fp += static_cast<double>(neg);
        const double recall = tp / P;
        ap += (recall - prev_recall) * (tp / (tp + fp));
        prev_recall = recall;
    }
    return ap;
}

struct CurvePoint {
    double a;  // fpr or recall
    double b;  // tpr or precision
};

enum class CurveKind { roc, pr };

namespace detail {

inline bool collinear(const CurvePoint& p, const CurvePoint& q, const CurvePoint& r) {
    return (q.a - p.a) * (r.b - p.b) == (r.a - p.a) * (q.b - p.b);
}

}  // namespace detail

/// ROC points from (0,0) to (1,1); interior points on a straight segment are dropped.
inline std::vector<CurvePoint> roc_curve(const LabeledScores& d) {
    detail::require_both_classes(d);
    const double P = static_cast<double>(d.positives()), N = static_cast<double>(d.negatives());
    std::vector<CurvePoint> pts{{0.0, 0.0}};
    double tp = 0.0, fp = 0.0;
    for (const auto& [pos, neg] : detail::descending_groups(d)) {
        tp += static_cast<double>(pos);
        fp += static_cast<double>(neg);
        const CurvePoint next{fp / N, tp / P};
        while (pts.size() >= 2 && detail::collinear(pts[pts.size() - 2], pts.back(), next)) pts.pop_back();
        pts.push_back(next);
    }
    return pts;
}

/// One (recall, precision) point per threshold group, recall non-decreasing.
inline std::vector<CurvePoint> pr_curve(const LabeledScores& d) {
    d.validate();
    if (d.positives() == 0) throw EvaluationError("PR curve is undefined: no positives over videos " + d.video_set());
    const double P = static_cast<double>(d.positives());
    std::vector<CurvePoint> pts;
    double tp = 0.0, fp = 0.0;
    for (const auto& [pos, neg] : detail::descending_groups(d)) {
        tp += static_cast<double>(pos);
        fp += static_cast<double>(neg);
        pts.push_back({tp / P, tp / (tp + fp)});
    }
    return pts;
}

inline void export_curve(const LabeledScores& d, CurveKind kind, const std::filesystem::path& path) {
    const auto pts = kind == CurveKind::roc ? roc_curve(d) : pr_curve(d);
    std::ofstream out(path);
    if (!out) throw IngestionError("cannot write curve " + path.string());
    out << (kind == CurveKind::roc ? "fpr,tpr\n" : "recall,precision\n");
    char buf[96];
    for (const auto& p : pts) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", p.a, p.b);
        out << buf;
    }
    if (!out) throw IngestionError("write failed: " + path.string());
}

/// Appends "metric=<name> value=<v> n_pos=<p> n_neg=<n>" to the log.
inline std::string append_eval_log(const std::filesystem::path& path, const std::string& metric, double value,
                                   const LabeledScores& d) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "metric=%s value=%.6f n_pos=%zu n_neg=%zu", metric.c_str(), value, d.positives(),
                  d.negatives());
    std::ofstream out(path, std::ios::app);
    if (!out) throw IngestionError("cannot append to " + path.string());
    out << buf << '\n';
    return buf;
}

}  // namespace hvad
