#pragma once

// Dataset manifests, frame stores, cuboid extraction and the shuffled batch
// stream used for training.
//
// A manifest is one JSON file describing both splits:
//
//   {
//     "format": "hvad-manifest", "version": 1,
//     "frame_width": 160, "frame_height": 120,
//     "train": [ {"id": "01", "frames": "train/01/*.pgm"} ],
//     "test":  [ {"id": "01", "frames": "test/01/*.pgm", "ground_truth": "test/01.txt"} ]
//   }
//
// "frames" is either a glob over the file name (sorted lexicographically, so
// frame numbers must be zero-padded) or an explicit list. Relative paths are
// resolved against the manifest's directory.

#include <fnmatch.h>

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "hvad/errors.hpp"
#include "hvad/hash.hpp"
#include "hvad/image.hpp"
#include "hvad/losses.hpp"
#include "hvad/model.hpp"
#include "hvad/tensor.hpp"

namespace hvad {

namespace fs = std::filesystem;

inline constexpr std::size_t kDefaultBatchSize = 3072;

struct VideoEntry {
    std::string id;
    std::vector<fs::path> frames;
    std::vector<int> ground_truth;  // empty when absent
};

struct DatasetManifest {
    fs::path root;
    std::string split;
    std::size_t frame_width = 160;
    std::size_t frame_height = 120;
    std::vector<VideoEntry> videos;

    std::size_t grid_w() const { return frame_width / kPatch; }
    std::size_t grid_h() const { return frame_height / kPatch; }
    std::size_t cells() const { return grid_w() * grid_h(); }

    std::size_t frame_count() const {
        std::size_t n = 0;
        for (const auto& v : videos) n += v.frames.size();
        return n;
    }

    bool has_ground_truth() const {
        return !videos.empty() &&
               std::all_of(videos.begin(), videos.end(), [](const VideoEntry& v) { return !v.ground_truth.empty(); });
    }

    void validate() const {
        if (frame_width == 0 || frame_height == 0 || frame_width % kPatch || frame_height % kPatch) {
            throw DataError("frame size " + std::to_string(frame_width) + "x" + std::to_string(frame_height) +
                            " is not divisible by " + std::to_string(kPatch));
        }
        for (const auto& v : videos) {
            if (v.frames.size() < kDepth) {
                throw DataError(split + " video '" + v.id + "' has " + std::to_string(v.frames.size()) +
                                " frames; at least " + std::to_string(kDepth) + " are required");
            }
            if (!v.ground_truth.empty() && v.ground_truth.size() != v.frames.size()) {
                throw DataError(split + " video '" + v.id + "' has " + std::to_string(v.frames.size()) +
                                " frames but " + std::to_string(v.ground_truth.size()) + " ground-truth labels");
            }
        }
    }
};

struct ManifestFile {
    fs::path path;
    DatasetManifest train;
    DatasetManifest test;
    std::uint64_t hash = 0;  // of the manifest bytes
};

/// One 0/1 label per line; blank lines are ignored.
inline std::vector<int> read_ground_truth(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot read ground truth " + path.string());
    std::vector<int> labels;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t\r");
        const std::string tok = line.substr(first, last - first + 1);
        if (tok != "0" && tok != "1") {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 0 or 1, got '" + tok + "'");
        }
        labels.push_back(tok == "1");
    }
    return labels;
}

inline void write_ground_truth(const fs::path& path, const std::vector<int>& labels) {
    std::ofstream out(path);
    if (!out) throw IngestionError("cannot write " + path.string());
    for (int v : labels) out << (v ? 1 : 0) << '\n';
}

/// Expands a "dir/pattern" glob; the pattern applies to file names only.
inline std::vector<fs::path> expand_glob(const fs::path& pattern) {
    const fs::path dir = pattern.parent_path().empty() ? fs::path(".") : pattern.parent_path();
    const std::string name = pattern.filename().string();
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) throw IngestionError("frame directory " + dir.string() + " does not exist");
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        if (::fnmatch(name.c_str(), e.path().filename().string().c_str(), 0) == 0) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

namespace detail {

inline DatasetManifest parse_split(const nlohmann::json& j, const std::string& split, const fs::path& root,
                                   std::size_t w, std::size_t h) {
    DatasetManifest m;
    m.root = root;
    m.split = split;
    m.frame_width = w;
    m.frame_height = h;
    if (!j.contains(split)) return m;
    for (const auto& v : j.at(split)) {
        VideoEntry e;
        e.id = v.at("id").get<std::string>();
        const auto& frames = v.at("frames");
        if (frames.is_string()) {
            e.frames = expand_glob(root / frames.get<std::string>());
        } else {
            for (const auto& f : frames) e.frames.push_back(root / f.get<std::string>());
        }
        if (v.contains("ground_truth") && !v.at("ground_truth").is_null()) {
            e.ground_truth = read_ground_truth(root / v.at("ground_truth").get<std::string>());
        }
        m.videos.push_back(std::move(e));
    }
    m.validate();
    return m;
}

}  // namespace detail

inline ManifestFile load_manifest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot read manifest " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string bytes = ss.str();
    ManifestFile mf;
    mf.path = path;
    mf.hash = fnv1a(bytes);
    try {
        const auto j = nlohmann::json::parse(bytes);
        if (j.value("format", std::string{}) != "hvad-manifest") {
            throw DataError(path.string() + ": missing \"format\": \"hvad-manifest\"");
        }
        if (j.value("version", 0) != 1) throw DataError(path.string() + ": unsupported manifest version");
        const auto w = j.value("frame_width", std::size_t{160});
        const auto h = j.value("frame_height", std::size_t{120});
        const fs::path root = path.parent_path().empty() ? fs::path(".") : path.parent_path();
        mf.train = detail::parse_split(j, "train", root, w, h);
        mf.test = detail::parse_split(j, "test", root, w, h);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": malformed manifest: " + e.what());
    }
    return mf;
}

/// Decoded, resized frames of every video in one split.
template <class T = float>
class FrameStore {
public:
    FrameStore() = default;

    explicit FrameStore(const DatasetManifest& m) : manifest_(m) {
        m.validate();
        videos_.reserve(m.videos.size());
        for (const auto& v : m.videos) {
            std::vector<Tensor<T>> frames;
            frames.reserve(v.frames.size());
            for (const auto& f : v.frames) frames.push_back(load_frame<T>(f, m.frame_width, m.frame_height));
            videos_.push_back(std::move(frames));
        }
    }

    const DatasetManifest& manifest() const { return manifest_; }
    std::size_t videos() const { return videos_.size(); }
    const std::vector<Tensor<T>>& frames(std::size_t v) const { return videos_.at(v); }
    std::size_t grid_w() const { return manifest_.grid_w(); }
    std::size_t grid_h() const { return manifest_.grid_h(); }

private:
    DatasetManifest manifest_;
    std::vector<std::vector<Tensor<T>>> videos_;
};

template <class T>
struct Cuboid {
    Tensor<T> values;  // [10,10,3], third axis is time
    std::size_t l_x = 0;
    std::size_t l_y = 0;
    std::string video;
    std::size_t start = 0;
};

namespace detail {

template <class T>
void check_triple(const Tensor<T>& f0, const Tensor<T>& f1, const Tensor<T>& f2) {
    if (f0.rank() != 3 || f0.dim(2) != 1) throw DataError("frames must be [H,W,1], got " + shape_string(f0.shape()));
    if (f1.shape() != f0.shape() || f2.shape() != f0.shape()) {
        throw DataError("frame triple has mismatched dims " + shape_string(f0.shape()) + ", " +
                        shape_string(f1.shape()) + ", " + shape_string(f2.shape()));
    }
    if (f0.dim(0) % kPatch || f0.dim(1) % kPatch) {
        throw DataError("frame dims " + shape_string(f0.shape()) + " are not divisible by " + std::to_string(kPatch));
    }
}

}  // namespace detail

/// Writes cell (i,j) of the triple into dst as a contiguous [10,10,3] block.
template <class T>
void copy_cuboid(const Tensor<T>& f0, const Tensor<T>& f1, const Tensor<T>& f2, std::size_t i, std::size_t j, T* dst) {
    const std::size_t W = f0.dim(1);
    const T* src[kDepth] = {f0.data(), f1.data(), f2.data()};
    for (std::size_t y = 0; y < kPatch; ++y) {
        const std::size_t row = (j * kPatch + y) * W + i * kPatch;
        for (std::size_t x = 0; x < kPatch; ++x)
            for (std::size_t t = 0; t < kDepth; ++t) *dst++ = src[t][row + x];
    }
}

/// All cuboids of a frame triple, ordered row by row (index j*grid_w + i).
template <class T>
std::vector<Cuboid<T>> extract_cuboids(const Tensor<T>& f0, const Tensor<T>& f1, const Tensor<T>& f2,
                                       const std::string& video = {}, std::size_t start = 0) {
    detail::check_triple(f0, f1, f2);
    const std::size_t gw = f0.dim(1) / kPatch, gh = f0.dim(0) / kPatch;
    std::vector<Cuboid<T>> out;
    out.reserve(gw * gh);
    for (std::size_t j = 0; j < gh; ++j)
        for (std::size_t i = 0; i < gw; ++i) {
            Cuboid<T> c{Tensor<T>(Shape{kPatch, kPatch, kDepth}), i, j, video, start};
            copy_cuboid(f0, f1, f2, i, j, c.values.data());
            out.push_back(std::move(c));
        }
    return out;
}

/// The cuboids of one triple as a batch [gw*gh,10,10,3] in extraction order.
template <class T>
Tensor<T> triple_batch(const Tensor<T>& f0, const Tensor<T>& f1, const Tensor<T>& f2) {
    detail::check_triple(f0, f1, f2);
    const std::size_t gw = f0.dim(1) / kPatch, gh = f0.dim(0) / kPatch;
    Tensor<T> out(Shape{gw * gh, kPatch, kPatch, kDepth});
    constexpr std::size_t block = kPatch * kPatch * kDepth;
    for (std::size_t j = 0; j < gh; ++j)
        for (std::size_t i = 0; i < gw; ++i) copy_cuboid(f0, f1, f2, i, j, out.data() + (j * gw + i) * block);
    return out;
}

/// Inverse of extract_cuboids: rebuilds the three frames.
template <class T>
std::array<Tensor<T>, kDepth> reassemble(const std::vector<Cuboid<T>>& cuboids, std::size_t grid_w,
                                         std::size_t grid_h) {
    if (cuboids.size() != grid_w * grid_h) {
        throw DataError("expected " + std::to_string(grid_w * grid_h) + " cuboids, got " +
                        std::to_string(cuboids.size()));
    }
    std::array<Tensor<T>, kDepth> frames;
    for (auto& f : frames) f = Tensor<T>(Shape{grid_h * kPatch, grid_w * kPatch, 1});
    for (const auto& c : cuboids) {
        if (c.l_x >= grid_w || c.l_y >= grid_h) throw DataError("cuboid label outside the grid");
        for (std::size_t y = 0; y < kPatch; ++y)
            for (std::size_t x = 0; x < kPatch; ++x)
                for (std::size_t t = 0; t < kDepth; ++t)
                    frames[t].at(c.l_y * kPatch + y, c.l_x * kPatch + x, std::size_t{0}) = c.values.at(y, x, t);
    }
    return frames;
}

template <class T>
struct Batch {
    Tensor<T> cuboids;  // [N,10,10,3]
    PositionLabels labels;
};

/// One training sample: a grid cell of the triple starting at `start`.
struct SampleRef {
    std::uint32_t video;
    std::uint32_t start;
    std::uint32_t cell;
};

/// Epoch-wise shuffled stream over every (video, start, cell) triple. Each
/// epoch's permutation depends only on (seed, epoch), which makes resuming
/// mid-run reproducible.
template <class T = float>
class BatchStream {
public:
    BatchStream(const FrameStore<T>& store, std::size_t batch_size, std::uint64_t seed, std::size_t stride = 1)
        : store_(&store), batch_size_(batch_size), seed_(seed) {
        if (batch_size == 0) throw ConfigError("batch size must be positive");
        if (stride == 0) throw ConfigError("temporal stride must be positive");
        const std::size_t cells = store.grid_w() * store.grid_h();
        for (std::size_t v = 0; v < store.videos(); ++v) {
            const std::size_t n = store.frames(v).size();
            for (std::size_t t = 0; t + kDepth <= n; t += stride)
                for (std::size_t c = 0; c < cells; ++c)
                    order_.push_back({static_cast<std::uint32_t>(v), static_cast<std::uint32_t>(t),
                                      static_cast<std::uint32_t>(c)});
        }
        if (order_.empty()) throw IngestionError("training split contains no cuboids");
    }

    std::size_t samples() const { return order_.size(); }
    std::size_t batches_per_epoch() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
    std::size_t epoch() const { return epoch_; }
    std::size_t position() const { return cursor_; }
    const std::vector<SampleRef>& order() const { return order_; }

    void begin_epoch(std::size_t epoch) {
        epoch_ = epoch;
        cursor_ = 0;
        std::sort(order_.begin(), order_.end(), [](const SampleRef& a, const SampleRef& b) {
            return std::tie(a.video, a.start, a.cell) < std::tie(b.video, b.start, b.cell);
        });
        std::mt19937_64 rng(mix_seed(seed_, epoch));
        std::shuffle(order_.begin(), order_.end(), rng);
    }

    void skip(std::size_t batches) { cursor_ = std::min(order_.size(), cursor_ + batches * batch_size_); }

    bool next(Batch<T>& out) {
        if (cursor_ >= order_.size()) return false;
        const std::size_t n = std::min(batch_size_, order_.size() - cursor_);
        const std::size_t gw = store_->grid_w();
        constexpr std::size_t block = kPatch * kPatch * kDepth;
        if (out.cuboids.shape() != Shape{n, kPatch, kPatch, kDepth}) {
            out.cuboids = Tensor<T>(Shape{n, kPatch, kPatch, kDepth});
        }
        out.labels.x.resize(n);
        out.labels.y.resize(n);
        for (std::size_t k = 0; k < n; ++k) {
            const SampleRef& s = order_[cursor_ + k];
            const auto& fr = store_->frames(s.video);
            const std::size_t i = s.cell % gw, j = s.cell / gw;
            copy_cuboid(fr[s.start], fr[s.start + 1], fr[s.start + 2], i, j, out.cuboids.data() + k * block);
            out.labels.x[k] = i;
            out.labels.y[k] = j;
        }
        cursor_ += n;
        return true;
    }

private:
    const FrameStore<T>* store_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::size_t epoch_ = 0;
    std::size_t cursor_ = 0;
    std::vector<SampleRef> order_;
};

}  // namespace hvad
