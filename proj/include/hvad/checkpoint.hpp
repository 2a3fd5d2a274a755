#pragma once

// Checkpoint files: a text header followed by a little-endian float32 payload.
//
//   HVADCKPT 1
//   model <ModelConfig JSON, one line>
//   model_hash <hex>
//   train <training config JSON, one line>
//   state <TrainState JSON, one line>
//   tensor <name> <rank> <dims...> <offset> <nbytes>
//   ...
//   end
//   <payload>
//
// Tensor names are prefixed by role: "param/", "adam_m/", "adam_v/" and
// "buffer/". Offsets are relative to the start of the payload. Files are
// written to a temporary sibling and renamed into place.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hvad/errors.hpp"
#include "hvad/hash.hpp"
#include "hvad/model.hpp"
#include "hvad/optim.hpp"
#include "hvad/tensor.hpp"

namespace hvad {

inline constexpr const char* kCheckpointMagic = "HVADCKPT";
inline constexpr int kCheckpointVersion = 1;

/// Progress of a training run. Dropout masks and batch order are derived from
/// (seed, global_step) and (seed, epoch), so these counters are the complete
/// random state.
struct TrainState {
    std::uint64_t epoch = 0;           // completed epochs
    std::uint64_t batch_in_epoch = 0;  // batches done in the current epoch
    std::uint64_t global_step = 0;
    std::uint64_t adam_steps = 0;
    std::uint64_t sgd_steps = 0;
    std::uint64_t seed = 0;
    std::uint64_t rejected_steps = 0;  // steps rolled back for non-finite losses
    std::map<std::string, double> running;  // exponential moving averages of the losses
    double epoch_loss_sum = 0.0;       // accepted total_G so far in the current epoch
    std::uint64_t epoch_steps = 0;
    std::string best;                  // checkpoint with the lowest epoch-mean total_G
    double best_loss = 0.0;

    nlohmann::json to_json() const {
        return {{"epoch", epoch},
                {"batch_in_epoch", batch_in_epoch},
                {"global_step", global_step},
                {"adam_steps", adam_steps},
                {"sgd_steps", sgd_steps},
                {"seed", seed},
                {"rejected_steps", rejected_steps},
                {"running", running},
                {"epoch_loss_sum", epoch_loss_sum},
                {"epoch_steps", epoch_steps},
                {"best", best},
                {"best_loss", best_loss}};
    }

    static TrainState from_json(const nlohmann::json& j) {
        TrainState s;
        s.epoch = j.at("epoch").get<std::uint64_t>();
        s.batch_in_epoch = j.at("batch_in_epoch").get<std::uint64_t>();
        s.global_step = j.at("global_step").get<std::uint64_t>();
        s.adam_steps = j.at("adam_steps").get<std::uint64_t>();
        s.sgd_steps = j.at("sgd_steps").get<std::uint64_t>();
        s.seed = j.at("seed").get<std::uint64_t>();
        s.rejected_steps = j.value("rejected_steps", std::uint64_t{0});
        s.running = j.value("running", std::map<std::string, double>{});
        s.epoch_loss_sum = j.value("epoch_loss_sum", 0.0);
        s.epoch_steps = j.value("epoch_steps", std::uint64_t{0});
        s.best = j.value("best", std::string{});
        s.best_loss = j.value("best_loss", 0.0);
        return s;
    }

    friend bool operator==(const TrainState&, const TrainState&) = default;
};

struct TensorRecord {
    Shape shape;
    std::vector<float> values;
};

struct Checkpoint {
    ModelConfig model;
    std::string model_hash;
    nlohmann::json train = nlohmann::json::object();
    TrainState state;
    std::map<std::string, TensorRecord> tensors;
    std::uint64_t file_hash = 0;  // FNV-1a of the whole file, set by load
};

namespace detail {

inline void put_le32(std::string& out, float v) {
    const auto u = std::bit_cast<std::uint32_t>(v);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xffu));
}

inline float get_le32(const unsigned char* p) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(p[b]) << (8 * b);
    return std::bit_cast<float>(u);
}

template <class T>
TensorRecord record(const Tensor<T>& t) {
    TensorRecord r{t.shape(), std::vector<float>(t.size())};
    for (std::size_t i = 0; i < t.size(); ++i) r.values[i] = static_cast<float>(t[i]);
    return r;
}

}  // namespace detail

/// Collects the model's parameters, buffers and (when initialized) Adam moments.
template <class T>
Checkpoint make_checkpoint(HybridModel<T>& model, const nlohmann::json& train_config, const TrainState& state) {
    Checkpoint c;
    c.model = model.config();
    c.model_hash = model.config().hash();
    c.train = train_config;
    c.state = state;
    for (Parameter<T>* p : model.parameters()) {
        if (!c.tensors.emplace("param/" + p->name, detail::record(p->value)).second) {
            throw std::logic_error("duplicate parameter name " + p->name);
        }
        if (p->slots.size() >= 2) {
            c.tensors.emplace("adam_m/" + p->name, detail::record(p->slots[0]));
            c.tensors.emplace("adam_v/" + p->name, detail::record(p->slots[1]));
        }
    }
    for (auto& [name, t] : model.buffers()) c.tensors.emplace("buffer/" + name, detail::record(*t));
    return c;
}

inline std::string serialize_checkpoint(const Checkpoint& c) {
    std::string payload;
    std::ostringstream head;
    head << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
    head << "model " << c.model.to_json().dump() << '\n';
    head << "model_hash " << c.model_hash << '\n';
    head << "train " << c.train.dump() << '\n';
    head << "state " << c.state.to_json().dump() << '\n';
    for (const auto& [name, rec] : c.tensors) {
        if (name.find_first_of(" \n") != std::string::npos) throw ConfigError("tensor name with whitespace: " + name);
        const std::size_t offset = payload.size();
        for (float v : rec.values) detail::put_le32(payload, v);
        head << "tensor " << name << ' ' << rec.shape.size();
        for (auto d : rec.shape) head << ' ' << d;
        head << ' ' << offset << ' ' << rec.values.size() * 4 << '\n';
    }
    head << "end\n";
    return head.str() + payload;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    const std::string bytes = serialize_checkpoint(c);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IngestionError("cannot write checkpoint " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IngestionError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin) {
    auto fail = [&](const std::string& why) -> DataError { return DataError(origin + ": " + why); };
    Checkpoint c;
    c.file_hash = fnv1a(bytes);
    std::size_t pos = 0;
    auto next_line = [&]() {
        const std::size_t nl = bytes.find('\n', pos);
        if (nl == std::string::npos) throw fail("truncated header");
        std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };
    if (next_line() != std::string(kCheckpointMagic) + " " + std::to_string(kCheckpointVersion)) {
        throw fail("not a version " + std::to_string(kCheckpointVersion) + " checkpoint");
    }
    struct Entry {
        std::string name;
        Shape shape;
        std::size_t offset, nbytes;
    };
    std::vector<Entry> entries;
    try {
        for (std::string line = next_line(); line != "end"; line = next_line()) {
            const auto sp = line.find(' ');
            const std::string key = line.substr(0, sp);
            const std::string rest = sp == std::string::npos ? "" : line.substr(sp + 1);
            if (key == "model") {
                c.model = ModelConfig::from_json(nlohmann::json::parse(rest));
            } else if (key == "model_hash") {
                c.model_hash = rest;
            } else if (key == "train") {
                c.train = nlohmann::json::parse(rest);
            } else if (key == "state") {
                c.state = TrainState::from_json(nlohmann::json::parse(rest));
            } else if (key == "tensor") {
                std::istringstream ss(rest);
                Entry e;
                std::size_t rank = 0;
                ss >> e.name >> rank;
                e.shape.resize(rank);
                for (auto& d : e.shape) ss >> d;
                ss >> e.offset >> e.nbytes;
                if (!ss) throw fail("malformed tensor line: " + line);
                entries.push_back(std::move(e));
            } else {
                throw fail("unknown header key '" + key + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw fail(std::string("malformed JSON in header: ") + e.what());
    }
    if (c.model_hash != c.model.hash()) throw fail("model hash does not match the stored configuration");
    const auto* payload = reinterpret_cast<const unsigned char*>(bytes.data()) + pos;
    const std::size_t payload_size = bytes.size() - pos;
    for (const auto& e : entries) {
        if (e.nbytes != shape_size(e.shape) * 4 || e.offset + e.nbytes > payload_size) {
            throw fail("tensor " + e.name + " exceeds the payload");
        }
        TensorRecord r{e.shape, std::vector<float>(e.nbytes / 4)};
        for (std::size_t i = 0; i < r.values.size(); ++i) r.values[i] = detail::get_le32(payload + e.offset + 4 * i);
        c.tensors.emplace(e.name, std::move(r));
    }
    return c;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot read checkpoint " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes, path.string());
}

namespace detail {

template <class T>
void assign(Tensor<T>& dst, const TensorRecord& src, const std::string& name) {
    if (src.shape != dst.shape()) {
        throw DataError("checkpoint tensor " + name + " has shape " + shape_string(src.shape) + ", model expects " +
                        shape_string(dst.shape()));
    }
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src.values[i]);
}

}  // namespace detail

/// Copies parameters, buffers and optimizer moments into `model`.
template <class T>
void restore(HybridModel<T>& model, const Checkpoint& c) {
    if (model.config().hash() != c.model_hash) throw ConfigError("checkpoint was written for another model config");
    auto find = [&](const std::string& name) -> const TensorRecord* {
        const auto it = c.tensors.find(name);
        return it == c.tensors.end() ? nullptr : &it->second;
    };
    for (Parameter<T>* p : model.parameters()) {
        const TensorRecord* v = find("param/" + p->name);
        if (!v) throw DataError("checkpoint lacks parameter " + p->name);
        detail::assign(p->value, *v, p->name);
        const TensorRecord* m = find("adam_m/" + p->name);
        const TensorRecord* s = find("adam_v/" + p->name);
        if (m && s) {
            p->slots.assign(2, Tensor<T>(p->shape()));
            detail::assign(p->slots[0], *m, "adam_m/" + p->name);
            detail::assign(p->slots[1], *s, "adam_v/" + p->name);
        } else {
            p->slots.clear();
        }
    }
    for (auto& [name, t] : model.buffers()) {
        const TensorRecord* b = find("buffer/" + name);
        if (!b) throw DataError("checkpoint lacks buffer " + name);
        detail::assign(*t, *b, name);
    }
}

template <class T = float>
HybridModel<T> model_from_checkpoint(const Checkpoint& c) {
    HybridModel<T> model(c.model);
    restore(model, c);
    return model;
}

}  // namespace hvad
