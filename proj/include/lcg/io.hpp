#pragma once

// Binary checkpoints and run manifests.
//
// Checkpoint layout: "LCGC" magic, u32 version, u32 tensor count, then per
// tensor a length-prefixed name, u32 rank, u32 dims and f64 little-endian
// values.  An optional "LCGS" block follows with the training step, the
// serialized RNG stream, the resolved run config (JSON) and the optimizer
// moment tensors in the same encoding.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lcg/tensor.hpp"

namespace lcg {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct TrainingState {
    int64_t step = 0;
    std::string rng_state;
    std::string config_json;
    NamedTensors moments;
};

struct Checkpoint {
    NamedTensors params;
    std::optional<TrainingState> state;
};

namespace detail {

inline void write_u32(std::ostream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& f, uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }

inline uint32_t read_u32(std::istream& f, const char* what) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) throw DataError(std::string("checkpoint truncated reading ") + what);
    return v;
}

inline uint64_t read_u64(std::istream& f, const char* what) {
    uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    if (!f) throw DataError(std::string("checkpoint truncated reading ") + what);
    return v;
}

inline void write_blob(std::ostream& f, const std::string& s) {
    write_u32(f, static_cast<uint32_t>(s.size()));
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_blob(std::istream& f, const char* what) {
    uint32_t len = read_u32(f, what);
    std::string s(len, '\0');
    f.read(s.data(), len);
    if (!f) throw DataError(std::string("checkpoint truncated reading ") + what);
    return s;
}

inline void write_tensor_list(std::ostream& f, const NamedTensors& tensors) {
    write_u32(f, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        write_blob(f, name);
        write_u32(f, static_cast<uint32_t>(t.shape().size()));
        for (int64_t d : t.shape()) write_u32(f, static_cast<uint32_t>(d));
        f.write(reinterpret_cast<const char*>(t.values().data()),
                static_cast<std::streamsize>(t.values().size() * sizeof(double)));
    }
}

inline NamedTensors read_tensor_list(std::istream& f) {
    uint32_t count = read_u32(f, "tensor count");
    NamedTensors out;
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = read_blob(f, "tensor name");
        uint32_t rank = read_u32(f, "tensor rank");
        if (rank > 8) throw DataError("checkpoint tensor rank is implausible");
        std::vector<int64_t> shape;
        for (uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int64_t>(read_u32(f, "tensor dim")));
        Tensor t = Tensor::zeros(shape);
        f.read(reinterpret_cast<char*>(t.values().data()),
               static_cast<std::streamsize>(t.values().size() * sizeof(double)));
        if (!f) throw DataError("checkpoint truncated reading tensor values");
        for (double v : t.values()) {
            if (!std::isfinite(v)) throw DataError("checkpoint holds a non-finite value in " + name);
        }
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const NamedTensors& params,
                            const TrainingState* state = nullptr) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint: " + path);
    f.write("LCGC", 4);
    detail::write_u32(f, 1);
    detail::write_tensor_list(f, params);
    if (state) {
        f.write("LCGS", 4);
        detail::write_u64(f, static_cast<uint64_t>(state->step));
        detail::write_blob(f, state->rng_state);
        detail::write_blob(f, state->config_json);
        detail::write_tensor_list(f, state->moments);
    }
    if (!f) throw DataError("failed while writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (f.gcount() != 4 || std::memcmp(magic, "LCGC", 4) != 0) throw DataError("bad magic in checkpoint: " + path);
    uint32_t version = detail::read_u32(f, "version");
    if (version != 1) throw DataError(format_msg("unsupported checkpoint version %u", version));
    Checkpoint ck;
    ck.params = detail::read_tensor_list(f);
    f.read(magic, 4);
    if (f.gcount() == 4) {
        if (std::memcmp(magic, "LCGS", 4) != 0) throw DataError("unrecognized trailer in checkpoint: " + path);
        TrainingState st;
        st.step = static_cast<int64_t>(detail::read_u64(f, "step"));
        st.rng_state = detail::read_blob(f, "rng state");
        st.config_json = detail::read_blob(f, "config");
        st.moments = detail::read_tensor_list(f);
        ck.state = std::move(st);
    }
    return ck;
}

// Copies checkpoint tensors into live parameters, insisting on an exact
// name-for-name, shape-for-shape match.
inline void load_into(NamedTensors& params, const NamedTensors& stored) {
    if (params.size() != stored.size()) {
        throw DataError(format_msg("checkpoint has %zu tensors, model expects %zu", stored.size(), params.size()));
    }
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : stored) by_name[name] = &t;
    for (auto& [name, t] : params) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw DataError("checkpoint is missing tensor " + name);
        if (it->second->shape() != t.shape()) {
            throw DataError("checkpoint tensor " + name + " has shape " + shape_str(it->second->shape()) +
                            ", expected " + shape_str(t.shape()));
        }
        t.values() = it->second->values();
    }
}

// ---------------------------------------------------------------------------
// Run manifest: one manifest.json per output directory recording the command,
// its seed, content hashes of config and input files, hashes and sizes of
// every produced artifact, and the wall-clock cost.  The artifact bytes are
// deterministic; only wall_clock_seconds varies between identical reruns.
// ---------------------------------------------------------------------------

inline uint64_t hash_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot hash missing file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes.data(), bytes.size());
}

struct ManifestInfo {
    std::string command;
    uint64_t seed = 0;
    std::vector<std::string> config_files;  // hashed, keyed by the path as given
    std::vector<std::string> input_files;   // hashed likewise
    std::vector<std::string> outputs;       // names relative to the output directory
    double wall_clock_seconds = 0.0;
    nlohmann::json meta;
};

inline void write_manifest(const std::string& dir, const ManifestInfo& info) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["command"] = info.command;
    j["seed"] = info.seed;
    j["config"] = nlohmann::json::object();
    for (const std::string& path : info.config_files) j["config"][path] = hex64(hash_file(path));
    j["inputs"] = nlohmann::json::object();
    for (const std::string& path : info.input_files) j["inputs"][path] = hex64(hash_file(path));
    j["outputs"] = nlohmann::json::object();
    for (const std::string& name : info.outputs) {
        std::string path = dir + "/" + name;
        j["outputs"][name] = {{"bytes", std::filesystem::file_size(path)}, {"fnv1a64", hex64(hash_file(path))}};
    }
    j["wall_clock_seconds"] = info.wall_clock_seconds;
    j["artifact_versions"] = {{"manifest", 1}, {"checkpoint", 1}, {"tokenizer", 1}, {"features", 1}, {"report", 1}};
    std::ofstream f(dir + "/manifest.json");
    if (!f) throw DataError("cannot write manifest in " + dir);
    f << j.dump(2) << "\n";
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    f << j.dump(2) << "\n";
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": " + e.what());
    }
    return j;
}

}  // namespace lcg
