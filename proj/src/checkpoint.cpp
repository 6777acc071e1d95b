#include "mvseq/checkpoint.hpp"

#include <zlib.h>

#include <fstream>
#include <nlohmann/json.hpp>

namespace mvseq {

using nlohmann::json;

namespace {

constexpr char kMagic[5] = {'M', 'V', 'S', 'Q', '1'};

size_t dtype_size(const std::string& dtype) {
    if (dtype == "f32") return 4;
    if (dtype == "f64") return 8;
    throw CheckpointError("unknown dtype '" + dtype + "'");
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    json index = json::array();
    uint64_t offset = 0;
    for (const auto& [name, blob] : ckpt.tensors) {
        if (blob.bytes.size() != static_cast<size_t>(blob.numel()) * dtype_size(blob.dtype))
            throw CheckpointError("tensor '" + name + "': byte length does not match shape");
        index.push_back(json{{"name", name},
                             {"dtype", blob.dtype},
                             {"shape", blob.shape},
                             {"byte_offset", offset},
                             {"byte_len", blob.bytes.size()}});
        offset += blob.bytes.size();
    }
    json header = {{"config", json::parse(model_config_to_json_text(ckpt.config))},
                   {"phase", ckpt.phase},
                   {"seed", ckpt.seed},
                   {"optim_step", ckpt.optim_step},
                   {"tensor_index", index}};
    std::string header_text = header.dump();

    std::string out;
    out.append(kMagic, sizeof(kMagic));
    put_u64(out, header_text.size());
    out += header_text;
    uLong crc = crc32(0L, Z_NULL, 0);
    for (const auto& [name, blob] : ckpt.tensors) {
        out.append(reinterpret_cast<const char*>(blob.bytes.data()), blob.bytes.size());
        crc = crc32(crc, blob.bytes.data(), static_cast<uInt>(blob.bytes.size()));
    }
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((crc >> (8 * i)) & 0xff));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint: " + path);
    std::vector<uint8_t> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (raw.size() < sizeof(kMagic) + 8 + 4 || std::memcmp(raw.data(), kMagic, sizeof(kMagic)) != 0)
        throw CheckpointError(path + ": not a checkpoint file (bad magic)");
    uint64_t header_len = get_u64(raw.data() + sizeof(kMagic));
    size_t header_start = sizeof(kMagic) + 8;
    if (raw.size() < header_start + header_len + 4) throw CheckpointError(path + ": truncated header");

    json header;
    try {
        header = json::parse(raw.begin() + static_cast<long>(header_start),
                             raw.begin() + static_cast<long>(header_start + header_len));
    } catch (const json::exception& e) {
        throw CheckpointError(path + ": corrupt header: " + e.what());
    }

    Checkpoint ckpt;
    try {
        ckpt.config = model_config_from_json_text(header.at("config").dump());
        ckpt.phase = header.at("phase").get<std::string>();
        ckpt.seed = header.at("seed").get<uint64_t>();
        ckpt.optim_step = header.at("optim_step").get<uint64_t>();
    } catch (const json::exception& e) {
        throw CheckpointError(path + ": corrupt header: " + e.what());
    }
    if (ckpt.phase != kPhase1 && ckpt.phase != kPhase2)
        throw CheckpointError(path + ": unknown phase '" + ckpt.phase + "'");

    size_t payload_start = header_start + header_len;
    size_t payload_len = raw.size() - payload_start - 4;

    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, raw.data() + payload_start, static_cast<uInt>(payload_len));
    uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= static_cast<uint32_t>(raw[raw.size() - 4 + static_cast<size_t>(i)]) << (8 * i);
    if (static_cast<uint32_t>(crc) != stored)
        throw CheckpointError(path + ": payload CRC mismatch (file corrupt)");

    for (const json& e : header.at("tensor_index")) {
        std::string name;
        TensorBlob blob;
        uint64_t off = 0, len = 0;
        try {
            name = e.at("name").get<std::string>();
            blob.dtype = e.at("dtype").get<std::string>();
            blob.shape = e.at("shape").get<Shape>();
            off = e.at("byte_offset").get<uint64_t>();
            len = e.at("byte_len").get<uint64_t>();
        } catch (const json::exception& ex) {
            throw CheckpointError(path + ": corrupt tensor index: " + ex.what());
        }
        if (ckpt.tensors.count(name)) throw CheckpointError(path + ": duplicate tensor '" + name + "'");
        if (len != static_cast<uint64_t>(blob.numel()) * dtype_size(blob.dtype))
            throw CheckpointError(path + ": tensor '" + name + "': byte length does not match shape");
        if (off + len > payload_len)
            throw CheckpointError(path + ": tensor '" + name + "': data extends past payload");
        blob.bytes.assign(raw.begin() + static_cast<long>(payload_start + off),
                          raw.begin() + static_cast<long>(payload_start + off + len));
        ckpt.tensors.emplace(std::move(name), std::move(blob));
    }
    return ckpt;
}

Checkpoint average_checkpoints(const std::vector<std::string>& paths) {
    if (paths.empty()) throw CheckpointError("average: no checkpoints given");
    std::vector<Checkpoint> all;
    for (const auto& p : paths) all.push_back(load_checkpoint(p));

    auto param_names = [](const Checkpoint& c) {
        std::vector<std::string> names;
        for (const auto& [name, blob] : c.tensors)
            if (name.rfind("adam.", 0) != 0) names.push_back(name);
        return names;
    };
    const Checkpoint& newest = all.back();
    std::vector<std::string> names = param_names(newest);
    for (const Checkpoint& c : all) {
        if (!(c.config == newest.config)) throw CheckpointError("average: checkpoint configs differ");
        if (param_names(c) != names) throw CheckpointError("average: parameter names differ");
    }

    Checkpoint out;
    out.config = newest.config;
    out.phase = newest.phase;
    out.seed = newest.seed;
    out.optim_step = 0;
    for (const std::string& name : names) {
        const TensorBlob& ref = newest.tensors.at(name);
        for (const Checkpoint& c : all) {
            const TensorBlob& b = c.tensors.at(name);
            if (b.shape != ref.shape || b.dtype != ref.dtype)
                throw CheckpointError("average: tensor '" + name + "' differs in shape or dtype");
        }
        std::vector<long double> acc(static_cast<size_t>(ref.numel()), 0.0L);
        for (const Checkpoint& c : all) {
            const TensorBlob& b = c.tensors.at(name);
            if (b.dtype == "f32") {
                auto v = blob_values<float>(b, name);
                for (size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
            } else {
                auto v = blob_values<double>(b, name);
                for (size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
            }
        }
        long double k = static_cast<long double>(all.size());
        TensorBlob blob;
        blob.dtype = ref.dtype;
        blob.shape = ref.shape;
        if (ref.dtype == "f32") {
            std::vector<float> v(acc.size());
            for (size_t i = 0; i < acc.size(); ++i) v[i] = static_cast<float>(acc[i] / k);
            blob = make_blob_raw(v, ref.shape);
        } else {
            std::vector<double> v(acc.size());
            for (size_t i = 0; i < acc.size(); ++i) v[i] = static_cast<double>(acc[i] / k);
            blob = make_blob_raw(v, ref.shape);
        }
        out.tensors.emplace(name, std::move(blob));
    }
    return out;
}

}  // namespace mvseq
