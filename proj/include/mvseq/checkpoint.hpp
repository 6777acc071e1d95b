#pragma once

#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "mvseq/adam.hpp"
#include "mvseq/config.hpp"
#include "mvseq/tensor.hpp"

namespace mvseq {

inline constexpr const char* kPhase1 = "phase1_conventional";
inline constexpr const char* kPhase2 = "phase2_multiview";

// On-disk format:
//   magic "MVSQ1"
//   u64 LE header length
//   UTF-8 JSON header {config, phase, seed, optim_step, tensor_index:
//     [{name, dtype (f32|f64), shape, byte_offset, byte_len}]}
//   raw little-endian tensor payloads at the stated offsets (relative to the
//   start of the payload region)
//   u32 LE CRC-32 of the payload region
//
// Tensors are laid out in name order; save -> load -> save is byte-identical.
struct TensorBlob {
    std::string dtype;  // "f32" | "f64"
    Shape shape;
    std::vector<uint8_t> bytes;

    int64_t numel() const { return numel_of(shape); }
};

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    ModelConfig config;
    std::string phase = kPhase1;
    uint64_t seed = 0;
    uint64_t optim_step = 0;
    std::map<std::string, TensorBlob> tensors;  // params, plus adam.m.* / adam.v.*
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Arithmetic mean of the model parameters of all listed checkpoints, which
// must agree on config and parameter names. Optimizer state is dropped;
// phase metadata, seed, and dtypes are carried from the newest (last) path.
Checkpoint average_checkpoints(const std::vector<std::string>& paths);

namespace detail {
template <typename T>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() {
    return "f32";
}
template <>
inline const char* dtype_name<double>() {
    return "f64";
}
}  // namespace detail

template <typename T>
TensorBlob make_blob(const Tensor<T>& t) {
    TensorBlob b;
    b.dtype = detail::dtype_name<T>();
    b.shape = t.shape();
    b.bytes.resize(t.data().size() * sizeof(T));
    std::memcpy(b.bytes.data(), t.data().data(), b.bytes.size());
    return b;
}

template <typename T>
TensorBlob make_blob_raw(const std::vector<T>& data, Shape shape) {
    TensorBlob b;
    b.dtype = detail::dtype_name<T>();
    b.shape = std::move(shape);
    b.bytes.resize(data.size() * sizeof(T));
    std::memcpy(b.bytes.data(), data.data(), b.bytes.size());
    return b;
}

template <typename T>
void blob_into(const TensorBlob& b, const std::string& name, Tensor<T>& t) {
    if (b.dtype != detail::dtype_name<T>())
        throw CheckpointError("tensor '" + name + "': dtype " + b.dtype + " does not match model precision " +
                              detail::dtype_name<T>());
    if (b.shape != t.shape())
        throw CheckpointError("tensor '" + name + "': shape " + shape_str(b.shape) + " does not match model shape " +
                              shape_str(t.shape()));
    std::memcpy(t.data().data(), b.bytes.data(), b.bytes.size());
}

template <typename T>
std::vector<T> blob_values(const TensorBlob& b, const std::string& name) {
    if (b.dtype != detail::dtype_name<T>())
        throw CheckpointError("tensor '" + name + "': dtype mismatch");
    std::vector<T> out(static_cast<size_t>(b.numel()));
    std::memcpy(out.data(), b.bytes.data(), b.bytes.size());
    return out;
}

}  // namespace mvseq
