#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mvseq/ids.hpp"
#include "mvseq/rng.hpp"

namespace mvseq {

enum class TaskKind { Copy, Reverse, Sort, SwapPairs };

std::string task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& name);

// Deterministic generator of toy sequence pairs. Content tokens live in
// [3, vocab_size); ids 0/1/2 are reserved for pad/bos/eos everywhere.
struct TaskSpec {
    TaskKind kind = TaskKind::Copy;
    int32_t vocab_size = 16;
    int64_t min_len = 1;
    int64_t max_len = 20;
    uint64_t seed = 1;
    int64_t num_pairs = 2048;
};

struct Pair {
    std::vector<int32_t> src;
    std::vector<int32_t> tgt;
};

using Dataset = std::vector<Pair>;

// The pure function each kind applies to a source sequence.
std::vector<int32_t> task_target(TaskKind kind, const std::vector<int32_t>& src);

Dataset generate(const TaskSpec& spec);

void export_dataset(const Dataset& data, const std::string& path);
Dataset import_dataset(const std::string& path);

// One teacher-forced training batch. tgt_in is bos-shifted, tgt_out is
// eos-terminated; tgt_in[t + 1] == tgt_out[t] on non-pad positions.
struct Batch {
    IdMatrix src;      // [B, Ls], right-padded
    IdMatrix tgt_in;   // [B, Lt]
    IdMatrix tgt_out;  // [B, Lt]
};

Batch make_batch(const Dataset& data, const std::vector<size_t>& indices);

// Length-bucketed batching: pairs sorted by source length, greedily packed
// under both caps, batch order shuffled by the seed. Every pair appears in
// exactly one batch. max_seq_len, when positive, bounds the padded lengths
// a model will accept (source, and target + 1 for the bos/eos shift).
std::vector<Batch> batchify(const Dataset& data, int64_t batch_size, int64_t max_tokens, uint64_t seed,
                            int64_t max_seq_len = 0);

// The index groups behind batchify, for callers that materialize batches
// lazily (one group per batch, shuffled order).
std::vector<std::vector<size_t>> batch_groups(const Dataset& data, int64_t batch_size, int64_t max_tokens,
                                              uint64_t seed, int64_t max_seq_len = 0);

}  // namespace mvseq
