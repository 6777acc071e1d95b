#include "mvseq/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mvseq {

std::string task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::Copy: return "copy";
        case TaskKind::Reverse: return "reverse";
        case TaskKind::Sort: return "sort";
        case TaskKind::SwapPairs: return "swap_pairs";
    }
    throw std::logic_error("unreachable task kind");
}

TaskKind task_kind_from_name(const std::string& name) {
    if (name == "copy") return TaskKind::Copy;
    if (name == "reverse") return TaskKind::Reverse;
    if (name == "sort") return TaskKind::Sort;
    if (name == "swap_pairs") return TaskKind::SwapPairs;
    throw std::invalid_argument("unknown task kind: " + name);
}

std::vector<int32_t> task_target(TaskKind kind, const std::vector<int32_t>& src) {
    std::vector<int32_t> tgt = src;
    switch (kind) {
        case TaskKind::Copy:
            break;
        case TaskKind::Reverse:
            std::reverse(tgt.begin(), tgt.end());
            break;
        case TaskKind::Sort:
            std::sort(tgt.begin(), tgt.end());
            break;
        case TaskKind::SwapPairs:
            for (size_t i = 0; i + 1 < tgt.size(); i += 2) std::swap(tgt[i], tgt[i + 1]);
            break;
    }
    return tgt;
}

Dataset generate(const TaskSpec& spec) {
    if (spec.vocab_size <= kFirstContentId)
        throw std::invalid_argument("task vocab_size must exceed " + std::to_string(kFirstContentId) +
                                    " to leave room for content tokens");
    if (spec.min_len < 1 || spec.max_len < spec.min_len)
        throw std::invalid_argument("task length range invalid");
    SplitMix64 rng(spec.seed);
    Dataset data;
    data.reserve(static_cast<size_t>(spec.num_pairs));
    int64_t span = spec.max_len - spec.min_len + 1;
    int32_t content = spec.vocab_size - kFirstContentId;
    for (int64_t i = 0; i < spec.num_pairs; ++i) {
        int64_t len = spec.min_len + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(span)));
        Pair p;
        p.src.resize(static_cast<size_t>(len));
        for (auto& tok : p.src)
            tok = kFirstContentId + static_cast<int32_t>(rng.next_below(static_cast<uint64_t>(content)));
        p.tgt = task_target(spec.kind, p.src);
        data.push_back(std::move(p));
    }
    return data;
}

void export_dataset(const Dataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (const Pair& p : data) {
        for (size_t i = 0; i < p.src.size(); ++i) out << (i ? " " : "") << p.src[i];
        out << '\t';
        for (size_t i = 0; i < p.tgt.size(); ++i) out << (i ? " " : "") << p.tgt[i];
        out << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

static std::vector<int32_t> parse_ids(const std::string& field, const std::string& path, size_t line_no) {
    std::vector<int32_t> ids;
    std::istringstream is(field);
    long long v;
    while (is >> v) ids.push_back(static_cast<int32_t>(v));
    if (!is.eof())
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed id list '" + field + "'");
    return ids;
}

Dataset import_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open dataset: " + path);
    Dataset data;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": missing tab separator");
        Pair p;
        p.src = parse_ids(line.substr(0, tab), path, line_no);
        p.tgt = parse_ids(line.substr(tab + 1), path, line_no);
        if (p.src.empty() || p.tgt.empty())
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": empty sequence");
        data.push_back(std::move(p));
    }
    return data;
}

Batch make_batch(const Dataset& data, const std::vector<size_t>& indices) {
    if (indices.empty()) throw std::invalid_argument("make_batch: empty index list");
    int64_t ls = 0, lt = 0;
    for (size_t ix : indices) {
        ls = std::max<int64_t>(ls, static_cast<int64_t>(data[ix].src.size()));
        lt = std::max<int64_t>(lt, static_cast<int64_t>(data[ix].tgt.size()) + 1);  // +1 for bos/eos shift
    }
    int64_t b = static_cast<int64_t>(indices.size());
    Batch batch;
    batch.src = IdMatrix(b, ls);
    batch.tgt_in = IdMatrix(b, lt);
    batch.tgt_out = IdMatrix(b, lt);
    for (int64_t r = 0; r < b; ++r) {
        const Pair& p = data[indices[static_cast<size_t>(r)]];
        for (size_t c = 0; c < p.src.size(); ++c) batch.src.at(r, static_cast<int64_t>(c)) = p.src[c];
        batch.tgt_in.at(r, 0) = kBosId;
        for (size_t c = 0; c < p.tgt.size(); ++c) {
            batch.tgt_in.at(r, static_cast<int64_t>(c) + 1) = p.tgt[c];
            batch.tgt_out.at(r, static_cast<int64_t>(c)) = p.tgt[c];
        }
        batch.tgt_out.at(r, static_cast<int64_t>(p.tgt.size())) = kEosId;
        // shift invariant: tgt_in[t + 1] == tgt_out[t] for non-pad positions
    }
    return batch;
}

std::vector<std::vector<size_t>> batch_groups(const Dataset& data, int64_t batch_size, int64_t max_tokens,
                                              uint64_t seed, int64_t max_seq_len) {
    if (data.empty()) throw std::invalid_argument("batchify: empty dataset");
    if (batch_size < 1 || max_tokens < 1) throw std::invalid_argument("batchify: caps must be positive");
    if (max_seq_len > 0) {
        for (const Pair& p : data) {
            if (static_cast<int64_t>(p.src.size()) > max_seq_len ||
                static_cast<int64_t>(p.tgt.size()) + 1 > max_seq_len)
                throw std::invalid_argument("batchify: pair of length " + std::to_string(p.src.size()) +
                                            " exceeds max sequence length " + std::to_string(max_seq_len));
        }
    }

    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return data[a].src.size() < data[b].src.size(); });

    std::vector<std::vector<size_t>> groups;
    std::vector<size_t> cur;
    int64_t cur_ls = 0, cur_lt = 0;
    auto flush = [&]() {
        if (!cur.empty()) groups.push_back(std::move(cur));
        cur.clear();
        cur_ls = cur_lt = 0;
    };
    for (size_t ix : order) {
        int64_t ls = std::max<int64_t>(cur_ls, static_cast<int64_t>(data[ix].src.size()));
        int64_t lt = std::max<int64_t>(cur_lt, static_cast<int64_t>(data[ix].tgt.size()) + 1);
        int64_t n = static_cast<int64_t>(cur.size()) + 1;
        if (!cur.empty() && (n > batch_size || n * ls > max_tokens || n * lt > max_tokens)) flush();
        cur.push_back(ix);
        cur_ls = std::max<int64_t>(cur_ls, static_cast<int64_t>(data[ix].src.size()));
        cur_lt = std::max<int64_t>(cur_lt, static_cast<int64_t>(data[ix].tgt.size()) + 1);
    }
    flush();

    SplitMix64 rng(seed);
    for (size_t i = groups.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.next_below(i));
        std::swap(groups[i - 1], groups[j]);
    }
    return groups;
}

std::vector<Batch> batchify(const Dataset& data, int64_t batch_size, int64_t max_tokens, uint64_t seed,
                            int64_t max_seq_len) {
    std::vector<Batch> batches;
    for (const auto& g : batch_groups(data, batch_size, max_tokens, seed, max_seq_len))
        batches.push_back(make_batch(data, g));
    return batches;
}

}  // namespace mvseq
