#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace mvseq {

using Corpus = std::vector<std::vector<int32_t>>;

struct BleuOptions {
    int max_n = 4;
    bool smooth = false;  // add-1 to clipped matches and totals for n >= 2
};

// Corpus-level BLEU in [0, 100]: geometric mean of clipped n-gram precisions
// times the brevity penalty. Without smoothing, a zero precision at any
// order yields 0.
double corpus_bleu(const Corpus& hyps, const Corpus& refs, const BleuOptions& opts = {});

// Fraction of hypotheses exactly equal to their reference.
double sequence_accuracy(const Corpus& hyps, const Corpus& refs);

// Half-open source-length intervals partitioning [1, max_len].
struct LengthBuckets {
    std::vector<std::pair<int64_t, int64_t>> ranges;  // [lo, hi)

    static LengthBuckets from_boundaries(const std::vector<int64_t>& cuts, int64_t max_len);
    size_t bucket_of(int64_t len) const;
};

struct BucketScore {
    int64_t lo = 0;
    int64_t hi = 0;
    int64_t count = 0;
    bool has_value = false;  // empty buckets report no score rather than zero
    double value = 0.0;
};

using CorpusMetric = std::function<double(const Corpus&, const Corpus&)>;

std::vector<BucketScore> bucketed_scores(const Corpus& hyps, const Corpus& refs,
                                         const std::vector<int64_t>& src_lens, const LengthBuckets& buckets,
                                         const CorpusMetric& metric);

std::string bucket_scores_csv(const std::vector<BucketScore>& scores, const std::string& header_comment);

}  // namespace mvseq
