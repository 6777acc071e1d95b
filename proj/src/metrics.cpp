#include "mvseq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>

namespace mvseq {

static std::map<std::vector<int32_t>, int64_t> ngram_counts(const std::vector<int32_t>& seq, int n) {
    std::map<std::vector<int32_t>, int64_t> counts;
    if (static_cast<int>(seq.size()) < n) return counts;
    for (size_t i = 0; i + static_cast<size_t>(n) <= seq.size(); ++i)
        counts[std::vector<int32_t>(seq.begin() + static_cast<long>(i), seq.begin() + static_cast<long>(i) + n)]++;
    return counts;
}

double corpus_bleu(const Corpus& hyps, const Corpus& refs, const BleuOptions& opts) {
    if (hyps.size() != refs.size())
        throw std::invalid_argument("bleu: corpus size mismatch: " + std::to_string(hyps.size()) + " vs " +
                                    std::to_string(refs.size()));
    if (hyps.empty()) throw std::invalid_argument("bleu: empty corpus");
    int max_n = opts.max_n;
    if (max_n < 1) throw std::invalid_argument("bleu: max_n must be >= 1");

    std::vector<int64_t> matches(static_cast<size_t>(max_n), 0), totals(static_cast<size_t>(max_n), 0);
    int64_t hyp_len = 0, ref_len = 0;
    for (size_t i = 0; i < hyps.size(); ++i) {
        hyp_len += static_cast<int64_t>(hyps[i].size());
        ref_len += static_cast<int64_t>(refs[i].size());
        for (int n = 1; n <= max_n; ++n) {
            auto hc = ngram_counts(hyps[i], n);
            auto rc = ngram_counts(refs[i], n);
            for (const auto& [gram, cnt] : hc) {
                totals[static_cast<size_t>(n - 1)] += cnt;
                auto it = rc.find(gram);
                if (it != rc.end()) matches[static_cast<size_t>(n - 1)] += std::min(cnt, it->second);
            }
        }
    }
    if (hyp_len == 0) return 0.0;

    double log_prec = 0.0;
    for (int n = 1; n <= max_n; ++n) {
        double m = static_cast<double>(matches[static_cast<size_t>(n - 1)]);
        double t = static_cast<double>(totals[static_cast<size_t>(n - 1)]);
        if (opts.smooth && n >= 2) {
            m += 1.0;
            t += 1.0;
        }
        if (m <= 0.0 || t <= 0.0) return 0.0;
        log_prec += std::log(m / t);
    }
    log_prec /= static_cast<double>(max_n);

    double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
    return 100.0 * bp * std::exp(log_prec);
}

double sequence_accuracy(const Corpus& hyps, const Corpus& refs) {
    if (hyps.size() != refs.size())
        throw std::invalid_argument("sequence_accuracy: corpus size mismatch: " + std::to_string(hyps.size()) +
                                    " vs " + std::to_string(refs.size()));
    if (hyps.empty()) throw std::invalid_argument("sequence_accuracy: empty corpus");
    size_t hits = 0;
    for (size_t i = 0; i < hyps.size(); ++i)
        if (hyps[i] == refs[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(hyps.size());
}

LengthBuckets LengthBuckets::from_boundaries(const std::vector<int64_t>& cuts, int64_t max_len) {
    if (max_len < 1) throw std::invalid_argument("buckets: max_len must be >= 1");
    LengthBuckets b;
    int64_t lo = 1;
    for (int64_t c : cuts) {
        if (c <= lo || c > max_len)
            throw std::invalid_argument("buckets: boundaries must be strictly ascending within (1, max_len]");
        b.ranges.emplace_back(lo, c);
        lo = c;
    }
    b.ranges.emplace_back(lo, max_len + 1);
    return b;
}

size_t LengthBuckets::bucket_of(int64_t len) const {
    for (size_t i = 0; i < ranges.size(); ++i)
        if (len >= ranges[i].first && len < ranges[i].second) return i;
    throw std::out_of_range("buckets: length " + std::to_string(len) + " outside [1, max_len]");
}

std::vector<BucketScore> bucketed_scores(const Corpus& hyps, const Corpus& refs,
                                         const std::vector<int64_t>& src_lens, const LengthBuckets& buckets,
                                         const CorpusMetric& metric) {
    if (hyps.size() != refs.size() || hyps.size() != src_lens.size())
        throw std::invalid_argument("bucketed_scores: corpus/lengths size mismatch");
    std::vector<Corpus> bh(buckets.ranges.size()), br(buckets.ranges.size());
    for (size_t i = 0; i < hyps.size(); ++i) {
        size_t b = buckets.bucket_of(src_lens[i]);
        bh[b].push_back(hyps[i]);
        br[b].push_back(refs[i]);
    }
    std::vector<BucketScore> out;
    for (size_t b = 0; b < buckets.ranges.size(); ++b) {
        BucketScore s;
        s.lo = buckets.ranges[b].first;
        s.hi = buckets.ranges[b].second;
        s.count = static_cast<int64_t>(bh[b].size());
        if (s.count > 0) {
            s.has_value = true;
            s.value = metric(bh[b], br[b]);
        }
        out.push_back(s);
    }
    return out;
}

std::string bucket_scores_csv(const std::vector<BucketScore>& scores, const std::string& header_comment) {
    std::string out;
    if (!header_comment.empty()) out += "# " + header_comment + "\n";
    out += "bucket_lo,bucket_hi,count,metric_value\n";
    char buf[64];
    for (const BucketScore& s : scores) {
        out += std::to_string(s.lo) + "," + std::to_string(s.hi) + "," + std::to_string(s.count) + ",";
        if (s.has_value) {
            std::snprintf(buf, sizeof(buf), "%.10g", s.value);
            out += buf;
        }
        out += "\n";
    }
    return out;
}

}  // namespace mvseq
