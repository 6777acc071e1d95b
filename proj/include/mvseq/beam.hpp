#pragma once

#include <algorithm>

#include "mvseq/metrics.hpp"
#include "mvseq/tasks.hpp"
#include "mvseq/transformer.hpp"

namespace mvseq {

struct BeamConfig {
    int64_t beam_size = 5;
    double length_penalty = 0.6;  // alpha in ((5 + len) / 6)^alpha
    int64_t max_len = 16;         // generated tokens, eos included
};

struct DecodeResult {
    std::vector<int32_t> tokens;  // content tokens, bos/eos stripped
    double score = 0.0;           // log-probability / length penalty
};

inline double length_penalty_factor(int64_t len, double alpha) {
    return std::pow((5.0 + static_cast<double>(len)) / 6.0, alpha);
}

namespace detail {

inline bool lex_less(const std::vector<int32_t>& a, const std::vector<int32_t>& b) {
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

// log-softmax of one logits row, computed in double
template <typename T>
std::vector<double> log_probs_row(const T* row, int64_t vocab) {
    double mx = static_cast<double>(row[0]);
    for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (int64_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    double lz = mx + std::log(z);
    std::vector<double> out(static_cast<size_t>(vocab));
    for (int64_t j = 0; j < vocab; ++j) out[static_cast<size_t>(j)] = static_cast<double>(row[j]) - lz;
    return out;
}

template <typename T>
EncoderViews<T> repeat_views(const EncoderViews<T>& views, int64_t n) {
    EncoderViews<T> out;
    for (const Tensor<T>& v : views.views) {
        Shape s = v.shape();
        Tensor<T> r({n, s[1], s[2]});
        for (int64_t i = 0; i < n; ++i)
            std::copy(v.data().begin(), v.data().end(), r.data().begin() + i * v.numel());
        out.views.push_back(std::move(r));
    }
    Shape m = views.src_mask.shape();
    out.src_mask = Tensor<T>({n, m[1]});
    for (int64_t i = 0; i < n; ++i)
        std::copy(views.src_mask.data().begin(), views.src_mask.data().end(),
                  out.src_mask.data().begin() + i * views.src_mask.numel());
    return out;
}

}  // namespace detail

// Standard beam search over log-probabilities. Hypotheses finish by
// emitting eos (scored at their generated length, eos included) or by
// reaching max_len without eos; finished hypotheses are ranked by
// score / lp(len), ties broken toward the lexicographically smallest
// token sequence.
template <typename T>
DecodeResult beam_search(const Model<T>& model, const std::vector<int32_t>& src, const BeamConfig& cfg) {
    if (cfg.beam_size < 1) throw std::invalid_argument("beam_size must be >= 1");
    if (src.empty()) throw std::invalid_argument("beam_search: empty source");
    int64_t max_len = std::min<int64_t>(cfg.max_len, model.config().max_len - 1);

    IdMatrix src_m(1, static_cast<int64_t>(src.size()));
    for (size_t i = 0; i < src.size(); ++i) src_m.at(0, static_cast<int64_t>(i)) = src[i];
    EncoderViews<T> views = model.encode(src_m);

    struct Hyp {
        std::vector<int32_t> tokens;  // generated tokens, eos excluded
        double logprob = 0.0;
    };
    struct Finished {
        std::vector<int32_t> tokens;
        double score;
    };
    std::vector<Hyp> alive{Hyp{}};
    std::vector<Finished> finished;
    int64_t finalized = 0;

    for (int64_t step = 1; step <= max_len && !alive.empty(); ++step) {
        int64_t n = static_cast<int64_t>(alive.size());
        IdMatrix tgt_in(n, step);
        for (int64_t i = 0; i < n; ++i) {
            tgt_in.at(i, 0) = kBosId;
            for (int64_t c = 1; c < step; ++c) tgt_in.at(i, c) = alive[static_cast<size_t>(i)].tokens[static_cast<size_t>(c - 1)];
        }
        EncoderViews<T> batch_views = detail::repeat_views(views, n);
        Tensor<T> logits = model.decode(tgt_in, batch_views);
        int64_t vocab = model.config().tgt_vocab;

        struct Cand {
            Hyp hyp;       // tokens include the continuation unless it is eos
            bool is_eos;
        };
        std::vector<Cand> candidates;
        for (int64_t i = 0; i < n; ++i) {
            std::vector<double> lp =
                detail::log_probs_row(logits.ptr() + ((i * step) + (step - 1)) * vocab, vocab);
            for (int64_t v = 0; v < vocab; ++v) {
                Cand c;
                c.hyp = alive[static_cast<size_t>(i)];
                c.hyp.logprob += lp[static_cast<size_t>(v)];
                c.is_eos = v == kEosId;
                if (!c.is_eos) c.hyp.tokens.push_back(static_cast<int32_t>(v));
                candidates.push_back(std::move(c));
            }
        }
        std::sort(candidates.begin(), candidates.end(), [](const Cand& a, const Cand& b) {
            if (a.hyp.logprob != b.hyp.logprob) return a.hyp.logprob > b.hyp.logprob;
            if (a.is_eos != b.is_eos) return a.is_eos;  // eos first among equals
            return detail::lex_less(a.hyp.tokens, b.hyp.tokens);
        });

        // eos candidates ranked within the top beam_size slots finalize;
        // the rest of the beam refills with the best non-eos continuations
        std::vector<Hyp> next_alive;
        for (size_t r = 0; r < candidates.size(); ++r) {
            Cand& c = candidates[r];
            if (c.is_eos) {
                if (r < static_cast<size_t>(cfg.beam_size)) {
                    finished.push_back(
                        {c.hyp.tokens, c.hyp.logprob / length_penalty_factor(step, cfg.length_penalty)});
                    ++finalized;
                }
            } else if (static_cast<int64_t>(next_alive.size()) < cfg.beam_size) {
                next_alive.push_back(std::move(c.hyp));
            }
            if (static_cast<int64_t>(next_alive.size()) >= cfg.beam_size && r + 1 >= static_cast<size_t>(cfg.beam_size))
                break;
        }
        alive = std::move(next_alive);
        if (finalized >= cfg.beam_size) break;

        if (step == max_len)
            for (Hyp& h : alive)
                finished.push_back({h.tokens, h.logprob / length_penalty_factor(max_len, cfg.length_penalty)});
    }

    if (finished.empty()) throw std::logic_error("beam_search: no finished hypotheses");
    const Finished* best = nullptr;
    for (const Finished& f : finished)
        if (!best || f.score > best->score || (f.score == best->score && detail::lex_less(f.tokens, best->tokens)))
            best = &f;
    return {best->tokens, best->score};
}

// Stepwise argmax decoding; ties break toward the smallest token id.
template <typename T>
DecodeResult greedy_decode(const Model<T>& model, const std::vector<int32_t>& src, int64_t max_len) {
    max_len = std::min<int64_t>(max_len, model.config().max_len - 1);
    IdMatrix src_m(1, static_cast<int64_t>(src.size()));
    for (size_t i = 0; i < src.size(); ++i) src_m.at(0, static_cast<int64_t>(i)) = src[i];
    EncoderViews<T> views = model.encode(src_m);

    std::vector<int32_t> tokens;
    double logprob = 0.0;
    for (int64_t step = 1; step <= max_len; ++step) {
        IdMatrix tgt_in(1, step);
        tgt_in.at(0, 0) = kBosId;
        for (int64_t c = 1; c < step; ++c) tgt_in.at(0, c) = tokens[static_cast<size_t>(c - 1)];
        Tensor<T> logits = model.decode(tgt_in, views);
        int64_t vocab = model.config().tgt_vocab;
        std::vector<double> lp = detail::log_probs_row(logits.ptr() + (step - 1) * vocab, vocab);
        int32_t arg = 0;
        for (int64_t v = 1; v < vocab; ++v)
            if (lp[static_cast<size_t>(v)] > lp[static_cast<size_t>(arg)]) arg = static_cast<int32_t>(v);
        logprob += lp[static_cast<size_t>(arg)];
        if (arg == kEosId) return {tokens, logprob};
        tokens.push_back(arg);
    }
    return {tokens, logprob};
}

// Decodes every source in the dataset; returns hypotheses aligned with refs.
template <typename T>
Corpus decode_corpus(const Model<T>& model, const Dataset& data, const BeamConfig& cfg) {
    Corpus hyps;
    hyps.reserve(data.size());
    for (const Pair& p : data) hyps.push_back(beam_search(model, p.src, cfg).tokens);
    return hyps;
}

}  // namespace mvseq
