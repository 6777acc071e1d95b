#pragma once

#include <map>
#include <utility>

#include "mvseq/config.hpp"
#include "mvseq/ops.hpp"

namespace mvseq {

constexpr double kLayerNormEps = 1e-5;
constexpr double kMaskedScore = -1e9;  // additive score for masked keys

// Per-layer source representations S_1..S_N plus the padding mask.
template <typename T>
struct EncoderViews {
    std::vector<Tensor<T>> views;  // each [B, Ls, d], index i-1 holds S_i
    Tensor<T> src_mask;            // [B, Ls], 1 real / 0 pad, constant
};

// Dropout / RNG context threaded through forward passes. Inference uses the
// default (no dropout, no RNG needed).
struct RunState {
    bool training = false;
    SplitMix64* rng = nullptr;
};

template <typename T>
struct LinearP {
    Tensor<T> w;  // [in, out]
    Tensor<T> b;  // [out]
};

template <typename T>
struct LayerNormP {
    Tensor<T> gain;
    Tensor<T> bias;
};

// The key projection carries no bias: a shared key offset shifts every
// attention row uniformly and softmax cancels it, so such a bias is dead
// weight with an identically zero gradient.
template <typename T>
struct MhaP {
    LinearP<T> q;
    Tensor<T> k_w;  // [d, d]
    LinearP<T> v, o;
};

template <typename T>
struct EncoderLayerP {
    MhaP<T> self_attn;
    LayerNormP<T> ln1;
    LinearP<T> ff1, ff2;
    LayerNormP<T> ln2;
};

template <typename T>
struct DecoderLayerP {
    MhaP<T> self_attn;
    LayerNormP<T> ln1;
    MhaP<T> cross_attn;
    LayerNormP<T> ln2;
    LinearP<T> ff1, ff2;
    LayerNormP<T> ln3;
};

// Parameters owned by the multi-view extension; which vectors are populated
// depends on strategy and integration mode.
template <typename T>
struct MultiViewP {
    std::vector<LayerNormP<T>> integ_ln;        // soft integration: one pair per decoder layer
    std::vector<std::vector<LinearP<T>>> fma;   // [i][j] -> (W_ij, b_ij)
    std::vector<Tensor<T>> ama_q;               // one query vector per decoder layer
    std::vector<Tensor<T>> ama_v;               // one key vector per encoder layer
};

template <typename T>
struct MhaOut {
    Tensor<T> out;      // [B, Lq, d]
    Tensor<T> weights;  // [B, H, Lq, Lk], pre-dropout probabilities
};

template <typename T>
Tensor<T> linear(const LinearP<T>& p, const Tensor<T>& x) {
    return add(matmul(x, p.w), p.b);
}

// Scaled dot-product attention over `heads` heads. `mask` is an additive
// score tensor broadcastable to [B, H, Lq, Lk] (0 keeps, kMaskedScore
// drops); pass an undefined tensor for no masking.
template <typename T>
MhaOut<T> multi_head_attention(const MhaP<T>& p, int64_t heads, const Tensor<T>& q, const Tensor<T>& k,
                               const Tensor<T>& v, const Tensor<T>& mask, const RunState& rs, double attn_dropout) {
    check_shape(q.rank() == 3 && k.rank() == 3 && v.rank() == 3,
                "attention expects [B,L,d] inputs: " + shape_str(q.shape()));
    int64_t B = q.dim(0), Lq = q.dim(1), d = q.dim(2);
    int64_t Lk = k.dim(1);
    check_shape(k.dim(0) == B && v.dim(0) == B && v.dim(1) == Lk && k.dim(2) == d && v.dim(2) == d,
                "attention shape mismatch: q=" + shape_str(q.shape()) + " k=" + shape_str(k.shape()) +
                    " v=" + shape_str(v.shape()));
    check_shape(d % heads == 0, "d_model not divisible by heads");
    int64_t dh = d / heads;

    auto split_heads = [&](const Tensor<T>& x, int64_t L) {
        return transpose(reshape(x, {B, L, heads, dh}), 1, 2);  // [B, H, L, dh]
    };
    Tensor<T> qh = split_heads(linear(p.q, q), Lq);
    Tensor<T> kh = split_heads(matmul(k, p.k_w), Lk);
    Tensor<T> vh = split_heads(linear(p.v, v), Lk);

    Tensor<T> scores = matmul(qh, transpose(kh, 2, 3));  // [B, H, Lq, Lk]
    scores = scale(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    if (mask.defined()) scores = add(scores, mask);
    Tensor<T> probs = softmax(scores, 3);

    Tensor<T> attended = probs;
    if (rs.training && attn_dropout > 0.0) attended = dropout(attended, attn_dropout, *rs.rng, true);
    Tensor<T> ctx = matmul(attended, vh);                            // [B, H, Lq, dh]
    Tensor<T> merged = reshape(transpose(ctx, 1, 2), {B, Lq, d});    // concat heads
    return {linear(p.o, merged), probs};
}

// Additive key mask [B,1,1,Ls] built from token ids; also yields the 0/1
// mask stored in EncoderViews. Every row must keep at least one real key.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> make_source_masks(const IdMatrix& src) {
    Tensor<T> additive({src.rows, 1, 1, src.cols});
    Tensor<T> flags({src.rows, src.cols});
    for (int64_t r = 0; r < src.rows; ++r) {
        bool any = false;
        for (int64_t c = 0; c < src.cols; ++c) {
            bool real = src.at(r, c) != kPadId;
            any = any || real;
            additive.data()[static_cast<size_t>(r * src.cols + c)] = real ? T(0) : static_cast<T>(kMaskedScore);
            flags.data()[static_cast<size_t>(r * src.cols + c)] = real ? T(1) : T(0);
        }
        if (!any) throw std::invalid_argument("source row " + std::to_string(r) + " is entirely padding");
    }
    return {additive, flags};
}

template <typename T>
Tensor<T> make_causal_mask(int64_t L) {
    Tensor<T> m({1, 1, L, L});
    for (int64_t i = 0; i < L; ++i)
        for (int64_t j = 0; j < L; ++j)
            m.data()[static_cast<size_t>(i * L + j)] = j <= i ? T(0) : static_cast<T>(kMaskedScore);
    return m;
}

// g_i(S) for decoder layer i (1-based).
template <typename T>
Tensor<T> route_view(Strategy strategy, const MultiViewP<T>& mv, int64_t i, const EncoderViews<T>& views) {
    int64_t n = static_cast<int64_t>(views.views.size());
    if (i < 1 || i > n)
        throw std::out_of_range("route_view: layer index " + std::to_string(i) + " outside [1," + std::to_string(n) +
                                "]");
    switch (strategy) {
        case Strategy::Conventional:
            return views.views[static_cast<size_t>(n - 1)];
        case Strategy::GCA:
            return views.views[static_cast<size_t>(n - i)];  // S_{N-i+1}
        case Strategy::GPA:
            return views.views[static_cast<size_t>(i - 1)];  // S_i
        case Strategy::FGA:
            return views.views[0];  // S_1
        case Strategy::FMA: {
            const auto& row = mv.fma.at(static_cast<size_t>(i - 1));
            Tensor<T> acc = add(matmul(views.views[0], row[0].w), row[0].b);
            for (int64_t j = 1; j < n; ++j)
                acc = add(acc, add(matmul(views.views[static_cast<size_t>(j)], row[static_cast<size_t>(j)].w),
                                   row[static_cast<size_t>(j)].b));
            return acc;
        }
        case Strategy::AMA: {
            const Tensor<T>& qi = mv.ama_q.at(static_cast<size_t>(i - 1));
            int64_t d = qi.numel();
            T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
            std::vector<Tensor<T>> logits;
            for (int64_t j = 0; j < n; ++j)
                logits.push_back(scale(sum(mul(qi, mv.ama_v[static_cast<size_t>(j)])), inv_sqrt_d));
            Tensor<T> alpha = softmax(concat(logits, 0), 0);  // [n], sums to 1
            Tensor<T> acc = mul(views.views[0], slice(alpha, 0, 0, 1));
            for (int64_t j = 1; j < n; ++j)
                acc = add(acc, mul(views.views[static_cast<size_t>(j)], slice(alpha, 0, j, 1)));
            return acc;
        }
    }
    throw std::logic_error("unreachable strategy");
}

// Direct replacement passes the routed view through; soft integration is
// LN(routed + S_N) with layer-specific gain/bias.
template <typename T>
Tensor<T> integrate_view(const Tensor<T>& routed, const Tensor<T>& s_last, Integration mode,
                         const LayerNormP<T>* ln) {
    if (mode == Integration::DirectReplacement) return routed;
    check_shape(routed.shape() == s_last.shape(), "integrate_view: " + shape_str(routed.shape()) + " vs " +
                                                      shape_str(s_last.shape()));
    return layer_norm(add(routed, s_last), ln->gain, ln->bias, static_cast<T>(kLayerNormEps));
}

template <typename T>
struct AttnRecord {
    std::vector<Tensor<T>> cross;  // per decoder layer, [B, H, Lt, Ls]
};

// Test/diagnostic hooks for decode(). `last_view_alias`, when set, supplies
// a per-decoder-layer stand-in for S_N used for both routing and
// integration, so gradient paths into S_N can be separated by consumer.
// `routed_override` replaces route_view's output per layer.
template <typename T>
struct DecodeHooks {
    const std::vector<Tensor<T>>* last_view_alias = nullptr;
    const std::vector<Tensor<T>>* routed_override = nullptr;
};

template <typename T>
class Model {
public:
    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate_and_normalize();
        allocate();
        build_position_encoding();
    }

    const ModelConfig& config() const { return cfg_; }

    // Deterministic construction-order listing; names are stable and unique.
    std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        auto lin = [&](const std::string& name, LinearP<T>& p) {
            out.emplace_back(name + ".weight", &p.w);
            out.emplace_back(name + ".bias", &p.b);
        };
        auto ln = [&](const std::string& name, LayerNormP<T>& p) {
            out.emplace_back(name + ".gain", &p.gain);
            out.emplace_back(name + ".bias", &p.bias);
        };
        out.emplace_back("src_embed.weight", &src_embed_);
        out.emplace_back("tgt_embed.weight", &tgt_embed_);
        lin("out_proj", out_proj_);
        for (int64_t i = 0; i < cfg_.num_layers; ++i) {
            std::string base = "encoder." + std::to_string(i);
            auto& l = enc_[static_cast<size_t>(i)];
            lin(base + ".self_attn.q", l.self_attn.q);
            out.emplace_back(base + ".self_attn.k.weight", &l.self_attn.k_w);
            lin(base + ".self_attn.v", l.self_attn.v);
            lin(base + ".self_attn.o", l.self_attn.o);
            ln(base + ".ln1", l.ln1);
            lin(base + ".ffn.w1", l.ff1);
            lin(base + ".ffn.w2", l.ff2);
            ln(base + ".ln2", l.ln2);
        }
        for (int64_t i = 0; i < cfg_.num_layers; ++i) {
            std::string base = "decoder." + std::to_string(i);
            auto& l = dec_[static_cast<size_t>(i)];
            lin(base + ".self_attn.q", l.self_attn.q);
            out.emplace_back(base + ".self_attn.k.weight", &l.self_attn.k_w);
            lin(base + ".self_attn.v", l.self_attn.v);
            lin(base + ".self_attn.o", l.self_attn.o);
            ln(base + ".ln1", l.ln1);
            lin(base + ".cross_attn.q", l.cross_attn.q);
            out.emplace_back(base + ".cross_attn.k.weight", &l.cross_attn.k_w);
            lin(base + ".cross_attn.v", l.cross_attn.v);
            lin(base + ".cross_attn.o", l.cross_attn.o);
            ln(base + ".ln2", l.ln2);
            lin(base + ".ffn.w1", l.ff1);
            lin(base + ".ffn.w2", l.ff2);
            ln(base + ".ln3", l.ln3);
        }
        for (size_t i = 0; i < mv_.integ_ln.size(); ++i) ln("mv.integ_ln." + std::to_string(i), mv_.integ_ln[i]);
        for (size_t i = 0; i < mv_.fma.size(); ++i)
            for (size_t j = 0; j < mv_.fma[i].size(); ++j)
                lin("mv.fma." + std::to_string(i) + "." + std::to_string(j), mv_.fma[i][j]);
        for (size_t i = 0; i < mv_.ama_q.size(); ++i) out.emplace_back("mv.ama.q." + std::to_string(i), &mv_.ama_q[i]);
        for (size_t j = 0; j < mv_.ama_v.size(); ++j) out.emplace_back("mv.ama.v." + std::to_string(j), &mv_.ama_v[j]);
        return out;
    }

    // Projections: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); embeddings and
    // gate vectors: normal(0, d^-1/2); layer-norm gain 1, bias 0.
    void init_parameters(uint64_t seed) {
        SplitMix64 rng(seed);
        double emb_sd = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
        for (auto& [name, t] : named_parameters()) {
            bool is_gain = name.size() >= 5 && name.compare(name.size() - 5, 5, ".gain") == 0;
            bool is_bias = name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
            bool is_embed = name.find("embed") != std::string::npos;
            bool is_gate = name.rfind("mv.ama.", 0) == 0;
            if (is_gain) {
                for (T& x : t->data()) x = T(1);
            } else if (is_bias) {
                for (T& x : t->data()) x = T(0);
            } else if (is_embed || is_gate) {
                for (T& x : t->data()) x = static_cast<T>(rng.next_normal() * emb_sd);
            } else {
                double bound = 1.0 / std::sqrt(static_cast<double>(t->shape()[0]));
                for (T& x : t->data()) x = static_cast<T>(rng.next_uniform(-bound, bound));
            }
        }
    }

    MultiViewP<T>& multi_view() { return mv_; }
    const MultiViewP<T>& multi_view() const { return mv_; }

    // S_0 = sqrt(d) * embedding + sinusoidal positions; S_i = encoder layer i.
    EncoderViews<T> encode(const IdMatrix& src, const RunState& rs = {}) const {
        check_ids_below(src, cfg_.src_vocab, "encode");
        check_shape(src.cols <= cfg_.max_len,
                    "source length " + std::to_string(src.cols) + " exceeds max_len " + std::to_string(cfg_.max_len));
        auto [key_mask, flags] = make_source_masks<T>(src);
        Tensor<T> x = embed(src_embed_, src);
        EncoderViews<T> out;
        out.src_mask = flags;
        for (const auto& layer : enc_) {
            MhaOut<T> a = multi_head_attention(layer.self_attn, cfg_.num_heads, x, x, x, key_mask, rs, cfg_.dropout);
            x = layer_norm(add(x, a.out), layer.ln1.gain, layer.ln1.bias, static_cast<T>(kLayerNormEps));
            Tensor<T> h = relu(linear(layer.ff1, x));
            if (rs.training && cfg_.dropout > 0.0) h = dropout(h, cfg_.dropout, *rs.rng, true);
            x = layer_norm(add(x, linear(layer.ff2, h)), layer.ln2.gain, layer.ln2.bias,
                           static_cast<T>(kLayerNormEps));
            out.views.push_back(x);
        }
        return out;
    }

    // Teacher-forced decode over bos-shifted targets; returns vocabulary
    // logits [B, Lt, V]. Layer i cross-attends to
    // integrate_view(route_view(strategy, i, S), S_N).
    Tensor<T> decode(const IdMatrix& tgt_in, const EncoderViews<T>& views, const RunState& rs = {},
                     AttnRecord<T>* record = nullptr, const DecodeHooks<T>* hooks = nullptr) const {
        check_ids_below(tgt_in, cfg_.tgt_vocab, "decode");
        check_shape(tgt_in.cols <= cfg_.max_len,
                    "target length " + std::to_string(tgt_in.cols) + " exceeds max_len " + std::to_string(cfg_.max_len));
        check_shape(static_cast<int64_t>(views.views.size()) == cfg_.num_layers, "encoder view count mismatch");

        Tensor<T> causal = make_causal_mask<T>(tgt_in.cols);
        Tensor<T> cross_mask = cross_key_mask(views.src_mask);
        Tensor<T> x = embed(tgt_embed_, tgt_in);
        for (int64_t i = 0; i < cfg_.num_layers; ++i) {
            const auto& layer = dec_[static_cast<size_t>(i)];
            MhaOut<T> a = multi_head_attention(layer.self_attn, cfg_.num_heads, x, x, x, causal, rs, cfg_.dropout);
            x = layer_norm(add(x, a.out), layer.ln1.gain, layer.ln1.bias, static_cast<T>(kLayerNormEps));

            Tensor<T> source = cross_source(i, views, hooks);
            MhaOut<T> c =
                multi_head_attention(layer.cross_attn, cfg_.num_heads, x, source, source, cross_mask, rs, cfg_.dropout);
            if (record) record->cross.push_back(c.weights);
            x = layer_norm(add(x, c.out), layer.ln2.gain, layer.ln2.bias, static_cast<T>(kLayerNormEps));

            Tensor<T> h = relu(linear(layer.ff1, x));
            if (rs.training && cfg_.dropout > 0.0) h = dropout(h, cfg_.dropout, *rs.rng, true);
            x = layer_norm(add(x, linear(layer.ff2, h)), layer.ln3.gain, layer.ln3.bias,
                           static_cast<T>(kLayerNormEps));
        }
        return linear(out_proj_, x);
    }

    Tensor<T> forward(const IdMatrix& src, const IdMatrix& tgt_in, const RunState& rs = {},
                      AttnRecord<T>* record = nullptr) const {
        EncoderViews<T> views = encode(src, rs);
        return decode(tgt_in, views, rs, record);
    }

private:
    ModelConfig cfg_;
    Tensor<T> src_embed_, tgt_embed_;
    LinearP<T> out_proj_;
    std::vector<EncoderLayerP<T>> enc_;
    std::vector<DecoderLayerP<T>> dec_;
    MultiViewP<T> mv_;
    Tensor<T> pos_enc_;  // [max_len, d], constant

    void allocate() {
        int64_t d = cfg_.d_model, dff = cfg_.d_ff, n = cfg_.num_layers;
        auto make_lin = [&](int64_t in, int64_t out_dim) {
            LinearP<T> p;
            p.w = Tensor<T>({in, out_dim});
            p.b = Tensor<T>({out_dim});
            p.w.set_requires_grad(true);
            p.b.set_requires_grad(true);
            return p;
        };
        auto make_ln = [&] {
            LayerNormP<T> p;
            p.gain = Tensor<T>::full({d}, T(1));
            p.bias = Tensor<T>({d});
            p.gain.set_requires_grad(true);
            p.bias.set_requires_grad(true);
            return p;
        };
        auto make_mha = [&] {
            MhaP<T> p;
            p.q = make_lin(d, d);
            p.k_w = Tensor<T>({d, d});
            p.k_w.set_requires_grad(true);
            p.v = make_lin(d, d);
            p.o = make_lin(d, d);
            return p;
        };
        src_embed_ = Tensor<T>({cfg_.src_vocab, d});
        tgt_embed_ = Tensor<T>({cfg_.tgt_vocab, d});
        src_embed_.set_requires_grad(true);
        tgt_embed_.set_requires_grad(true);
        out_proj_ = make_lin(d, cfg_.tgt_vocab);
        for (int64_t i = 0; i < n; ++i) {
            EncoderLayerP<T> l;
            l.self_attn = make_mha();
            l.ln1 = make_ln();
            l.ff1 = make_lin(d, dff);
            l.ff2 = make_lin(dff, d);
            l.ln2 = make_ln();
            enc_.push_back(std::move(l));
        }
        for (int64_t i = 0; i < n; ++i) {
            DecoderLayerP<T> l;
            l.self_attn = make_mha();
            l.ln1 = make_ln();
            l.cross_attn = make_mha();
            l.ln2 = make_ln();
            l.ff1 = make_lin(d, dff);
            l.ff2 = make_lin(dff, d);
            l.ln3 = make_ln();
            dec_.push_back(std::move(l));
        }
        if (cfg_.integration == Integration::SoftIntegration)
            for (int64_t i = 0; i < n; ++i) mv_.integ_ln.push_back(make_ln());
        if (cfg_.strategy == Strategy::FMA)
            for (int64_t i = 0; i < n; ++i) {
                std::vector<LinearP<T>> row;
                for (int64_t j = 0; j < n; ++j) row.push_back(make_lin(d, d));
                mv_.fma.push_back(std::move(row));
            }
        if (cfg_.strategy == Strategy::AMA)
            for (int64_t i = 0; i < n; ++i) {
                Tensor<T> q({d}), v({d});
                q.set_requires_grad(true);
                v.set_requires_grad(true);
                mv_.ama_q.push_back(q);
                mv_.ama_v.push_back(v);
            }
    }

    void build_position_encoding() {
        int64_t d = cfg_.d_model;
        pos_enc_ = Tensor<T>({cfg_.max_len, d});
        for (int64_t pos = 0; pos < cfg_.max_len; ++pos)
            for (int64_t j = 0; j < d; j += 2) {
                double angle = static_cast<double>(pos) /
                               std::pow(10000.0, static_cast<double>(j) / static_cast<double>(d));
                pos_enc_.data()[static_cast<size_t>(pos * d + j)] = static_cast<T>(std::sin(angle));
                if (j + 1 < d) pos_enc_.data()[static_cast<size_t>(pos * d + j + 1)] = static_cast<T>(std::cos(angle));
            }
    }

    Tensor<T> embed(const Tensor<T>& table, const IdMatrix& ids) const {
        Tensor<T> x = scale(embedding_lookup(table, ids), static_cast<T>(std::sqrt(static_cast<double>(cfg_.d_model))));
        Tensor<T> pe({1, ids.cols, cfg_.d_model});
        std::copy(pos_enc_.data().begin(), pos_enc_.data().begin() + ids.cols * cfg_.d_model, pe.data().begin());
        return add(x, pe);
    }

    Tensor<T> cross_key_mask(const Tensor<T>& flags) const {
        int64_t B = flags.dim(0), Ls = flags.dim(1);
        Tensor<T> m({B, 1, 1, Ls});
        for (int64_t i = 0; i < B * Ls; ++i)
            m.data()[static_cast<size_t>(i)] =
                flags.data()[static_cast<size_t>(i)] != T(0) ? T(0) : static_cast<T>(kMaskedScore);
        return m;
    }

    Tensor<T> cross_source(int64_t layer_ix, const EncoderViews<T>& views, const DecodeHooks<T>* hooks) const {
        Tensor<T> s_last = views.views.back();
        const EncoderViews<T>* routing_views = &views;
        EncoderViews<T> aliased;
        if (hooks && hooks->last_view_alias) {
            s_last = (*hooks->last_view_alias)[static_cast<size_t>(layer_ix)];
            aliased.views = views.views;
            aliased.views.back() = s_last;
            aliased.src_mask = views.src_mask;
            routing_views = &aliased;
        }
        Tensor<T> routed;
        if (hooks && hooks->routed_override)
            routed = (*hooks->routed_override)[static_cast<size_t>(layer_ix)];
        else
            routed = route_view(cfg_.strategy, mv_, layer_ix + 1, *routing_views);
        const LayerNormP<T>* ln = cfg_.integration == Integration::SoftIntegration
                                      ? &mv_.integ_ln[static_cast<size_t>(layer_ix)]
                                      : nullptr;
        return integrate_view(routed, s_last, cfg_.integration, ln);
    }
};

struct ParamCount {
    int64_t total = 0;
    std::map<std::string, int64_t> by_group;  // baseline, mv_ln, mv_fma, mv_ama
};

template <typename T>
ParamCount count_parameters(Model<T>& model) {
    ParamCount c;
    c.by_group = {{"baseline", 0}, {"mv_ln", 0}, {"mv_fma", 0}, {"mv_ama", 0}};
    for (auto& [name, t] : model.named_parameters()) {
        c.total += t->numel();
        if (name.rfind("mv.integ_ln", 0) == 0)
            c.by_group["mv_ln"] += t->numel();
        else if (name.rfind("mv.fma", 0) == 0)
            c.by_group["mv_fma"] += t->numel();
        else if (name.rfind("mv.ama", 0) == 0)
            c.by_group["mv_ama"] += t->numel();
        else
            c.by_group["baseline"] += t->numel();
    }
    return c;
}

}  // namespace mvseq
