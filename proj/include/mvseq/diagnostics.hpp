#pragma once

#include <cstdio>
#include <set>

#include "mvseq/svg.hpp"
#include "mvseq/tasks.hpp"
#include "mvseq/transformer.hpp"

namespace mvseq {

// C[i][j] is true when decoder layer i+1's integrated cross-attention input
// depends on encoder view S_{j+1}.
struct ConsumptionMatrix {
    int64_t n = 0;
    std::vector<uint8_t> cells;

    explicit ConsumptionMatrix(int64_t layers = 0) : n(layers), cells(static_cast<size_t>(layers * layers), 0) {}
    uint8_t& at(int64_t i, int64_t j) { return cells[static_cast<size_t>(i * n + j)]; }
    bool at(int64_t i, int64_t j) const { return cells[static_cast<size_t>(i * n + j)] != 0; }
    bool operator==(const ConsumptionMatrix&) const = default;
};

struct ConsistencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConsumptionProbe {
    ConsumptionMatrix empirical;
    ConsumptionMatrix analytic;
    bool consistent = false;
};

// Dependence pattern implied by the routing formulas and the actual
// parameter values: an FMA pair with an all-zero W_ij carries no signal from
// S_j, and an AMA gate contributes only while its softmax weight is nonzero
// (cutoff 1e-12 to match what a finite perturbation can reveal).
template <typename T>
ConsumptionMatrix analytic_consumption(const Model<T>& model) {
    const ModelConfig& cfg = model.config();
    int64_t n = cfg.num_layers;
    ConsumptionMatrix m(n);
    for (int64_t i = 1; i <= n; ++i) {
        for (int64_t j = 1; j <= n; ++j) {
            bool dep = false;
            switch (cfg.strategy) {
                case Strategy::Conventional: dep = j == n; break;
                case Strategy::GCA: dep = j == n - i + 1; break;
                case Strategy::GPA: dep = j == i; break;
                case Strategy::FGA: dep = j == 1; break;
                case Strategy::FMA: {
                    const auto& w = model.multi_view().fma[static_cast<size_t>(i - 1)][static_cast<size_t>(j - 1)].w;
                    for (T x : w.data())
                        if (x != T(0)) {
                            dep = true;
                            break;
                        }
                    break;
                }
                case Strategy::AMA: {
                    const auto& q = model.multi_view().ama_q[static_cast<size_t>(i - 1)];
                    std::vector<double> logits(static_cast<size_t>(n));
                    double mx = -1e300;
                    for (int64_t k = 0; k < n; ++k) {
                        double dot = 0.0;
                        const auto& v = model.multi_view().ama_v[static_cast<size_t>(k)];
                        for (int64_t c = 0; c < q.numel(); ++c)
                            dot += static_cast<double>(q.data()[static_cast<size_t>(c)]) *
                                   static_cast<double>(v.data()[static_cast<size_t>(c)]);
                        logits[static_cast<size_t>(k)] = dot / std::sqrt(static_cast<double>(q.numel()));
                        mx = std::max(mx, logits[static_cast<size_t>(k)]);
                    }
                    double z = 0.0;
                    for (double lg : logits) z += std::exp(lg - mx);
                    dep = std::exp(logits[static_cast<size_t>(j - 1)] - mx) / z > 1e-12;
                    break;
                }
            }
            if (cfg.integration == Integration::SoftIntegration && j == n) dep = true;
            m.at(i - 1, j - 1) = dep ? 1 : 0;
        }
    }
    return m;
}

// Empirical dependence: perturb S_j by eps * RMS noise before routing and
// mark layers whose integrated view moves. Two magnitudes rule out freak
// cancellation; untouched paths reproduce bit-identically, so the threshold
// only needs to clear arithmetic noise.
template <typename T>
ConsumptionMatrix empirical_consumption(const Model<T>& model, const IdMatrix& src, uint64_t seed = 2024) {
    const ModelConfig& cfg = model.config();
    int64_t n = cfg.num_layers;
    EncoderViews<T> views = model.encode(src);

    auto integrated = [&](const EncoderViews<T>& v) {
        std::vector<Tensor<T>> out;
        for (int64_t i = 1; i <= n; ++i) {
            Tensor<T> routed = route_view(cfg.strategy, model.multi_view(), i, v);
            const LayerNormP<T>* ln = cfg.integration == Integration::SoftIntegration
                                          ? &model.multi_view().integ_ln[static_cast<size_t>(i - 1)]
                                          : nullptr;
            out.push_back(integrate_view(routed, v.views.back(), cfg.integration, ln));
        }
        return out;
    };
    std::vector<Tensor<T>> base = integrated(views);

    ConsumptionMatrix m(n);
    double noise_floor = 1e3 * static_cast<double>(std::numeric_limits<T>::epsilon());
    for (int64_t j = 0; j < n; ++j) {
        double rms = 0.0;
        const Tensor<T>& sj = views.views[static_cast<size_t>(j)];
        for (T x : sj.data()) rms += static_cast<double>(x) * static_cast<double>(x);
        rms = std::sqrt(rms / static_cast<double>(sj.numel()));

        for (double eps_scale : {1e-2, 1e-3}) {
            SplitMix64 rng(seed + static_cast<uint64_t>(j));
            EncoderViews<T> perturbed = views;
            Tensor<T> moved = sj.clone();
            for (T& x : moved.data())
                x += static_cast<T>(eps_scale * rms * (rng.next_uniform() < 0.5 ? -1.0 : 1.0));
            perturbed.views[static_cast<size_t>(j)] = moved;
            std::vector<Tensor<T>> probe = integrated(perturbed);
            for (int64_t i = 0; i < n; ++i) {
                double scale = 0.0, delta = 0.0;
                for (int64_t k = 0; k < base[static_cast<size_t>(i)].numel(); ++k) {
                    double b = static_cast<double>(base[static_cast<size_t>(i)].data()[static_cast<size_t>(k)]);
                    double p = static_cast<double>(probe[static_cast<size_t>(i)].data()[static_cast<size_t>(k)]);
                    scale = std::max({scale, std::abs(b), 1.0});
                    delta = std::max(delta, std::abs(b - p));
                }
                if (delta > noise_floor * scale) m.at(i, j) = 1;
            }
        }
    }
    return m;
}

// Empirical vs analytic pattern; disagreement marks a routing bug.
template <typename T>
ConsumptionProbe consumption_probe(const Model<T>& model, const IdMatrix& src) {
    ConsumptionProbe p;
    p.empirical = empirical_consumption(model, src);
    p.analytic = analytic_consumption(model);
    p.consistent = p.empirical == p.analytic;
    return p;
}

// Structural certificate from a config alone: random-init 64-bit model on a
// synthetic batch.
ConsumptionProbe consumption_probe(const ModelConfig& config);

struct GradPathReport {
    std::vector<double> norms;       // per decoder layer, gradient into S_N at that consumer
    double norm_sum = 0.0;
    double whole_norm = 0.0;         // gradient into S_N without aliasing
    double alias_sum_rel_err = 0.0;  // || sum of alias grads - whole grad || / ||whole grad||
    int64_t nonzero_count = 0;       // entries above 1e-12
};

// Gives every decoder layer an independent alias of S_N, so the gradient of the
// loss with respect to S_N splits by consumer; the sum over aliases must
// reproduce the unaliased gradient.
template <typename T>
GradPathReport grad_path_norms(const Model<T>& model, const Batch& batch) {
    int64_t n = model.config().num_layers;
    GradPathReport report;

    std::vector<std::vector<T>> alias_grads;
    {
        Tape<T> tape;
        typename Tape<T>::Scope scope(tape);
        EncoderViews<T> views = model.encode(batch.src);
        std::vector<Tensor<T>> aliases;
        for (int64_t i = 0; i < n; ++i) {
            Tensor<T> a = alias(views.views.back());
            tape.retain_grad(a);
            aliases.push_back(std::move(a));
        }
        DecodeHooks<T> hooks;
        hooks.last_view_alias = &aliases;
        Tensor<T> logits = model.decode(batch.tgt_in, views, {}, nullptr, &hooks);
        tape.backward(cross_entropy(logits, batch.tgt_out, kPadId));
        for (Tensor<T>& a : aliases) alias_grads.push_back(a.grad());
    }

    std::vector<T> whole;
    {
        Tape<T> tape;
        typename Tape<T>::Scope scope(tape);
        EncoderViews<T> views = model.encode(batch.src);
        Tensor<T> last = views.views.back();
        Tensor<T> marked = alias(last);
        tape.retain_grad(marked);
        EncoderViews<T> rerouted = views;
        rerouted.views.back() = marked;
        Tensor<T> logits = model.decode(batch.tgt_in, rerouted, {});
        tape.backward(cross_entropy(logits, batch.tgt_out, kPadId));
        whole = marked.grad();
    }

    double whole_sq = 0.0;
    for (T g : whole) whole_sq += static_cast<double>(g) * static_cast<double>(g);
    report.whole_norm = std::sqrt(whole_sq);

    double err_sq = 0.0;
    for (size_t k = 0; k < whole.size(); ++k) {
        double summed = 0.0;
        for (const auto& ag : alias_grads) summed += static_cast<double>(ag[k]);
        double d = summed - static_cast<double>(whole[k]);
        err_sq += d * d;
    }
    report.alias_sum_rel_err = std::sqrt(err_sq) / std::max(report.whole_norm, 1e-300);

    for (const auto& ag : alias_grads) {
        double sq = 0.0;
        for (T g : ag) {
            if (!std::isfinite(static_cast<double>(g))) throw ConsistencyError("non-finite gradient path");
            sq += static_cast<double>(g) * static_cast<double>(g);
        }
        double norm = std::sqrt(sq);
        report.norms.push_back(norm);
        report.norm_sum += norm;
        if (norm > 1e-12) ++report.nonzero_count;
    }
    return report;
}

// Pairwise cosine similarity between token representations of one encoder
// layer within one batch row, padding excluded. The diagonal is 1 by
// definition; a zero-vector member makes its off-diagonal pairs 0.
struct CosineMap {
    int64_t layer = 0;        // 1-based encoder layer
    int64_t size = 0;         // number of non-pad positions
    std::vector<double> m;    // size x size, row-major
    double diffusion = 0.0;   // mean off-diagonal value

    double at(int64_t a, int64_t b) const { return m[static_cast<size_t>(a * size + b)]; }
};

template <typename T>
CosineMap cosine_map(const EncoderViews<T>& views, int64_t layer, int64_t row) {
    int64_t n = static_cast<int64_t>(views.views.size());
    if (layer < 1 || layer > n) throw std::out_of_range("cosine_map: layer index outside [1,N]");
    const Tensor<T>& s = views.views[static_cast<size_t>(layer - 1)];
    int64_t b = s.dim(0), l = s.dim(1), d = s.dim(2);
    if (row < 0 || row >= b) throw std::out_of_range("cosine_map: batch row outside range");

    std::vector<int64_t> keep;
    for (int64_t p = 0; p < l; ++p)
        if (views.src_mask.data()[static_cast<size_t>(row * l + p)] != T(0)) keep.push_back(p);

    CosineMap out;
    out.layer = layer;
    out.size = static_cast<int64_t>(keep.size());
    out.m.assign(static_cast<size_t>(out.size * out.size), 0.0);
    std::vector<double> norms(keep.size(), 0.0);
    for (size_t a = 0; a < keep.size(); ++a) {
        double sq = 0.0;
        for (int64_t c = 0; c < d; ++c) {
            double x = static_cast<double>(s.data()[static_cast<size_t>((row * l + keep[a]) * d + c)]);
            sq += x * x;
        }
        norms[a] = std::sqrt(sq);
    }
    double off_sum = 0.0;
    int64_t off_count = 0;
    for (size_t a = 0; a < keep.size(); ++a)
        for (size_t bx = 0; bx < keep.size(); ++bx) {
            double v;
            if (a == bx) {
                v = 1.0;
            } else if (norms[a] == 0.0 || norms[bx] == 0.0) {
                v = 0.0;
            } else {
                double dot = 0.0;
                for (int64_t c = 0; c < d; ++c)
                    dot += static_cast<double>(s.data()[static_cast<size_t>((row * l + keep[a]) * d + c)]) *
                           static_cast<double>(s.data()[static_cast<size_t>((row * l + keep[bx]) * d + c)]);
                v = dot / (norms[a] * norms[bx]);
            }
            out.m[a * keep.size() + bx] = v;
            if (a != bx) {
                off_sum += v;
                ++off_count;
            }
        }
    out.diffusion = off_count > 0 ? off_sum / static_cast<double>(off_count) : 0.0;
    return out;
}

// Cross-attention maps of one batch row: per head and head-averaged, with
// the source/target token ids they align.
struct AttentionExport {
    int64_t layers = 0;
    int64_t heads = 0;
    int64_t tgt_len = 0;
    int64_t src_len = 0;
    std::vector<int32_t> src_ids, tgt_ids;
    // [layer][head][tgt, src]; index heads holds the head average
    std::vector<std::vector<std::vector<double>>> maps;
};

template <typename T>
AttentionExport export_attention(const Model<T>& model, const Batch& batch, int64_t row) {
    AttnRecord<T> rec;
    EncoderViews<T> views = model.encode(batch.src);
    model.decode(batch.tgt_in, views, {}, &rec);

    AttentionExport out;
    out.layers = model.config().num_layers;
    out.heads = model.config().num_heads;
    out.tgt_len = batch.tgt_in.cols;
    out.src_len = batch.src.cols;
    for (int64_t c = 0; c < batch.src.cols; ++c) out.src_ids.push_back(batch.src.at(row, c));
    for (int64_t c = 0; c < batch.tgt_in.cols; ++c) out.tgt_ids.push_back(batch.tgt_in.at(row, c));

    for (int64_t layer = 0; layer < out.layers; ++layer) {
        const Tensor<T>& probs = rec.cross[static_cast<size_t>(layer)];
        std::vector<std::vector<double>> per_head;
        std::vector<double> avg(static_cast<size_t>(out.tgt_len * out.src_len), 0.0);
        for (int64_t h = 0; h < out.heads; ++h) {
            std::vector<double> map(static_cast<size_t>(out.tgt_len * out.src_len));
            for (int64_t t = 0; t < out.tgt_len; ++t)
                for (int64_t s = 0; s < out.src_len; ++s) {
                    double w = static_cast<double>(
                        probs.data()[static_cast<size_t>(((row * out.heads + h) * out.tgt_len + t) * out.src_len + s)]);
                    map[static_cast<size_t>(t * out.src_len + s)] = w;
                    avg[static_cast<size_t>(t * out.src_len + s)] += w / static_cast<double>(out.heads);
                }
            per_head.push_back(std::move(map));
        }
        per_head.push_back(std::move(avg));
        out.maps.push_back(std::move(per_head));
    }
    return out;
}

// CSV with full round-trip precision (%.17g) and an id header.
std::string attention_csv(const std::vector<double>& map, int64_t tgt_len, int64_t src_len,
                          const std::vector<int32_t>& tgt_ids, const std::vector<int32_t>& src_ids,
                          const std::string& title);
std::string cosine_csv(const CosineMap& map);

}  // namespace mvseq
