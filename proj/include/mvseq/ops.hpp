#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

#include "mvseq/ids.hpp"
#include "mvseq/rng.hpp"
#include "mvseq/tensor.hpp"

// Differentiable primitives. Each op computes its value eagerly and, when a
// tape is current and an input is tracked, appends one node whose closure
// implements the exact adjoint. Ops never mutate their inputs.

namespace mvseq {

namespace detail {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
inline void gemm(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
    ConstMatMap<T> ma(a, m, k), mb(b, k, n);
    MatMap<T> mc(c, m, n);
    if (accumulate)
        mc.noalias() += ma * mb;
    else
        mc.noalias() = ma * mb;
}

// c[m,k] (+)= a[m,n] * b[k,n]^T
template <typename T>
inline void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k, bool accumulate) {
    ConstMatMap<T> ma(a, m, n), mb(b, k, n);
    MatMap<T> mc(c, m, k);
    if (accumulate)
        mc.noalias() += ma * mb.transpose();
    else
        mc.noalias() = ma * mb.transpose();
}

// c[k,n] (+)= a[m,k]^T * b[m,n]
template <typename T>
inline void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
    ConstMatMap<T> ma(a, m, k), mb(b, m, n);
    MatMap<T> mc(c, k, n);
    if (accumulate)
        mc.noalias() += ma.transpose() * mb;
    else
        mc.noalias() = ma.transpose() * mb;
}

inline std::vector<int64_t> row_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

// NumPy-style broadcast of two shapes; stride 0 marks stretched dims.
struct BcastPlan {
    Shape out;
    std::vector<int64_t> sa, sb;  // per output axis
};

inline BcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    size_t r = std::max(a.size(), b.size());
    BcastPlan p;
    p.out.resize(r);
    p.sa.assign(r, 0);
    p.sb.assign(r, 0);
    auto sta = row_strides(a);
    auto stb = row_strides(b);
    for (size_t i = 0; i < r; ++i) {
        size_t oi = r - 1 - i;
        int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument(std::string(op) + ": shapes not broadcastable: " + shape_str(a) + " vs " +
                                        shape_str(b));
        p.out[oi] = std::max(da, db);
        p.sa[oi] = (da == 1 && p.out[oi] != 1) ? 0 : (i < a.size() ? sta[a.size() - 1 - i] : 0);
        p.sb[oi] = (db == 1 && p.out[oi] != 1) ? 0 : (i < b.size() ? stb[b.size() - 1 - i] : 0);
    }
    return p;
}

// Walk an output shape while tracking two broadcast source offsets. The
// last axis runs as a tight inner loop; the coordinate bookkeeping only
// advances once per row.
template <typename F>
inline void bcast_walk(const Shape& out, const std::vector<int64_t>& sa, const std::vector<int64_t>& sb, F&& f) {
    size_t r = out.size();
    int64_t inner = out[r - 1];
    int64_t inner_sa = sa[r - 1], inner_sb = sb[r - 1];
    int64_t rows = numel_of(out) / inner;
    std::vector<int64_t> coord(r, 0);
    int64_t ia = 0, ib = 0;
    int64_t i = 0;
    for (int64_t row = 0; row < rows; ++row) {
        int64_t ra = ia, rb = ib;
        for (int64_t j = 0; j < inner; ++j) {
            f(i++, ra, rb);
            ra += inner_sa;
            rb += inner_sb;
        }
        for (int d = static_cast<int>(r) - 2; d >= 0; --d) {
            coord[static_cast<size_t>(d)]++;
            ia += sa[static_cast<size_t>(d)];
            ib += sb[static_cast<size_t>(d)];
            if (coord[static_cast<size_t>(d)] < out[static_cast<size_t>(d)]) break;
            ia -= sa[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
            ib -= sb[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
            coord[static_cast<size_t>(d)] = 0;
        }
    }
}

template <typename T>
inline bool want_tape(Tape<T>*& tape, std::initializer_list<const Tensor<T>*> inputs) {
    tape = Tape<T>::current();
    if (!tape) return false;
    for (const Tensor<T>* t : inputs)
        if (tape->tracked(*t)) return true;
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    using namespace detail;
    Tape<T>* tape;
    bool track = want_tape(tape, {&a, &b});
    if (a.shape() == b.shape()) {
        Tensor<T> out(a.shape());
        const T* pa = a.ptr();
        const T* pb = b.ptr();
        T* po = out.ptr();
        for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
        if (track) {
            int ia = tape->node_of(a), ib = tape->node_of(b);
            tape->emit(out, [ia, ib](Tape<T>& t, const std::vector<T>& g) {
                t.accumulate(ia, g);
                t.accumulate(ib, g);
            });
        }
        return out;
    }
    BcastPlan p = broadcast_plan(a.shape(), b.shape(), "add");
    Tensor<T> out(p.out);
    {
        const T* pa = a.ptr();
        const T* pb = b.ptr();
        T* po = out.ptr();
        bcast_walk(p.out, p.sa, p.sb, [&](int64_t i, int64_t ia, int64_t ib) { po[i] = pa[ia] + pb[ib]; });
    }
    if (track) {
        int ia = tape->node_of(a), ib = tape->node_of(b);
        int64_t na = a.numel(), nb = b.numel();
        tape->emit(out, [ia, ib, na, nb, p](Tape<T>& t, const std::vector<T>& g) {
            if (ia >= 0) {
                std::vector<T>& ga = t.grad_buf(ia);
                (void)na;
                bcast_walk(p.out, p.sa, p.sb, [&](int64_t i, int64_t oa, int64_t) { ga[static_cast<size_t>(oa)] += g[static_cast<size_t>(i)]; });
            }
            if (ib >= 0) {
                std::vector<T>& gb = t.grad_buf(ib);
                (void)nb;
                bcast_walk(p.out, p.sa, p.sb, [&](int64_t i, int64_t, int64_t ob) { gb[static_cast<size_t>(ob)] += g[static_cast<size_t>(i)]; });
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    using namespace detail;
    Tape<T>* tape;
    bool track = want_tape(tape, {&a, &b});
    BcastPlan p = broadcast_plan(a.shape(), b.shape(), "mul");
    Tensor<T> out(p.out);
    {
        const T* pa = a.ptr();
        const T* pb = b.ptr();
        T* po = out.ptr();
        bcast_walk(p.out, p.sa, p.sb, [&](int64_t i, int64_t ia, int64_t ib) { po[i] = pa[ia] * pb[ib]; });
    }
    if (track) {
        int ia = tape->node_of(a), ib = tape->node_of(b);
        Tensor<T> sa = a, sb = b;  // keep values alive for the adjoint
        tape->emit(out, [ia, ib, sa, sb, p](Tape<T>& t, const std::vector<T>& g) {
            const T* pa = sa.ptr();
            const T* pb = sb.ptr();
            if (ia >= 0) {
                std::vector<T>& ga = t.grad_buf(ia);
                bcast_walk(p.out, p.sa, p.sb,
                           [&](int64_t i, int64_t oa, int64_t ob) { ga[static_cast<size_t>(oa)] += g[static_cast<size_t>(i)] * pb[ob]; });
            }
            if (ib >= 0) {
                std::vector<T>& gb = t.grad_buf(ib);
                bcast_walk(p.out, p.sa, p.sb,
                           [&](int64_t i, int64_t oa, int64_t ob) { gb[static_cast<size_t>(ob)] += g[static_cast<size_t>(i)] * pa[oa]; });
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    using namespace detail;
    Tape<T>* tape;
    bool track = want_tape(tape, {&x});
    Tensor<T> out(x.shape());
    const T* px = x.ptr();
    T* po = out.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = px[i] * c;
    if (track) {
        int ix = tape->node_of(x);
        tape->emit(out, [ix, c](Tape<T>& t, const std::vector<T>& g) {
            if (ix < 0) return;
            std::vector<T>& gx = t.grad_buf(ix);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    using namespace detail;
    Tape<T>* tape;
    bool track = want_tape(tape, {&x});
    Tensor<T> out(x.shape());
    const T* px = x.ptr();
    T* po = out.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
    if (track) {
        int ix = tape->node_of(x);
        Tensor<T> sx = x;
        tape->emit(out, [ix, sx](Tape<T>& t, const std::vector<T>& g) {
            if (ix < 0) return;
            std::vector<T>& gx = t.grad_buf(ix);
            const T* px = sx.ptr();
            for (size_t i = 0; i < g.size(); ++i)
                if (px[i] > T(0)) gx[i] += g[i];
        });
    }
    return out;
}

// Identity with a node of its own; used to split gradient paths so each
// consumer's contribution can be read separately after backward.
template <typename T>
Tensor<T> alias(const Tensor<T>& x) {
    using namespace detail;
    Tape<T>* tape;
    bool track = want_tape(tape, {&x});
    Tensor<T> out(x.shape(), x.data());
    if (track) {
        int ix = tape->node_of(x);
        tape->emit(out, [ix](Tape<T>& t, const std::vector<T>& g) { t.accumulate(ix, g); });
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    return x.reshaped(std::move(new_shape));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis_a, int axis_b) {
    using namespace detail;
    size_t r = x.rank();
    if (axis_a < 0) axis_a += static_cast<int>(r);
    if (axis_b < 0) axis_b += static_cast<int>(r);
    check_shape(axis_a >= 0 && axis_b >= 0 && axis_a < static_cast<int>(r) && axis_b < static_cast<int>(r),
                "transpose axes out of range for " + shape_str(x.shape()));
    Shape os = x.shape();
    std::swap(os[static_cast<size_t>(axis_a)], os[static_cast<size_t>(axis_b)]);

    auto permute = [axis_a, axis_b](const Shape& in_shape, const T* src, T* dst) {
        Shape out_shape = in_shape;
        std::swap(out_shape[static_cast<size_t>(axis_a)], out_shape[static_cast<size_t>(axis_b)]);
        auto ist = row_strides(in_shape);
        std::swap(ist[static_cast<size_t>(axis_a)], ist[static_cast<size_t>(axis_b)]);  // source strides in output order
        size_t r = out_shape.size();
        int64_t inner = out_shape[r - 1];
        int64_t inner_stride = ist[r - 1];
        int64_t rows = numel_of(out_shape) / inner;
        std::vector<int64_t> coord(r, 0);
        int64_t si = 0, i = 0;
        for (int64_t row = 0; row < rows; ++row) {
            int64_t rs = si;
            for (int64_t j = 0; j < inner; ++j) {
                dst[i++] = src[rs];
                rs += inner_stride;
            }
            for (int d = static_cast<int>(r) - 2; d >= 0; --d) {
                coord[static_cast<size_t>(d)]++;
                si += ist[static_cast<size_t>(d)];
                if (coord[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
                si -= ist[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
                coord[static_cast<size_t>(d)] = 0;
            }
        }
    };

    Tape<T>* tape;
    bool track = want_tape(tape, {&x});
    Tensor<T> out(os);
    permute(x.shape(), x.ptr(), out.ptr());
    if (track) {
        int ix = tape->node_of(x);
        Shape out_shape = os;
        tape->emit(out, [ix, out_shape, permute](Tape<T>& t, const std::vector<T>& g) {
            if (ix < 0) return;
            std::vector<T> gx(g.size());
            permute(out_shape, g.data(), gx.data());  // swapping the same two axes inverts itself
            t.accumulate(ix, gx);
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int64_t start, int64_t len) {
    using namespace detail;
    size_t r = x.rank();
    if (axis < 0) axis += static_cast<int>(r);
    check_shape(axis >= 0 && axis < static_cast<int>(r), "slice axis out of range for " + shape_str(x.shape()));
    check_shape(start >= 0 && len > 0 && start + len <= x.shape()[static_cast<size_t>(axis)],
                "slice [" + std::to_string(start) + "," + std::to_string(start + len) + ") out of range for " +
                    shape_str(x.shape()));
    Shape os = x.shape();
    os[static_cast<size_t>(axis)] = len;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < r; ++i) inner *= x.shape()[i];
    int64_t in_axis = x.shape()[static_cast<size_t>(axis)];

    Tape<T>* tape;
    bool track = want_tape(tape, {&x});
    Tensor<T> out(os);
    const T* px = x.ptr();
    T* po = out.ptr();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(po + o * len * inner, px + (o * in_axis + start) * inner, static_cast<size_t>(len * inner) * sizeof(T));
    if (track) {
        int ix = tape->node_of(x);
        tape->emit(out, [ix, outer, inner, len, in_axis, start](Tape<T>& t, const std::vector<T>& g) {
            if (ix < 0) return;
            std::vector<T>& gx = t.grad_buf(ix);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t j = 0; j < len * inner; ++j)
                    gx[static_cast<size_t>((o * in_axis + start) * inner + j)] += g[static_cast<size_t>(o * len * inner + j)];
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    using namespace detail;
    check_shape(!parts.empty(), "concat of zero tensors");
    size_t r = parts[0].rank();
    if (axis < 0) axis += static_cast<int>(r);
    check_shape(axis >= 0 && axis < static_cast<int>(r), "concat axis out of range");
    Shape os = parts[0].shape();
    int64_t total = 0;
    for (const auto& p : parts) {
        check_shape(p.rank() == r, "concat rank mismatch");
        for (size_t i = 0; i < r; ++i)
            check_shape(static_cast<int>(i) == axis || p.shape()[i] == os[i],
                        "concat shape mismatch: " + shape_str(p.shape()) + " vs " + shape_str(os));
        total += p.shape()[static_cast<size_t>(axis)];
    }
    os[static_cast<size_t>(axis)] = total;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= os[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < r; ++i) inner *= os[i];

    Tape<T>* tape = Tape<T>::current();
    bool track = false;
    if (tape)
        for (const auto& p : parts)
            if (tape->tracked(p)) track = true;

    Tensor<T> out(os);
    T* po = out.ptr();
    int64_t off = 0;
    std::vector<int64_t> lens;
    for (const auto& p : parts) {
        int64_t la = p.shape()[static_cast<size_t>(axis)];
        lens.push_back(la);
        const T* pp = p.ptr();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(po + (o * total + off) * inner, pp + o * la * inner, static_cast<size_t>(la * inner) * sizeof(T));
        off += la;
    }
    if (track) {
        std::vector<int> ids;
        for (const auto& p : parts) ids.push_back(tape->node_of(p));
        tape->emit(out, [ids, lens, outer, inner, total](Tape<T>& t, const std::vector<T>& g) {
            int64_t off = 0;
            for (size_t k = 0; k < ids.size(); ++k) {
                if (ids[k] >= 0) {
                    std::vector<T>& gp = t.grad_buf(ids[k]);
                    for (int64_t o = 0; o < outer; ++o)
                        for (int64_t j = 0; j < lens[k] * inner; ++j)
                            gp[static_cast<size_t>(o * lens[k] * inner + j)] +=
                                g[static_cast<size_t>((o * total + off) * inner + j)];
                }
                off += lens[k];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul

// a[..., m, k] * b[k, n]           (rhs shared across leading dims), or
// a[..., m, k] * b[..., k, n]      (identical leading dims, per-batch product)
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    using namespace detail;
    check_shape(a.rank() >= 2 && b.rank() >= 2, "matmul needs rank >= 2: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    int64_t m = a.shape()[a.rank() - 2];
    int64_t k = a.shape()[a.rank() - 1];
    int64_t kb = b.shape()[b.rank() - 2];
    int64_t n = b.shape()[b.rank() - 1];
    if (k != kb)
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));

    Tape<T>* tape;
    bool track = want_tape(tape, {&a, &b});

    if (b.rank() == 2) {
        int64_t batch = a.numel() / (m * k);
        Shape os = a.shape();
        os.back() = n;
        Tensor<T> out(os);
        gemm(a.ptr(), b.ptr(), out.ptr(), batch * m, k, n, false);
        if (track) {
            int ia = tape->node_of(a), ib = tape->node_of(b);
            Tensor<T> sa = a, sb = b;
            int64_t rows = batch * m;
            tape->emit(out, [ia, ib, sa, sb, rows, k, n](Tape<T>& t, const std::vector<T>& g) {
                if (ia >= 0) gemm_nt(g.data(), sb.ptr(), t.grad_buf(ia).data(), rows, n, k, true);
                if (ib >= 0) gemm_tn(sa.ptr(), g.data(), t.grad_buf(ib).data(), rows, k, n, true);
            });
        }
        return out;
    }

    check_shape(a.rank() == b.rank(), "matmul: rank mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    for (size_t i = 0; i + 2 < a.rank(); ++i)
        check_shape(a.shape()[i] == b.shape()[i],
                    "matmul: leading dims disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    int64_t batch = a.numel() / (m * k);
    Shape os = a.shape();
    os[os.size() - 1] = n;
    Tensor<T> out(os);
    for (int64_t i = 0; i < batch; ++i)
        gemm(a.ptr() + i * m * k, b.ptr() + i * k * n, out.ptr() + i * m * n, m, k, n, false);
    if (track) {
        int ia = tape->node_of(a), ib = tape->node_of(b);
        Tensor<T> sa = a, sb = b;
        tape->emit(out, [ia, ib, sa, sb, batch, m, k, n](Tape<T>& t, const std::vector<T>& g) {
            if (ia >= 0) {
                std::vector<T>& ga = t.grad_buf(ia);
                for (int64_t i = 0; i < batch; ++i)
                    gemm_nt(g.data() + i * m * n, sb.ptr() + i * k * n, ga.data() + i * m * k, m, n, k, true);
            }
            if (ib >= 0) {
                std::vector<T>& gb = t.grad_buf(ib);
                for (int64_t i = 0; i < batch; ++i)
                    gemm_tn(sa.ptr() + i * m * k, g.data() + i * m * n, gb.data() + i * k * n, m, k, n, true);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    using namespace detail;
    Tape<T>* tape;
    bool track = want_tape(tape, {&x});
    T acc = T(0);
    const T* px = x.ptr();
    for (int64_t i = 0; i < x.numel(); ++i) acc += px[i];
    Tensor<T> out({1}, {acc});
    if (track) {
        int ix = tape->node_of(x);
        int64_t nx = x.numel();
        tape->emit(out, [ix, nx](Tape<T>& t, const std::vector<T>& g) {
            if (ix < 0) return;
            std::vector<T>& gx = t.grad_buf(ix);
            for (int64_t i = 0; i < nx; ++i) gx[static_cast<size_t>(i)] += g[0];
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Reduce one axis away.
template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis) {
    using namespace detail;
    size_t r = x.rank();
    if (axis < 0) axis += static_cast<int>(r);
    check_shape(axis >= 0 && axis < static_cast<int>(r), "sum axis out of range for " + shape_str(x.shape()));
    int64_t outer = 1, inner = 1, na = x.shape()[static_cast<size_t>(axis)];
    for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < r; ++i) inner *= x.shape()[i];
    Shape os;
    for (size_t i = 0; i < r; ++i)
        if (static_cast<int>(i) != axis) os.push_back(x.shape()[i]);
    if (os.empty()) os.push_back(1);

    Tape<T>* tape;
    bool track = want_tape(tape, {&x});
    Tensor<T> out(os);
    const T* px = x.ptr();
    T* po = out.ptr();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < inner; ++j) {
            T acc = T(0);
            for (int64_t a = 0; a < na; ++a) acc += px[(o * na + a) * inner + j];
            po[o * inner + j] = acc;
        }
    if (track) {
        int ix = tape->node_of(x);
        tape->emit(out, [ix, outer, inner, na](Tape<T>& t, const std::vector<T>& g) {
            if (ix < 0) return;
            std::vector<T>& gx = t.grad_buf(ix);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t a = 0; a < na; ++a)
                    for (int64_t j = 0; j < inner; ++j)
                        gx[static_cast<size_t>((o * na + a) * inner + j)] += g[static_cast<size_t>(o * inner + j)];
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis) {
    size_t r = x.rank();
    int ax = axis < 0 ? axis + static_cast<int>(r) : axis;
    return scale(sum(x, axis), T(1) / static_cast<T>(x.shape()[static_cast<size_t>(ax)]));
}

// ---------------------------------------------------------------------------
// softmax / layer norm

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    using namespace detail;
    size_t r = x.rank();
    if (axis < 0) axis += static_cast<int>(r);
    check_shape(axis >= 0 && axis < static_cast<int>(r), "softmax axis out of range for " + shape_str(x.shape()));
    int64_t outer = 1, inner = 1, na = x.shape()[static_cast<size_t>(axis)];
    for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < r; ++i) inner *= x.shape()[i];

    Tape<T>* tape;
    bool track = want_tape(tape, {&x});
    Tensor<T> out(x.shape());
    const T* px = x.ptr();
    T* po = out.ptr();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < inner; ++j) {
            const T* row = px + o * na * inner + j;
            T* orow = po + o * na * inner + j;
            T mx = row[0];
            for (int64_t a = 1; a < na; ++a) mx = std::max(mx, row[a * inner]);
            T z = T(0);
            for (int64_t a = 0; a < na; ++a) {
                T e = std::exp(row[a * inner] - mx);
                orow[a * inner] = e;
                z += e;
            }
            T invz = T(1) / z;
            for (int64_t a = 0; a < na; ++a) orow[a * inner] *= invz;
        }
    if (track) {
        int ix = tape->node_of(x);
        Tensor<T> sy = out;  // adjoint is expressed in the output
        tape->emit(out, [ix, sy, outer, inner, na](Tape<T>& t, const std::vector<T>& g) {
            if (ix < 0) return;
            std::vector<T>& gx = t.grad_buf(ix);
            const T* py = sy.ptr();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t j = 0; j < inner; ++j) {
                    int64_t base = o * na * inner + j;
                    T dot = T(0);
                    for (int64_t a = 0; a < na; ++a)
                        dot += g[static_cast<size_t>(base + a * inner)] * py[base + a * inner];
                    for (int64_t a = 0; a < na; ++a)
                        gx[static_cast<size_t>(base + a * inner)] +=
                            py[base + a * inner] * (g[static_cast<size_t>(base + a * inner)] - dot);
                }
        });
    }
    return out;
}

// Normalization over the last dimension followed by the affine transform.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    using namespace detail;
    check_shape(x.rank() >= 1, "layer_norm needs rank >= 1");
    int64_t d = x.shape().back();
    check_shape(gain.numel() == d && bias.numel() == d,
                "layer_norm: gain/bias length must match last dim " + std::to_string(d));
    check_shape(eps > T(0), "layer_norm: eps must be positive");
    int64_t rows = x.numel() / d;

    Tape<T>* tape;
    bool track = want_tape(tape, {&x, &gain, &bias});
    Tensor<T> out(x.shape());
    Tensor<T> xhat(x.shape());           // saved for the adjoint
    std::vector<T> inv_sigma(static_cast<size_t>(rows));
    const T* px = x.ptr();
    const T* pg = gain.ptr();
    const T* pb = bias.ptr();
    T* po = out.ptr();
    T* ph = xhat.ptr();
    for (int64_t rix = 0; rix < rows; ++rix) {
        const T* row = px + rix * d;
        T mu = T(0);
        for (int64_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (int64_t j = 0; j < d; ++j) {
            T c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<T>(d);
        T inv = T(1) / std::sqrt(var + eps);
        inv_sigma[static_cast<size_t>(rix)] = inv;
        for (int64_t j = 0; j < d; ++j) {
            T h = (row[j] - mu) * inv;
            ph[rix * d + j] = h;
            po[rix * d + j] = pg[j] * h + pb[j];
        }
    }
    if (track) {
        int ix = tape->node_of(x), ig = tape->node_of(gain), ib = tape->node_of(bias);
        Tensor<T> sg = gain;
        auto sinv = std::make_shared<std::vector<T>>(std::move(inv_sigma));
        tape->emit(out, [ix, ig, ib, sg, xhat, sinv, rows, d](Tape<T>& t, const std::vector<T>& g) {
            const T* ph = xhat.ptr();
            const T* pg = sg.ptr();
            if (ix >= 0) {
                std::vector<T>& gx = t.grad_buf(ix);
                for (int64_t rix = 0; rix < rows; ++rix) {
                    int64_t base = rix * d;
                    T mean_h = T(0), mean_hx = T(0);
                    for (int64_t j = 0; j < d; ++j) {
                        T hj = g[static_cast<size_t>(base + j)] * pg[j];
                        mean_h += hj;
                        mean_hx += hj * ph[base + j];
                    }
                    mean_h /= static_cast<T>(d);
                    mean_hx /= static_cast<T>(d);
                    T inv = (*sinv)[static_cast<size_t>(rix)];
                    for (int64_t j = 0; j < d; ++j) {
                        T hj = g[static_cast<size_t>(base + j)] * pg[j];
                        gx[static_cast<size_t>(base + j)] += inv * (hj - mean_h - ph[base + j] * mean_hx);
                    }
                }
            }
            if (ig >= 0) {
                std::vector<T>& gg = t.grad_buf(ig);
                for (int64_t rix = 0; rix < rows; ++rix)
                    for (int64_t j = 0; j < d; ++j)
                        gg[static_cast<size_t>(j)] += g[static_cast<size_t>(rix * d + j)] * ph[rix * d + j];
            }
            if (ib >= 0) {
                std::vector<T>& gb = t.grad_buf(ib);
                for (int64_t rix = 0; rix < rows; ++rix)
                    for (int64_t j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += g[static_cast<size_t>(rix * d + j)];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// embedding / loss

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const IdMatrix& ids) {
    using namespace detail;
    check_shape(table.rank() == 2, "embedding table must be [vocab, d]");
    int64_t vocab = table.shape()[0], d = table.shape()[1];
    for (int32_t id : ids.v)
        if (id < 0 || id >= vocab)
            throw std::out_of_range("embedding_lookup: id " + std::to_string(id) + " outside vocab " +
                                    std::to_string(vocab));
    Tape<T>* tape;
    bool track = want_tape(tape, {&table});
    Tensor<T> out({ids.rows, ids.cols, d});
    const T* pt = table.ptr();
    T* po = out.ptr();
    for (int64_t i = 0; i < ids.numel(); ++i)
        std::memcpy(po + i * d, pt + ids.v[static_cast<size_t>(i)] * d, static_cast<size_t>(d) * sizeof(T));
    if (track) {
        int it = tape->node_of(table);
        auto sids = std::make_shared<std::vector<int32_t>>(ids.v);
        tape->emit(out, [it, sids, d](Tape<T>& t, const std::vector<T>& g) {
            if (it < 0) return;
            std::vector<T>& gt = t.grad_buf(it);
            for (size_t i = 0; i < sids->size(); ++i) {
                T* dst = gt.data() + static_cast<int64_t>((*sids)[i]) * d;
                const T* src = g.data() + static_cast<int64_t>(i) * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// Mean token-level negative log-likelihood over non-pad positions, with
// optional label smoothing toward the uniform distribution. Positions whose
// target equals pad_id contribute neither loss nor gradient.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const IdMatrix& targets, int32_t pad_id, T smoothing = T(0)) {
    using namespace detail;
    check_shape(logits.rank() >= 2, "cross_entropy: logits must be [..., vocab]");
    int64_t vocab = logits.shape().back();
    int64_t rows = logits.numel() / vocab;
    check_shape(targets.numel() == rows,
                "cross_entropy: " + std::to_string(rows) + " logit rows vs " + std::to_string(targets.numel()) +
                    " targets");
    for (int32_t tgt : targets.v)
        if (tgt != pad_id && (tgt < 0 || tgt >= vocab))
            throw std::out_of_range("cross_entropy: target id " + std::to_string(tgt) + " outside vocab " +
                                    std::to_string(vocab));

    Tape<T>* tape;
    bool track = want_tape(tape, {&logits});
    const T* px = logits.ptr();
    auto log_z = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    int64_t live = 0;
    long double total = 0.0L;
    for (int64_t rix = 0; rix < rows; ++rix) {
        int32_t tgt = targets.v[static_cast<size_t>(rix)];
        if (tgt == pad_id) continue;
        const T* row = px + rix * vocab;
        T mx = row[0];
        for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        T z = T(0), sx = T(0);
        for (int64_t j = 0; j < vocab; ++j) {
            z += std::exp(row[j] - mx);
            sx += row[j];
        }
        T lz = mx + std::log(z);
        (*log_z)[static_cast<size_t>(rix)] = lz;
        T row_loss = lz - (T(1) - smoothing) * row[tgt] - smoothing / static_cast<T>(vocab) * sx;
        total += static_cast<long double>(row_loss);
        ++live;
    }
    T value = live > 0 ? static_cast<T>(total / static_cast<long double>(live)) : T(0);
    Tensor<T> out({1}, {value});
    if (track) {
        int ix = tape->node_of(logits);
        Tensor<T> sl = logits;
        auto stgt = std::make_shared<std::vector<int32_t>>(targets.v);
        tape->emit(out, [ix, sl, stgt, log_z, pad_id, vocab, rows, live, smoothing](Tape<T>& t,
                                                                                    const std::vector<T>& g) {
            if (ix < 0 || live == 0) return;
            std::vector<T>& gx = t.grad_buf(ix);
            const T* px = sl.ptr();
            T u = g[0] / static_cast<T>(live);
            T qu = smoothing / static_cast<T>(vocab);
            for (int64_t rix = 0; rix < rows; ++rix) {
                int32_t tgt = (*stgt)[static_cast<size_t>(rix)];
                if (tgt == pad_id) continue;
                const T* row = px + rix * vocab;
                T lz = (*log_z)[static_cast<size_t>(rix)];
                for (int64_t j = 0; j < vocab; ++j) {
                    T p = std::exp(row[j] - lz);
                    T q = qu + (j == tgt ? T(1) - smoothing : T(0));
                    gx[static_cast<size_t>(rix * vocab + j)] += u * (p - q);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// dropout

// Inverted dropout; identity when rate == 0 or training == false.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, SplitMix64& rng, bool training) {
    using namespace detail;
    if (!training || rate <= 0.0) return x;
    check_shape(rate < 1.0, "dropout rate must be < 1");
    Tape<T>* tape;
    bool track = want_tape(tape, {&x});
    T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    auto mask = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
    Tensor<T> out(x.shape());
    const T* px = x.ptr();
    T* po = out.ptr();
    for (int64_t i = 0; i < x.numel(); ++i) {
        T m = rng.next_uniform() >= rate ? keep_scale : T(0);
        (*mask)[static_cast<size_t>(i)] = m;
        po[i] = px[i] * m;
    }
    if (track) {
        int ix = tape->node_of(x);
        tape->emit(out, [ix, mask](Tape<T>& t, const std::vector<T>& g) {
            if (ix < 0) return;
            std::vector<T>& gx = t.grad_buf(ix);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
        });
    }
    return out;
}

}  // namespace mvseq
