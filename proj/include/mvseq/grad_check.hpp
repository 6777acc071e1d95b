#pragma once

#include <functional>

#include "mvseq/ops.hpp"

namespace mvseq {

// Compares the reverse-mode gradient of f at x against central differences.
// f must be a deterministic map from a tensor to a scalar tensor; it is
// evaluated under a private tape for the analytic pass and without a tape
// for the numeric probes. Returns the max over coordinates of
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
//
// The numeric side uses the symmetric five-point stencil
//   (8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h
// evaluated at step h and at h/2 (the half-step stencil reuses the +-h
// points as its outer pair, so it costs two extra evaluations). Piecewise-
// smooth activations put kinks inside some probe windows; the two estimates
// then disagree and the window is halved until they stabilize. Differences
// are taken before scaling so equal evaluations cancel exactly.
template <typename T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, T eps = T(1e-4)) {
    Tensor<T> probe = x.clone();
    probe.set_requires_grad(true);
    {
        Tape<T> tape;
        typename Tape<T>::Scope scope(tape);
        Tensor<T> loss = f(probe);
        if (loss.numel() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
        tape.backward(loss);
    }
    const std::vector<T>& analytic = probe.grad();

    Tensor<T> work = x.clone();
    work.set_requires_grad(false);
    double worst = 0.0;
    for (int64_t i = 0; i < work.numel(); ++i) {
        T saved = work.data()[static_cast<size_t>(i)];
        auto eval_at = [&](double delta) {
            work.data()[static_cast<size_t>(i)] = saved + static_cast<T>(delta);
            return static_cast<double>(f(work).data()[0]);
        };
        auto stencil = [](double up1, double down1, double up2, double down2, double h) {
            return (8.0 * (up1 - down1) - (up2 - down2)) / (12.0 * h);
        };

        double h = static_cast<double>(eps);
        double u2 = eval_at(2.0 * h), u1 = eval_at(h), d1 = eval_at(-h), d2 = eval_at(-2.0 * h);
        double numeric = stencil(u1, d1, u2, d2, h);
        for (int level = 0; level < 6; ++level) {
            double uh = eval_at(0.5 * h), dh = eval_at(-0.5 * h);
            double refined = stencil(uh, dh, u1, d1, 0.5 * h);
            bool consistent = std::abs(numeric - refined) <=
                              std::max(1e-7 * std::max(std::abs(numeric), std::abs(refined)), 1e-11);
            if (consistent) break;
            // kink suspected inside the window; shrink and try again
            u2 = u1;
            d2 = d1;
            u1 = uh;
            d1 = dh;
            h *= 0.5;
            numeric = refined;
        }
        work.data()[static_cast<size_t>(i)] = saved;

        double a = static_cast<double>(analytic[static_cast<size_t>(i)]);
        double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    return worst;
}

}  // namespace mvseq
