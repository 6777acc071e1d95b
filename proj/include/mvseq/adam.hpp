#pragma once

#include <cmath>
#include <map>
#include <string>

#include "mvseq/tensor.hpp"

namespace mvseq {

// Inverse-sqrt warmup schedule: d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).
inline double noam_lr(int64_t step, int64_t d_model, int64_t warmup_steps, double lr_scale) {
    double s = static_cast<double>(step);
    double w = static_cast<double>(warmup_steps);
    return lr_scale / std::sqrt(static_cast<double>(d_model)) * std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

struct NonFiniteGradient : std::runtime_error {
    explicit NonFiniteGradient(const std::string& param)
        : std::runtime_error("non-finite gradient in parameter '" + param + "'"), parameter(param) {}
    std::string parameter;
};

template <typename T>
struct OptimizerState {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    uint64_t step = 0;  // completed updates
    std::map<std::string, std::pair<std::vector<T>, std::vector<T>>> moments;

    std::pair<std::vector<T>, std::vector<T>>& buffers_for(const std::string& name, size_t n) {
        auto it = moments.find(name);
        if (it == moments.end())
            it = moments.emplace(name, std::make_pair(std::vector<T>(n, T(0)), std::vector<T>(n, T(0)))).first;
        if (it->second.first.size() != n)
            throw std::invalid_argument("optimizer moments for '" + name + "' do not match parameter size");
        return it->second;
    }
};

// Global-norm gradient clipping; returns the pre-clip norm. A missing grad
// buffer counts as zero.
template <typename T>
double clip_gradients(std::vector<std::pair<std::string, Tensor<T>*>>& params, double max_norm) {
    double sq = 0.0;
    for (auto& [name, t] : params) {
        if (!t->grad_buffer()) continue;
        for (T g : *t->grad_buffer()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        T factor = static_cast<T>(max_norm / norm);
        for (auto& [name, t] : params)
            if (t->grad_buffer())
                for (T& g : *t->grad_buffer()) g *= factor;
    }
    return norm;
}

// One Adam update with bias correction. Parameters without a populated grad
// buffer are treated as having zero gradient (their moments still decay).
template <typename T>
void adam_step(std::vector<std::pair<std::string, Tensor<T>*>>& params, OptimizerState<T>& st, double lr) {
    for (auto& [name, t] : params) {
        if (!t->grad_buffer()) continue;
        for (T g : *t->grad_buffer())
            if (!std::isfinite(static_cast<double>(g))) throw NonFiniteGradient(name);
    }
    st.step += 1;
    double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (auto& [name, t] : params) {
        size_t n = t->data().size();
        auto& [m, v] = st.buffers_for(name, n);
        const std::vector<T>* grad = t->grad_buffer() ? t->grad_buffer().get() : nullptr;
        for (size_t i = 0; i < n; ++i) {
            double g = grad ? static_cast<double>((*grad)[i]) : 0.0;
            double mi = st.beta1 * static_cast<double>(m[i]) + (1.0 - st.beta1) * g;
            double vi = st.beta2 * static_cast<double>(v[i]) + (1.0 - st.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + st.eps);
            t->data()[i] = static_cast<T>(static_cast<double>(t->data()[i]) - update);
        }
    }
}

}  // namespace mvseq
