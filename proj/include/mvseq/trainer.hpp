#pragma once

#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <optional>
#include <queue>
#include <thread>

#include "mvseq/checkpoint.hpp"
#include "mvseq/tasks.hpp"
#include "mvseq/transformer.hpp"

namespace mvseq {

struct LossPoint {
    int64_t step;
    double lr;
    double loss;
};

struct TrainResult {
    Checkpoint checkpoint;       // last good state
    std::vector<LossPoint> curve;
    bool diverged = false;
    int64_t steps_run = 0;
};

using CheckpointSink = std::function<void(const Checkpoint&, int64_t step)>;

// Worker-thread cap; default 1 keeps everything on the calling thread.
inline int mvsq_threads() {
    const char* env = std::getenv("MVSQ_THREADS");
    if (!env || !*env) return 1;
    int v = std::atoi(env);
    return v < 1 ? 1 : v;
}

template <typename T>
Checkpoint checkpoint_from_model(Model<T>& model, const std::string& phase, uint64_t seed,
                                 const OptimizerState<T>* opt) {
    Checkpoint ckpt;
    ckpt.config = model.config();
    ckpt.phase = phase;
    ckpt.seed = seed;
    for (auto& [name, t] : model.named_parameters()) ckpt.tensors.emplace(name, make_blob(*t));
    if (opt) {
        ckpt.optim_step = opt->step;
        for (const auto& [name, mv] : opt->moments) {
            ckpt.tensors.emplace("adam.m." + name, make_blob_raw(mv.first, {static_cast<int64_t>(mv.first.size())}));
            ckpt.tensors.emplace("adam.v." + name, make_blob_raw(mv.second, {static_cast<int64_t>(mv.second.size())}));
        }
    }
    return ckpt;
}

// Restores every model parameter from the checkpoint; missing or extra
// parameter tensors are contract errors.
template <typename T>
void load_model(Model<T>& model, const Checkpoint& ckpt) {
    size_t used = 0;
    for (auto& [name, t] : model.named_parameters()) {
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) throw CheckpointError("checkpoint is missing parameter '" + name + "'");
        blob_into(it->second, name, *t);
        ++used;
    }
    size_t param_blobs = 0;
    for (const auto& [name, blob] : ckpt.tensors)
        if (name.rfind("adam.", 0) != 0) ++param_blobs;
    if (param_blobs != used) throw CheckpointError("checkpoint has parameter tensors unknown to the model");
}

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ckpt) {
    Model<T> model(ckpt.config);
    load_model(model, ckpt);
    return model;
}

namespace detail {

// Single-producer batch prefetcher. The producer materializes batches in a
// fixed deterministic order; threading changes timing only, never content.
class BatchStream {
public:
    BatchStream(const Dataset& data, std::vector<std::vector<size_t>> groups, int64_t total_steps, uint64_t seed,
                bool threaded)
        : data_(data), groups_(std::move(groups)), total_(total_steps), seed_(seed), threaded_(threaded) {
        if (threaded_) worker_ = std::thread([this] { produce(); });
    }

    ~BatchStream() {
        if (threaded_) {
            {
                std::lock_guard<std::mutex> lk(mu_);
                stop_ = true;
            }
            cv_.notify_all();
            worker_.join();
        }
    }

    Batch next() {
        if (!threaded_) return materialize(served_++);
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [this] { return !queue_.empty(); });
        Batch b = std::move(queue_.front());
        queue_.pop();
        cv_.notify_all();
        return b;
    }

private:
    // step index -> batch, with a deterministic per-epoch order reshuffle
    Batch materialize(int64_t step_ix) {
        int64_t per_epoch = static_cast<int64_t>(groups_.size());
        int64_t epoch = step_ix / per_epoch;
        int64_t slot = step_ix % per_epoch;
        if (epoch != order_epoch_) {
            order_.resize(groups_.size());
            for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
            SplitMix64 rng(seed_ ^ (0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(epoch + 1)));
            for (size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.next_below(i)]);
            order_epoch_ = epoch;
        }
        return make_batch(data_, groups_[order_[static_cast<size_t>(slot)]]);
    }

    void produce() {
        for (int64_t i = 0; i < total_; ++i) {
            Batch b = materialize(i);
            std::unique_lock<std::mutex> lk(mu_);
            cv_.wait(lk, [this] { return stop_ || queue_.size() < 4; });
            if (stop_) return;
            queue_.push(std::move(b));
            cv_.notify_all();
        }
    }

    const Dataset& data_;
    std::vector<std::vector<size_t>> groups_;
    int64_t total_;
    uint64_t seed_;
    bool threaded_;
    int64_t served_ = 0;
    std::vector<size_t> order_;
    int64_t order_epoch_ = -1;

    std::thread worker_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::queue<Batch> queue_;
    bool stop_ = false;
};

}  // namespace detail

template <typename T>
TrainResult run_training(Model<T>& model, OptimizerState<T>& opt, const RunConfig& cfg, int64_t steps,
                         const std::string& phase, const CheckpointSink& sink = nullptr) {
    const TrainConfig& tc = cfg.train;
    Dataset data = generate(cfg.task);
    auto groups = batch_groups(data, tc.batch_size, tc.max_tokens, tc.seed, model.config().max_len);
    detail::BatchStream stream(data, std::move(groups), steps, tc.seed, mvsq_threads() > 1);

    auto params = model.named_parameters();
    TrainResult result;
    Checkpoint last_good = checkpoint_from_model(model, phase, tc.seed, &opt);

    for (int64_t step = 1; step <= steps; ++step) {
        Batch batch = stream.next();
        SplitMix64 dropout_rng(tc.seed * 0x9e3779b97f4a7c15ULL + static_cast<uint64_t>(opt.step) + 1);
        RunState rs{true, &dropout_rng};

        double lr = noam_lr(static_cast<int64_t>(opt.step) + 1, model.config().d_model, tc.warmup_steps, tc.lr_scale);
        double loss_value = 0.0;
        bool bad = false;
        try {
            Tape<T> tape;
            typename Tape<T>::Scope scope(tape);
            Tensor<T> logits = model.forward(batch.src, batch.tgt_in, rs);
            Tensor<T> loss = cross_entropy(logits, batch.tgt_out, kPadId, static_cast<T>(tc.label_smoothing));
            loss_value = static_cast<double>(loss.data()[0]);
            if (!std::isfinite(loss_value)) {
                bad = true;
            } else {
                tape.backward(loss);
                clip_gradients(params, tc.clip_norm);
                adam_step(params, opt, lr);
            }
        } catch (const NonFiniteGradient&) {
            bad = true;
        }
        if (bad) {
            result.checkpoint = std::move(last_good);
            result.diverged = true;
            return result;
        }

        result.curve.push_back({step, lr, loss_value});
        result.steps_run = step;
        if (tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 && step != steps) {
            last_good = checkpoint_from_model(model, phase, tc.seed, &opt);
            if (sink) sink(last_good, step);
        }
    }
    result.checkpoint = checkpoint_from_model(model, phase, tc.seed, &opt);
    if (sink) sink(result.checkpoint, steps);
    return result;
}

// Phase 1: conventional training from random init.
template <typename T>
TrainResult train_phase1(RunConfig cfg, const CheckpointSink& sink = nullptr) {
    cfg.model.strategy = Strategy::Conventional;
    cfg.model.validate_and_normalize();
    Model<T> model(cfg.model);
    model.init_parameters(cfg.train.seed);
    OptimizerState<T> opt;
    opt.beta1 = cfg.train.adam_beta1;
    opt.beta2 = cfg.train.adam_beta2;
    opt.eps = cfg.train.adam_eps;
    return run_training(model, opt, cfg, cfg.train.steps, kPhase1, sink);
}

// Phase-2 warm start: every baseline parameter is copied bit-exactly from
// the phase-1 checkpoint, new structures start at their neutral values
// (integration LN gain 1 / bias 0, FMA weights and biases 0, AMA gates 0),
// optimizer moments carry over for baseline parameters only, and the
// learning-rate schedule restarts from warmup.
template <typename T>
std::pair<Model<T>, OptimizerState<T>> warm_start(const Checkpoint& phase1, Strategy strategy,
                                                  Integration integration, const TrainConfig& tc) {
    if (phase1.phase != kPhase1) throw ConfigError("continued learning requires a phase-1 checkpoint");
    ModelConfig cfg = phase1.config;
    cfg.strategy = strategy;
    cfg.integration = integration;
    cfg.validate_and_normalize();

    Model<T> model(cfg);
    OptimizerState<T> opt;
    opt.beta1 = tc.adam_beta1;
    opt.beta2 = tc.adam_beta2;
    opt.eps = tc.adam_eps;
    for (auto& [name, t] : model.named_parameters()) {
        auto it = phase1.tensors.find(name);
        if (it != phase1.tensors.end()) {
            blob_into(it->second, name, *t);
            auto m = phase1.tensors.find("adam.m." + name);
            auto v = phase1.tensors.find("adam.v." + name);
            if (m != phase1.tensors.end() && v != phase1.tensors.end())
                opt.moments.emplace(name, std::make_pair(blob_values<T>(m->second, name),
                                                         blob_values<T>(v->second, name)));
        } else if (name.rfind("mv.", 0) != 0) {
            throw CheckpointError("phase-1 checkpoint is missing baseline parameter '" + name + "'");
        } else if (name.find(".gain") != std::string::npos) {
            for (T& x : t->data()) x = T(1);
        }  // remaining multi-view parameters stay zero
    }
    return {std::move(model), std::move(opt)};
}

template <typename T>
TrainResult continue_multiview(const Checkpoint& phase1, Strategy strategy, Integration integration, RunConfig cfg,
                               int64_t steps, const CheckpointSink& sink = nullptr) {
    if (strategy == Strategy::Conventional)
        throw ConfigError("continue_multiview requires a non-conventional strategy");
    auto [model, opt] = warm_start<T>(phase1, strategy, integration, cfg.train);
    cfg.model = model.config();
    return run_training(model, opt, cfg, steps, kPhase2, sink);
}

// Control arm: the same continued-training protocol with the attention
// structure left conventional.
template <typename T>
TrainResult continue_conventional(const Checkpoint& phase1, RunConfig cfg, int64_t steps,
                                  const CheckpointSink& sink = nullptr) {
    auto [model, opt] = warm_start<T>(phase1, Strategy::Conventional, Integration::DirectReplacement, cfg.train);
    cfg.model = model.config();
    return run_training(model, opt, cfg, steps, kPhase1, sink);
}

}  // namespace mvseq
