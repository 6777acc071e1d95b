#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvseq/tasks.hpp"

namespace mvseq {

// How decoder layer i picks its encoder view g_i(S):
//   Conventional  S_N for every layer (the vanilla model)
//   GCA           S_{N-i+1}, granularity consistent (anti-diagonal)
//   GPA           S_i, granularity parallel
//   FGA           S_1, always the finest view
//   FMA           sum_j (W_ij S_j + b_ij), learned full matching
//   AMA           sum_j alpha_ij S_j, learned adaptive gates
enum class Strategy { Conventional, GCA, GPA, FGA, FMA, AMA };

// Direct replacement feeds g_i(S) straight into cross-attention; soft
// integration feeds LN(g_i(S) + S_N) so every layer keeps the global view.
enum class Integration { DirectReplacement, SoftIntegration };

std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);
std::string integration_name(Integration m);
Integration integration_from_name(const std::string& name);

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    int64_t num_layers = 2;  // shared by encoder and decoder
    int64_t d_model = 64;
    int64_t num_heads = 4;
    int64_t d_ff = 256;
    int32_t src_vocab = 16;
    int32_t tgt_vocab = 16;
    int64_t max_len = 32;
    Strategy strategy = Strategy::Conventional;
    Integration integration = Integration::DirectReplacement;
    double dropout = 0.1;
    std::string precision = "f32";  // f32 | f64

    // Enforces invariants; normalizes integration to DirectReplacement for
    // the conventional strategy, where it is meaningless.
    void validate_and_normalize();

    bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
    int64_t steps = 3000;
    int64_t batch_size = 32;
    int64_t max_tokens = 4096;
    int64_t warmup_steps = 400;
    double lr_scale = 1.0;
    uint64_t seed = 1;
    double clip_norm = 1.0;
    double label_smoothing = 0.1;
    int64_t checkpoint_every = 1000;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-9;

    bool operator==(const TrainConfig&) const = default;
};

struct EvalConfig {
    int64_t beam_size = 5;
    double length_penalty = 0.6;
    int64_t max_out_len = 0;  // 0 means the model max_len
    std::vector<int64_t> buckets = {8, 16, 32};
    bool bleu_smooth = false;

    bool operator==(const EvalConfig&) const = default;
};

struct PathsConfig {
    std::string checkpoint_dir = "runs/ckpt";
    std::string report_dir = "runs/report";

    bool operator==(const PathsConfig&) const = default;
};

struct RunConfig {
    ModelConfig model;
    TaskSpec task;
    TrainConfig train;
    EvalConfig eval;
    PathsConfig paths;
};

// Strict JSON (de)serialization: every field has the default above, unknown
// keys are a hard error naming the offending key.
RunConfig run_config_from_json_text(const std::string& text);
RunConfig run_config_from_file(const std::string& path);
std::string run_config_to_json_text(const RunConfig& cfg);

std::string model_config_to_json_text(const ModelConfig& cfg);
ModelConfig model_config_from_json_text(const std::string& text);

// Applies one "section.key=value" override; last application wins.
void apply_override(RunConfig& cfg, const std::string& assignment);

}  // namespace mvseq
