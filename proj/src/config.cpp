#include "mvseq/config.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

namespace mvseq {

using nlohmann::json;

std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Conventional: return "conventional";
        case Strategy::GCA: return "gca";
        case Strategy::GPA: return "gpa";
        case Strategy::FGA: return "fga";
        case Strategy::FMA: return "fma";
        case Strategy::AMA: return "ama";
    }
    throw std::logic_error("unreachable strategy");
}

Strategy strategy_from_name(const std::string& name) {
    if (name == "conventional") return Strategy::Conventional;
    if (name == "gca") return Strategy::GCA;
    if (name == "gpa") return Strategy::GPA;
    if (name == "fga") return Strategy::FGA;
    if (name == "fma") return Strategy::FMA;
    if (name == "ama") return Strategy::AMA;
    throw ConfigError("unknown strategy '" + name + "' (expected conventional|gca|gpa|fga|fma|ama)");
}

std::string integration_name(Integration m) {
    return m == Integration::DirectReplacement ? "direct" : "soft";
}

Integration integration_from_name(const std::string& name) {
    if (name == "direct") return Integration::DirectReplacement;
    if (name == "soft") return Integration::SoftIntegration;
    throw ConfigError("unknown integration '" + name + "' (expected direct|soft)");
}

void ModelConfig::validate_and_normalize() {
    if (num_layers < 1) throw ConfigError("model.num_layers must be >= 1");
    if (d_model < 1 || num_heads < 1 || d_ff < 1) throw ConfigError("model dimensions must be positive");
    if (d_model % num_heads != 0) throw ConfigError("model.d_model must be divisible by model.num_heads");
    if (src_vocab < 4 || tgt_vocab < 4)
        throw ConfigError("vocabularies must have at least 4 entries (pad/bos/eos plus content)");
    if (max_len < 2) throw ConfigError("model.max_len must be >= 2");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must be in [0, 1)");
    if (precision != "f32" && precision != "f64") throw ConfigError("model.precision must be f32 or f64");
    if (strategy == Strategy::Conventional) integration = Integration::DirectReplacement;
}

namespace {

// Pulls `key` out of `obj`, tracking which keys were consumed so unknown
// ones can be rejected afterwards.
class StrictObject {
public:
    StrictObject(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj.is_object()) throw ConfigError(path_ + ": expected a JSON object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        auto it = obj_.find(key);
        if (it == obj_.end()) return;
        seen_.push_back(key);
        try {
            out = it->get<T>();
        } catch (const json::exception&) {
            throw ConfigError(path_ + "." + key + ": wrong type");
        }
    }

    void get_enum(const char* key, Strategy& out) {
        std::string s;
        get(key, s);
        if (!s.empty()) out = strategy_from_name(s);
    }
    void get_enum(const char* key, Integration& out) {
        std::string s;
        get(key, s);
        if (!s.empty()) out = integration_from_name(s);
    }
    void get_enum(const char* key, TaskKind& out) {
        std::string s;
        get(key, s);
        if (!s.empty()) out = task_kind_from_name(s);
    }

    void finish() const {
        for (auto it = obj_.begin(); it != obj_.end(); ++it) {
            if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
                throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
        }
    }

private:
    const json& obj_;
    std::string path_;
    std::vector<std::string> seen_;
};

void parse_model(const json& j, ModelConfig& m) {
    StrictObject o(j, "model");
    o.get("num_layers", m.num_layers);
    o.get("d_model", m.d_model);
    o.get("num_heads", m.num_heads);
    o.get("d_ff", m.d_ff);
    o.get("src_vocab", m.src_vocab);
    o.get("tgt_vocab", m.tgt_vocab);
    o.get("max_len", m.max_len);
    o.get_enum("strategy", m.strategy);
    o.get_enum("integration", m.integration);
    o.get("dropout", m.dropout);
    o.get("precision", m.precision);
    o.finish();
}

void parse_task(const json& j, TaskSpec& t) {
    StrictObject o(j, "task");
    o.get_enum("kind", t.kind);
    o.get("vocab_size", t.vocab_size);
    o.get("min_len", t.min_len);
    o.get("max_len", t.max_len);
    o.get("seed", t.seed);
    o.get("num_pairs", t.num_pairs);
    o.finish();
}

void parse_train(const json& j, TrainConfig& t) {
    StrictObject o(j, "train");
    o.get("steps", t.steps);
    o.get("batch_size", t.batch_size);
    o.get("max_tokens", t.max_tokens);
    o.get("warmup_steps", t.warmup_steps);
    o.get("lr_scale", t.lr_scale);
    o.get("seed", t.seed);
    o.get("clip_norm", t.clip_norm);
    o.get("label_smoothing", t.label_smoothing);
    o.get("checkpoint_every", t.checkpoint_every);
    o.get("adam_beta1", t.adam_beta1);
    o.get("adam_beta2", t.adam_beta2);
    o.get("adam_eps", t.adam_eps);
    o.finish();
}

void parse_eval(const json& j, EvalConfig& e) {
    StrictObject o(j, "eval");
    o.get("beam_size", e.beam_size);
    o.get("length_penalty", e.length_penalty);
    o.get("max_out_len", e.max_out_len);
    o.get("buckets", e.buckets);
    o.get("bleu_smooth", e.bleu_smooth);
    o.finish();
}

void parse_paths(const json& j, PathsConfig& p) {
    StrictObject o(j, "paths");
    o.get("checkpoint_dir", p.checkpoint_dir);
    o.get("report_dir", p.report_dir);
    o.finish();
}

json model_to_json(const ModelConfig& m) {
    return json{{"num_layers", m.num_layers},
                {"d_model", m.d_model},
                {"num_heads", m.num_heads},
                {"d_ff", m.d_ff},
                {"src_vocab", m.src_vocab},
                {"tgt_vocab", m.tgt_vocab},
                {"max_len", m.max_len},
                {"strategy", strategy_name(m.strategy)},
                {"integration", integration_name(m.integration)},
                {"dropout", m.dropout},
                {"precision", m.precision}};
}

}  // namespace

RunConfig run_config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig cfg;
    if (j.contains("model")) parse_model(j.at("model"), cfg.model);
    if (j.contains("task")) parse_task(j.at("task"), cfg.task);
    if (j.contains("train")) parse_train(j.at("train"), cfg.train);
    if (j.contains("eval")) parse_eval(j.at("eval"), cfg.eval);
    if (j.contains("paths")) parse_paths(j.at("paths"), cfg.paths);
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        if (k != "model" && k != "task" && k != "train" && k != "eval" && k != "paths")
            throw ConfigError("config: unknown section '" + k + "'");
    }
    cfg.model.validate_and_normalize();
    return cfg;
}

RunConfig run_config_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return run_config_from_json_text(ss.str());
}

std::string run_config_to_json_text(const RunConfig& cfg) {
    json j;
    j["model"] = model_to_json(cfg.model);
    j["task"] = json{{"kind", task_kind_name(cfg.task.kind)}, {"vocab_size", cfg.task.vocab_size},
                     {"min_len", cfg.task.min_len},           {"max_len", cfg.task.max_len},
                     {"seed", cfg.task.seed},                 {"num_pairs", cfg.task.num_pairs}};
    j["train"] = json{{"steps", cfg.train.steps},
                      {"batch_size", cfg.train.batch_size},
                      {"max_tokens", cfg.train.max_tokens},
                      {"warmup_steps", cfg.train.warmup_steps},
                      {"lr_scale", cfg.train.lr_scale},
                      {"seed", cfg.train.seed},
                      {"clip_norm", cfg.train.clip_norm},
                      {"label_smoothing", cfg.train.label_smoothing},
                      {"checkpoint_every", cfg.train.checkpoint_every},
                      {"adam_beta1", cfg.train.adam_beta1},
                      {"adam_beta2", cfg.train.adam_beta2},
                      {"adam_eps", cfg.train.adam_eps}};
    j["eval"] = json{{"beam_size", cfg.eval.beam_size},
                     {"length_penalty", cfg.eval.length_penalty},
                     {"max_out_len", cfg.eval.max_out_len},
                     {"buckets", cfg.eval.buckets},
                     {"bleu_smooth", cfg.eval.bleu_smooth}};
    j["paths"] = json{{"checkpoint_dir", cfg.paths.checkpoint_dir}, {"report_dir", cfg.paths.report_dir}};
    return j.dump();
}

std::string model_config_to_json_text(const ModelConfig& cfg) { return model_to_json(cfg).dump(); }

ModelConfig model_config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
    }
    ModelConfig m;
    parse_model(j, m);
    m.validate_and_normalize();
    return m;
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
    size_t eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override must look like section.key=value: " + assignment);
    std::string key = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);
    size_t dot = key.find('.');
    if (dot == std::string::npos) throw ConfigError("override key must be section.key: " + key);
    std::string section = key.substr(0, dot);
    std::string field = key.substr(dot + 1);

    // Route through the JSON parser so types and key names are checked in
    // one place. Strings that are not valid JSON scalars are quoted.
    json jv;
    try {
        jv = json::parse(value);
    } catch (const json::exception&) {
        jv = value;
    }
    json patch;
    patch[section][field] = jv;
    json full = json::parse(run_config_to_json_text(cfg));
    full.merge_patch(patch);
    cfg = run_config_from_json_text(full.dump());
}

}  // namespace mvseq
