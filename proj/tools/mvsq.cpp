// mvsq: train / finetune / evaluate / diagnose / average / export-data over
// the layer-wise multi-view sequence-to-sequence stack.
//
// Exit codes: 0 success, 2 config or contract error, 3 numerical
// divergence, 4 internal-consistency failure.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>

#include "mvseq/beam.hpp"
#include "mvseq/diagnostics.hpp"
#include "mvseq/metrics.hpp"
#include "mvseq/trainer.hpp"

using namespace mvseq;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitInconsistent = 4;

struct CliError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

RunConfig load_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : run_config_from_file(config_path);
    for (const std::string& o : overrides) apply_override(cfg, o);
    cfg.model.validate_and_normalize();
    return cfg;
}

void write_text(const std::string& path, const std::string& text) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CliError("cannot open for writing: " + path);
    f << text;
    if (!f) throw CliError("write failed: " + path);
}

std::string loss_curve_csv(const RunConfig& cfg, const TrainResult& result) {
    std::string out = "# config: " + run_config_to_json_text(cfg) + "\n";
    out += "# seed: " + std::to_string(cfg.train.seed) + "\n";
    out += "step,lr,loss\n";
    char buf[96];
    for (const LossPoint& p : result.curve) {
        std::snprintf(buf, sizeof(buf), "%lld,%.10g,%.17g\n", static_cast<long long>(p.step), p.lr, p.loss);
        out += buf;
    }
    return out;
}

void save_into_dir(const Checkpoint& ckpt, const std::string& dir, const std::string& name) {
    fs::create_directories(dir);
    save_checkpoint(ckpt, (fs::path(dir) / name).string());
}

// decoding and metrics shared by evaluate at both precisions
template <typename T>
int evaluate_with(const Checkpoint& ckpt, const RunConfig& cfg, const Dataset& data, const std::string& report_dir) {
    Model<T> model = model_from_checkpoint<T>(ckpt);
    for (const Pair& p : data) {
        for (int32_t t : p.src)
            if (t < 0 || t >= model.config().src_vocab)
                throw CliError("dataset token " + std::to_string(t) + " exceeds the model source vocabulary");
        for (int32_t t : p.tgt)
            if (t < 0 || t >= model.config().tgt_vocab)
                throw CliError("dataset token " + std::to_string(t) + " exceeds the model target vocabulary");
    }

    BeamConfig bc;
    bc.beam_size = cfg.eval.beam_size;
    bc.length_penalty = cfg.eval.length_penalty;
    bc.max_len = cfg.eval.max_out_len > 0 ? cfg.eval.max_out_len : model.config().max_len - 1;

    Corpus hyps = decode_corpus(model, data, bc);
    Corpus refs;
    std::vector<int64_t> src_lens;
    for (const Pair& p : data) {
        refs.push_back(p.tgt);
        src_lens.push_back(static_cast<int64_t>(p.src.size()));
    }

    BleuOptions bleu_opts{4, cfg.eval.bleu_smooth};
    double bleu = corpus_bleu(hyps, refs, bleu_opts);
    double acc = sequence_accuracy(hyps, refs);

    std::string config_echo = run_config_to_json_text(cfg);
    auto summary = [&](const std::string& metric, double value) {
        json j = {{"metric", metric}, {"value", value}, {"config", json::parse(config_echo)}};
        return j.dump(2) + "\n";
    };
    write_text((fs::path(report_dir) / "bleu.json").string(), summary("bleu", bleu));
    write_text((fs::path(report_dir) / "sequence_accuracy.json").string(), summary("sequence_accuracy", acc));

    LengthBuckets buckets = LengthBuckets::from_boundaries(cfg.eval.buckets, model.config().max_len);
    CorpusMetric bleu_metric = [&](const Corpus& h, const Corpus& r) { return corpus_bleu(h, r, bleu_opts); };
    CorpusMetric acc_metric = [](const Corpus& h, const Corpus& r) { return sequence_accuracy(h, r); };
    write_text((fs::path(report_dir) / "bleu_by_length.csv").string(),
               bucket_scores_csv(bucketed_scores(hyps, refs, src_lens, buckets, bleu_metric),
                                 "metric=bleu config=" + config_echo));
    write_text((fs::path(report_dir) / "sequence_accuracy_by_length.csv").string(),
               bucket_scores_csv(bucketed_scores(hyps, refs, src_lens, buckets, acc_metric),
                                 "metric=sequence_accuracy config=" + config_echo));

    std::cout << "bleu " << bleu << "\nsequence_accuracy " << acc << "\nreports in " << report_dir << "\n";
    return kExitOk;
}

template <typename T>
int diagnose_with(const Checkpoint& ckpt, const RunConfig& cfg, const Batch& batch, const std::string& out_dir,
                  const std::set<std::string>& probes) {
    Model<T> model = model_from_checkpoint<T>(ckpt);
    fs::create_directories(out_dir);
    std::string config_echo = run_config_to_json_text(cfg);
    bool consistent = true;

    ConsumptionProbe cons;
    if (probes.count("consumption") || probes.count("gradpaths")) cons = consumption_probe(model, batch.src);

    if (probes.count("consumption")) {
        auto mat = [](const ConsumptionMatrix& m) {
            json rows = json::array();
            for (int64_t i = 0; i < m.n; ++i) {
                json row = json::array();
                for (int64_t j = 0; j < m.n; ++j) row.push_back(m.at(i, j) ? 1 : 0);
                rows.push_back(row);
            }
            return rows;
        };
        json j = {{"strategy", strategy_name(ckpt.config.strategy)},
                  {"integration", integration_name(ckpt.config.integration)},
                  {"num_layers", ckpt.config.num_layers},
                  {"empirical", mat(cons.empirical)},
                  {"analytic", mat(cons.analytic)},
                  {"consistent", cons.consistent},
                  {"config", json::parse(config_echo)},
                  {"seed", ckpt.seed}};
        write_text((fs::path(out_dir) / "consumption.json").string(), j.dump(2) + "\n");
        consistent = consistent && cons.consistent;
    }

    if (probes.count("gradpaths")) {
        GradPathReport r = grad_path_norms(model, batch);
        int64_t lastcol = 0;
        for (int64_t i = 0; i < cons.analytic.n; ++i)
            if (cons.analytic.at(i, cons.analytic.n - 1)) ++lastcol;
        bool ok = r.nonzero_count == lastcol && r.alias_sum_rel_err < 1e-5;
        json j = {{"norms", r.norms},
                  {"norm_sum", r.norm_sum},
                  {"whole_norm", r.whole_norm},
                  {"alias_sum_rel_err", r.alias_sum_rel_err},
                  {"nonzero_count", r.nonzero_count},
                  {"consumption_last_column_true", lastcol},
                  {"consistent", ok},
                  {"config", json::parse(config_echo)},
                  {"seed", ckpt.seed}};
        write_text((fs::path(out_dir) / "grad_paths.json").string(), j.dump(2) + "\n");
        consistent = consistent && ok;
    }

    if (probes.count("cosine")) {
        EncoderViews<T> views = model.encode(batch.src);
        for (int64_t layer : {static_cast<int64_t>(1), model.config().num_layers}) {
            CosineMap cm = cosine_map(views, layer, 0);
            std::string base = "cosine_layer" + std::to_string(layer);
            write_text((fs::path(out_dir) / (base + ".csv")).string(), cosine_csv(cm));
            std::vector<std::string> labels;
            for (int64_t i = 0; i < cm.size; ++i) labels.push_back(std::to_string(batch.src.at(0, i)));
            write_text((fs::path(out_dir) / (base + ".svg")).string(),
                       render_heatmap(cm.m, cm.size, cm.size, labels, labels));
            if (model.config().num_layers == 1) break;
        }
    }

    if (probes.count("attention")) {
        AttentionExport ex = export_attention(model, batch, 0);
        std::vector<std::string> src_labels, tgt_labels;
        for (int32_t t : ex.src_ids) src_labels.push_back(std::to_string(t));
        for (int32_t t : ex.tgt_ids) tgt_labels.push_back(std::to_string(t));
        for (int64_t layer = 0; layer < ex.layers; ++layer) {
            for (int64_t h = 0; h < ex.heads; ++h) {
                std::string name = "attn_layer" + std::to_string(layer + 1) + "_head" + std::to_string(h);
                write_text((fs::path(out_dir) / (name + ".csv")).string(),
                           attention_csv(ex.maps[static_cast<size_t>(layer)][static_cast<size_t>(h)], ex.tgt_len,
                                         ex.src_len, ex.tgt_ids, ex.src_ids, name));
            }
            std::string avg = "attn_layer" + std::to_string(layer + 1) + "_avg";
            const auto& avg_map = ex.maps[static_cast<size_t>(layer)][static_cast<size_t>(ex.heads)];
            write_text((fs::path(out_dir) / (avg + ".csv")).string(),
                       attention_csv(avg_map, ex.tgt_len, ex.src_len, ex.tgt_ids, ex.src_ids, avg));
            write_text((fs::path(out_dir) / (avg + ".svg")).string(),
                       render_heatmap(avg_map, ex.tgt_len, ex.src_len, tgt_labels, src_labels));
        }
    }

    std::cout << "diagnostics bundle in " << out_dir << (consistent ? "" : " (INCONSISTENT)") << "\n";
    return consistent ? kExitOk : kExitInconsistent;
}

Batch diagnostics_batch(const RunConfig& cfg, const std::string& data_path, int64_t model_max_len) {
    Dataset data;
    if (!data_path.empty()) {
        data = import_dataset(data_path);
    } else {
        TaskSpec spec = cfg.task;
        spec.num_pairs = 4;
        spec.max_len = std::min<int64_t>(spec.max_len, model_max_len - 2);
        spec.min_len = std::min(spec.min_len, spec.max_len);
        data = generate(spec);
    }
    std::vector<size_t> take;
    for (size_t i = 0; i < data.size() && i < 4; ++i) take.push_back(i);
    return make_batch(data, take);
}

int run(int argc, char** argv) {
    CLI::App app{"layer-wise multi-view sequence-to-sequence toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "JSON run configuration");
    app.add_option("--set", overrides, "override as section.key=value (repeatable, last wins)");

    auto* cmd_train = app.add_subcommand("train", "phase-1 conventional training");
    int64_t train_steps = -1;
    uint64_t train_seed = 0;
    bool seed_given = false;
    cmd_train->add_option("--steps", train_steps, "training steps (overrides config)");
    cmd_train->add_option("--seed", train_seed, "training seed (overrides config)")->each([&](const std::string&) {
        seed_given = true;
    });

    auto* cmd_finetune = app.add_subcommand("finetune", "phase-2 multi-view continued learning");
    std::string ft_ckpt, ft_strategy = "gca", ft_integration = "soft";
    int64_t ft_steps = -1;
    cmd_finetune->add_option("--checkpoint", ft_ckpt, "phase-1 checkpoint")->required();
    cmd_finetune->add_option("--strategy", ft_strategy, "gca|gpa|fga|fma|ama");
    cmd_finetune->add_option("--integration", ft_integration, "direct|soft");
    cmd_finetune->add_option("--steps", ft_steps, "phase-2 steps (default: phase-1 budget from config)");

    auto* cmd_evaluate = app.add_subcommand("evaluate", "beam decode and score a dataset");
    std::string ev_ckpt, ev_data;
    int64_t ev_beam = -1;
    double ev_alpha = -1.0;
    cmd_evaluate->add_option("--checkpoint", ev_ckpt, "checkpoint to evaluate")->required();
    cmd_evaluate->add_option("--data", ev_data, "dataset file (src<TAB>tgt id lines)")->required();
    cmd_evaluate->add_option("--beam", ev_beam, "beam size (overrides config)");
    cmd_evaluate->add_option("--length-penalty", ev_alpha, "length penalty alpha (overrides config)");

    auto* cmd_diagnose = app.add_subcommand("diagnose", "write the diagnostics bundle");
    std::string dg_ckpt, dg_data, dg_probes = "consumption,gradpaths,cosine,attention", dg_out;
    cmd_diagnose->add_option("--checkpoint", dg_ckpt, "checkpoint to probe")->required();
    cmd_diagnose->add_option("--data", dg_data, "optional dataset file for the probe batch");
    cmd_diagnose->add_option("--probes", dg_probes, "comma list: consumption,gradpaths,cosine,attention");
    cmd_diagnose->add_option("--out", dg_out, "bundle directory (default: report_dir/diagnostics)");

    auto* cmd_average = app.add_subcommand("average", "average checkpoints parameter-wise");
    std::vector<std::string> av_inputs;
    std::string av_out;
    cmd_average->add_option("--inputs", av_inputs, "checkpoints, oldest to newest")->required()->expected(-1);
    cmd_average->add_option("--out", av_out, "output checkpoint path")->required();

    auto* cmd_export = app.add_subcommand("export-data", "generate and export a task dataset");
    std::string ex_out;
    cmd_export->add_option("--out", ex_out, "output TSV path")->required();

    CLI11_PARSE(app, argc, argv);

    RunConfig cfg = load_config(config_path, overrides);

    if (cmd_train->parsed()) {
        if (train_steps >= 0) cfg.train.steps = train_steps;
        if (seed_given) cfg.train.seed = train_seed;
        cfg.model.strategy = Strategy::Conventional;
        cfg.model.validate_and_normalize();
        CheckpointSink sink = [&](const Checkpoint& c, int64_t step) {
            save_into_dir(c, cfg.paths.checkpoint_dir, "phase1_step" + std::to_string(step) + ".mvsq");
        };
        TrainResult r = cfg.model.precision == "f64" ? train_phase1<double>(cfg, sink) : train_phase1<float>(cfg, sink);
        write_text((fs::path(cfg.paths.report_dir) / "phase1_loss.csv").string(), loss_curve_csv(cfg, r));
        write_text((fs::path(cfg.paths.report_dir) / "phase1_config.json").string(),
                   run_config_to_json_text(cfg) + "\n");
        if (r.diverged) {
            save_into_dir(r.checkpoint, cfg.paths.checkpoint_dir, "phase1_last_good.mvsq");
            std::cerr << "training diverged at step " << r.steps_run + 1 << "; last good checkpoint saved\n";
            return kExitDiverged;
        }
        std::cout << "phase-1 checkpoint written to " << cfg.paths.checkpoint_dir << "\n";
        return kExitOk;
    }

    if (cmd_finetune->parsed()) {
        Strategy strategy = strategy_from_name(ft_strategy);
        Integration integration = integration_from_name(ft_integration);
        if (strategy == Strategy::Conventional)
            throw ConfigError("finetune requires a multi-view strategy (gca|gpa|fga|fma|ama)");
        Checkpoint phase1 = load_checkpoint(ft_ckpt);
        if (phase1.phase != kPhase1) throw ConfigError("finetune requires a phase-1 checkpoint");
        int64_t steps = ft_steps >= 0 ? ft_steps : cfg.train.steps;
        std::string tag = ft_strategy + "_" + ft_integration;
        CheckpointSink sink = [&](const Checkpoint& c, int64_t step) {
            save_into_dir(c, cfg.paths.checkpoint_dir, "phase2_" + tag + "_step" + std::to_string(step) + ".mvsq");
        };
        TrainResult r;
        if (phase1.config.precision == "f64")
            r = continue_multiview<double>(phase1, strategy, integration, cfg, steps, sink);
        else
            r = continue_multiview<float>(phase1, strategy, integration, cfg, steps, sink);
        write_text((fs::path(cfg.paths.report_dir) / ("phase2_" + tag + "_loss.csv")).string(),
                   loss_curve_csv(cfg, r));
        if (r.diverged) {
            save_into_dir(r.checkpoint, cfg.paths.checkpoint_dir, "phase2_" + tag + "_last_good.mvsq");
            std::cerr << "fine-tuning diverged; last good checkpoint saved\n";
            return kExitDiverged;
        }
        std::cout << "phase-2 checkpoint written to " << cfg.paths.checkpoint_dir << "\n";
        return kExitOk;
    }

    if (cmd_evaluate->parsed()) {
        if (ev_beam > 0) cfg.eval.beam_size = ev_beam;
        if (ev_alpha >= 0) cfg.eval.length_penalty = ev_alpha;
        Checkpoint ckpt = load_checkpoint(ev_ckpt);
        Dataset data = import_dataset(ev_data);
        if (data.empty()) throw CliError("dataset is empty: " + ev_data);
        return ckpt.config.precision == "f64" ? evaluate_with<double>(ckpt, cfg, data, cfg.paths.report_dir)
                                              : evaluate_with<float>(ckpt, cfg, data, cfg.paths.report_dir);
    }

    if (cmd_diagnose->parsed()) {
        Checkpoint ckpt = load_checkpoint(dg_ckpt);
        std::set<std::string> probes;
        std::istringstream ps(dg_probes);
        std::string probe;
        while (std::getline(ps, probe, ',')) {
            if (probe != "consumption" && probe != "gradpaths" && probe != "cosine" && probe != "attention")
                throw ConfigError("unknown probe '" + probe + "'");
            probes.insert(probe);
        }
        std::string out_dir = dg_out.empty() ? (fs::path(cfg.paths.report_dir) / "diagnostics").string() : dg_out;
        RunConfig echo = cfg;
        echo.model = ckpt.config;
        Batch batch = diagnostics_batch(echo, dg_data, ckpt.config.max_len);
        return ckpt.config.precision == "f64" ? diagnose_with<double>(ckpt, echo, batch, out_dir, probes)
                                              : diagnose_with<float>(ckpt, echo, batch, out_dir, probes);
    }

    if (cmd_average->parsed()) {
        Checkpoint avg = average_checkpoints(av_inputs);
        fs::path out(av_out);
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        save_checkpoint(avg, av_out);
        std::cout << "averaged " << av_inputs.size() << " checkpoints into " << av_out << "\n";
        return kExitOk;
    }

    if (cmd_export->parsed()) {
        Dataset data = generate(cfg.task);
        fs::path out(ex_out);
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        export_dataset(data, ex_out);
        std::cout << "wrote " << data.size() << " pairs to " << ex_out << "\n";
        return kExitOk;
    }

    return kExitConfig;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ConsistencyError& e) {
        std::cerr << "consistency error: " << e.what() << "\n";
        return kExitInconsistent;
    } catch (const CliError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::invalid_argument& e) {
        std::cerr << "contract error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
}
