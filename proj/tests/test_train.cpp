#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mvseq/trainer.hpp"
#include "test_util.hpp"

using namespace mvseq;
using namespace mvseq::testing;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

RunConfig tiny_run_config() {
    RunConfig cfg;
    cfg.model.num_layers = 2;
    cfg.model.d_model = 16;
    cfg.model.num_heads = 2;
    cfg.model.d_ff = 32;
    cfg.model.src_vocab = 12;
    cfg.model.tgt_vocab = 12;
    cfg.model.max_len = 12;
    cfg.model.dropout = 0.1;
    cfg.task.kind = TaskKind::Copy;
    cfg.task.vocab_size = 12;
    cfg.task.min_len = 2;
    cfg.task.max_len = 8;
    cfg.task.seed = 5;
    cfg.task.num_pairs = 128;
    cfg.train.steps = 30;
    cfg.train.batch_size = 16;
    cfg.train.warmup_steps = 50;
    cfg.train.seed = 11;
    cfg.train.checkpoint_every = 0;
    return cfg;
}

std::vector<uint8_t> read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("adam: zero gradients leave parameters unchanged while moments decay") {
    Tensor<double> p({4}, {1.0, -2.0, 3.0, -4.0});
    std::vector<std::pair<std::string, Tensor<double>*>> params{{"p", &p}};
    OptimizerState<double> st;
    auto& [m, v] = st.buffers_for("p", 4);
    m.assign({0.5, 0.5, 0.5, 0.5});
    v.assign({0.25, 0.25, 0.25, 0.25});
    p.ensure_grad_buffer();  // zero grads

    std::vector<double> before = p.data();
    adam_step(params, st, 0.1);
    // m decays toward zero and the update is m-hat / (sqrt(v-hat) + eps),
    // which is nonzero for nonzero stale moments
    CHECK(m[0] == doctest::Approx(0.45));
    CHECK(v[0] == doctest::Approx(0.245));
    // now with truly fresh (zero) moments: parameters must not move
    OptimizerState<double> fresh;
    std::vector<double> at = p.data();
    adam_step(params, fresh, 0.1);
    CHECK(p.data() == at);
}

TEST_CASE("adam: first step from zero moments moves by about -sign(g) * lr") {
    Tensor<double> p({3}, {0.0, 0.0, 0.0});
    p.ensure_grad_buffer();
    (*p.grad_buffer()) = {0.3, -0.7, 1.9};
    std::vector<std::pair<std::string, Tensor<double>*>> params{{"p", &p}};
    OptimizerState<double> st;
    adam_step(params, st, 0.01);
    for (int i = 0; i < 3; ++i) {
        double direction = (*p.grad_buffer())[static_cast<size_t>(i)] > 0 ? -1.0 : 1.0;
        CHECK(p.data()[static_cast<size_t>(i)] == doctest::Approx(direction * 0.01).epsilon(1e-6));
    }
}

TEST_CASE("adam: 100 steps on a quadratic bowl match a scalar reference and converge") {
    // reference trajectory computed with plain scalars
    double lr = 0.05, b1 = 0.9, b2 = 0.98, eps = 1e-9;
    std::vector<double> ref = {0.6, -0.8};  // |x| = 1
    std::vector<double> rm(2, 0.0), rv(2, 0.0);
    for (int t = 1; t <= 100; ++t) {
        for (int i = 0; i < 2; ++i) {
            double g = 2.0 * ref[static_cast<size_t>(i)];
            rm[static_cast<size_t>(i)] = b1 * rm[static_cast<size_t>(i)] + (1 - b1) * g;
            rv[static_cast<size_t>(i)] = b2 * rv[static_cast<size_t>(i)] + (1 - b2) * g * g;
            double mh = rm[static_cast<size_t>(i)] / (1 - std::pow(b1, t));
            double vh = rv[static_cast<size_t>(i)] / (1 - std::pow(b2, t));
            ref[static_cast<size_t>(i)] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }

    Tensor<double> x({2}, {0.6, -0.8});
    x.set_requires_grad(true);
    std::vector<std::pair<std::string, Tensor<double>*>> params{{"x", &x}};
    OptimizerState<double> st;
    for (int t = 1; t <= 100; ++t) {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        tape.backward(sum(mul(x, x)));
        adam_step(params, st, lr);
    }
    CHECK(std::abs(x.data()[0] - ref[0]) < 1e-12);
    CHECK(std::abs(x.data()[1] - ref[1]) < 1e-12);
    CHECK(std::sqrt(x.data()[0] * x.data()[0] + x.data()[1] * x.data()[1]) < 1e-2);
}

TEST_CASE("adam aborts on non-finite gradients naming the parameter") {
    Tensor<double> p({2}, {1.0, 2.0});
    p.ensure_grad_buffer();
    (*p.grad_buffer()) = {0.1, std::numeric_limits<double>::quiet_NaN()};
    std::vector<std::pair<std::string, Tensor<double>*>> params{{"offender", &p}};
    OptimizerState<double> st;
    CHECK_THROWS_WITH_AS(adam_step(params, st, 0.01), doctest::Contains("offender"), NonFiniteGradient);
}

TEST_CASE("noam schedule: warmup then inverse-sqrt decay") {
    CHECK(noam_lr(1, 64, 400, 1.0) == doctest::Approx(1.0 / 8.0 * 1.0 / (400.0 * 20.0)));
    CHECK(noam_lr(400, 64, 400, 1.0) == doctest::Approx(1.0 / 8.0 / 20.0));
    CHECK(noam_lr(1600, 64, 400, 1.0) == doctest::Approx(1.0 / 8.0 / 40.0));
    CHECK(noam_lr(100, 64, 400, 1.0) < noam_lr(400, 64, 400, 1.0));
    CHECK(noam_lr(1600, 64, 400, 1.0) < noam_lr(400, 64, 400, 1.0));
}

TEST_CASE("checkpoint save/load round trip is byte-identical and phase-tagged") {
    ModelConfig mc;
    mc.num_layers = 1;
    mc.d_model = 8;
    mc.num_heads = 2;
    mc.d_ff = 16;
    mc.src_vocab = 9;
    mc.tgt_vocab = 9;
    mc.max_len = 8;
    Model<float> model(mc);
    model.init_parameters(3);
    OptimizerState<float> opt;
    opt.step = 7;
    opt.buffers_for("src_embed.weight", static_cast<size_t>(9 * 8)).first[3] = 0.25f;

    Checkpoint ckpt = checkpoint_from_model(model, kPhase1, 42, &opt);
    std::string p1 = temp_path("mvseq_ckpt_a.mvsq"), p2 = temp_path("mvseq_ckpt_b.mvsq");
    save_checkpoint(ckpt, p1);
    Checkpoint loaded = load_checkpoint(p1);
    CHECK(loaded.phase == kPhase1);
    CHECK(loaded.seed == 42);
    CHECK(loaded.optim_step == 7);
    CHECK(loaded.config == mc);
    save_checkpoint(loaded, p2);
    CHECK(read_bytes(p1) == read_bytes(p2));

    // one flipped payload byte must be caught by the CRC
    auto bytes = read_bytes(p1);
    bytes[bytes.size() - 100] ^= 0x01;
    std::string p3 = temp_path("mvseq_ckpt_corrupt.mvsq");
    write_bytes(p3, bytes);
    CHECK_THROWS_WITH_AS(load_checkpoint(p3), doctest::Contains("CRC"), CheckpointError);

    Model<float> rebuilt = model_from_checkpoint<float>(loaded);
    auto a = model.named_parameters();
    auto b = rebuilt.named_parameters();
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].second->data() == b[i].second->data());
}

TEST_CASE("average_checkpoints: copies, opposites, and an independent-sum oracle") {
    ModelConfig mc;
    mc.num_layers = 1;
    mc.d_model = 8;
    mc.num_heads = 2;
    mc.d_ff = 16;
    mc.src_vocab = 9;
    mc.tgt_vocab = 9;
    mc.max_len = 8;

    auto save_model = [&](uint64_t seed, double flip, const std::string& path) {
        Model<double> m(mc);
        m.init_parameters(seed);
        if (flip != 1.0)
            for (auto& [name, t] : m.named_parameters())
                for (double& x : t->data()) x *= flip;
        save_checkpoint(checkpoint_from_model(m, kPhase1, seed, static_cast<OptimizerState<double>*>(nullptr)), path);
    };

    std::string pa = temp_path("avg_a.mvsq"), pb = temp_path("avg_b.mvsq"), pc = temp_path("avg_c.mvsq");
    save_model(1, 1.0, pa);

    // k identical copies reproduce the original within an ulp
    Checkpoint same = average_checkpoints({pa, pa, pa});
    Checkpoint orig = load_checkpoint(pa);
    for (const auto& [name, blob] : orig.tensors) {
        auto got = blob_values<double>(same.tensors.at(name), name);
        auto want = blob_values<double>(blob, name);
        for (size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-15));
    }

    // average of theta and -theta is zero
    save_model(1, -1.0, pb);
    Checkpoint zero = average_checkpoints({pa, pb});
    for (const auto& [name, blob] : zero.tensors)
        for (double x : blob_values<double>(blob, name)) CHECK(x == 0.0);

    // three distinct checkpoints against an independent summation oracle
    save_model(2, 1.0, pb);
    save_model(3, 1.0, pc);
    Checkpoint avg = average_checkpoints({pa, pb, pc});
    Checkpoint ca = load_checkpoint(pa), cb = load_checkpoint(pb), cc = load_checkpoint(pc);
    CHECK(avg.optim_step == 0);
    for (const auto& [name, blob] : avg.tensors) {
        auto va = blob_values<double>(ca.tensors.at(name), name);
        auto vb = blob_values<double>(cb.tensors.at(name), name);
        auto vc = blob_values<double>(cc.tensors.at(name), name);
        auto got = blob_values<double>(blob, name);
        for (size_t i = 0; i < got.size(); ++i) {
            double want = (va[i] + vb[i] + vc[i]) / 3.0;
            CHECK(std::abs(got[i] - want) <= 1e-7 * std::max(1.0, std::abs(want)));
        }
    }

    // mismatched configs are rejected
    ModelConfig other = mc;
    other.d_ff = 32;
    Model<double> m2(other);
    m2.init_parameters(9);
    std::string pd = temp_path("avg_d.mvsq");
    save_checkpoint(checkpoint_from_model(m2, kPhase1, 9, static_cast<OptimizerState<double>*>(nullptr)), pd);
    CHECK_THROWS_AS(average_checkpoints({pa, pd}), CheckpointError);
}

TEST_CASE("training is deterministic and checkpoints at step 0 equal initialization") {
    RunConfig cfg = tiny_run_config();

    RunConfig zero = cfg;
    zero.train.steps = 0;
    TrainResult r0 = train_phase1<float>(zero);
    Model<float> fresh(zero.model);
    fresh.init_parameters(zero.train.seed);
    for (auto& [name, t] : fresh.named_parameters()) {
        auto vals = blob_values<float>(r0.checkpoint.tensors.at(name), name);
        CHECK(vals == t->data());
    }

    TrainResult r1 = train_phase1<float>(cfg);
    TrainResult r2 = train_phase1<float>(cfg);
    REQUIRE(r1.curve.size() == r2.curve.size());
    for (size_t i = 0; i < r1.curve.size(); ++i) {
        CHECK(r1.curve[i].loss == r2.curve[i].loss);
        CHECK(r1.curve[i].lr == r2.curve[i].lr);
    }
    std::string pa = temp_path("det_a.mvsq"), pb = temp_path("det_b.mvsq");
    save_checkpoint(r1.checkpoint, pa);
    save_checkpoint(r2.checkpoint, pb);
    CHECK(read_bytes(pa) == read_bytes(pb));

    // loss moves below the uniform floor even in a short run
    CHECK(r1.curve.back().loss < std::log(static_cast<double>(cfg.model.tgt_vocab)));
}

TEST_CASE("phase-2 warm start preserves baseline parameters bit-exactly and adds neutral structures") {
    RunConfig cfg = tiny_run_config();
    TrainResult phase1 = train_phase1<float>(cfg);

    auto [model, opt] = warm_start<float>(phase1.checkpoint, Strategy::GCA, Integration::SoftIntegration, cfg.train);
    CHECK(opt.step == 0);
    int ln_pairs = 0;
    for (auto& [name, t] : model.named_parameters()) {
        if (name.rfind("mv.integ_ln.", 0) == 0) {
            bool is_gain = name.find(".gain") != std::string::npos;
            for (float x : t->data()) CHECK(x == (is_gain ? 1.0f : 0.0f));
            ++ln_pairs;
        } else {
            auto vals = blob_values<float>(phase1.checkpoint.tensors.at(name), name);
            CHECK(vals == t->data());
        }
    }
    CHECK(ln_pairs == cfg.model.num_layers * 2);  // gain and bias per decoder layer

    // baseline optimizer moments carried over
    auto m = blob_values<float>(phase1.checkpoint.tensors.at("adam.m.src_embed.weight"), "m");
    CHECK(opt.moments.at("src_embed.weight").first == m);

    CHECK_THROWS_AS(
        (continue_multiview<float>(phase1.checkpoint, Strategy::Conventional, Integration::SoftIntegration, cfg, 1)),
        ConfigError);

    // a phase-2 checkpoint cannot seed another warm start
    TrainResult phase2 = continue_multiview<float>(phase1.checkpoint, Strategy::GCA, Integration::SoftIntegration,
                                                   cfg, 2);
    CHECK(phase2.checkpoint.phase == kPhase2);
    CHECK_THROWS_AS((warm_start<float>(phase2.checkpoint, Strategy::GCA, Integration::SoftIntegration, cfg.train)),
                    ConfigError);
}

TEST_CASE("phase-2 FMA at step 0 equals routing the zero view") {
    RunConfig cfg = tiny_run_config();
    cfg.train.steps = 5;
    TrainResult phase1 = train_phase1<float>(cfg);

    auto [fma, opt] = warm_start<float>(phase1.checkpoint, Strategy::FMA, Integration::SoftIntegration, cfg.train);

    Dataset data = generate(cfg.task);
    Batch batch = make_batch(data, {0, 1, 2});
    EncoderViews<float> views = fma.encode(batch.src);
    Tensor<float> got = fma.decode(batch.tgt_in, views);

    std::vector<Tensor<float>> zeros(static_cast<size_t>(cfg.model.num_layers),
                                     Tensor<float>(views.views.back().shape()));
    DecodeHooks<float> hooks;
    hooks.routed_override = &zeros;
    Tensor<float> want = fma.decode(batch.tgt_in, views, {}, nullptr, &hooks);
    CHECK(got.data() == want.data());
}

TEST_CASE("continued training does not mutate the phase-1 checkpoint file") {
    RunConfig cfg = tiny_run_config();
    cfg.train.steps = 5;
    TrainResult phase1 = train_phase1<float>(cfg);
    std::string path = temp_path("immutable.mvsq");
    save_checkpoint(phase1.checkpoint, path);
    auto before = read_bytes(path);
    Checkpoint loaded = load_checkpoint(path);
    continue_multiview<float>(loaded, Strategy::GCA, Integration::SoftIntegration, cfg, 3);
    CHECK(read_bytes(path) == before);
}
