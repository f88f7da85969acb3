// Training: the per-example loss oracle, finite-difference gradients through
// the conditioned forward, condition-dropout and timestep statistics, batch
// order-independence, descent, determinism, and the frozen-base guarantee.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "dc/adapter.hpp"
#include "dc/cache.hpp"
#include "dc/common.hpp"
#include "dc/data.hpp"
#include "dc/denoiser.hpp"
#include "dc/gradcheck.hpp"
#include "dc/rng.hpp"
#include "dc/sampler.hpp"
#include "dc/text.hpp"
#include "dc/trainer.hpp"

using namespace dc;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code;
    }
    FAIL("expected an error");
    return ErrorCode::io;
}

// Small full-resolution geometry: dataset images are 32x32, so integration
// tests shrink the channel widths instead of the raster.
DenoiserConfig tiny32_cfg() {
    DenoiserConfig cfg;
    cfg.image_size = 32;
    cfg.base_channels = 4;
    cfg.channel_multipliers = {1, 2};
    cfg.blocks_per_resolution = 1;
    cfg.attention_resolutions = {16};
    cfg.text_embed_dim = 8;
    cfg.time_steps = 50;
    return cfg;
}

// Even smaller 8x8 geometry for finite-difference work.
DenoiserConfig tiny8_cfg() {
    DenoiserConfig cfg;
    cfg.image_size = 8;
    cfg.base_channels = 8;
    cfg.channel_multipliers = {1, 2};
    cfg.blocks_per_resolution = 1;
    cfg.attention_resolutions = {4};
    cfg.text_embed_dim = 8;
    cfg.time_steps = 50;
    return cfg;
}

template <class S> void randomize(DenoiserT<S>& den, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, t] : den.params())
        for (int64_t i = 0; i < t->numel(); ++i)
            t->data()[i] = S(rng.normal() * 0.05);
}

// Hand-built 8x8 "triplet": colored disk on white plus a random target.
struct Tiny8Scene {
    TensorF target{{3, 8, 8}};
    TensorF reference;
    TensorF mask;

    Tiny8Scene() : mask(rasterize_shape(0, 4.0f, 4.0f, 2.5f, 8)) {
        Rng rng(314);
        for (int i = 0; i < target.numel(); ++i)
            target.data()[i] = float(rng.uniform(-1.0, 1.0));
        reference = TensorF::full({3, 8, 8}, 1.0f);
        const float rgb[3] = {0.4f, -0.6f, 0.1f};
        for (int ch = 0; ch < 3; ++ch)
            for (int j = 0; j < 64; ++j)
                if (mask.data()[j] == 1.0f)
                    reference.data()[ch * 64 + j] = rgb[ch];
    }
};

std::vector<std::uint8_t> file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Shared pretrained base for the integration cases (built once; training the
// adapters never mutates it, which "frozen base weights" re-checks).
struct Rig {
    Vocabulary vocab = Vocabulary::standard();
    std::vector<Triplet> dataset;
    DenoiserConfig cfg = tiny32_cfg();
    NoiseSchedule sched = NoiseSchedule::linear(cfg.time_steps);
    Denoiser den;
    std::vector<LayerSite> sites;
    TrainResult pretrain;

    Rig()
        : dataset(generate_dataset(16, 5, vocab)), den(cfg, boot()),
          sites(enumerate_sites(cfg, SitePolicy::middle_only)) {
        TrainConfig pc;
        pc.lr = 2e-3f;
        pc.batch_size = 2;
        pc.steps = 300;
        pc.weight_decay = 0.0f;
        pc.text_drop_p = 0.1f;
        pc.seed = 41;
        pretrain = pretrain_base(den, sched, dataset, pc);
    }

    static Rng& boot() {
        static Rng rng(7);
        return rng;
    }

    static const Rig& get() {
        static Rig rig;
        return rig;
    }
};

double window_mean(const std::vector<LossPoint>& curve, std::size_t lo, std::size_t hi) {
    double s = 0;
    for (std::size_t i = lo; i < hi; ++i)
        s += curve[i].loss;
    return s / double(hi - lo);
}

} // namespace

TEST_CASE("example loss equals a hand-computed score-matching error") {
    DenoiserConfig cfg = tiny8_cfg();
    Rng boot(1);
    Denoiser den(cfg, boot);
    randomize(den, 11);
    const NoiseSchedule sched = NoiseSchedule::linear(cfg.time_steps);
    const auto sites = enumerate_sites(cfg, SitePolicy::middle_only);
    Rng brng(2);
    AdapterBank bank = init_passthrough<float>(sites, brng);
    const Tiny8Scene scene;
    const TokenSequence caption =
        tokenize(Vocabulary::standard(), "a red circle on a gray background", 16);

    const int t = 37;
    const std::uint64_t cache_seed = 99;
    Rng noise_a(55);
    Tensor<float> loss = example_loss<float>(den, sched, sites, &bank, scene.target, caption, t,
                                             cache_seed, &scene.reference, &scene.mask, noise_a,
                                             nullptr);

    // Independent replay: same cache, same noise draw, explicit forward and
    // a double-precision mean-squared error.
    FeatureCache cache =
        build_cache(den, sched, scene.reference, &scene.mask, sites, 1, cache_seed);
    Rng noise_b(55);
    auto [noised, eps] = add_noise(sched, scene.target, t, noise_b);
    DenoiserOut out = den.forward(noised, caption, t, {}, &bank, &cache);
    double sq = 0;
    for (int i = 0; i < eps.numel(); ++i) {
        const double d = double(out.eps.data()[i]) - double(eps.data()[i]);
        sq += d * d;
    }
    const double oracle = sq / double(eps.numel());
    CHECK(loss.numel() == 1);
    CHECK(double(loss.data()[0]) == doctest::Approx(oracle).epsilon(1e-5));

    // And the loss is exactly zero when prediction equals the noise (the
    // reduction itself has a clean zero point).
    Tape<float> tape;
    CHECK(mse(eps, eps, &tape).data()[0] == 0.0f);
}

TEST_CASE("adapter gradients match finite differences on an 8x8 example") {
    DenoiserConfig cfg = tiny8_cfg();
    Rng boot(3);
    Denoiser den(cfg, boot);
    randomize(den, 21);
    const NoiseSchedule sched = NoiseSchedule::linear(cfg.time_steps);
    const auto sites = enumerate_sites(cfg, SitePolicy::middle_only);
    Rng brng(4);
    AdapterBank bank = init_passthrough<float>(sites, brng);
    // Leave pass-through: gradients at the zero block must still be correct.
    const Tiny8Scene scene;
    const TokenSequence caption =
        tokenize(Vocabulary::standard(), "a blue square on a navy background", 16);

    std::vector<Tensor<float>*> params;
    for (auto& site : bank.sites)
        for (Tensor<float>* w : {&site.wq, &site.wk, &site.wv, &site.wproj}) {
            w->set_requires_grad(true);
            params.push_back(w);
        }

    auto f = [&](Tape<float>* tape) {
        Rng noise(77);
        return example_loss<float>(den, sched, sites, &bank, scene.target, caption, 13, 5,
                                   &scene.reference, &scene.mask, noise, tape);
    };
    const float worst = grad_check<float>(f, params, 5e-3f, 0.01f, 120, 6);
    CHECK(worst < 1e-3f);
}

TEST_CASE("adapter gradients match finite differences in float64") {
    DenoiserConfig cfg = tiny8_cfg();
    Rng boot(8);
    DenoiserT<double> den(cfg, boot);
    randomize(den, 22);
    const NoiseSchedule sched = NoiseSchedule::linear(cfg.time_steps);
    const auto sites = enumerate_sites(cfg, SitePolicy::middle_only);
    Rng brng(9);
    AdapterBankT<double> bank = init_passthrough<double>(sites, brng);
    Rng jig(10);
    for (auto& site : bank.sites) // move off pass-through so every path is live
        for (int64_t i = 0; i < site.wproj.numel(); ++i)
            site.wproj.data()[i] += jig.normal() * 0.05;

    const Tiny8Scene scene;
    const Tensor<double> target = scene.target.cast<double>();
    const Tensor<double> reference = scene.reference.cast<double>();
    const Tensor<double> mask = scene.mask.cast<double>();
    const TokenSequence caption =
        tokenize(Vocabulary::standard(), "a green star on a teal background", 16);

    std::vector<Tensor<double>*> params;
    for (auto& site : bank.sites)
        for (Tensor<double>* w : {&site.wq, &site.wk, &site.wv, &site.wproj}) {
            w->set_requires_grad(true);
            params.push_back(w);
        }

    auto f = [&](Tape<double>* tape) {
        Rng noise(78);
        return example_loss<double>(den, sched, sites, &bank, target, caption, 21, 6, &reference,
                                    &mask, noise, tape);
    };
    const double worst = grad_check<double>(f, params, 1e-6, 0.01, 120, 7);
    CHECK(worst < 1e-5);
}

TEST_CASE("image dropout removes adapters from the graph entirely") {
    const Rig& rig = Rig::get();
    Rng brng(12);
    AdapterBank bank = init_passthrough<float>(rig.sites, brng);
    std::vector<Tensor<float>*> params;
    for (auto& site : bank.sites)
        for (Tensor<float>* w : {&site.wq, &site.wk, &site.wv, &site.wproj}) {
            w->set_requires_grad(true);
            params.push_back(w);
        }

    TrainConfig cfg;
    cfg.text_drop_p = 0.0f;
    cfg.joint_drop_p = 0.0f;
    cfg.image_drop_p = 1.0f;

    std::vector<TrainSample> batch;
    for (int i = 0; i < 4; ++i)
        batch.push_back({rig.dataset[std::size_t(i)], 700u + std::uint64_t(i)});
    BatchStats stats;
    const double loss = adapter_loss(rig.den, rig.sched, rig.sites, bank, cfg, batch, &stats);
    CHECK(std::isfinite(loss));
    CHECK(stats.image_dropped == 4);
    for (Tensor<float>* p : params)
        for (int64_t i = 0; i < p->numel(); ++i)
            CHECK(p->grad()[i] == 0.0f);
}

TEST_CASE("condition dropout hits its configured rates") {
    TrainConfig cfg; // defaults: text 0.1, image 0.1, joint 0.05
    Rng rng(42);
    const int n = 10000;
    int joint = 0, text = 0, image = 0, none = 0;
    for (int i = 0; i < n; ++i) {
        switch (draw_cond_drop(rng.uniform(), cfg)) {
        case CondDrop::joint: ++joint; break;
        case CondDrop::text_only: ++text; break;
        case CondDrop::image_only: ++image; break;
        case CondDrop::none: ++none; break;
        }
    }
    CHECK(std::fabs(joint / double(n) - 0.05) < 0.02);
    CHECK(std::fabs(text / double(n) - 0.10) < 0.02);
    CHECK(std::fabs(image / double(n) - 0.10) < 0.02);
    CHECK(std::fabs(none / double(n) - 0.75) < 0.02);

    CHECK(code_of([&] { draw_cond_drop(1.0, cfg); }) == ErrorCode::config);
    CHECK(code_of([&] { draw_cond_drop(-0.1, cfg); }) == ErrorCode::config);
}

TEST_CASE("timestep draws cover the full ladder uniformly") {
    Rng rng(99);
    const int T = 50;
    const int n = 100000;
    std::vector<int> counts(std::size_t(T) + 1, 0);
    for (int i = 0; i < n; ++i) {
        const int t = draw_timestep(rng, T);
        REQUIRE(t >= 1);
        REQUIRE(t <= T);
        ++counts[std::size_t(t)];
    }
    const double expect = double(n) / T;
    double chi2 = 0;
    for (int t = 1; t <= T; ++t)
        chi2 += (counts[std::size_t(t)] - expect) * (counts[std::size_t(t)] - expect) / expect;
    CHECK(chi2 < 74.919); // p=0.01 critical value, df=49
    CHECK(counts[1] > 0);
    CHECK(counts[std::size_t(T)] > 0);
}

TEST_CASE("per-sample losses are independent of visit order") {
    const Rig& rig = Rig::get();
    Rng brng(13);
    AdapterBank bank = init_passthrough<float>(rig.sites, brng);

    TrainConfig cfg;
    std::vector<TrainSample> samples;
    for (int i = 0; i < 6; ++i)
        samples.push_back({rig.dataset[std::size_t(i)], 9000u + std::uint64_t(i)});

    std::vector<double> forward_losses;
    for (const auto& s : samples)
        forward_losses.push_back(adapter_loss(rig.den, rig.sched, rig.sites, bank, cfg, {s}));
    const std::vector<std::size_t> perm = {4, 1, 5, 0, 3, 2};
    for (std::size_t k = 0; k < perm.size(); ++k) {
        const double again =
            adapter_loss(rig.den, rig.sched, rig.sites, bank, cfg, {samples[perm[k]]});
        CHECK(again == forward_losses[perm[k]]); // bitwise: pure in (triplet, seed)
    }

    // Batch mean is the exact mean of the singleton losses.
    const double batched = adapter_loss(rig.den, rig.sched, rig.sites, bank, cfg,
                                        {samples[0], samples[1], samples[2], samples[3]});
    const double mean =
        (forward_losses[0] + forward_losses[1] + forward_losses[2] + forward_losses[3]) / 4.0;
    CHECK(batched == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("pretraining descends and drops text at the configured rate") {
    const Rig& rig = Rig::get();
    const auto& curve = rig.pretrain.curve;
    REQUIRE(curve.size() == 300);
    const double early = window_mean(curve, 0, 50);
    const double late = window_mean(curve, 250, 300);
    CHECK(late < early);

    // The optimizer touched every base parameter, by name.
    const auto names = rig.pretrain.optimized;
    CHECK(names.size() == rig.den.params().size());

    // Text dropout rate, measured on a separate stats-instrumented run.
    DenoiserConfig cfg = tiny32_cfg();
    Rng boot(19);
    Denoiser den(cfg, boot);
    TrainConfig pc;
    pc.lr = 1e-4f;
    pc.batch_size = 1;
    pc.steps = 600;
    pc.text_drop_p = 0.3f;
    pc.seed = 77;
    BatchStats stats;
    pretrain_base(den, rig.sched, rig.dataset, pc, &stats);
    REQUIRE(stats.samples == 600);
    CHECK(std::fabs(stats.text_dropped / double(stats.samples) - 0.3) < 0.05);
    // Timesteps from the integration path cover a healthy span of {1..T}.
    std::vector<bool> seen(std::size_t(rig.sched.T) + 1, false);
    for (int t : stats.timesteps)
        seen[std::size_t(t)] = true;
    int distinct = 0;
    for (int t = 1; t <= rig.sched.T; ++t)
        distinct += seen[std::size_t(t)];
    CHECK(distinct > 40); // 50 buckets, 600 draws
}

TEST_CASE("adapter training descends on the toy dataset") {
    const Rig& rig = Rig::get();
    Rng brng(14);
    AdapterBank bank = init_passthrough<float>(rig.sites, brng);
    TrainConfig cfg;
    cfg.lr = 3e-3f;
    cfg.batch_size = 2;
    cfg.steps = 200;
    cfg.weight_decay = 0.0f;
    cfg.seed = 88;
    BatchStats stats;
    const TrainResult result =
        train_adapters(rig.den, rig.sched, rig.sites, bank, rig.dataset, cfg, &stats);
    REQUIRE(result.curve.size() == 200);
    CHECK(window_mean(result.curve, 150, 200) < window_mean(result.curve, 0, 50));
    CHECK(stats.samples == 400);
}

TEST_CASE("same seed, same adapters; base weights frozen byte-for-byte") {
    const Rig& rig = Rig::get();
    const auto base_before = rig.den.export_params();

    TrainConfig cfg;
    cfg.lr = 1e-3f;
    cfg.batch_size = 2;
    cfg.steps = 60;
    cfg.seed = 123;

    auto run = [&] {
        Rng brng(15);
        AdapterBank bank = init_passthrough<float>(rig.sites, brng);
        train_adapters(rig.den, rig.sched, rig.sites, bank, rig.dataset, cfg);
        return export_adapters(bank);
    };
    const auto a = run();
    const auto b = run();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        REQUIRE(a[i].tensor.numel() == b[i].tensor.numel());
        CHECK(std::memcmp(a[i].tensor.data(), b[i].tensor.data(),
                          std::size_t(a[i].tensor.numel()) * sizeof(float)) == 0);
    }

    // The base is untouched, and the optimizer state was adapters-only.
    const auto base_after = rig.den.export_params();
    REQUIRE(base_before.size() == base_after.size());
    for (std::size_t i = 0; i < base_before.size(); ++i) {
        CHECK(base_before[i].name == base_after[i].name);
        CHECK(std::memcmp(base_before[i].tensor.data(), base_after[i].tensor.data(),
                          std::size_t(base_before[i].tensor.numel()) * sizeof(float)) == 0);
    }
    Rng brng(16);
    AdapterBank bank = init_passthrough<float>(rig.sites, brng);
    const TrainResult result =
        train_adapters(rig.den, rig.sched, rig.sites, bank, rig.dataset, cfg);
    CHECK(result.optimized.size() == 4 * rig.sites.size());
    for (const auto& name : result.optimized)
        CHECK(name.rfind("adapter.", 0) == 0);
}

TEST_CASE("runaway learning rates abort with a numeric error") {
    // An absurd learning rate overflows the unnormalized output head within a
    // few steps; the loss watchdog turns the non-finite value into an abort.
    const Rig& rig = Rig::get();
    DenoiserConfig cfg = tiny32_cfg();
    Rng boot(23);
    Denoiser den(cfg, boot);
    TrainConfig tc;
    tc.lr = 1e4f;
    tc.batch_size = 1;
    tc.steps = 250;
    tc.seed = 3;
    CHECK(code_of([&] { pretrain_base(den, rig.sched, rig.dataset, tc); }) ==
          ErrorCode::numeric);
}

TEST_CASE("the loss watchdog trips on persistent 10x blowups, not spikes") {
    // Fine: hovers at the initial level forever.
    DivergenceGuard steady;
    for (int s = 1; s <= 500; ++s)
        steady.observe(s, 0.5 + 0.001 * (s % 7));

    // Fine: one huge spike that recovers resets the streak.
    DivergenceGuard spiky;
    spiky.observe(1, 1.0);
    for (int s = 2; s <= 100; ++s)
        spiky.observe(s, 1e8);
    spiky.observe(101, 2.0); // back under 10x before 100 high steps in a row
    for (int s = 102; s <= 300; ++s)
        spiky.observe(s, 3.0);

    // Abort: above 10x the initial value for 100 consecutive observations.
    DivergenceGuard runaway;
    runaway.observe(1, 1.0);
    for (int s = 2; s <= 100; ++s)
        runaway.observe(s, 10.1);
    CHECK(code_of([&] { runaway.observe(101, 10.1); }) == ErrorCode::numeric);

    // Abort immediately on a non-finite value.
    DivergenceGuard guard;
    guard.observe(1, 1.0);
    CHECK(code_of([&] { guard.observe(2, std::nan("")); }) == ErrorCode::numeric);
    DivergenceGuard guard2;
    CHECK(code_of([&] {
              guard2.observe(1, std::numeric_limits<double>::infinity());
          }) == ErrorCode::numeric);
}

TEST_CASE("config validation rejects bad setups") {
    const Rig& rig = Rig::get();
    TrainConfig cfg;
    cfg.lr = -1.0f;
    CHECK(code_of([&] { cfg.validate(); }) == ErrorCode::config);
    cfg = {};
    cfg.text_drop_p = 0.6f;
    cfg.image_drop_p = 0.5f;
    CHECK(code_of([&] { cfg.validate(); }) == ErrorCode::config);
    cfg = {};
    cfg.batch_size = 0;
    CHECK(code_of([&] { cfg.validate(); }) == ErrorCode::config);

    Rng brng(18);
    AdapterBank bank = init_passthrough<float>(rig.sites, brng);
    TrainConfig ok;
    CHECK(code_of([&] {
              adapter_loss(rig.den, rig.sched, rig.sites, bank, ok, {});
          }) == ErrorCode::config);
    CHECK(code_of([&] {
              train_adapters(rig.den, rig.sched, rig.sites, bank, {}, ok);
          }) == ErrorCode::config);
    // Schedule length must match the denoiser's ladder.
    const NoiseSchedule wrong = NoiseSchedule::linear(100);
    CHECK(code_of([&] {
              std::vector<TrainSample> batch = {{rig.dataset[0], 1}};
              adapter_loss(rig.den, wrong, rig.sites, bank, ok, batch);
          }) == ErrorCode::config);
}

TEST_CASE("loss log round-trips through CSV") {
    std::vector<LossPoint> curve = {{1, 1.0625, 1e-5f}, {2, 0.53125, 1e-5f},
                                    {3, 0.12344999933242798, 2e-4f}};
    const auto path = (std::filesystem::temp_directory_path() / "dc_trainer_loss.csv").string();
    write_loss_csv(path, curve);

    std::ifstream in(path);
    REQUIRE(in.good());
    std::string line;
    std::getline(in, line);
    CHECK(line == "step,loss,lr");
    for (const LossPoint& p : curve) {
        REQUIRE(bool(std::getline(in, line)));
        const auto c1 = line.find(','), c2 = line.rfind(',');
        REQUIRE(c1 != std::string::npos);
        REQUIRE(c2 != c1);
        CHECK(std::stoi(line.substr(0, c1)) == p.step);
        CHECK(std::strtod(line.substr(c1 + 1, c2 - c1 - 1).c_str(), nullptr) == p.loss);
        CHECK(std::strtof(line.substr(c2 + 1).c_str(), nullptr) == p.lr);
    }
    CHECK_FALSE(std::getline(in, line));
    in.close();

    // Strict reader recovers the exact values: write(read(write)) is stable.
    const std::vector<LossPoint> parsed = read_loss_csv(path);
    REQUIRE(parsed.size() == curve.size());
    for (std::size_t i = 0; i < curve.size(); ++i) {
        CHECK(parsed[i].step == curve[i].step);
        CHECK(parsed[i].loss == curve[i].loss);
        CHECK(parsed[i].lr == curve[i].lr);
    }
    const auto path2 = (std::filesystem::temp_directory_path() / "dc_trainer_loss2.csv").string();
    write_loss_csv(path2, parsed);
    CHECK(file_bytes(path2) == file_bytes(path));
    std::filesystem::remove(path);
    std::filesystem::remove(path2);

    CHECK(code_of([&] { write_loss_csv("/nonexistent/dir/loss.csv", curve); }) == ErrorCode::io);
    CHECK(code_of([&] { read_loss_csv("/nonexistent/loss.csv"); }) == ErrorCode::io);
    const auto bad = (std::filesystem::temp_directory_path() / "dc_trainer_bad.csv").string();
    const auto write_text = [&](const std::string& text) {
        std::ofstream out(bad, std::ios::binary);
        out << text;
    };
    write_text("loss,step,lr\n");
    CHECK(code_of([&] { read_loss_csv(bad); }) == ErrorCode::format);
    write_text("step,loss,lr\n1,2\n");
    CHECK(code_of([&] { read_loss_csv(bad); }) == ErrorCode::format);
    write_text("step,loss,lr\n1,x,3\n");
    CHECK(code_of([&] { read_loss_csv(bad); }) == ErrorCode::format);
    std::filesystem::remove(bad);
}
