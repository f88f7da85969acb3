#include "dc/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>

#include "dc/common.hpp"

namespace dc {

namespace {

// Fixed optimizer constants (standard Adam moments); only lr and weight
// decay are configurable.
constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr int kCacheTimestep = 1; // personalization-time cache position
constexpr double kDivergeFactor = 10.0;
constexpr int kDivergePatience = 100;

struct AdamW {
    float lr;
    float weight_decay;
    std::vector<std::vector<float>> m, v;
    long long t = 0;

    AdamW(float lr_, float wd, const std::vector<Tensor<float>*>& params)
        : lr(lr_), weight_decay(wd) {
        for (const Tensor<float>* p : params) {
            m.emplace_back(std::size_t(p->numel()), 0.0f);
            v.emplace_back(std::size_t(p->numel()), 0.0f);
        }
    }

    void step(const std::vector<Tensor<float>*>& params) {
        ++t;
        const double c1 = 1.0 - std::pow(kBeta1, double(t));
        const double c2 = 1.0 - std::pow(kBeta2, double(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor<float>& p = *params[i];
            const float* g = p.grad();
            float* w = p.data();
            float* mi = m[i].data();
            float* vi = v[i].data();
            for (int64_t j = 0; j < p.numel(); ++j) {
                const double gj = g[j];
                mi[j] = float(kBeta1 * mi[j] + (1.0 - kBeta1) * gj);
                vi[j] = float(kBeta2 * vi[j] + (1.0 - kBeta2) * gj * gj);
                const double mhat = mi[j] / c1;
                const double vhat = vi[j] / c2;
                w[j] = float(w[j] - lr * (mhat / (std::sqrt(vhat) + kAdamEps)) -
                             lr * weight_decay * w[j]);
            }
        }
    }
};

void clip_gradients(const std::vector<Tensor<float>*>& params, float max_norm) {
    double sq = 0;
    for (const Tensor<float>* p : params)
        for (int64_t j = 0; j < p->numel(); ++j)
            sq += double(p->grad()[j]) * double(p->grad()[j]);
    const double norm = std::sqrt(sq);
    if (norm <= max_norm)
        return;
    const float scale = float(max_norm / norm);
    for (Tensor<float>* p : params)
        for (int64_t j = 0; j < p->numel(); ++j)
            p->grad()[j] *= scale;
}

// Shared optimization loop: `batch_loss(step)` computes the loss and leaves
// gradients in `params`.
template <class BatchLoss>
TrainResult run_steps(const std::vector<Tensor<float>*>& params,
                      std::vector<std::string> names, const TrainConfig& cfg,
                      BatchLoss batch_loss) {
    AdamW opt(cfg.lr, cfg.weight_decay, params);
    TrainResult result;
    result.optimized = std::move(names);
    result.curve.reserve(std::size_t(cfg.steps));
    DivergenceGuard guard;
    for (int step = 1; step <= cfg.steps; ++step) {
        for (Tensor<float>* p : params)
            p->zero_grad();
        const double loss = batch_loss(step);
        guard.observe(step, loss);
        if (cfg.grad_clip > 0.0f)
            clip_gradients(params, cfg.grad_clip);
        opt.step(params);
        result.curve.push_back({step, loss, cfg.lr});
    }
    return result;
}

} // namespace

void DivergenceGuard::observe(int step, double loss) {
    require(std::isfinite(loss), ErrorCode::numeric,
            "non-finite loss " + std::to_string(loss) + " at step " + std::to_string(step));
    if (initial_ < 0.0)
        initial_ = loss;
    if (loss > kDivergeFactor * initial_) {
        if (++high_streak_ >= kDivergePatience)
            fail(ErrorCode::numeric,
                 "training diverged: loss " + std::to_string(loss) + " at step " +
                     std::to_string(step) + " stayed above 10x the initial " +
                     std::to_string(initial_) + " for " + std::to_string(high_streak_) +
                     " steps");
    } else {
        high_streak_ = 0;
    }
}

void TrainConfig::validate() const {
    require(std::isfinite(lr) && lr > 0.0f, ErrorCode::config, "lr must be positive");
    require(batch_size >= 1, ErrorCode::config, "batch_size must be at least 1");
    require(steps >= 1, ErrorCode::config, "steps must be at least 1");
    require(std::isfinite(weight_decay) && weight_decay >= 0.0f, ErrorCode::config,
            "weight_decay must be non-negative");
    for (float p : {text_drop_p, image_drop_p, joint_drop_p})
        require(std::isfinite(p) && p >= 0.0f, ErrorCode::config,
                "dropout probabilities must be non-negative");
    require(double(text_drop_p) + double(image_drop_p) + double(joint_drop_p) <= 1.0,
            ErrorCode::config, "dropout probabilities must sum to at most 1");
    require(std::isfinite(grad_clip) && grad_clip >= 0.0f, ErrorCode::config,
            "grad_clip must be non-negative");
}

CondDrop draw_cond_drop(double u, const TrainConfig& cfg) {
    require(u >= 0.0 && u < 1.0, ErrorCode::config, "dropout draw must lie in [0,1)");
    if (u < cfg.joint_drop_p)
        return CondDrop::joint;
    if (u < double(cfg.joint_drop_p) + double(cfg.text_drop_p))
        return CondDrop::text_only;
    if (u < double(cfg.joint_drop_p) + double(cfg.text_drop_p) + double(cfg.image_drop_p))
        return CondDrop::image_only;
    return CondDrop::none;
}

int draw_timestep(Rng& rng, int time_steps) {
    require(time_steps >= 1, ErrorCode::config, "time_steps must be at least 1");
    return 1 + int(rng.below(std::uint64_t(time_steps)));
}

template <class S>
Tensor<S> example_loss(const DenoiserT<S>& den, const NoiseSchedule& sched,
                       const std::vector<LayerSite>& sites,
                       const std::type_identity_t<AdapterBankT<S>>* bank,
                       const Tensor<S>& target, const TokenSequence& caption, int t,
                       std::uint64_t cache_seed, const std::type_identity_t<Tensor<S>>* reference,
                       const std::type_identity_t<Tensor<S>>* mask, Rng& noise_rng,
                       Tape<S>* tape) {
    require(sched.T == den.config().time_steps, ErrorCode::config,
            "schedule length does not match the denoiser");
    require((bank != nullptr) == (reference != nullptr), ErrorCode::config,
            "reference conditioning needs both an adapter bank and a reference image");

    FeatureCacheT<S> cache;
    if (bank != nullptr)
        cache = build_cache(den, sched, *reference, mask, sites, kCacheTimestep, cache_seed);

    auto [noised, eps] = add_noise(sched, target, t, noise_rng);
    DenoiserOutT<S> out = den.forward(noised, caption, t, {}, bank,
                                      bank != nullptr ? &cache : nullptr, tape);
    return mse(out.eps, eps, tape);
}

template Tensor<float> example_loss<float>(const DenoiserT<float>&, const NoiseSchedule&,
                                           const std::vector<LayerSite>&,
                                           const AdapterBankT<float>*, const Tensor<float>&,
                                           const TokenSequence&, int, std::uint64_t,
                                           const Tensor<float>*, const Tensor<float>*, Rng&,
                                           Tape<float>*);
template Tensor<double> example_loss<double>(const DenoiserT<double>&, const NoiseSchedule&,
                                             const std::vector<LayerSite>&,
                                             const AdapterBankT<double>*, const Tensor<double>&,
                                             const TokenSequence&, int, std::uint64_t,
                                             const Tensor<double>*, const Tensor<double>*, Rng&,
                                             Tape<double>*);

double adapter_loss(const Denoiser& den, const NoiseSchedule& sched,
                    const std::vector<LayerSite>& sites, AdapterBank& bank,
                    const TrainConfig& cfg, const std::vector<TrainSample>& batch,
                    BatchStats* stats) {
    cfg.validate();
    require(!batch.empty(), ErrorCode::config, "batch is empty");
    const float inv_b = 1.0f / float(batch.size());
    double total = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const TrainSample& sample = batch[i];
        Rng rng(sample.seed);
        const CondDrop drop = draw_cond_drop(rng.uniform(), cfg);
        const int t = draw_timestep(rng, sched.T);
        const bool image_cond = drop == CondDrop::none || drop == CondDrop::text_only;
        const bool text_cond = drop == CondDrop::none || drop == CondDrop::image_only;

        TensorF ref, msk;
        std::uint64_t cache_seed = 0;
        if (image_cond) {
            // Fresh augmentation every step; the cache must follow the
            // augmented reference, so it is rebuilt per sample.
            auto aug = augment_reference(sample.triplet.reference, sample.triplet.mask, rng);
            ref = std::move(aug.first);
            msk = std::move(aug.second);
            cache_seed = rng.next_u64();
        }

        Tape<float> tape;
        Tensor<float> loss = example_loss<float>(
            den, sched, sites, image_cond ? &bank : nullptr, sample.triplet.target,
            text_cond ? sample.triplet.caption : TokenSequence::null_prompt(), t, cache_seed,
            image_cond ? &ref : nullptr, image_cond ? &msk : nullptr, rng, &tape);
        const double value = double(loss.data()[0]);
        require(std::isfinite(value), ErrorCode::numeric,
                "non-finite loss " + std::to_string(value) + " on batch element " +
                    std::to_string(i) + " (t=" + std::to_string(t) + ", seed=" +
                    std::to_string(sample.seed) + ")");
        // Scale before backprop so gradients accumulate the batch mean.
        Tensor<float> scaled = affine(loss, inv_b, 0.0f, &tape);
        tape.backward(scaled);
        total += value;

        if (stats) {
            ++stats->samples;
            stats->joint_dropped += drop == CondDrop::joint;
            stats->text_dropped += drop == CondDrop::text_only || drop == CondDrop::joint;
            stats->image_dropped += drop == CondDrop::image_only || drop == CondDrop::joint;
            stats->timesteps.push_back(t);
        }
    }
    return total / double(batch.size());
}

TrainResult train_adapters(const Denoiser& den, const NoiseSchedule& sched,
                           const std::vector<LayerSite>& sites, AdapterBank& bank,
                           const std::vector<Triplet>& dataset, const TrainConfig& cfg,
                           BatchStats* stats) {
    cfg.validate();
    require(!dataset.empty(), ErrorCode::config, "dataset is empty");
    require(!bank.sites.empty(), ErrorCode::config, "adapter bank has no sites");

    std::vector<Tensor<float>*> params;
    std::vector<std::string> names;
    for (auto& site : bank.sites) {
        const std::string prefix =
            "adapter." + std::string(region_name(site.site.region)) + "." +
            std::to_string(site.site.index) + ".";
        for (auto [tensor, leaf] : {std::pair{&site.wq, "wq"}, std::pair{&site.wk, "wk"},
                                    std::pair{&site.wv, "wv"}, std::pair{&site.wproj, "wproj"}}) {
            tensor->set_requires_grad(true);
            params.push_back(tensor);
            names.push_back(prefix + leaf);
        }
    }

    Rng order_rng(Rng::mix(cfg.seed, 1));
    const std::uint64_t sample_base = Rng::mix(cfg.seed, 2);
    long long counter = 0;
    auto result = run_steps(params, std::move(names), cfg, [&](int) {
        std::vector<TrainSample> batch;
        batch.reserve(std::size_t(cfg.batch_size));
        for (int j = 0; j < cfg.batch_size; ++j) {
            const std::size_t idx = std::size_t(order_rng.below(dataset.size()));
            batch.push_back({dataset[idx], Rng::mix(sample_base, std::uint64_t(counter++))});
        }
        return adapter_loss(den, sched, sites, bank, cfg, batch, stats);
    });
    for (Tensor<float>* p : params)
        p->set_requires_grad(false);
    return result;
}

TrainResult pretrain_base(Denoiser& den, const NoiseSchedule& sched,
                          const std::vector<Triplet>& dataset, const TrainConfig& cfg,
                          BatchStats* stats) {
    cfg.validate();
    require(!dataset.empty(), ErrorCode::config, "dataset is empty");
    require(sched.T == den.config().time_steps, ErrorCode::config,
            "schedule length does not match the denoiser");

    den.set_params_require_grad(true);
    std::vector<Tensor<float>*> params;
    std::vector<std::string> names;
    for (auto& [name, tensor] : den.params()) {
        params.push_back(tensor);
        names.push_back(name);
    }

    Rng order_rng(Rng::mix(cfg.seed, 1));
    const std::uint64_t sample_base = Rng::mix(cfg.seed, 2);
    long long counter = 0;
    const float inv_b = 1.0f / float(cfg.batch_size);
    auto result = run_steps(params, std::move(names), cfg, [&](int step) {
        double total = 0;
        for (int j = 0; j < cfg.batch_size; ++j) {
            const Triplet& triplet = dataset[std::size_t(order_rng.below(dataset.size()))];
            Rng rng(Rng::mix(sample_base, std::uint64_t(counter++)));
            const bool drop_text = rng.uniform() < double(cfg.text_drop_p);
            const int t = draw_timestep(rng, sched.T);
            Tape<float> tape;
            Tensor<float> loss = example_loss<float>(
                den, sched, {}, nullptr, triplet.target,
                drop_text ? TokenSequence::null_prompt() : triplet.caption, t, 0, nullptr,
                nullptr, rng, &tape);
            const double value = double(loss.data()[0]);
            require(std::isfinite(value), ErrorCode::numeric,
                    "non-finite loss " + std::to_string(value) + " at step " +
                        std::to_string(step));
            Tensor<float> scaled = affine(loss, inv_b, 0.0f, &tape);
            tape.backward(scaled);
            total += value;
            if (stats) {
                ++stats->samples;
                stats->text_dropped += drop_text;
                stats->timesteps.push_back(t);
            }
        }
        return total / double(cfg.batch_size);
    });
    den.set_params_require_grad(false);
    return result;
}

void write_loss_csv(const std::string& path, const std::vector<LossPoint>& curve) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorCode::io, "cannot write loss log " + path);
    out << "step,loss,lr\n";
    for (const LossPoint& p : curve) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.9g\n", p.step, p.loss, double(p.lr));
        out << buf;
    }
    require(out.good(), ErrorCode::io, "cannot write loss log " + path);
}

std::vector<LossPoint> read_loss_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorCode::io, "cannot read loss log " + path);
    std::string line;
    require(bool(std::getline(in, line)) && line == "step,loss,lr", ErrorCode::format,
            "loss log missing 'step,loss,lr' header: " + path);
    std::vector<LossPoint> curve;
    while (std::getline(in, line)) {
        const std::size_t c1 = line.find(',');
        const std::size_t c2 = c1 == std::string::npos ? c1 : line.find(',', c1 + 1);
        require(c2 != std::string::npos && line.find(',', c2 + 1) == std::string::npos,
                ErrorCode::format, "loss log row needs exactly three fields: " + line);
        LossPoint p;
        const char* s = line.c_str();
        char* end = nullptr;
        p.step = int(std::strtol(s, &end, 10));
        bool ok = end == s + c1;
        p.loss = std::strtod(s + c1 + 1, &end);
        ok = ok && end == s + c2;
        p.lr = std::strtof(s + c2 + 1, &end);
        ok = ok && end == s + line.size();
        require(ok, ErrorCode::format, "unparsable loss log row: " + line);
        curve.push_back(p);
    }
    return curve;
}

} // namespace dc
