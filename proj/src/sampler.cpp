#include "dc/sampler.hpp"

#include <cmath>
#include <cstdint>

#include "dc/common.hpp"

namespace dc {

NoiseSchedule NoiseSchedule::linear(int T, double beta_first, double beta_last) {
    require(T >= 1, ErrorCode::config, "schedule length must be >= 1");
    require(beta_first > 0.0 && beta_first <= beta_last && beta_last < 1.0, ErrorCode::config,
            "betas must satisfy 0 < first <= last < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.assign(std::size_t(T) + 1, 0.0);
    s.alpha_bar.assign(std::size_t(T) + 1, 1.0);
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        double frac = (T == 1) ? 0.0 : double(t - 1) / double(T - 1);
        s.betas[t] = beta_first + (beta_last - beta_first) * frac;
        prod *= 1.0 - s.betas[t];
        s.alpha_bar[t] = prod;
    }
    return s;
}

double NoiseSchedule::abar(int t) const {
    require(t >= 0 && t <= T, ErrorCode::config, "timestep out of range: " + std::to_string(t));
    return alpha_bar[std::size_t(t)];
}

GuidanceMode guidance_mode_from_name(const std::string& name) {
    if (name == "joint") return GuidanceMode::joint;
    if (name == "combined") return GuidanceMode::combined;
    fail(ErrorCode::config, "unknown guidance mode: " + name);
}

const char* guidance_mode_name(GuidanceMode m) {
    return m == GuidanceMode::joint ? "joint" : "combined";
}

void GuidanceConfig::validate() const {
    require(steps >= 1, ErrorCode::config, "sampling needs at least one step");
    require(std::isfinite(s) && std::isfinite(s_image) && std::isfinite(s_text),
            ErrorCode::config, "guidance scales must be finite");
}

template <class S>
std::pair<Tensor<S>, Tensor<S>> add_noise(const NoiseSchedule& sched, const Tensor<S>& x0, int t,
                                          Rng& rng) {
    double ab = sched.abar(t); // also range-checks t; t=0 gives abar=1
    S c0 = S(std::sqrt(ab));
    S c1 = S(std::sqrt(1.0 - ab));
    Tensor<S> eps(x0.shape());
    Tensor<S> xt(x0.shape());
    const S* x = x0.data();
    S* e = eps.data();
    S* o = xt.data();
    for (std::int64_t i = 0; i < x0.numel(); ++i) {
        e[i] = S(rng.normal());
        o[i] = c0 * x[i] + c1 * e[i];
    }
    return {std::move(xt), std::move(eps)};
}

namespace {

// out[i] = sum_k coeff[k]*term[k][i], skipping zero coefficients entirely so
// that a single surviving unit coefficient reproduces its term bit-for-bit
// (no +0 absorption of negative zeros, no 0*x terms).
template <class S>
Tensor<S> affine_mix(const std::vector<std::pair<S, const Tensor<S>*>>& terms) {
    std::vector<std::pair<S, const S*>> live;
    for (const auto& [c, t] : terms)
        if (c != S(0)) live.emplace_back(c, t->data());
    require(!live.empty(), ErrorCode::config, "guidance coefficients are all zero");
    Tensor<S> out(terms.front().second->shape());
    S* o = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        S acc = live[0].first * live[0].second[i];
        for (std::size_t k = 1; k < live.size(); ++k) acc += live[k].first * live[k].second[i];
        o[i] = acc;
    }
    return out;
}

} // namespace

template <class S>
Tensor<S> guided_eps(const DenoiserT<S>& den, const NoiseSchedule& sched, const Tensor<S>& x_t,
                     int t, const TokenSequence& text,
                     const std::type_identity_t<AdapterBankT<S>>* adapters,
                     const std::type_identity_t<FeatureCacheT<S>>* cache,
                     const GuidanceConfig& g,
                     const std::type_identity_t<ForwardHooksT<S>>* hooks) {
    require(sched.T == den.config().time_steps, ErrorCode::config,
            "schedule length does not match the denoiser");
    const bool image_cond = adapters != nullptr && adapters->enabled;
    require(!image_cond || cache != nullptr, ErrorCode::cache,
            "image-conditioned sampling needs a feature cache");
    const AdapterBankT<S>* A = image_cond ? adapters : nullptr;
    const FeatureCacheT<S>* C = image_cond ? cache : nullptr;
    TokenSequence null = TokenSequence::null_prompt();

    if (g.mode == GuidanceMode::joint) {
        Tensor<S> e_u = den.forward(x_t, null, t).eps;
        Tensor<S> e_c = den.forward(x_t, text, t, {}, A, C, nullptr, hooks).eps;
        return affine_mix<S>({{S(1) - S(g.s), &e_u}, {S(g.s), &e_c}});
    }
    Tensor<S> e_u = den.forward(x_t, null, t).eps;
    Tensor<S> e_i = den.forward(x_t, null, t, {}, A, C, nullptr, hooks).eps;
    Tensor<S> e_c = den.forward(x_t, text, t, {}, A, C, nullptr, hooks).eps;
    return affine_mix<S>({{S(1) - S(g.s_image), &e_u},
                          {S(g.s_image) - S(g.s_text), &e_i},
                          {S(g.s_text), &e_c}});
}

template <class S>
Tensor<S> sample(const DenoiserT<S>& den, const NoiseSchedule& sched, const TokenSequence& prompt,
                 const std::type_identity_t<AdapterBankT<S>>* adapters,
                 const std::type_identity_t<FeatureCacheT<S>>* cache, const GuidanceConfig& g,
                 Rng& rng, const std::type_identity_t<ForwardHooksT<S>>* hooks) {
    g.validate();
    require(g.steps <= sched.T, ErrorCode::config, "more sampling steps than schedule timesteps");
    const int n = den.config().image_size;

    // Uniformly strided decreasing timestep ladder; tau[0] = 0 terminates it.
    std::vector<int> tau(std::size_t(g.steps) + 1, 0);
    for (int k = 1; k <= g.steps; ++k)
        tau[std::size_t(k)] = int(std::llround(double(k) * sched.T / g.steps));

    Tensor<S> x = Tensor<S>::randn({3, n, n}, rng);
    for (int k = g.steps; k >= 1; --k) {
        int t = tau[std::size_t(k)];
        int t_prev = tau[std::size_t(k) - 1];
        Tensor<S> eps = guided_eps(den, sched, x, t, prompt, adapters, cache, g, hooks);

        S sa = S(std::sqrt(sched.abar(t)));
        S sb = S(std::sqrt(1.0 - sched.abar(t)));
        S pa = S(std::sqrt(sched.abar(t_prev)));
        S pb = S(std::sqrt(1.0 - sched.abar(t_prev)));
        S* xv = x.data();
        const S* ev = eps.data();
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            S x0 = (xv[i] - sb * ev[i]) / sa;
            x0 = std::min(S(1), std::max(S(-1), x0)); // clip the x0 estimate
            xv[i] = pa * x0 + pb * ev[i];
        }
    }
    S* xv = x.data();
    for (std::int64_t i = 0; i < x.numel(); ++i)
        xv[i] = std::min(S(1), std::max(S(-1), xv[i]));
    return x;
}

template std::pair<Tensor<float>, Tensor<float>> add_noise<float>(const NoiseSchedule&,
                                                                  const Tensor<float>&, int, Rng&);
template std::pair<Tensor<double>, Tensor<double>>
add_noise<double>(const NoiseSchedule&, const Tensor<double>&, int, Rng&);
template Tensor<float> guided_eps<float>(const DenoiserT<float>&, const NoiseSchedule&,
                                         const Tensor<float>&, int, const TokenSequence&,
                                         const AdapterBankT<float>*, const FeatureCacheT<float>*,
                                         const GuidanceConfig&, const ForwardHooksT<float>*);
template Tensor<double> guided_eps<double>(const DenoiserT<double>&, const NoiseSchedule&,
                                           const Tensor<double>&, int, const TokenSequence&,
                                           const AdapterBankT<double>*,
                                           const FeatureCacheT<double>*, const GuidanceConfig&,
                                           const ForwardHooksT<double>*);
template Tensor<float> sample<float>(const DenoiserT<float>&, const NoiseSchedule&,
                                     const TokenSequence&, const AdapterBankT<float>*,
                                     const FeatureCacheT<float>*, const GuidanceConfig&, Rng&,
                                     const ForwardHooksT<float>*);
template Tensor<double> sample<double>(const DenoiserT<double>&, const NoiseSchedule&,
                                       const TokenSequence&, const AdapterBankT<double>*,
                                       const FeatureCacheT<double>*, const GuidanceConfig&, Rng&,
                                       const ForwardHooksT<double>*);

} // namespace dc
