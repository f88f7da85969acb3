#pragma once
// Forward noising schedule and deterministic reverse sampling with
// classifier-free guidance over the text and cached-image conditions.
//
// Guidance, evaluated as one affine combination of reused denoiser outputs
// so the collapse identities hold exactly:
//   joint:    eps = (1-s)*eps(none,none) + s*eps(img,txt)
//   combined: eps = (1-sI)*eps(none,none) + (sI-sT)*eps(img,none)
//                 + sT*eps(img,txt)
// "image condition absent" means adapters disabled; "text absent" means the
// null prompt.

#include <cstdint>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "dc/adapter.hpp"
#include "dc/cache.hpp"
#include "dc/denoiser.hpp"
#include "dc/rng.hpp"
#include "dc/tensor.hpp"
#include "dc/text.hpp"

namespace dc {

struct NoiseSchedule {
    int T = 1000;
    std::vector<double> betas;     // index 1..T (betas[0] unused, 0)
    std::vector<double> alpha_bar; // index 0..T, alpha_bar[0] == 1, strictly decreasing

    static NoiseSchedule linear(int T = 1000, double beta_first = 1e-4, double beta_last = 0.02);
    double abar(int t) const;
};

enum class GuidanceMode { joint, combined };

GuidanceMode guidance_mode_from_name(const std::string& name); // config error if unknown
const char* guidance_mode_name(GuidanceMode m);

struct GuidanceConfig {
    GuidanceMode mode = GuidanceMode::joint;
    float s = 7.5f;              // joint scale
    float s_image = 7.5f;        // combined: image scale
    float s_text = 7.5f;         // combined: text scale
    int steps = 50;
    void validate() const;
    bool operator==(const GuidanceConfig&) const = default;
};

// x_t = sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps with eps ~ N(0,1) drawn
// elementwise from rng in flat order; returns (x_t, eps). t=0 (abar=1) is
// admitted as the exact zero-noise limit of the formula.
template <class S>
std::pair<Tensor<S>, Tensor<S>> add_noise(const NoiseSchedule& sched, const Tensor<S>& x0, int t,
                                          Rng& rng);

// One guided noise prediction at timestep t. Needs 2 denoiser evaluations in
// joint mode, 3 in combined mode, every call, so evaluation counters reflect
// the mode exactly.
template <class S>
Tensor<S> guided_eps(const DenoiserT<S>& den, const NoiseSchedule& sched, const Tensor<S>& x_t,
                     int t, const TokenSequence& text,
                     const std::type_identity_t<AdapterBankT<S>>* adapters,
                     const std::type_identity_t<FeatureCacheT<S>>* cache,
                     const GuidanceConfig& g,
                     const std::type_identity_t<ForwardHooksT<S>>* hooks = nullptr);

// Deterministic DDIM trajectory (eta = 0) over g.steps uniformly strided
// timesteps, x0-estimates clipped to [-1,1] each step, final output clamped
// to [-1,1]. Fully determined by (inputs, rng state).
template <class S>
Tensor<S> sample(const DenoiserT<S>& den, const NoiseSchedule& sched, const TokenSequence& prompt,
                 const std::type_identity_t<AdapterBankT<S>>* adapters,
                 const std::type_identity_t<FeatureCacheT<S>>* cache, const GuidanceConfig& g,
                 Rng& rng, const std::type_identity_t<ForwardHooksT<S>>* hooks = nullptr);

} // namespace dc
