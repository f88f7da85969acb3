#pragma once
// The feature cache: post-self-attention activations of selected sites,
// harvested from exactly one denoiser forward pass of the (optionally
// masked, lightly noised) reference image under the null prompt, plus the
// provenance needed to reproduce the build bit-for-bit.
//
// File format "DCCH", all integers little-endian:
//   magic "DCCH" | version u16 | site count u16
//   per site: region u8 | index u16 | N u32 | d u32 | N*d float32 payload
//   metadata: t u32 | seed u64 | masked u8 | image hash (SHA-256, 32 bytes)
//   trailing CRC32 of everything before it

#include <array>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "dc/denoiser.hpp"
#include "dc/rng.hpp"
#include "dc/tensor.hpp"
#include "dc/text.hpp"

namespace dc {

struct NoiseSchedule; // sampler.hpp

template <class S> struct FeatureCacheT {
    std::vector<std::pair<LayerSite, Tensor<S>>> sites; // ordered as built
    std::uint32_t t = 1;
    std::uint64_t seed = 0;
    bool masked = false;
    std::array<std::uint8_t, 32> image_hash{};

    const Tensor<S>* find(const LayerSite& s) const {
        for (const auto& [site, feat] : sites)
            if (site.same_block(s)) return &feat;
        return nullptr;
    }
};

using FeatureCache = FeatureCacheT<float>;

// One null-prompt denoiser forward at timestep t over I_ref + n_t, where n_t
// comes from the schedule at t with noise drawn from a generator seeded with
// `seed` (stored in metadata, so rebuilds are bit-identical). mask, when
// given, whitens background pixels before noising. Works at any scalar; the
// float instantiation is the serializable production cache.
template <class S>
FeatureCacheT<S> build_cache(const DenoiserT<S>& den, const NoiseSchedule& sched,
                             const Tensor<S>& reference, const std::type_identity_t<Tensor<S>>* mask,
                             const std::vector<LayerSite>& sites, int t, std::uint64_t seed);

// Unmasked convenience form (nullptr would not deduce S above).
template <class S>
FeatureCacheT<S> build_cache(const DenoiserT<S>& den, const NoiseSchedule& sched,
                             const Tensor<S>& reference, const std::vector<LayerSite>& sites,
                             int t, std::uint64_t seed) {
    return build_cache(den, sched, reference, static_cast<const Tensor<S>*>(nullptr), sites, t,
                       seed);
}

// Ablation-only variant that conditions the capture pass on a caption. The
// production builder above is text-free by construction; this exists solely
// so sweeps can measure what captioned caching would have done.
template <class S>
FeatureCacheT<S> build_cache_with_prompt(const DenoiserT<S>& den, const NoiseSchedule& sched,
                                         const Tensor<S>& reference, const std::type_identity_t<Tensor<S>>* mask,
                                         const TokenSequence& prompt,
                                         const std::vector<LayerSite>& sites, int t,
                                         std::uint64_t seed);

std::vector<std::uint8_t> encode_cache(const FeatureCache& c);
FeatureCache decode_cache(const std::vector<std::uint8_t>& bytes);
std::size_t save_cache(const std::string& path, const FeatureCache& c); // bytes written
FeatureCache load_cache(const std::string& path);

// The one-time personalization cost: always exactly one denoiser forward
// pass, plus sum(N_L * d_L) floats of storage.
struct PersonalizationCost {
    int denoiser_forward_passes = 1;
    long long cached_floats = 0;
};
PersonalizationCost personalization_cost(const DenoiserConfig& cfg,
                                         const std::vector<LayerSite>& sites);

} // namespace dc
