#pragma once
// The frozen noise-prediction network: a micro U-Net over [3,H,W] images
// with sinusoidal timestep embedding, per-resolution self-attention +
// text cross-attention blocks, and addressable activation sites.
//
// Layout (widths base*mult[i] at resolutions image_size/2^i):
//   stem conv3x3
//   encoder: per level, blocks_per_resolution x (res block [+ attention when
//            the level's resolution is in attention_resolutions]), each
//            pushing a skip; stride-2 conv between levels
//   middle:  res block, attention, res block (deepest resolution)
//   decoder: mirror of the encoder; each res block pops + concatenates one
//            skip; nearest-2x upsample + conv between levels
//   final:   group norm, SiLU, zero-initialized conv3x3 to 3 channels
//
// Attention block (width d, token dim e), all residual in [N,d] space:
//   h = LN1(x); a_self = softmax(hWq (hWk)^T / sqrt(d)) hWv      <- tap point
//   a = adapter present ? adapt(h, a_self, cached_ref, w) : a_self
//   x += a Wo
//   x += softmax(LN2(x)Wcq (E Wck)^T / sqrt(d)) E Wcv Wco        (E: text)
//   x += FF(LN3(x))                                  (d -> 2d, SiLU, -> d)
//
// The network is templated on the scalar so the full forward/backward can
// also run in float64 for tight gradient verification; production uses
// float32. Instances are immutable after construction; forward passes are
// const and thread-safe, with an atomic evaluation counter backing the
// cost-accounting checks.

#include <array>
#include <atomic>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dc/ops.hpp"
#include "dc/rng.hpp"
#include "dc/serialize.hpp"
#include "dc/tensor.hpp"
#include "dc/text.hpp"

namespace dc {

struct DenoiserConfig {
    int image_size = 32;
    int base_channels = 32;
    std::vector<int> channel_multipliers = {1, 2, 4};
    int blocks_per_resolution = 2;
    std::vector<int> attention_resolutions = {16, 8}; // sizes with attention blocks
    int vocab_size = 27;  // Vocabulary::standard().size()
    int text_embed_dim = 32;
    int max_tokens = 16;
    int time_steps = 1000; // valid timestep inputs are 1..time_steps

    int levels() const { return int(channel_multipliers.size()); }
    int width(int level) const { return base_channels * channel_multipliers[size_t(level)]; }
    int resolution(int level) const { return image_size >> level; }
    bool attention_at(int level) const;
    bool operator==(const DenoiserConfig&) const = default;
    void validate() const; // throws config errors
};

enum class Region : std::uint8_t { encoder = 0, middle = 1, decoder = 2 };

const char* region_name(Region r);
Region region_from_name(const std::string& name); // config error if unknown

// Addressable attention block. index is 0-based within the region in forward
// order and counts attention blocks only. width is the channel count there.
struct LayerSite {
    Region region = Region::middle;
    int index = 0;
    int width = 0;

    bool same_block(const LayerSite& o) const { return region == o.region && index == o.index; }
    std::string str() const; // "decoder:2" (width omitted: identity is region+index)
    bool operator==(const LayerSite&) const = default;
};

enum class SitePolicy {
    encoder_only,
    middle_only,
    decoder_only,
    middle_decoder_every_2nd, // default: middle plus decoder attention 0,2,4,...
    encoder_middle_decoder,
    explicit_list,
};

SitePolicy site_policy_from_name(const std::string& name); // config error if unknown
const char* site_policy_name(SitePolicy p);

// Deterministic ordered site list for a policy; widths filled in. explicit
// sites are validated against the architecture and returned in given order.
std::vector<LayerSite> enumerate_sites(const DenoiserConfig& cfg, SitePolicy policy,
                                       const std::vector<LayerSite>& explicit_sites = {});

// All attention sites a config instantiates, in forward order (used by
// enumerate_sites and by site validation).
std::vector<LayerSite> all_attention_sites(const DenoiserConfig& cfg);

template <class S> struct AdapterBankT; // adapter.hpp
template <class S> struct FeatureCacheT; // cache.hpp

// Optional observers for a single forward pass (diagnostics only; never
// influence the computation). adapter_attention receives each adapter's
// softmax rows (N x M) in forward order.
template <class S> struct ForwardHooksT {
    std::function<void(const LayerSite&, const Tensor<S>&)> adapter_attention;
};
using ForwardHooks = ForwardHooksT<float>;

template <class S> struct DenoiserOutT {
    Tensor<S> eps;                                       // [3,H,W]
    std::vector<std::pair<LayerSite, Tensor<S>>> tapped; // forward order
    const Tensor<S>* find(const LayerSite& s) const;
};

namespace detail {

template <class S> struct ConvT {
    Tensor<S> w, b;
};

template <class S> struct ResBlockT {
    int cin = 0, cout = 0;
    Tensor<S> gn1_g, gn1_b, conv1_w, conv1_b, emb_w, emb_b;
    Tensor<S> gn2_g, gn2_b, conv2_w, conv2_b;
    Tensor<S> skip_w, skip_b; // 1x1 projection when cin != cout
    bool has_skip = false;
};

template <class S> struct AttnBlockT {
    int d = 0;
    Tensor<S> ln1_g, ln1_b, wq, wk, wv, wo;
    Tensor<S> ln2_g, ln2_b, cwq, cwk, cwv, cwo;
    Tensor<S> ln3_g, ln3_b, ff_w1, ff_b1, ff_w2, ff_b2;
};

template <class S> struct LevelT {
    std::vector<ResBlockT<S>> res;
    std::vector<AttnBlockT<S>> attn; // parallel to res, or empty
    ConvT<S> updown;                 // down conv (encoder) / post-upsample conv (decoder)
    bool has_updown = false;
};

} // namespace detail

template <class S> class DenoiserT {
public:
    DenoiserT(const DenoiserConfig& cfg, Rng& rng); // fresh initialization

    const DenoiserConfig& config() const { return cfg_; }

    // One denoising evaluation. Preconditions: x is [3,H,W]; 1 <= t <=
    // time_steps; adapters and cache both present or both absent (a bank
    // with enabled=false still counts as present); every enabled adapter
    // site must find a width-matching cache entry.
    DenoiserOutT<S> forward(const Tensor<S>& x, const TokenSequence& text, int t,
                            const std::vector<LayerSite>& taps = {},
                            const AdapterBankT<S>* adapters = nullptr,
                            const FeatureCacheT<S>* cache = nullptr, Tape<S>* tape = nullptr,
                            const ForwardHooksT<S>* hooks = nullptr) const;

    // Canonical parameter registry, fixed order, names region.index.param.
    std::vector<std::pair<std::string, Tensor<S>*>> params();
    std::vector<std::pair<std::string, const Tensor<S>*>> params() const;

    std::vector<NamedTensor> export_params() const;            // float32 copies
    void import_params(const std::vector<NamedTensor>& named); // exact name set required

    void set_params_require_grad(bool b);

    long long forward_count() const { return forward_count_.load(); }
    void reset_forward_count() const { forward_count_.store(0); }

private:
    Tensor<S> time_embedding(int t, Tape<S>* tape) const;
    Tensor<S> text_matrix(const TokenSequence& text, Tape<S>* tape) const;

    // Shared attention-block evaluation; site identifies the block for
    // adapter/cache/tap lookups.
    Tensor<S> run_attention(const detail::AttnBlockT<S>& blk, Tensor<S> x, const Tensor<S>& text,
                            const LayerSite& site, const std::vector<LayerSite>& taps,
                            const AdapterBankT<S>* adapters, const FeatureCacheT<S>* cache,
                            Tape<S>* tape, const ForwardHooksT<S>* hooks,
                            std::vector<std::pair<LayerSite, Tensor<S>>>& tapped) const;

    DenoiserConfig cfg_;
    detail::ConvT<S> stem_;
    Tensor<S> time_w1_, time_b1_, time_w2_, time_b2_;
    Tensor<S> text_embed_; // vocab x e
    std::vector<detail::LevelT<S>> enc_;
    detail::ResBlockT<S> mid_res1_, mid_res2_;
    detail::AttnBlockT<S> mid_attn_;
    std::vector<detail::LevelT<S>> dec_; // stored deepest-first (forward order)
    Tensor<S> final_gn_g_, final_gn_b_;
    detail::ConvT<S> final_;
    mutable std::atomic<long long> forward_count_{0};
};

using Denoiser = DenoiserT<float>;
using DenoiserOut = DenoiserOutT<float>;

// Group count used by every normalization in the net: largest divisor of c
// that is <= 8, computed as gcd(c, 8).
int norm_groups(int channels);

// Sinusoidal embedding of an integer timestep, length dim (computed in
// float64 then cast, so float32 and float64 networks agree to rounding).
template <class S> Tensor<S> sinusoidal_embedding(int t, int dim);

} // namespace dc
