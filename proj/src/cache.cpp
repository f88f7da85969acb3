#include "dc/cache.hpp"

#include <cstring>

#include "dc/common.hpp"
#include "dc/hashes.hpp"
#include "dc/sampler.hpp"
#include "dc/serialize.hpp"

namespace dc {

namespace {

constexpr char kMagic[4] = {'D', 'C', 'C', 'H'};
constexpr std::uint16_t kVersion = 1;

// Background -> exact white where mask == 0; returns a fresh tensor.
template <class S> Tensor<S> apply_mask(const Tensor<S>& img, const Tensor<S>& mask) {
    require(img.rank() == 3 && img.dim(0) == 3, ErrorCode::dimension,
            "reference must be [3,h,w]");
    require(mask.rank() == 2 && mask.dim(0) == img.dim(1) && mask.dim(1) == img.dim(2),
            ErrorCode::dimension, "mask must be [h,w] matching the reference");
    Tensor<S> out = img.clone();
    const S* m = mask.data();
    S* p = out.data();
    std::int64_t hw = std::int64_t(img.dim(1)) * img.dim(2);
    for (std::int64_t i = 0; i < hw; ++i) {
        require(m[i] == S(0) || m[i] == S(1), ErrorCode::config, "mask must be binary");
        if (m[i] == S(0))
            for (int c = 0; c < 3; ++c) p[c * hw + i] = S(1); // white in [-1,1] space
    }
    return out;
}

} // namespace

template <class S>
FeatureCacheT<S> build_cache_with_prompt(const DenoiserT<S>& den, const NoiseSchedule& sched,
                                         const Tensor<S>& reference, const std::type_identity_t<Tensor<S>>* mask,
                                         const TokenSequence& prompt,
                                         const std::vector<LayerSite>& sites, int t,
                                         std::uint64_t seed) {
    require(!sites.empty(), ErrorCode::config, "cache site list is empty");
    require(t >= 1 && t <= sched.T, ErrorCode::config,
            "cache timestep out of range: " + std::to_string(t));
    for (std::int64_t i = 0; i < reference.numel(); ++i)
        require(reference.data()[i] >= S(-1) && reference.data()[i] <= S(1), ErrorCode::config,
                "reference pixels must lie in [-1,1]");

    Tensor<S> pre = mask ? apply_mask(reference, *mask) : reference;

    FeatureCacheT<S> cache;
    cache.t = std::uint32_t(t);
    cache.seed = seed;
    cache.masked = (mask != nullptr);
    {
        // Content identity of the (masked) pre-noise image: SHA-256 of its
        // float32 little-endian pixels.
        TensorF asf = pre.template cast<float>();
        cache.image_hash =
            Sha256::of(asf.data(), std::size_t(asf.numel()) * sizeof(float));
    }

    Rng rng(seed);
    auto [noised, eps] = add_noise(sched, pre, t, rng);
    (void)eps;

    DenoiserOutT<S> out = den.forward(noised, prompt, t, sites);
    for (const LayerSite& s : sites) {
        const Tensor<S>* feat = out.find(s);
        require(feat != nullptr, ErrorCode::config, "no tapped features for site " + s.str());
        Tensor<S> copy = feat->detach().clone();
        require(copy.all_finite(), ErrorCode::numeric,
                "non-finite activations at site " + s.str());
        cache.sites.emplace_back(s, std::move(copy));
    }
    return cache;
}

template <class S>
FeatureCacheT<S> build_cache(const DenoiserT<S>& den, const NoiseSchedule& sched,
                             const Tensor<S>& reference, const std::type_identity_t<Tensor<S>>* mask,
                             const std::vector<LayerSite>& sites, int t, std::uint64_t seed) {
    return build_cache_with_prompt(den, sched, reference, mask, TokenSequence::null_prompt(),
                                   sites, t, seed);
}

std::vector<std::uint8_t> encode_cache(const FeatureCache& c) {
    require(!c.sites.empty(), ErrorCode::config, "cannot serialize an empty cache");
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u16(out, kVersion);
    put_u16(out, std::uint16_t(c.sites.size()));
    for (const auto& [site, feat] : c.sites) {
        require(feat.rank() == 2, ErrorCode::config, "cache features must be rank-2");
        put_u8(out, std::uint8_t(site.region));
        put_u16(out, std::uint16_t(site.index));
        put_u32(out, std::uint32_t(feat.dim(0)));
        put_u32(out, std::uint32_t(feat.dim(1)));
        const float* p = feat.data();
        for (std::int64_t i = 0; i < feat.numel(); ++i) put_f32(out, p[i]);
    }
    put_u32(out, c.t);
    put_u64(out, c.seed);
    put_u8(out, c.masked ? 1 : 0);
    out.insert(out.end(), c.image_hash.begin(), c.image_hash.end());
    put_u32(out, crc32_bytes(out.data(), out.size()));
    return out;
}

FeatureCache decode_cache(const std::vector<std::uint8_t>& bytes) {
    require(bytes.size() >= 4 + 2 + 2 + 4, ErrorCode::format, "cache file truncated");
    std::uint32_t stored_crc = 0;
    for (int i = 0; i < 4; ++i)
        stored_crc |= std::uint32_t(bytes[bytes.size() - 4 + i]) << (8 * i);
    require(stored_crc == crc32_bytes(bytes.data(), bytes.size() - 4), ErrorCode::format,
            "cache checksum mismatch");

    ByteReader r(bytes.data(), bytes.size() - 4);
    char magic[4];
    r.bytes(magic, 4);
    require(std::memcmp(magic, kMagic, 4) == 0, ErrorCode::format, "bad cache magic");
    std::uint16_t version = r.u16();
    require(version == kVersion, ErrorCode::format,
            "unsupported cache version " + std::to_string(version));
    std::uint16_t count = r.u16();
    require(count >= 1, ErrorCode::format, "cache has no sites");

    FeatureCache cache;
    for (int i = 0; i < count; ++i) {
        std::uint8_t region = r.u8();
        require(region <= 2, ErrorCode::format, "bad cache site region");
        LayerSite site;
        site.region = Region(region);
        site.index = r.u16();
        std::uint32_t n = r.u32();
        std::uint32_t d = r.u32();
        require(n >= 1 && d >= 1 && n <= (1u << 24) && d <= (1u << 24), ErrorCode::format,
                "bad cache feature shape");
        site.width = int(d);
        TensorF feat({int(n), int(d)});
        float* p = feat.data();
        for (std::uint64_t k = 0; k < std::uint64_t(n) * d; ++k) p[k] = r.f32();
        cache.sites.emplace_back(site, std::move(feat));
    }
    cache.t = r.u32();
    cache.seed = r.u64();
    std::uint8_t masked = r.u8();
    require(masked <= 1, ErrorCode::format, "bad cache masked flag");
    cache.masked = masked == 1;
    r.bytes(cache.image_hash.data(), 32);
    require(r.remaining() == 0, ErrorCode::format, "trailing bytes in cache file");
    return cache;
}

std::size_t save_cache(const std::string& path, const FeatureCache& c) {
    std::vector<std::uint8_t> bytes = encode_cache(c);
    write_file_bytes(path, bytes.data(), bytes.size());
    return bytes.size();
}

FeatureCache load_cache(const std::string& path) { return decode_cache(read_file_bytes(path)); }

PersonalizationCost personalization_cost(const DenoiserConfig& cfg,
                                         const std::vector<LayerSite>& sites) {
    require(!sites.empty(), ErrorCode::config, "site list is empty");
    // Enumerate attention blocks exactly as the denoiser does, keeping the
    // resolution each one runs at so we can count tokens per site.
    struct Entry {
        LayerSite site;
        int res;
    };
    std::vector<Entry> arch;
    int enc = 0;
    for (int l = 0; l < cfg.levels(); ++l)
        if (cfg.attention_at(l))
            for (int b = 0; b < cfg.blocks_per_resolution; ++b)
                arch.push_back({{Region::encoder, enc++, cfg.width(l)}, cfg.resolution(l)});
    arch.push_back(
        {{Region::middle, 0, cfg.width(cfg.levels() - 1)}, cfg.resolution(cfg.levels() - 1)});
    int dec = 0;
    for (int l = cfg.levels() - 1; l >= 0; --l)
        if (cfg.attention_at(l))
            for (int b = 0; b < cfg.blocks_per_resolution; ++b)
                arch.push_back({{Region::decoder, dec++, cfg.width(l)}, cfg.resolution(l)});

    PersonalizationCost cost;
    cost.denoiser_forward_passes = 1;
    for (const LayerSite& s : sites) {
        const Entry* hit = nullptr;
        for (const auto& e : arch)
            if (e.site.same_block(s)) hit = &e;
        require(hit != nullptr, ErrorCode::config,
                "site " + s.str() + " does not exist in this architecture");
        cost.cached_floats += 1ll * hit->res * hit->res * hit->site.width;
    }
    return cost;
}

template FeatureCacheT<float> build_cache<float>(const DenoiserT<float>&, const NoiseSchedule&,
                                                 const Tensor<float>&, const Tensor<float>*,
                                                 const std::vector<LayerSite>&, int,
                                                 std::uint64_t);
template FeatureCacheT<double> build_cache<double>(const DenoiserT<double>&, const NoiseSchedule&,
                                                   const Tensor<double>&, const Tensor<double>*,
                                                   const std::vector<LayerSite>&, int,
                                                   std::uint64_t);
template FeatureCacheT<float>
build_cache_with_prompt<float>(const DenoiserT<float>&, const NoiseSchedule&,
                               const Tensor<float>&, const Tensor<float>*, const TokenSequence&,
                               const std::vector<LayerSite>&, int, std::uint64_t);
template FeatureCacheT<double>
build_cache_with_prompt<double>(const DenoiserT<double>&, const NoiseSchedule&,
                                const Tensor<double>&, const Tensor<double>*,
                                const TokenSequence&, const std::vector<LayerSite>&, int,
                                std::uint64_t);

} // namespace dc
