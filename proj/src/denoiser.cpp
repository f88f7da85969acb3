#include "dc/denoiser.hpp"

#include <cmath>
#include <numeric>

#include "dc/adapter.hpp"
#include "dc/cache.hpp"
#include "dc/common.hpp"

namespace dc {

int norm_groups(int channels) { return std::gcd(channels, 8); }

bool DenoiserConfig::attention_at(int level) const {
    int r = resolution(level);
    for (int a : attention_resolutions)
        if (a == r) return true;
    return false;
}

void DenoiserConfig::validate() const {
    require(!channel_multipliers.empty(), ErrorCode::config, "channel_multipliers empty");
    int L = levels();
    require(base_channels >= 1, ErrorCode::config, "base_channels must be >= 1");
    for (int m : channel_multipliers)
        require(m >= 1, ErrorCode::config, "channel multipliers must be >= 1");
    require(blocks_per_resolution >= 1, ErrorCode::config, "blocks_per_resolution must be >= 1");
    int down = 1 << (L - 1);
    require(image_size >= 2 * down && image_size % down == 0, ErrorCode::config,
            "image_size must be divisible by 2^(levels-1)");
    for (int a : attention_resolutions) {
        bool found = false;
        for (int i = 0; i < L; ++i)
            if (resolution(i) == a) found = true;
        require(found, ErrorCode::config,
                "attention resolution " + std::to_string(a) + " not in the architecture");
    }
    require(vocab_size >= 2, ErrorCode::config, "vocab_size must be >= 2");
    require(text_embed_dim >= 1, ErrorCode::config, "text_embed_dim must be >= 1");
    require(max_tokens >= 1, ErrorCode::config, "max_tokens must be >= 1");
    require(time_steps >= 1, ErrorCode::config, "time_steps must be >= 1");
}

const char* region_name(Region r) {
    switch (r) {
    case Region::encoder: return "encoder";
    case Region::middle: return "middle";
    case Region::decoder: return "decoder";
    }
    return "?";
}

Region region_from_name(const std::string& name) {
    if (name == "encoder") return Region::encoder;
    if (name == "middle") return Region::middle;
    if (name == "decoder") return Region::decoder;
    fail(ErrorCode::config, "unknown region: " + name);
}

std::string LayerSite::str() const {
    return std::string(region_name(region)) + ":" + std::to_string(index);
}

const char* site_policy_name(SitePolicy p) {
    switch (p) {
    case SitePolicy::encoder_only: return "encoder-only";
    case SitePolicy::middle_only: return "middle-only";
    case SitePolicy::decoder_only: return "decoder-only";
    case SitePolicy::middle_decoder_every_2nd: return "middle+decoder-every-2nd";
    case SitePolicy::encoder_middle_decoder: return "encoder+middle+decoder";
    case SitePolicy::explicit_list: return "explicit";
    }
    return "?";
}

SitePolicy site_policy_from_name(const std::string& name) {
    for (SitePolicy p :
         {SitePolicy::encoder_only, SitePolicy::middle_only, SitePolicy::decoder_only,
          SitePolicy::middle_decoder_every_2nd, SitePolicy::encoder_middle_decoder,
          SitePolicy::explicit_list})
        if (name == site_policy_name(p)) return p;
    fail(ErrorCode::config, "unknown site policy: " + name);
}

std::vector<LayerSite> all_attention_sites(const DenoiserConfig& cfg) {
    cfg.validate();
    std::vector<LayerSite> out;
    int L = cfg.levels(), B = cfg.blocks_per_resolution;
    int idx = 0;
    for (int i = 0; i < L; ++i)
        if (cfg.attention_at(i))
            for (int b = 0; b < B; ++b) out.push_back({Region::encoder, idx++, cfg.width(i)});
    out.push_back({Region::middle, 0, cfg.width(L - 1)});
    idx = 0;
    for (int i = L - 1; i >= 0; --i)
        if (cfg.attention_at(i))
            for (int b = 0; b < B; ++b) out.push_back({Region::decoder, idx++, cfg.width(i)});
    return out;
}

std::vector<LayerSite> enumerate_sites(const DenoiserConfig& cfg, SitePolicy policy,
                                       const std::vector<LayerSite>& explicit_sites) {
    std::vector<LayerSite> all = all_attention_sites(cfg);
    std::vector<LayerSite> out;
    switch (policy) {
    case SitePolicy::encoder_only:
        for (const auto& s : all)
            if (s.region == Region::encoder) out.push_back(s);
        break;
    case SitePolicy::middle_only:
        for (const auto& s : all)
            if (s.region == Region::middle) out.push_back(s);
        break;
    case SitePolicy::decoder_only:
        for (const auto& s : all)
            if (s.region == Region::decoder) out.push_back(s);
        break;
    case SitePolicy::middle_decoder_every_2nd:
        for (const auto& s : all)
            if (s.region == Region::middle ||
                (s.region == Region::decoder && s.index % 2 == 0))
                out.push_back(s);
        break;
    case SitePolicy::encoder_middle_decoder:
        out = all;
        break;
    case SitePolicy::explicit_list:
        for (const auto& want : explicit_sites) {
            const LayerSite* hit = nullptr;
            for (const auto& s : all)
                if (s.same_block(want)) hit = &s;
            require(hit != nullptr, ErrorCode::config,
                    "site " + want.str() + " does not exist in this architecture");
            out.push_back(*hit);
        }
        break;
    }
    require(!out.empty(), ErrorCode::config,
            std::string("site policy '") + site_policy_name(policy) + "' selects no sites");
    return out;
}

template <class S> Tensor<S> sinusoidal_embedding(int t, int dim) {
    require(dim >= 2 && dim % 2 == 0, ErrorCode::config, "time embedding dim must be even");
    Tensor<S> out({1, dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        out.data()[i] = S(std::sin(double(t) * freq));
        out.data()[half + i] = S(std::cos(double(t) * freq));
    }
    return out;
}

template <class S> const Tensor<S>* DenoiserOutT<S>::find(const LayerSite& s) const {
    for (const auto& [site, feat] : tapped)
        if (site.same_block(s)) return &feat;
    return nullptr;
}

namespace {

using detail::AttnBlockT;
using detail::ConvT;
using detail::LevelT;
using detail::ResBlockT;

template <class S> Tensor<S> randn_t(std::vector<int> shape, double std_dev, Rng& rng) {
    return Tensor<S>::randn(std::move(shape), rng, S(std_dev));
}

template <class S>
void init_conv(ConvT<S>& c, int oc, int ic, int k, Rng& rng, bool zero = false) {
    double std_dev = zero ? 0.0 : 1.0 / std::sqrt(double(ic) * k * k);
    c.w = zero ? Tensor<S>::zeros({oc, ic, k, k}) : randn_t<S>({oc, ic, k, k}, std_dev, rng);
    c.b = Tensor<S>::zeros({oc});
}

template <class S> void init_res(ResBlockT<S>& r, int cin, int cout, int emb_dim, Rng& rng) {
    r.cin = cin;
    r.cout = cout;
    r.gn1_g = Tensor<S>::full({cin}, S(1));
    r.gn1_b = Tensor<S>::zeros({cin});
    r.conv1_w = randn_t<S>({cout, cin, 3, 3}, 1.0 / std::sqrt(9.0 * cin), rng);
    r.conv1_b = Tensor<S>::zeros({cout});
    r.emb_w = randn_t<S>({emb_dim, cout}, 1.0 / std::sqrt(double(emb_dim)), rng);
    r.emb_b = Tensor<S>::zeros({cout});
    r.gn2_g = Tensor<S>::full({cout}, S(1));
    r.gn2_b = Tensor<S>::zeros({cout});
    // Zero second conv: every res block starts as identity (plus projection),
    // the conventional stabilizer for denoiser training.
    r.conv2_w = Tensor<S>::zeros({cout, cout, 3, 3});
    r.conv2_b = Tensor<S>::zeros({cout});
    r.has_skip = (cin != cout);
    if (r.has_skip) {
        r.skip_w = randn_t<S>({cout, cin, 1, 1}, 1.0 / std::sqrt(double(cin)), rng);
        r.skip_b = Tensor<S>::zeros({cout});
    }
}

template <class S> void init_attn(AttnBlockT<S>& a, int d, int text_dim, Rng& rng) {
    a.d = d;
    auto ones = [&](int n) { return Tensor<S>::full({n}, S(1)); };
    a.ln1_g = ones(d);
    a.ln1_b = Tensor<S>::zeros({d});
    a.wq = randn_t<S>({d, d}, 0.02, rng);
    a.wk = randn_t<S>({d, d}, 0.02, rng);
    a.wv = randn_t<S>({d, d}, 0.02, rng);
    a.wo = randn_t<S>({d, d}, 0.02, rng);
    a.ln2_g = ones(d);
    a.ln2_b = Tensor<S>::zeros({d});
    a.cwq = randn_t<S>({d, d}, 0.02, rng);
    a.cwk = randn_t<S>({text_dim, d}, 0.02, rng);
    a.cwv = randn_t<S>({text_dim, d}, 0.02, rng);
    a.cwo = randn_t<S>({d, d}, 0.02, rng);
    a.ln3_g = ones(d);
    a.ln3_b = Tensor<S>::zeros({d});
    a.ff_w1 = randn_t<S>({d, 2 * d}, 1.0 / std::sqrt(double(d)), rng);
    a.ff_b1 = Tensor<S>::zeros({2 * d});
    a.ff_w2 = randn_t<S>({2 * d, d}, 1.0 / std::sqrt(2.0 * d), rng);
    a.ff_b2 = Tensor<S>::zeros({d});
}

template <class S>
Tensor<S> run_res(const ResBlockT<S>& r, const Tensor<S>& x, const Tensor<S>& temb, Tape<S>* tp) {
    Tensor<S> h = group_norm(x, norm_groups(r.cin), r.gn1_g, r.gn1_b, tp);
    h = silu(h, tp);
    h = conv2d(h, r.conv1_w, r.conv1_b, 1, 1, tp);
    Tensor<S> tb = linear(temb, r.emb_w, r.emb_b, tp); // 1 x cout
    h = add_channel_bias(h, reshape(tb, {r.cout}), tp);
    h = group_norm(h, norm_groups(r.cout), r.gn2_g, r.gn2_b, tp);
    h = silu(h, tp);
    h = conv2d(h, r.conv2_w, r.conv2_b, 1, 1, tp);
    Tensor<S> sc = r.has_skip ? conv2d(x, r.skip_w, r.skip_b, 1, 0, tp) : x;
    return add(sc, h, tp);
}

// [c,h,w] -> [h*w, c] token view and back.
template <class S> Tensor<S> to_tokens(const Tensor<S>& x, Tape<S>* tp) {
    return transpose2d(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}), tp);
}
template <class S> Tensor<S> from_tokens(const Tensor<S>& x, int c, int h, int w, Tape<S>* tp) {
    return reshape(transpose2d(x, tp), {c, h, w});
}

// Single-head attention helper: softmax(q k^T / sqrt(d)) v.
template <class S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, Tape<S>* tp) {
    S scale = S(1.0 / std::sqrt(double(q.dim(1))));
    Tensor<S> logits = affine(matmul_nt(q, k, tp), scale, S(0), tp);
    return matmul(softmax_rows(logits, tp), v, tp);
}

} // namespace

template <class S>
DenoiserT<S>::DenoiserT(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    int L = cfg_.levels(), B = cfg_.blocks_per_resolution;
    int emb_dim = 4 * cfg_.base_channels;

    time_w1_ = randn_t<S>({emb_dim, emb_dim}, 1.0 / std::sqrt(double(emb_dim)), rng);
    time_b1_ = Tensor<S>::zeros({emb_dim});
    time_w2_ = randn_t<S>({emb_dim, emb_dim}, 1.0 / std::sqrt(double(emb_dim)), rng);
    time_b2_ = Tensor<S>::zeros({emb_dim});
    text_embed_ = randn_t<S>({cfg_.vocab_size, cfg_.text_embed_dim}, 0.02, rng);

    init_conv(stem_, cfg_.width(0), 3, 3, rng);

    enc_.resize(size_t(L));
    for (int i = 0; i < L; ++i) {
        LevelT<S>& lvl = enc_[size_t(i)];
        for (int b = 0; b < B; ++b) {
            ResBlockT<S> r;
            init_res(r, cfg_.width(i), cfg_.width(i), emb_dim, rng);
            lvl.res.push_back(std::move(r));
            if (cfg_.attention_at(i)) {
                AttnBlockT<S> a;
                init_attn(a, cfg_.width(i), cfg_.text_embed_dim, rng);
                lvl.attn.push_back(std::move(a));
            }
        }
        if (i + 1 < L) {
            init_conv(lvl.updown, cfg_.width(i + 1), cfg_.width(i), 3, rng);
            lvl.has_updown = true;
        }
    }

    int wmid = cfg_.width(L - 1);
    init_res(mid_res1_, wmid, wmid, emb_dim, rng);
    init_attn(mid_attn_, wmid, cfg_.text_embed_dim, rng);
    init_res(mid_res2_, wmid, wmid, emb_dim, rng);

    dec_.resize(size_t(L));
    for (int i = L - 1; i >= 0; --i) {
        LevelT<S>& lvl = dec_[size_t(L - 1 - i)];
        for (int b = 0; b < B; ++b) {
            ResBlockT<S> r;
            init_res(r, 2 * cfg_.width(i), cfg_.width(i), emb_dim, rng);
            lvl.res.push_back(std::move(r));
            if (cfg_.attention_at(i)) {
                AttnBlockT<S> a;
                init_attn(a, cfg_.width(i), cfg_.text_embed_dim, rng);
                lvl.attn.push_back(std::move(a));
            }
        }
        if (i > 0) {
            init_conv(lvl.updown, cfg_.width(i - 1), cfg_.width(i), 3, rng);
            lvl.has_updown = true;
        }
    }

    final_gn_g_ = Tensor<S>::full({cfg_.width(0)}, S(1));
    final_gn_b_ = Tensor<S>::zeros({cfg_.width(0)});
    init_conv(final_, 3, cfg_.width(0), 3, rng, /*zero=*/true);
}

template <class S> Tensor<S> DenoiserT<S>::time_embedding(int t, Tape<S>* tape) const {
    Tensor<S> raw = sinusoidal_embedding<S>(t, 4 * cfg_.base_channels);
    Tensor<S> h = linear(raw, time_w1_, time_b1_, tape);
    h = silu(h, tape);
    return linear(h, time_w2_, time_b2_, tape);
}

template <class S>
Tensor<S> DenoiserT<S>::text_matrix(const TokenSequence& text, Tape<S>* tape) const {
    require(!text.ids.empty(), ErrorCode::config, "token sequence must not be empty");
    require(int(text.ids.size()) <= cfg_.max_tokens, ErrorCode::config,
            "token sequence longer than max_tokens");
    for (int id : text.ids)
        require(id >= 0 && id < cfg_.vocab_size, ErrorCode::config,
                "token id out of vocabulary range");
    Tensor<S> tok = gather_rows(text_embed_, text.ids, tape); // T x e
    Tensor<S> pooled = mean_rows(tok, tape);                  // 1 x e summary token
    return concat_rows(pooled, tok, tape);                    // (T+1) x e
}

template <class S>
Tensor<S> DenoiserT<S>::run_attention(const AttnBlockT<S>& blk, Tensor<S> x,
                                      const Tensor<S>& text, const LayerSite& site,
                                      const std::vector<LayerSite>& taps,
                                      const AdapterBankT<S>* adapters,
                                      const FeatureCacheT<S>* cache, Tape<S>* tape,
                                      const ForwardHooksT<S>* hooks,
                                      std::vector<std::pair<LayerSite, Tensor<S>>>& tapped) const {
    const int c = x.dim(0), hh = x.dim(1), ww = x.dim(2);
    Tensor<S> xs = to_tokens(x, tape); // N x d

    Tensor<S> h = layer_norm(xs, blk.ln1_g, blk.ln1_b, tape);
    Tensor<S> a_self = attention(matmul(h, blk.wq, tape), matmul(h, blk.wk, tape),
                                 matmul(h, blk.wv, tape), tape);

    for (const LayerSite& want : taps)
        if (want.same_block(site)) tapped.emplace_back(site, a_self);

    Tensor<S> a = a_self;
    if (adapters && adapters->enabled) {
        if (const AdapterSiteT<S>* aw = adapters->find(site)) {
            require(aw->site.width == blk.d, ErrorCode::config,
                    "adapter width mismatch at site " + site.str());
            const Tensor<S>* ref = cache ? cache->find(site) : nullptr;
            require(ref != nullptr, ErrorCode::cache,
                    "cache has no features for adapter site " + site.str());
            Tensor<S> rows;
            a = adapt(h, a_self, *ref, *aw, tape,
                      hooks && hooks->adapter_attention ? &rows : nullptr);
            if (hooks && hooks->adapter_attention) hooks->adapter_attention(site, rows);
        }
    }
    xs = add(xs, matmul(a, blk.wo, tape), tape);

    Tensor<S> hx = layer_norm(xs, blk.ln2_g, blk.ln2_b, tape);
    Tensor<S> cross = attention(matmul(hx, blk.cwq, tape), matmul(text, blk.cwk, tape),
                                matmul(text, blk.cwv, tape), tape);
    xs = add(xs, matmul(cross, blk.cwo, tape), tape);

    Tensor<S> hf = layer_norm(xs, blk.ln3_g, blk.ln3_b, tape);
    Tensor<S> f = silu(linear(hf, blk.ff_w1, blk.ff_b1, tape), tape);
    f = linear(f, blk.ff_w2, blk.ff_b2, tape);
    xs = add(xs, f, tape);

    return from_tokens(xs, c, hh, ww, tape);
}

template <class S>
DenoiserOutT<S> DenoiserT<S>::forward(const Tensor<S>& x, const TokenSequence& text, int t,
                                      const std::vector<LayerSite>& taps,
                                      const AdapterBankT<S>* adapters,
                                      const FeatureCacheT<S>* cache, Tape<S>* tape,
                                      const ForwardHooksT<S>* hooks) const {
    require(x.rank() == 3 && x.dim(0) == 3 && x.dim(1) == cfg_.image_size &&
                x.dim(2) == cfg_.image_size,
            ErrorCode::dimension, "denoiser input must be [3," +
                std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) + "]");
    require(t >= 1 && t <= cfg_.time_steps, ErrorCode::config,
            "timestep out of range: " + std::to_string(t));
    require((adapters == nullptr) == (cache == nullptr), ErrorCode::config,
            "adapters and cache must be both present or both absent");

    std::vector<LayerSite> arch = all_attention_sites(cfg_);
    auto is_arch_site = [&](const LayerSite& s) {
        for (const auto& a : arch)
            if (a.same_block(s)) return true;
        return false;
    };
    for (const LayerSite& s : taps)
        require(is_arch_site(s), ErrorCode::config, "unknown tap site " + s.str());
    if (adapters && adapters->enabled) {
        for (const auto& a : adapters->sites)
            require(is_arch_site(a.site), ErrorCode::config,
                    "unknown adapter site " + a.site.str());
        // Every cache entry must be consumed by an adapter, and each cached
        // width must match the architecture at its site.
        for (const auto& [cs, feat] : cache->sites) {
            require(adapters->find(cs) != nullptr, ErrorCode::cache,
                    "cache site " + cs.str() + " has no adapter");
            for (const auto& a : arch)
                if (a.same_block(cs))
                    require(feat.rank() == 2 && feat.dim(1) == a.width, ErrorCode::cache,
                            "cache width mismatch at site " + cs.str());
        }
    }

    forward_count_.fetch_add(1, std::memory_order_relaxed);

    Tensor<S> temb = time_embedding(t, tape);
    Tensor<S> tmat = text_matrix(text, tape);

    DenoiserOutT<S> out;
    int enc_attn_idx = 0, dec_attn_idx = 0;
    int L = cfg_.levels(), B = cfg_.blocks_per_resolution;

    Tensor<S> cur = conv2d(x, stem_.w, stem_.b, 1, 1, tape);
    std::vector<Tensor<S>> skips;
    for (int i = 0; i < L; ++i) {
        const LevelT<S>& lvl = enc_[size_t(i)];
        for (int b = 0; b < B; ++b) {
            cur = run_res(lvl.res[size_t(b)], cur, temb, tape);
            if (!lvl.attn.empty()) {
                LayerSite site{Region::encoder, enc_attn_idx++, cfg_.width(i)};
                cur = run_attention(lvl.attn[size_t(b)], cur, tmat, site, taps, adapters, cache,
                                    tape, hooks, out.tapped);
            }
            skips.push_back(cur);
        }
        if (lvl.has_updown) cur = conv2d(cur, lvl.updown.w, lvl.updown.b, 2, 1, tape);
    }

    cur = run_res(mid_res1_, cur, temb, tape);
    cur = run_attention(mid_attn_, cur, tmat, LayerSite{Region::middle, 0, cfg_.width(L - 1)},
                        taps, adapters, cache, tape, hooks, out.tapped);
    cur = run_res(mid_res2_, cur, temb, tape);

    for (int li = 0; li < L; ++li) {
        int i = L - 1 - li; // architecture level
        const LevelT<S>& lvl = dec_[size_t(li)];
        for (int b = 0; b < B; ++b) {
            Tensor<S> skip = skips.back();
            skips.pop_back();
            // Channel concat via the row view: [c,h,w] is row-major in c.
            int hh = cur.dim(1), ww = cur.dim(2);
            Tensor<S> cat = concat_rows(reshape(cur, {cur.dim(0), hh * ww}),
                                        reshape(skip, {skip.dim(0), hh * ww}), tape);
            cur = reshape(cat, {cur.dim(0) + skip.dim(0), hh, ww});
            cur = run_res(lvl.res[size_t(b)], cur, temb, tape);
            if (!lvl.attn.empty()) {
                LayerSite site{Region::decoder, dec_attn_idx++, cfg_.width(i)};
                cur = run_attention(lvl.attn[size_t(b)], cur, tmat, site, taps, adapters, cache,
                                    tape, hooks, out.tapped);
            }
        }
        if (lvl.has_updown) {
            cur = upsample2x(cur, tape);
            cur = conv2d(cur, lvl.updown.w, lvl.updown.b, 1, 1, tape);
        }
    }

    cur = group_norm(cur, norm_groups(cfg_.width(0)), final_gn_g_, final_gn_b_, tape);
    cur = silu(cur, tape);
    out.eps = conv2d(cur, final_.w, final_.b, 1, 1, tape);

    for (const LayerSite& want : taps)
        require(out.find(want) != nullptr, ErrorCode::config,
                "tap site " + want.str() + " not visited");
    return out;
}

// Registry walk in registration (= initialization) order.
template <class S>
std::vector<std::pair<std::string, Tensor<S>*>> DenoiserT<S>::params() {
    std::vector<std::pair<std::string, Tensor<S>*>> out;
    auto add = [&](const std::string& name, Tensor<S>& t) { out.emplace_back(name, &t); };
    auto add_res = [&](const std::string& p, ResBlockT<S>& r) {
        add(p + ".gn1.gamma", r.gn1_g);
        add(p + ".gn1.beta", r.gn1_b);
        add(p + ".conv1.w", r.conv1_w);
        add(p + ".conv1.b", r.conv1_b);
        add(p + ".emb.w", r.emb_w);
        add(p + ".emb.b", r.emb_b);
        add(p + ".gn2.gamma", r.gn2_g);
        add(p + ".gn2.beta", r.gn2_b);
        add(p + ".conv2.w", r.conv2_w);
        add(p + ".conv2.b", r.conv2_b);
        if (r.has_skip) {
            add(p + ".skip.w", r.skip_w);
            add(p + ".skip.b", r.skip_b);
        }
    };
    auto add_attn = [&](const std::string& p, AttnBlockT<S>& a) {
        add(p + ".ln1.gamma", a.ln1_g);
        add(p + ".ln1.beta", a.ln1_b);
        add(p + ".wq", a.wq);
        add(p + ".wk", a.wk);
        add(p + ".wv", a.wv);
        add(p + ".wo", a.wo);
        add(p + ".ln2.gamma", a.ln2_g);
        add(p + ".ln2.beta", a.ln2_b);
        add(p + ".cwq", a.cwq);
        add(p + ".cwk", a.cwk);
        add(p + ".cwv", a.cwv);
        add(p + ".cwo", a.cwo);
        add(p + ".ln3.gamma", a.ln3_g);
        add(p + ".ln3.beta", a.ln3_b);
        add(p + ".ff.w1", a.ff_w1);
        add(p + ".ff.b1", a.ff_b1);
        add(p + ".ff.w2", a.ff_w2);
        add(p + ".ff.b2", a.ff_b2);
    };

    add("time.0.w1", time_w1_);
    add("time.0.b1", time_b1_);
    add("time.0.w2", time_w2_);
    add("time.0.b2", time_b2_);
    add("text.0.embed", text_embed_);
    add("stem.0.w", stem_.w);
    add("stem.0.b", stem_.b);

    int L = cfg_.levels(), B = cfg_.blocks_per_resolution;
    int res_idx = 0, attn_idx = 0;
    for (int i = 0; i < L; ++i) {
        LevelT<S>& lvl = enc_[size_t(i)];
        for (int b = 0; b < B; ++b) {
            add_res("encoder." + std::to_string(res_idx++) + ".res", lvl.res[size_t(b)]);
            if (!lvl.attn.empty())
                add_attn("encoder." + std::to_string(attn_idx++) + ".attn", lvl.attn[size_t(b)]);
        }
        if (lvl.has_updown) {
            add("encoder." + std::to_string(i) + ".down.w", lvl.updown.w);
            add("encoder." + std::to_string(i) + ".down.b", lvl.updown.b);
        }
    }

    add_res("middle.0.res", mid_res1_);
    add_attn("middle.0.attn", mid_attn_);
    add_res("middle.1.res", mid_res2_);

    res_idx = attn_idx = 0;
    for (int li = 0; li < L; ++li) {
        LevelT<S>& lvl = dec_[size_t(li)];
        for (int b = 0; b < B; ++b) {
            add_res("decoder." + std::to_string(res_idx++) + ".res", lvl.res[size_t(b)]);
            if (!lvl.attn.empty())
                add_attn("decoder." + std::to_string(attn_idx++) + ".attn", lvl.attn[size_t(b)]);
        }
        if (lvl.has_updown) {
            add("decoder." + std::to_string(li) + ".up.w", lvl.updown.w);
            add("decoder." + std::to_string(li) + ".up.b", lvl.updown.b);
        }
    }

    add("final.0.gn.gamma", final_gn_g_);
    add("final.0.gn.beta", final_gn_b_);
    add("final.0.w", final_.w);
    add("final.0.b", final_.b);
    return out;
}

template <class S>
std::vector<std::pair<std::string, const Tensor<S>*>> DenoiserT<S>::params() const {
    auto mut = const_cast<DenoiserT<S>*>(this)->params();
    std::vector<std::pair<std::string, const Tensor<S>*>> out;
    out.reserve(mut.size());
    for (auto& [name, t] : mut) out.emplace_back(name, t);
    return out;
}

template <class S> std::vector<NamedTensor> DenoiserT<S>::export_params() const {
    std::vector<NamedTensor> out;
    for (const auto& [name, t] : params()) out.push_back({name, t->template cast<float>()});
    return out;
}

template <class S> void DenoiserT<S>::import_params(const std::vector<NamedTensor>& named) {
    auto reg = params();
    require(named.size() == reg.size(), ErrorCode::config,
            "checkpoint parameter count mismatch: " + std::to_string(named.size()) + " vs " +
                std::to_string(reg.size()));
    for (auto& [name, t] : reg) {
        const NamedTensor* hit = nullptr;
        for (const auto& nt : named)
            if (nt.name == name) hit = &nt;
        require(hit != nullptr, ErrorCode::config, "checkpoint missing parameter " + name);
        require(hit->tensor.shape() == t->shape(), ErrorCode::config,
                "checkpoint shape mismatch for " + name);
        const float* src = hit->tensor.data();
        S* dst = t->data();
        for (int64_t i = 0; i < t->numel(); ++i) dst[i] = S(src[i]);
    }
}

template <class S> void DenoiserT<S>::set_params_require_grad(bool b) {
    for (auto& [name, t] : params()) t->set_requires_grad(b);
}

template struct DenoiserOutT<float>;
template struct DenoiserOutT<double>;
template class DenoiserT<float>;
template class DenoiserT<double>;
template Tensor<float> sinusoidal_embedding<float>(int, int);
template Tensor<double> sinusoidal_embedding<double>(int, int);

} // namespace dc
