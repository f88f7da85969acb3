// Denoiser architecture: site enumeration, forward shapes, determinism,
// conditioning behavior, the adapter pass-through identity, and the named
// parameter registry with its checkpoint round-trip.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <regex>
#include <set>

#include "dc/adapter.hpp"
#include "dc/cache.hpp"
#include "dc/common.hpp"
#include "dc/denoiser.hpp"
#include "dc/rng.hpp"
#include "dc/sampler.hpp"
#include "dc/serialize.hpp"
#include "dc/text.hpp"

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

// Fill every parameter with small random values so outputs are nontrivial
// (fresh models have zero-initialized output projections).
void randomize(Denoiser& den, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, t] : den.params())
        for (std::int64_t i = 0; i < t->numel(); ++i)
            t->data()[i] = float(rng.normal()) * 0.05f;
}

bool same_bits(const TensorF& a, const TensorF& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data(), b.data(), sizeof(float) * std::size_t(a.numel())) == 0;
}

TensorF test_image(int n, std::uint64_t seed) {
    Rng rng(seed);
    TensorF x({3, n, n});
    for (std::int64_t i = 0; i < x.numel(); ++i)
        x.data()[i] = float(rng.uniform(-1.0, 1.0));
    return x;
}

} // namespace

TEST_CASE("default configuration instantiates the documented attention sites") {
    DenoiserConfig cfg;
    cfg.validate();
    // 32x32, widths 32/64/128 at resolutions 32/16/8; attention at 16 and 8.
    auto sites = all_attention_sites(cfg);
    REQUIRE(sites.size() == 9);
    CHECK(sites[0].str() == "encoder:0");
    CHECK(sites[0].width == 64);
    CHECK(sites[1].str() == "encoder:1");
    CHECK(sites[2].str() == "encoder:2");
    CHECK(sites[2].width == 128);
    CHECK(sites[3].width == 128);
    CHECK(sites[4].str() == "middle:0");
    CHECK(sites[4].width == 128);
    CHECK(sites[5].str() == "decoder:0");
    CHECK(sites[5].width == 128);
    CHECK(sites[6].width == 128);
    CHECK(sites[7].str() == "decoder:2");
    CHECK(sites[7].width == 64);
    CHECK(sites[8].width == 64);
}

TEST_CASE("site policies pick the documented subsets") {
    DenoiserConfig cfg;

    auto def = enumerate_sites(cfg, SitePolicy::middle_decoder_every_2nd);
    REQUIRE(def.size() == 3);
    CHECK(def[0].str() == "middle:0");
    CHECK(def[1].str() == "decoder:0");
    CHECK(def[2].str() == "decoder:2");

    CHECK(enumerate_sites(cfg, SitePolicy::middle_only).size() == 1);
    CHECK(enumerate_sites(cfg, SitePolicy::encoder_only).size() == 4);
    CHECK(enumerate_sites(cfg, SitePolicy::decoder_only).size() == 4);
    CHECK(enumerate_sites(cfg, SitePolicy::encoder_middle_decoder).size() == 9);

    LayerSite want{Region::decoder, 2, 0};
    auto ex = enumerate_sites(cfg, SitePolicy::explicit_list, {want});
    REQUIRE(ex.size() == 1);
    CHECK(ex[0].str() == "decoder:2");
    CHECK(ex[0].width == 64); // width filled in from the architecture

    LayerSite bogus{Region::decoder, 9, 0};
    CHECK(code_of([&] { enumerate_sites(cfg, SitePolicy::explicit_list, {bogus}); }) ==
          ErrorCode::config);
    CHECK(code_of([&] { enumerate_sites(cfg, SitePolicy::explicit_list, {}); }) ==
          ErrorCode::config);

    for (const char* name : {"encoder-only", "middle-only", "decoder-only",
                             "middle+decoder-every-2nd", "encoder+middle+decoder", "explicit"})
        CHECK(site_policy_name(site_policy_from_name(name)) == std::string(name));
    CHECK(code_of([&] { site_policy_from_name("everything"); }) == ErrorCode::config);
}

TEST_CASE("forward produces a finite [3,n,n] prediction and counted evaluations") {
    DenoiserConfig cfg;
    Rng rng(7);
    Denoiser den(cfg, rng);
    TensorF x = test_image(32, 1);

    den.reset_forward_count();
    auto out = den.forward(x, TokenSequence::null_prompt(), 500);
    CHECK(out.eps.rank() == 3);
    CHECK(out.eps.dim(0) == 3);
    CHECK(out.eps.dim(1) == 32);
    CHECK(out.eps.dim(2) == 32);
    CHECK(out.eps.all_finite());
    CHECK(den.forward_count() == 1);

    // Output projections start at zero, so a fresh model predicts exactly 0.
    for (std::int64_t i = 0; i < out.eps.numel(); ++i) CHECK(out.eps.data()[i] == 0.0f);
}

TEST_CASE("tapped features have token-grid by width shapes") {
    DenoiserConfig cfg;
    Rng rng(7);
    Denoiser den(cfg, rng);
    TensorF x = test_image(32, 2);

    auto sites = enumerate_sites(cfg, SitePolicy::middle_decoder_every_2nd);
    auto out = den.forward(x, TokenSequence::null_prompt(), 1, sites);
    REQUIRE(out.tapped.size() == 3);

    const TensorF* mid = out.find(sites[0]);
    REQUIRE(mid != nullptr);
    CHECK(mid->dim(0) == 64); // 8x8 tokens
    CHECK(mid->dim(1) == 128);

    const TensorF* d0 = out.find(sites[1]);
    REQUIRE(d0 != nullptr);
    CHECK(d0->dim(0) == 64);
    CHECK(d0->dim(1) == 128);

    const TensorF* d2 = out.find(sites[2]);
    REQUIRE(d2 != nullptr);
    CHECK(d2->dim(0) == 256); // 16x16 tokens
    CHECK(d2->dim(1) == 64);

    LayerSite bogus{Region::encoder, 11, 0};
    CHECK(code_of([&] { den.forward(x, TokenSequence::null_prompt(), 1, {bogus}); }) ==
          ErrorCode::config);
}

TEST_CASE("forward is bitwise deterministic and thread-count independent") {
    DenoiserConfig cfg;
    Rng rng(11);
    Denoiser den(cfg, rng);
    randomize(den, 21);
    TensorF x = test_image(32, 3);
    TokenSequence p = tokenize(Vocabulary::standard(), "a red circle on a gray background", 16);

    set_threads(1);
    TensorF serial = den.forward(x, p, 250).eps;
    set_threads(4);
    TensorF parallel = den.forward(x, p, 250).eps;
    TensorF again = den.forward(x, p, 250).eps;
    set_threads(0);

    CHECK(same_bits(serial, parallel));
    CHECK(same_bits(parallel, again));
    CHECK(serial.all_finite());
}

TEST_CASE("prompt and timestep both change the prediction of a non-degenerate model") {
    DenoiserConfig cfg;
    Rng rng(13);
    Denoiser den(cfg, rng);
    randomize(den, 5);
    TensorF x = test_image(32, 4);
    Vocabulary v = Vocabulary::standard();

    TensorF base = den.forward(x, TokenSequence::null_prompt(), 100).eps;
    TensorF red = den.forward(x, tokenize(v, "a red circle on a gray background", 16), 100).eps;
    TensorF blue = den.forward(x, tokenize(v, "a blue circle on a gray background", 16), 100).eps;
    TensorF late = den.forward(x, TokenSequence::null_prompt(), 900).eps;

    CHECK(!same_bits(base, red));
    CHECK(!same_bits(red, blue));
    CHECK(!same_bits(base, late));
}

TEST_CASE("input validation rejects malformed calls") {
    DenoiserConfig cfg;
    Rng rng(17);
    Denoiser den(cfg, rng);
    TensorF x = test_image(32, 5);
    TokenSequence null = TokenSequence::null_prompt();

    CHECK(code_of([&] { den.forward(test_image(16, 5), null, 1); }) == ErrorCode::dimension);
    CHECK(code_of([&] { den.forward(x, null, 0); }) == ErrorCode::config);
    CHECK(code_of([&] { den.forward(x, null, 1001); }) == ErrorCode::config);
    CHECK(code_of([&] { den.forward(x, TokenSequence{}, 1); }) == ErrorCode::config);

    TokenSequence bad;
    bad.ids = {0, 27}; // out of vocabulary
    CHECK(code_of([&] { den.forward(x, bad, 1); }) == ErrorCode::config);

    DenoiserConfig odd;
    odd.image_size = 18; // not divisible by the downsampling factor 4
    CHECK(code_of([&] { odd.validate(); }) == ErrorCode::config);
    DenoiserConfig badattn;
    badattn.attention_resolutions = {7};
    CHECK(code_of([&] { badattn.validate(); }) == ErrorCode::config);
}

TEST_CASE("pass-through adapters leave the prediction bit-identical") {
    DenoiserConfig cfg;
    Rng rng(19);
    Denoiser den(cfg, rng);
    randomize(den, 23); // non-degenerate model: every layer contributes

    auto sites = enumerate_sites(cfg, SitePolicy::middle_decoder_every_2nd);
    Rng arng(101);
    AdapterBank bank = init_passthrough<float>(sites, arng);

    NoiseSchedule sched = NoiseSchedule::linear(cfg.time_steps);
    TensorF ref = test_image(32, 6);
    FeatureCache cache = build_cache(den, sched, ref, sites, 1, 77);

    TensorF x = test_image(32, 7);
    TokenSequence p =
        tokenize(Vocabulary::standard(), "a green square on a navy background top left", 16);

    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        TensorF xi = test_image(32, 100 + seed);
        TensorF plain = den.forward(xi, p, 400).eps;
        TensorF adapted = den.forward(xi, p, 400, {}, &bank, &cache).eps;
        CHECK(same_bits(plain, adapted));
    }

    // One gradient step away from pass-through must break the identity.
    bank.sites[0].wproj.data()[0] += 1e-3f;
    TensorF plain = den.forward(x, p, 400).eps;
    TensorF adapted = den.forward(x, p, 400, {}, &bank, &cache).eps;
    CHECK(!same_bits(plain, adapted));
}

TEST_CASE("disabled adapter banks behave exactly like absent ones") {
    DenoiserConfig cfg;
    Rng rng(29);
    Denoiser den(cfg, rng);
    randomize(den, 31);

    auto sites = enumerate_sites(cfg, SitePolicy::middle_only);
    Rng arng(1);
    AdapterBank bank = init_passthrough<float>(sites, arng);
    for (auto& s : bank.sites) // arbitrary weights: must not matter when disabled
        s.wproj.data()[3] = 42.0f;
    bank.enabled = false;

    NoiseSchedule sched = NoiseSchedule::linear(cfg.time_steps);
    FeatureCache cache = build_cache(den, sched, test_image(32, 8), sites, 1, 5);

    TensorF x = test_image(32, 9);
    TensorF off = den.forward(x, TokenSequence::null_prompt(), 10, {}, &bank, &cache).eps;
    TensorF absent = den.forward(x, TokenSequence::null_prompt(), 10).eps;
    CHECK(same_bits(off, absent));
}

TEST_CASE("adapter and cache attachment is validated") {
    DenoiserConfig cfg;
    Rng rng(37);
    Denoiser den(cfg, rng);
    auto sites = enumerate_sites(cfg, SitePolicy::middle_decoder_every_2nd);
    Rng arng(2);
    AdapterBank bank = init_passthrough<float>(sites, arng);
    NoiseSchedule sched = NoiseSchedule::linear(cfg.time_steps);
    FeatureCache cache = build_cache(den, sched, test_image(32, 10), sites, 1, 5);
    TensorF x = test_image(32, 11);
    TokenSequence null = TokenSequence::null_prompt();

    // bank without cache (and vice versa)
    CHECK(code_of([&] { den.forward(x, null, 1, {}, &bank, nullptr); }) == ErrorCode::config);
    CHECK(code_of([&] { den.forward(x, null, 1, {}, nullptr, &cache); }) == ErrorCode::config);

    // cache missing a site the bank wants
    FeatureCache partial = cache;
    partial.sites.erase(partial.sites.begin()); // drop middle:0
    CHECK(code_of([&] { den.forward(x, null, 1, {}, &bank, &partial); }) == ErrorCode::cache);

    // cache holding a site no adapter consumes
    auto solo = enumerate_sites(cfg, SitePolicy::middle_only);
    Rng a2(3);
    AdapterBank small = init_passthrough<float>(solo, a2);
    CHECK(code_of([&] { den.forward(x, null, 1, {}, &small, &cache); }) == ErrorCode::cache);

    // cached features with the wrong width
    FeatureCache wrong = cache;
    wrong.sites[0].second = TensorF({64, 32});
    CHECK(code_of([&] { den.forward(x, null, 1, {}, &bank, &wrong); }) == ErrorCode::cache);

    // adapter at a site the architecture does not have
    AdapterBank stray = bank;
    stray.sites[0].site = LayerSite{Region::encoder, 99, 128};
    CHECK(code_of([&] { den.forward(x, null, 1, {}, &stray, &cache); }) == ErrorCode::config);
}

TEST_CASE("parameter registry uses region.index.name identifiers and stable pointers") {
    DenoiserConfig cfg;
    Rng rng(41);
    Denoiser den(cfg, rng);
    auto params = den.params();
    CHECK(params.size() > 50);

    std::regex pattern(R"((stem|time|text|encoder|middle|decoder|final)\.\d+(\.[a-z0-9_]+)+)");
    std::set<std::string> seen;
    for (auto& [name, t] : params) {
        CHECK(std::regex_match(name, pattern));
        CHECK(seen.insert(name).second); // unique
        CHECK(t->numel() > 0);
    }
    // Spot-check canonical names exist.
    for (const char* want :
         {"stem.0.w", "time.0.w1", "text.0.embed", "encoder.0.res.gn1.gamma", "encoder.0.attn.wq",
          "encoder.0.down.w", "middle.0.attn.cwk", "decoder.0.res.conv2.w", "decoder.0.up.w",
          "final.0.gn.gamma", "final.0.w"}) {
        bool found = false;
        for (auto& [name, t] : params) found = found || name == want;
        CHECK_MESSAGE(found, want);
    }

    // params() must expose the live tensors, not copies: mutating through the
    // registry must change the forward pass.
    TensorF x = test_image(32, 12);
    TensorF before = den.forward(x, TokenSequence::null_prompt(), 1).eps;
    for (auto& [name, t] : params)
        if (name == "final.0.b")
            for (std::int64_t i = 0; i < t->numel(); ++i) t->data()[i] = 1.0f;
    TensorF after = den.forward(x, TokenSequence::null_prompt(), 1).eps;
    CHECK(!same_bits(before, after));
}

TEST_CASE("checkpoint export and import round-trip bit-exactly") {
    DenoiserConfig cfg;
    Rng rng(43);
    Denoiser a(cfg, rng);
    randomize(a, 55);
    Rng rng2(44);
    Denoiser b(cfg, rng2); // different init

    auto named = a.export_params();
    b.import_params(named);

    TensorF x = test_image(32, 13);
    TokenSequence p = tokenize(Vocabulary::standard(), "a red star on a teal background", 16);
    CHECK(same_bits(a.forward(x, p, 123).eps, b.forward(x, p, 123).eps));

    // Serialized form round-trips through bytes unchanged.
    auto bytes = encode_tensors(named, false);
    auto back = decode_tensors(bytes);
    REQUIRE(back.size() == named.size());
    for (std::size_t i = 0; i < named.size(); ++i) {
        CHECK(back[i].name == named[i].name);
        CHECK(same_bits(back[i].tensor, named[i].tensor));
    }

    // Wrong name set and wrong shapes are rejected.
    auto renamed = named;
    renamed[0].name = "nonsense.0.w";
    CHECK(code_of([&] { b.import_params(renamed); }) == ErrorCode::config);
    auto reshaped = named;
    reshaped.pop_back();
    CHECK(code_of([&] { b.import_params(reshaped); }) == ErrorCode::config);
}

TEST_CASE("fresh initialization is reproducible from the seed") {
    DenoiserConfig cfg;
    Rng r1(99), r2(99), r3(100);
    Denoiser a(cfg, r1), b(cfg, r2), c(cfg, r3);
    auto pa = a.params(), pb = b.params(), pc = c.params();
    REQUIRE(pa.size() == pb.size());
    bool all_equal = true, any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        all_equal = all_equal && same_bits(*pa[i].second, *pb[i].second);
        any_diff = any_diff || !same_bits(*pa[i].second, *pc[i].second);
    }
    CHECK(all_equal);
    CHECK(any_diff);
}

TEST_CASE("time embedding is the standard sinusoid table") {
    TensorF e0 = sinusoidal_embedding<float>(0, 8);
    REQUIRE(e0.rank() == 2);
    CHECK(e0.dim(0) == 1);
    CHECK(e0.dim(1) == 8);
    for (int i = 0; i < 4; ++i) {
        CHECK(e0.data()[i] == 0.0f);     // sin(0)
        CHECK(e0.data()[4 + i] == 1.0f); // cos(0)
    }
    TensorF e1 = sinusoidal_embedding<float>(1, 8);
    CHECK(e1.data()[0] == doctest::Approx(std::sin(1.0)).epsilon(1e-6));
    CHECK(e1.data()[4] == doctest::Approx(std::cos(1.0)).epsilon(1e-6));
    // frequency decays geometrically across pairs
    CHECK(e1.data()[3] == doctest::Approx(std::sin(std::exp(-std::log(10000.0) * 3.0 / 4.0)))
                              .epsilon(1e-6));
    for (std::int64_t i = 0; i < e1.numel(); ++i) {
        CHECK(e1.data()[i] <= 1.0f);
        CHECK(e1.data()[i] >= -1.0f);
    }
}

TEST_CASE("alternate geometries keep shapes consistent") {
    // exercise single-level, repeated-width, and attention-everywhere cases
    struct Case {
        int size, base;
        std::vector<int> mult;
        int blocks;
        std::vector<int> attn;
    };
    for (const Case& c : {Case{16, 8, {1, 2}, 1, {8}}, Case{16, 4, {1, 1}, 2, {16, 8}},
                          Case{8, 4, {1}, 1, {8}}}) {
        DenoiserConfig cfg;
        cfg.image_size = c.size;
        cfg.base_channels = c.base;
        cfg.channel_multipliers = c.mult;
        cfg.blocks_per_resolution = c.blocks;
        cfg.attention_resolutions = c.attn;
        cfg.validate();
        Rng rng(3);
        Denoiser den(cfg, rng);
        TensorF x = test_image(c.size, 14);
        auto sites = all_attention_sites(cfg);
        REQUIRE(!sites.empty());
        auto out = den.forward(x, TokenSequence::null_prompt(), 1, sites);
        CHECK(out.eps.dim(1) == c.size);
        CHECK(out.eps.all_finite());
        CHECK(out.tapped.size() == sites.size());
        for (auto& [site, feat] : out.tapped) CHECK(feat.dim(1) == site.width);
    }
}
