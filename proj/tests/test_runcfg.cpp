// Run configuration: canonical text form (fixed key order, lossless numbers,
// byte-stable re-encode), strict parsing (unknown keys, duplicates, malformed
// values), per-key overrides, file round trips, and validation delegation.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "dc/common.hpp"
#include "dc/runcfg.hpp"

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

std::filesystem::path temp_dir(const char* tag) {
    const auto dir = std::filesystem::temp_directory_path() /
                     (std::string("dc_runcfg_") + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

// One distinctive override per key; none may equal the default's encoding.
const std::vector<std::pair<std::string, std::string>>& overrides() {
    static const std::vector<std::pair<std::string, std::string>> kv = {
        {"seed", "18446744073709551615"},
        {"threads", "3"},
        {"dataset.size", "512"},
        {"denoiser.image_size", "64"},
        {"denoiser.base_channels", "12"},
        {"denoiser.channel_multipliers", "1,2,4,4"},
        {"denoiser.blocks_per_resolution", "3"},
        {"denoiser.attention_resolutions", "32,16"},
        {"denoiser.vocab_size", "99"},
        {"denoiser.text_embed_dim", "48"},
        {"denoiser.max_tokens", "12"},
        {"denoiser.time_steps", "100"},
        {"train.lr", "0.00300000003"},
        {"train.batch_size", "4"},
        {"train.steps", "123"},
        {"train.weight_decay", "0.0199999996"},
        {"train.text_drop_p", "0.200000003"},
        {"train.image_drop_p", "0.150000006"},
        {"train.joint_drop_p", "0.0299999993"},
        {"train.grad_clip", "1.5"},
        {"guidance.mode", "combined"},
        {"guidance.s", "9.5"},
        {"guidance.s_image", "3.25"},
        {"guidance.s_text", "6.5"},
        {"guidance.steps", "25"},
        {"sites.policy", "explicit"},
        {"sites.explicit", "middle:0,decoder:2"},
        {"cache.timestep", "5"},
        {"cache.with_text", "1"},
        {"paths.data_dir", "runs/data"},
        {"paths.out_dir", "runs/out"},
        {"paths.base_checkpoint", "base.dctn"},
        {"paths.adapter_checkpoint", "adapters.dctn"},
        {"paths.cache", "subject.dcfc"},
        {"paths.reference", "ref.png"},
    };
    return kv;
}

} // namespace

TEST_CASE("defaults encode canonically and parse back to equality") {
    const RunConfig def;
    const std::string text = encode_run_config(def);

    // Every known key appears exactly once, in registry order.
    const std::vector<std::string> keys = run_config_keys();
    CHECK(keys.size() == 35);
    std::size_t pos = 0;
    int lines = 0;
    for (std::size_t i = 0; i < text.size(); ++i)
        lines += text[i] == '\n';
    CHECK(lines == int(keys.size()));
    for (const std::string& k : keys) {
        CHECK(text.compare(pos, k.size() + 1, k + "=") == 0);
        pos = text.find('\n', pos) + 1;
    }

    const RunConfig back = parse_run_config(text);
    CHECK(back == def);
    CHECK(encode_run_config(back) == text); // canonical form is a fixed point
    def.validate();                         // the defaults must be coherent
}

TEST_CASE("every key accepts an override and round-trips through the text form") {
    const std::string base = encode_run_config(RunConfig{});

    RunConfig all;
    for (const auto& [key, value] : overrides()) {
        RunConfig one;
        set_run_key(one, key, value);
        const std::string text = encode_run_config(one);
        CHECK(text != base); // the override must actually reach the struct
        CHECK(text.find(key + "=" + value + "\n") != std::string::npos);
        CHECK(parse_run_config(text) == one);
        set_run_key(all, key, value);
    }

    // All overrides at once: parse(encode) is lossless and byte-stable.
    const std::string text = encode_run_config(all);
    const RunConfig back = parse_run_config(text);
    CHECK(back == all);
    CHECK(encode_run_config(back) == text);
    CHECK(back.seed == 18446744073709551615ull);
    CHECK(back.guidance.mode == GuidanceMode::combined);
    CHECK(back.site_policy == SitePolicy::explicit_list);
    REQUIRE(back.explicit_sites.size() == 2);
    CHECK(back.explicit_sites[0].region == Region::middle);
    CHECK(back.explicit_sites[1].region == Region::decoder);
    CHECK(back.explicit_sites[1].index == 2);
    CHECK(back.cache_with_text);
}

TEST_CASE("float fields survive the text form bit-exactly") {
    const float values[] = {0.1f,           1e-5f,         3.14159274f,
                            1.17549435e-38f, 3.40282347e+38f, 1.40129846e-45f,
                            -0.0625f,       123456789.0f};
    for (float v : values) {
        RunConfig cfg;
        cfg.train.lr = v;
        cfg.guidance.s = v;
        const RunConfig back = parse_run_config(encode_run_config(cfg));
        CHECK(back.train.lr == v);
        CHECK(back.guidance.s == v);
    }
    // A short hand-written value canonicalizes once, then stays fixed.
    RunConfig cfg = parse_run_config("train.lr=0.1\n");
    CHECK(cfg.train.lr == 0.1f);
    const std::string canon = encode_run_config(cfg);
    CHECK(encode_run_config(parse_run_config(canon)) == canon);
}

TEST_CASE("partial files override only the keys they mention") {
    const RunConfig cfg = parse_run_config("train.lr=0.5\nguidance.steps=9\n");
    RunConfig expect;
    expect.train.lr = 0.5f;
    expect.guidance.steps = 9;
    CHECK(cfg == expect);
    CHECK(parse_run_config("") == RunConfig{});
}

TEST_CASE("comments, blank lines, and CRLF endings are tolerated") {
    const std::string text =
        "# generated by hand\n"
        "\n"
        "seed=42\r\n"
        "# trailing note\n"
        "cache.with_text=1\r\n";
    const RunConfig cfg = parse_run_config(text);
    CHECK(cfg.seed == 42);
    CHECK(cfg.cache_with_text);
}

TEST_CASE("unknown keys are config errors, malformed lines are format errors") {
    CHECK(code_of([] { parse_run_config("sed=1\n"); }) == ErrorCode::config);
    CHECK(code_of([] { parse_run_config("train.learning_rate=1\n"); }) ==
          ErrorCode::config);
    CHECK(code_of([] { parse_run_config("seed=1\nseed=2\n"); }) == ErrorCode::format);
    CHECK(code_of([] { parse_run_config("seed\n"); }) == ErrorCode::format);
    CHECK(code_of([] { parse_run_config("=5\n"); }) == ErrorCode::format);
}

TEST_CASE("value parsing is strict per type") {
    // Integers: no junk, no fractions, no overflow.
    CHECK(code_of([] { parse_run_config("threads=abc\n"); }) == ErrorCode::format);
    CHECK(code_of([] { parse_run_config("threads=1.5\n"); }) == ErrorCode::format);
    CHECK(code_of([] { parse_run_config("threads=3000000000\n"); }) == ErrorCode::format);
    CHECK(code_of([] { parse_run_config("threads=\n"); }) == ErrorCode::format);
    // The unsigned seed rejects signs.
    CHECK(code_of([] { parse_run_config("seed=-1\n"); }) == ErrorCode::format);
    // Floats must consume the whole token.
    CHECK(code_of([] { parse_run_config("train.lr=x\n"); }) == ErrorCode::format);
    CHECK(code_of([] { parse_run_config("train.lr=1.0q\n"); }) == ErrorCode::format);
    // Booleans are written 0/1 only.
    CHECK(code_of([] { parse_run_config("cache.with_text=true\n"); }) == ErrorCode::format);
    CHECK(code_of([] { parse_run_config("cache.with_text=2\n"); }) == ErrorCode::format);
    // Lists reject empty items; a fully empty list is legal.
    CHECK(code_of([] { parse_run_config("denoiser.channel_multipliers=1,,2\n"); }) ==
          ErrorCode::format);
    CHECK(code_of([] { parse_run_config("denoiser.channel_multipliers=1,2,\n"); }) ==
          ErrorCode::format);
    CHECK(parse_run_config("denoiser.attention_resolutions=\n")
              .denoiser.attention_resolutions.empty());
    // Sites need region:index pairs with known regions.
    CHECK(code_of([] { parse_run_config("sites.explicit=middle0\n"); }) ==
          ErrorCode::format);
    CHECK(code_of([] { parse_run_config("sites.explicit=tower:0\n"); }) ==
          ErrorCode::config);
    // Enum names are validated.
    CHECK(code_of([] { parse_run_config("guidance.mode=both\n"); }) == ErrorCode::config);
    CHECK(code_of([] { parse_run_config("sites.policy=everything\n"); }) ==
          ErrorCode::config);
}

TEST_CASE("set_run_key applies single overrides with the same strictness") {
    RunConfig cfg;
    set_run_key(cfg, "guidance.s", "7.5");
    CHECK(cfg.guidance.s == 7.5f);
    set_run_key(cfg, "paths.out_dir", "elsewhere");
    CHECK(cfg.out_dir == "elsewhere");
    CHECK(code_of([&] { set_run_key(cfg, "nope", "1"); }) == ErrorCode::config);
    CHECK(code_of([&] { set_run_key(cfg, "threads", "many"); }) == ErrorCode::format);
}

TEST_CASE("save and load round-trip through files") {
    const auto dir = temp_dir("io");
    RunConfig cfg;
    cfg.seed = 7;
    cfg.train.steps = 11;
    cfg.data_dir = "d";

    const auto path = dir / "run.cfg";
    save_run_config(path.string(), cfg);
    CHECK(file_bytes(path) == encode_run_config(cfg));
    CHECK(load_run_config(path.string()) == cfg);

    CHECK(code_of([&] { load_run_config((dir / "missing.cfg").string()); }) ==
          ErrorCode::io);
    CHECK(code_of([&] { save_run_config((dir / "no_dir" / "x.cfg").string(), cfg); }) ==
          ErrorCode::io);
    std::filesystem::remove_all(dir);
}

TEST_CASE("validate delegates to the member configs and checks its own knobs") {
    RunConfig cfg;
    cfg.validate();

    RunConfig bad = cfg;
    bad.train.lr = -1.0f;
    CHECK(code_of([&] { bad.validate(); }) == ErrorCode::config);

    bad = cfg;
    bad.guidance.steps = 0;
    CHECK(code_of([&] { bad.validate(); }) == ErrorCode::config);

    bad = cfg;
    bad.denoiser.base_channels = 0;
    CHECK(code_of([&] { bad.validate(); }) == ErrorCode::config);

    bad = cfg;
    bad.site_policy = SitePolicy::explicit_list; // declared explicit, no sites given
    CHECK(code_of([&] { bad.validate(); }) == ErrorCode::config);
    bad.explicit_sites.push_back({Region::middle, 0});
    bad.validate();

    bad = cfg;
    bad.cache_timestep = bad.denoiser.time_steps + 1;
    CHECK(code_of([&] { bad.validate(); }) == ErrorCode::config);
    bad.cache_timestep = -1;
    CHECK(code_of([&] { bad.validate(); }) == ErrorCode::config);

    bad = cfg;
    bad.threads = -1;
    CHECK(code_of([&] { bad.validate(); }) == ErrorCode::config);

    bad = cfg;
    bad.dataset_size = 0;
    CHECK(code_of([&] { bad.validate(); }) == ErrorCode::config);
}
