#pragma once
// One flat, diff-able run configuration shared by every subcommand: the
// denoiser architecture, both training phases, guidance, caching choices,
// paths, and the master seed, serialized as `key=value` lines.
//
// The text form is canonical: encode() emits every key exactly once in a
// fixed order with lossless number formatting, so encode(parse(encode(c)))
// is byte-identical and configs diff cleanly across runs. Parsing is strict:
// unknown keys are config errors (catching typos beats silently ignoring
// them), duplicate or malformed lines are format errors, and blank lines or
// `#` comments are allowed in hand-written files.

#include <cstdint>
#include <string>
#include <vector>

#include "dc/denoiser.hpp"
#include "dc/sampler.hpp"
#include "dc/trainer.hpp"

namespace dc {

struct RunConfig {
    DenoiserConfig denoiser;
    TrainConfig train; // train.seed is not a key: the master seed below rules
    GuidanceConfig guidance;

    SitePolicy site_policy = SitePolicy::middle_decoder_every_2nd;
    std::vector<LayerSite> explicit_sites; // only read when site_policy is explicit_list
    int cache_timestep = 1;
    bool cache_with_text = false; // ablation arm; production caching is text-free

    std::uint64_t seed = 0;
    int threads = 0; // 0 = library default / DC_THREADS
    int dataset_size = 256;

    std::string data_dir;
    std::string out_dir;
    std::string base_checkpoint;
    std::string adapter_checkpoint;
    std::string cache_path;
    std::string reference_path;

    void validate() const; // delegates to the member validators
    bool operator==(const RunConfig&) const = default;
};

// Canonical text form (every key, fixed order) and the strict parser.
// Missing keys keep their defaults, so partial files work as overrides.
std::string encode_run_config(const RunConfig& cfg);
RunConfig parse_run_config(const std::string& text);

void save_run_config(const std::string& path, const RunConfig& cfg);
RunConfig load_run_config(const std::string& path);

// Apply one `key=value` override (the CLI's flag passthrough). Unknown key:
// config error; unparsable value: format error.
void set_run_key(RunConfig& cfg, const std::string& key, const std::string& value);

// All known keys in canonical order (for help text and tests).
std::vector<std::string> run_config_keys();

} // namespace dc
