#include "dc/runcfg.hpp"

#include <climits>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "dc/common.hpp"

namespace dc {

namespace {

// ---- strict scalar parsers (format errors on anything but a full match) ----

long long parse_ll(const std::string& key, const std::string& v) {
    require(!v.empty(), ErrorCode::format, key + " needs a value");
    char* end = nullptr;
    const long long x = std::strtoll(v.c_str(), &end, 10);
    require(end == v.c_str() + v.size(), ErrorCode::format,
            key + " is not an integer: " + v);
    return x;
}

int parse_int(const std::string& key, const std::string& v) {
    const long long x = parse_ll(key, v);
    require(x >= INT_MIN && x <= INT_MAX, ErrorCode::format, key + " out of range: " + v);
    return int(x);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    require(!v.empty() && v[0] != '-', ErrorCode::format, key + " must be unsigned: " + v);
    char* end = nullptr;
    const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    require(end == v.c_str() + v.size(), ErrorCode::format,
            key + " is not an integer: " + v);
    return std::uint64_t(x);
}

float parse_float(const std::string& key, const std::string& v) {
    require(!v.empty(), ErrorCode::format, key + " needs a value");
    char* end = nullptr;
    const float x = std::strtof(v.c_str(), &end);
    require(end == v.c_str() + v.size(), ErrorCode::format, key + " is not a number: " + v);
    return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
    require(v == "0" || v == "1", ErrorCode::format, key + " must be 0 or 1: " + v);
    return v == "1";
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    if (v.empty())
        return out; // empty list is legal (e.g. no attention resolutions)
    std::size_t pos = 0;
    while (true) {
        const std::size_t c = v.find(',', pos);
        out.push_back(parse_int(key, v.substr(pos, c == std::string::npos ? c : c - pos)));
        if (c == std::string::npos)
            break;
        pos = c + 1;
    }
    return out;
}

std::string fmt_int_list(const std::vector<int>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i)
        out += (i ? "," : "") + std::to_string(xs[i]);
    return out;
}

std::string fmt_float(float x) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", double(x));
    return buf;
}

// Explicit adapter sites as "region:index" pairs, e.g. "middle:0,decoder:2".
std::vector<LayerSite> parse_sites(const std::string& key, const std::string& v) {
    std::vector<LayerSite> out;
    if (v.empty())
        return out;
    std::size_t pos = 0;
    while (true) {
        const std::size_t c = v.find(',', pos);
        const std::string item = v.substr(pos, c == std::string::npos ? c : c - pos);
        const std::size_t colon = item.find(':');
        require(colon != std::string::npos, ErrorCode::format,
                key + " entries must be region:index, got " + item);
        LayerSite s;
        s.region = region_from_name(item.substr(0, colon));
        s.index = parse_int(key, item.substr(colon + 1));
        out.push_back(s);
        if (c == std::string::npos)
            break;
        pos = c + 1;
    }
    return out;
}

std::string fmt_sites(const std::vector<LayerSite>& sites) {
    std::string out;
    for (std::size_t i = 0; i < sites.size(); ++i)
        out += (i ? "," : "") + sites[i].str();
    return out;
}

// One entry per key: how to print it and how to absorb a value.
struct Field {
    const char* key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<Field>& fields() {
    using S = const std::string&;
    static const std::vector<Field> f = {
        {"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
         [](RunConfig& c, S v) { c.seed = parse_u64("seed", v); }},
        {"threads", [](const RunConfig& c) { return std::to_string(c.threads); },
         [](RunConfig& c, S v) { c.threads = parse_int("threads", v); }},
        {"dataset.size", [](const RunConfig& c) { return std::to_string(c.dataset_size); },
         [](RunConfig& c, S v) { c.dataset_size = parse_int("dataset.size", v); }},

        {"denoiser.image_size",
         [](const RunConfig& c) { return std::to_string(c.denoiser.image_size); },
         [](RunConfig& c, S v) { c.denoiser.image_size = parse_int("denoiser.image_size", v); }},
        {"denoiser.base_channels",
         [](const RunConfig& c) { return std::to_string(c.denoiser.base_channels); },
         [](RunConfig& c, S v) {
             c.denoiser.base_channels = parse_int("denoiser.base_channels", v);
         }},
        {"denoiser.channel_multipliers",
         [](const RunConfig& c) { return fmt_int_list(c.denoiser.channel_multipliers); },
         [](RunConfig& c, S v) {
             c.denoiser.channel_multipliers = parse_int_list("denoiser.channel_multipliers", v);
         }},
        {"denoiser.blocks_per_resolution",
         [](const RunConfig& c) { return std::to_string(c.denoiser.blocks_per_resolution); },
         [](RunConfig& c, S v) {
             c.denoiser.blocks_per_resolution = parse_int("denoiser.blocks_per_resolution", v);
         }},
        {"denoiser.attention_resolutions",
         [](const RunConfig& c) { return fmt_int_list(c.denoiser.attention_resolutions); },
         [](RunConfig& c, S v) {
             c.denoiser.attention_resolutions =
                 parse_int_list("denoiser.attention_resolutions", v);
         }},
        {"denoiser.vocab_size",
         [](const RunConfig& c) { return std::to_string(c.denoiser.vocab_size); },
         [](RunConfig& c, S v) { c.denoiser.vocab_size = parse_int("denoiser.vocab_size", v); }},
        {"denoiser.text_embed_dim",
         [](const RunConfig& c) { return std::to_string(c.denoiser.text_embed_dim); },
         [](RunConfig& c, S v) {
             c.denoiser.text_embed_dim = parse_int("denoiser.text_embed_dim", v);
         }},
        {"denoiser.max_tokens",
         [](const RunConfig& c) { return std::to_string(c.denoiser.max_tokens); },
         [](RunConfig& c, S v) { c.denoiser.max_tokens = parse_int("denoiser.max_tokens", v); }},
        {"denoiser.time_steps",
         [](const RunConfig& c) { return std::to_string(c.denoiser.time_steps); },
         [](RunConfig& c, S v) { c.denoiser.time_steps = parse_int("denoiser.time_steps", v); }},

        {"train.lr", [](const RunConfig& c) { return fmt_float(c.train.lr); },
         [](RunConfig& c, S v) { c.train.lr = parse_float("train.lr", v); }},
        {"train.batch_size",
         [](const RunConfig& c) { return std::to_string(c.train.batch_size); },
         [](RunConfig& c, S v) { c.train.batch_size = parse_int("train.batch_size", v); }},
        {"train.steps", [](const RunConfig& c) { return std::to_string(c.train.steps); },
         [](RunConfig& c, S v) { c.train.steps = parse_int("train.steps", v); }},
        {"train.weight_decay",
         [](const RunConfig& c) { return fmt_float(c.train.weight_decay); },
         [](RunConfig& c, S v) { c.train.weight_decay = parse_float("train.weight_decay", v); }},
        {"train.text_drop_p", [](const RunConfig& c) { return fmt_float(c.train.text_drop_p); },
         [](RunConfig& c, S v) { c.train.text_drop_p = parse_float("train.text_drop_p", v); }},
        {"train.image_drop_p",
         [](const RunConfig& c) { return fmt_float(c.train.image_drop_p); },
         [](RunConfig& c, S v) { c.train.image_drop_p = parse_float("train.image_drop_p", v); }},
        {"train.joint_drop_p",
         [](const RunConfig& c) { return fmt_float(c.train.joint_drop_p); },
         [](RunConfig& c, S v) { c.train.joint_drop_p = parse_float("train.joint_drop_p", v); }},
        {"train.grad_clip", [](const RunConfig& c) { return fmt_float(c.train.grad_clip); },
         [](RunConfig& c, S v) { c.train.grad_clip = parse_float("train.grad_clip", v); }},

        {"guidance.mode",
         [](const RunConfig& c) { return std::string(guidance_mode_name(c.guidance.mode)); },
         [](RunConfig& c, S v) { c.guidance.mode = guidance_mode_from_name(v); }},
        {"guidance.s", [](const RunConfig& c) { return fmt_float(c.guidance.s); },
         [](RunConfig& c, S v) { c.guidance.s = parse_float("guidance.s", v); }},
        {"guidance.s_image", [](const RunConfig& c) { return fmt_float(c.guidance.s_image); },
         [](RunConfig& c, S v) { c.guidance.s_image = parse_float("guidance.s_image", v); }},
        {"guidance.s_text", [](const RunConfig& c) { return fmt_float(c.guidance.s_text); },
         [](RunConfig& c, S v) { c.guidance.s_text = parse_float("guidance.s_text", v); }},
        {"guidance.steps", [](const RunConfig& c) { return std::to_string(c.guidance.steps); },
         [](RunConfig& c, S v) { c.guidance.steps = parse_int("guidance.steps", v); }},

        {"sites.policy",
         [](const RunConfig& c) { return std::string(site_policy_name(c.site_policy)); },
         [](RunConfig& c, S v) { c.site_policy = site_policy_from_name(v); }},
        {"sites.explicit", [](const RunConfig& c) { return fmt_sites(c.explicit_sites); },
         [](RunConfig& c, S v) { c.explicit_sites = parse_sites("sites.explicit", v); }},
        {"cache.timestep",
         [](const RunConfig& c) { return std::to_string(c.cache_timestep); },
         [](RunConfig& c, S v) { c.cache_timestep = parse_int("cache.timestep", v); }},
        {"cache.with_text",
         [](const RunConfig& c) { return std::string(c.cache_with_text ? "1" : "0"); },
         [](RunConfig& c, S v) { c.cache_with_text = parse_bool("cache.with_text", v); }},

        {"paths.data_dir", [](const RunConfig& c) { return c.data_dir; },
         [](RunConfig& c, S v) { c.data_dir = v; }},
        {"paths.out_dir", [](const RunConfig& c) { return c.out_dir; },
         [](RunConfig& c, S v) { c.out_dir = v; }},
        {"paths.base_checkpoint", [](const RunConfig& c) { return c.base_checkpoint; },
         [](RunConfig& c, S v) { c.base_checkpoint = v; }},
        {"paths.adapter_checkpoint", [](const RunConfig& c) { return c.adapter_checkpoint; },
         [](RunConfig& c, S v) { c.adapter_checkpoint = v; }},
        {"paths.cache", [](const RunConfig& c) { return c.cache_path; },
         [](RunConfig& c, S v) { c.cache_path = v; }},
        {"paths.reference", [](const RunConfig& c) { return c.reference_path; },
         [](RunConfig& c, S v) { c.reference_path = v; }},
    };
    return f;
}

const Field* find_field(const std::string& key) {
    for (const Field& f : fields())
        if (key == f.key)
            return &f;
    return nullptr;
}

} // namespace

void RunConfig::validate() const {
    denoiser.validate();
    train.validate();
    guidance.validate();
    require(cache_timestep >= 0 && cache_timestep <= denoiser.time_steps, ErrorCode::config,
            "cache.timestep must lie in [0, time_steps]");
    require(threads >= 0, ErrorCode::config, "threads must be non-negative");
    require(dataset_size >= 1, ErrorCode::config, "dataset.size must be positive");
    if (site_policy == SitePolicy::explicit_list)
        require(!explicit_sites.empty(), ErrorCode::config,
                "explicit site policy needs sites.explicit");
}

std::string encode_run_config(const RunConfig& cfg) {
    std::string out;
    for (const Field& f : fields()) {
        const std::string v = f.get(cfg);
        require(v.find('\n') == std::string::npos, ErrorCode::format,
                std::string(f.key) + " value must be single-line");
        out += std::string(f.key) + "=" + v + "\n";
    }
    return out;
}

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::vector<bool> seen(fields().size(), false);
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty() || line[0] == '#')
            continue;
        const std::size_t eq = line.find('=');
        require(eq != std::string::npos && eq > 0, ErrorCode::format,
                "config lines must be key=value, got: " + line);
        const std::string key = line.substr(0, eq);
        const Field* f = find_field(key);
        require(f != nullptr, ErrorCode::config, "unknown config key: " + key);
        const std::size_t idx = std::size_t(f - fields().data());
        require(!seen[idx], ErrorCode::format, "duplicate config key: " + key);
        seen[idx] = true;
        f->set(cfg, line.substr(eq + 1));
    }
    return cfg;
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorCode::io, "cannot write config " + path);
    out << encode_run_config(cfg);
    require(out.good(), ErrorCode::io, "cannot write config " + path);
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorCode::io, "cannot read config " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

void set_run_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    const Field* f = find_field(key);
    require(f != nullptr, ErrorCode::config, "unknown config key: " + key);
    f->set(cfg, value);
}

std::vector<std::string> run_config_keys() {
    std::vector<std::string> out;
    for (const Field& f : fields())
        out.push_back(f.key);
    return out;
}

} // namespace dc
