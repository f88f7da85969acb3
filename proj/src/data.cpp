#include "dc/data.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dc/common.hpp"
#include "dc/image.hpp"

namespace dc {

namespace {

constexpr int kMaxCaptionTokens = 16;

// Canonical subject radius as a fraction of the image side; sized so that
// every placement bucket keeps the subject fully in frame at maximum scale
// and jitter.
constexpr float kRadiusFrac = 0.25f;
constexpr float kScaleLo = 0.8f;
constexpr float kScaleHi = 1.2f;
constexpr float kJitterFrac = 0.04f;  // target placement jitter within a bucket
constexpr float kShiftFrac = 0.1f;    // augmentation shift bound
constexpr int kAugmentRetries = 8;
constexpr int kSub = 5; // subgrid side for coverage sampling (odd: no half ties)

// Placement bucket centers as fractions of the image side, in the order of
// position_phrases(): centered, then the four corners (y grows downward, so
// "top" is the smaller y).
constexpr float kBucketX[5] = {0.5f, 0.36f, 0.64f, 0.36f, 0.64f};
constexpr float kBucketY[5] = {0.5f, 0.36f, 0.36f, 0.64f, 0.64f};

// Same 8-bit -> [-1,1] mapping as tensor_from_image, so rendered tensors
// survive a PNG round trip bit-exactly.
float level(std::uint8_t u) { return float(u) / 255.0f * 2.0f - 1.0f; }

std::uint8_t stripe_shade(std::uint8_t u) { return std::uint8_t(std::lround(double(u) * 0.55)); }

int index_of(const std::vector<std::string>& words, const std::string& w) {
    for (std::size_t i = 0; i < words.size(); ++i)
        if (words[i] == w)
            return int(i);
    return -1;
}

void check_caption_vocab(const Vocabulary& vocab) {
    auto need = [&](const std::string& w) {
        require(vocab.contains(w), ErrorCode::config,
                "vocabulary missing caption word: " + w);
    };
    for (const char* w : {"a", "on", "background"})
        need(w);
    for (const auto& w : shape_words())
        need(w);
    for (const auto& w : subject_color_words())
        need(w);
    for (const auto& w : background_color_words())
        need(w);
    for (const auto& phrase : position_phrases()) {
        std::istringstream stream(phrase);
        std::string w;
        while (stream >> w)
            need(w);
    }
}


// Paint the subject into img wherever sil==1. Stripes are keyed to the
// subject's own frame (bands of r/4 pixels measured from its center), so the
// texture travels with the subject instead of being pinned to the raster.
void paint_subject(TensorF& img, const TensorF& sil, int color, int texture, float cy, float r) {
    const int n = sil.dim(0);
    const auto& base = subject_rgb(color);
    std::array<std::uint8_t, 3> dark{stripe_shade(base[0]), stripe_shade(base[1]),
                                     stripe_shade(base[2])};
    const float band = r * 0.25f;
    float* p = img.data();
    const float* s = sil.data();
    for (int y = 0; y < n; ++y) {
        const int k = int(std::floor((float(y) + 0.5f - cy) / band));
        const bool striped = texture == 1 && ((k % 2) + 2) % 2 == 1;
        const auto& rgb = striped ? dark : base;
        for (int x = 0; x < n; ++x) {
            if (s[y * n + x] == 0.0f)
                continue;
            for (int ch = 0; ch < 3; ++ch)
                p[(ch * n + y) * n + x] = level(rgb[std::size_t(ch)]);
        }
    }
}

// Even-odd point-in-polygon test (boundary-inclusive within float accuracy).
bool in_polygon(const std::vector<std::pair<float, float>>& poly, float x, float y) {
    bool inside = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const auto [xi, yi] = poly[i];
        const auto [xj, yj] = poly[j];
        if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi)
            inside = !inside;
    }
    return inside;
}

const std::vector<std::pair<float, float>>& star_polygon() {
    // Ten alternating outer/inner vertices of an upward five-pointed star in
    // unit coordinates (y grows downward, so the apex sits at angle -90deg).
    static const std::vector<std::pair<float, float>> v = [] {
        std::vector<std::pair<float, float>> p;
        const double pi = 3.14159265358979323846;
        for (int k = 0; k < 10; ++k) {
            const double ang = -pi / 2 + k * pi / 5;
            const double rad = (k % 2 == 0) ? 1.0 : 0.45;
            p.emplace_back(float(rad * std::cos(ang)), float(rad * std::sin(ang)));
        }
        return p;
    }();
    return v;
}

bool in_unit_shape(int shape, float dx, float dy) {
    switch (shape) {
    case 0: // circle
        return dx * dx + dy * dy <= 1.0f;
    case 1: // square
        return std::fabs(dx) <= 0.8f && std::fabs(dy) <= 0.8f;
    case 2: { // upward triangle: apex (0,-1), base corners (+-0.95, 0.75)
        static const std::vector<std::pair<float, float>> tri = {
            {0.0f, -1.0f}, {0.95f, 0.75f}, {-0.95f, 0.75f}};
        return in_polygon(tri, dx, dy);
    }
    case 3: // five-pointed star
        return in_polygon(star_polygon(), dx, dy);
    case 4: // plus-shaped cross
        return (std::fabs(dx) <= 0.35f && std::fabs(dy) <= 1.0f) ||
               (std::fabs(dy) <= 0.35f && std::fabs(dx) <= 1.0f);
    default:
        fail(ErrorCode::config, "unknown shape index " + std::to_string(shape));
    }
}

std::string format_float(float v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", double(v));
    return buf;
}

float parse_float(const std::string& s) {
    char* end = nullptr;
    const float v = std::strtof(s.c_str(), &end);
    require(end == s.c_str() + s.size() && !s.empty(), ErrorCode::format,
            "bad float in manifest: " + s);
    return v;
}

} // namespace

const std::vector<std::string>& texture_words() {
    static const std::vector<std::string> v = {"solid", "striped"};
    return v;
}

const std::array<std::uint8_t, 3>& subject_rgb(int color) {
    // Hue-spread, saturated palette; disjoint from the background palette and
    // from white so the three roles never collide on color.
    static const std::vector<std::array<std::uint8_t, 3>> v = {
        {230, 30, 30},  // red
        {40, 180, 60},  // green
        {40, 70, 220},  // blue
        {235, 220, 50}, // yellow
        {240, 150, 40}, // orange
        {150, 60, 200}, // purple
        {60, 210, 220}, // cyan
        {220, 60, 200}, // magenta
    };
    require(color >= 0 && color < int(v.size()), ErrorCode::config,
            "subject color index out of range");
    return v[std::size_t(color)];
}

std::array<std::uint8_t, 3> stripe_rgb(int color) {
    const auto& base = subject_rgb(color);
    return {stripe_shade(base[0]), stripe_shade(base[1]), stripe_shade(base[2])};
}

std::pair<float, float> position_fraction(int position) {
    require(position >= 0 && position < 5, ErrorCode::config, "position index out of range");
    return {kBucketX[position], kBucketY[position]};
}

void check_attrs(const SubjectAttrs& a) {
    require(a.shape >= 0 && a.shape < int(shape_words().size()), ErrorCode::config,
            "shape index out of range");
    require(a.color >= 0 && a.color < int(subject_color_words().size()), ErrorCode::config,
            "subject color index out of range");
    require(a.texture >= 0 && a.texture < int(texture_words().size()), ErrorCode::config,
            "texture index out of range");
    require(a.background >= 0 && a.background < int(background_color_words().size()),
            ErrorCode::config, "background color index out of range");
    require(a.position >= 0 && a.position < int(position_phrases().size()), ErrorCode::config,
            "position index out of range");
    require(std::isfinite(a.scale) && a.scale > 0.0f, ErrorCode::config,
            "subject scale must be positive and finite");
}

const std::array<std::uint8_t, 3>& background_rgb(int background) {
    // Muted palette, visually distant from every subject color.
    static const std::vector<std::array<std::uint8_t, 3>> v = {
        {128, 128, 128}, // gray
        {25, 30, 90},    // navy
        {25, 120, 115},  // teal
        {110, 115, 35},  // olive
        {110, 30, 45},   // maroon
        {240, 170, 190}, // pink
    };
    require(background >= 0 && background < int(v.size()), ErrorCode::config,
            "background color index out of range");
    return v[std::size_t(background)];
}

TensorF rasterize_shape(int shape, float cx, float cy, float r, int n) {
    require(n >= 1, ErrorCode::config, "raster size must be positive");
    require(std::isfinite(r) && r > 0.0f, ErrorCode::config, "shape radius must be positive");
    require(shape >= 0 && shape < int(shape_words().size()), ErrorCode::config,
            "unknown shape index " + std::to_string(shape));
    TensorF m({n, n});
    float* p = m.data();
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            // Coverage sampling on a kSub x kSub subgrid: the pixel is on iff
            // at least half the subsamples fall inside. Center sampling was
            // tried first but its area error on thin shapes is too large for
            // the area-scaling guarantees downstream.
            int hits = 0;
            for (int sy = 0; sy < kSub; ++sy)
                for (int sx = 0; sx < kSub; ++sx) {
                    const float px = float(x) + (float(sx) + 0.5f) / kSub;
                    const float py = float(y) + (float(sy) + 0.5f) / kSub;
                    hits += in_unit_shape(shape, (px - cx) / r, (py - cy) / r) ? 1 : 0;
                }
            p[y * n + x] = hits * 2 > kSub * kSub ? 1.0f : 0.0f;
        }
    return m;
}

std::string caption_for_attrs(const SubjectAttrs& attrs) {
    check_attrs(attrs);
    std::string s = "a " + subject_color_words()[std::size_t(attrs.color)] + " " +
                    shape_words()[std::size_t(attrs.shape)] + " on a " +
                    background_color_words()[std::size_t(attrs.background)] + " background";
    if (attrs.position != 0)
        s += " " + position_phrases()[std::size_t(attrs.position)];
    return s;
}

SubjectAttrs parse_caption(const std::string& text) {
    std::istringstream stream(text);
    std::vector<std::string> w;
    std::string word;
    while (stream >> word)
        w.push_back(word);
    require(w.size() == 7 || w.size() == 9, ErrorCode::format,
            "caption does not match the grammar: " + text);
    require(w[0] == "a" && w[3] == "on" && w[4] == "a" && w[6] == "background",
            ErrorCode::format, "caption does not match the grammar: " + text);
    SubjectAttrs a;
    a.color = index_of(subject_color_words(), w[1]);
    a.shape = index_of(shape_words(), w[2]);
    a.background = index_of(background_color_words(), w[5]);
    require(a.color >= 0 && a.shape >= 0 && a.background >= 0, ErrorCode::format,
            "caption does not match the grammar: " + text);
    if (w.size() == 9) {
        a.position = index_of(position_phrases(), w[7] + " " + w[8]);
        require(a.position > 0, ErrorCode::format,
                "caption does not match the grammar: " + text);
    }
    return a;
}

Triplet render_triplet(const SubjectAttrs& attrs, float jitter_x, float jitter_y,
                       const Vocabulary& vocab) {
    check_attrs(attrs);
    check_caption_vocab(vocab);
    const int n = kImageSize;
    require(std::fabs(jitter_x) <= 0.25f * n && std::fabs(jitter_y) <= 0.25f * n,
            ErrorCode::config, "placement jitter out of range");
    const float r0 = kRadiusFrac * n;

    Triplet t;
    t.attrs = attrs;
    t.caption_text = caption_for_attrs(attrs);
    t.caption = tokenize(vocab, t.caption_text, kMaxCaptionTokens);

    // Target: colored background, subject at its bucket with jitter/scale.
    t.target = TensorF({3, n, n});
    const auto& bg = background_rgb(attrs.background);
    float* tp = t.target.data();
    for (int ch = 0; ch < 3; ++ch) {
        const float v = level(bg[std::size_t(ch)]);
        for (int i = 0; i < n * n; ++i)
            tp[ch * n * n + i] = v;
    }
    const float cx = kBucketX[attrs.position] * n + jitter_x;
    const float cy = kBucketY[attrs.position] * n + jitter_y;
    const float rt = r0 * attrs.scale;
    const TensorF sil_t = rasterize_shape(attrs.shape, cx, cy, rt, n);
    paint_subject(t.target, sil_t, attrs.color, attrs.texture, cy, rt);

    // Reference: the same subject, canonical size, centered on white.
    t.reference = TensorF::full({3, n, n}, 1.0f);
    t.mask = rasterize_shape(attrs.shape, 0.5f * n, 0.5f * n, r0, n);
    paint_subject(t.reference, t.mask, attrs.color, attrs.texture, 0.5f * n, r0);
    return t;
}

Triplet generate_single(std::uint64_t seed, int index, const Vocabulary& vocab) {
    require(index >= 0, ErrorCode::config, "dataset index must be non-negative");
    check_caption_vocab(vocab);
    Rng rng(Rng::mix(seed, std::uint64_t(index)));
    SubjectAttrs a;
    a.shape = int(rng.below(shape_words().size()));
    a.color = int(rng.below(subject_color_words().size()));
    a.texture = int(rng.below(texture_words().size()));
    a.background = int(rng.below(background_color_words().size()));
    a.position = int(rng.below(position_phrases().size()));
    a.scale = float(rng.uniform(kScaleLo, kScaleHi));
    const float jx = float(rng.uniform(-1.0, 1.0)) * kJitterFrac * kImageSize;
    const float jy = float(rng.uniform(-1.0, 1.0)) * kJitterFrac * kImageSize;
    return render_triplet(a, jx, jy, vocab);
}

std::vector<Triplet> generate_dataset(int n, std::uint64_t seed, const Vocabulary& vocab) {
    require(n >= 1, ErrorCode::config, "dataset size must be at least 1");
    std::vector<Triplet> out;
    out.reserve(std::size_t(n));
    for (int i = 0; i < n; ++i)
        out.push_back(generate_single(seed, i, vocab));
    return out;
}

std::pair<TensorF, TensorF> transform_reference(const TensorF& reference, const TensorF& mask,
                                                float scale, float shift_x, float shift_y) {
    require(reference.rank() == 3 && reference.dim(0) == 3, ErrorCode::dimension,
            "reference must be [3,n,n]");
    const int n = reference.dim(1);
    require(reference.dim(2) == n, ErrorCode::dimension, "reference must be square");
    require(mask.rank() == 2 && mask.dim(0) == n && mask.dim(1) == n, ErrorCode::dimension,
            "mask shape must match the reference");
    require(std::isfinite(scale) && scale > 0.0f, ErrorCode::config,
            "transform scale must be positive");
    const float* mp = mask.data();
    for (int i = 0; i < n * n; ++i)
        require(mp[i] == 0.0f || mp[i] == 1.0f, ErrorCode::config, "mask must be binary");

    const float* rp = reference.data();
    const float c = 0.5f * float(n - 1);
    TensorF ref_out = TensorF::full({3, n, n}, 1.0f);
    TensorF mask_out({n, n});
    float* ro = ref_out.data();
    float* mo = mask_out.data();
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            // Inverse of "scale about the center, then shift". The subject
            // test uses subgrid coverage (area-faithful, like the
            // rasterizer); colors are copied from an in-subject input pixel,
            // never blended, so the palette and the white backdrop stay
            // exact. Identity parameters map every subsample into its own
            // cell and reproduce the inputs bit for bit.
            int hits = 0;
            long cxi = -1, cyi = -1; // an in-subject source pixel, if any
            for (int sy = 0; sy < kSub; ++sy)
                for (int sx = 0; sx < kSub; ++sx) {
                    const float px = float(x) + (float(sx) + 0.5f) / kSub - 0.5f;
                    const float py = float(y) + (float(sy) + 0.5f) / kSub - 0.5f;
                    const long xi = std::lround((px - c - shift_x) / scale + c);
                    const long yi = std::lround((py - c - shift_y) / scale + c);
                    if (xi < 0 || xi >= n || yi < 0 || yi >= n)
                        continue;
                    if (mp[yi * n + xi] == 1.0f) {
                        ++hits;
                        cxi = xi;
                        cyi = yi;
                    }
                }
            if (hits * 2 < kSub * kSub + 1)
                continue; // backdrop: stays white, mask stays 0
            // Prefer the center's source pixel so solid regions copy their
            // exact texel; fall back to any covered subsample at boundaries.
            const long xi = std::lround((float(x) - c - shift_x) / scale + c);
            const long yi = std::lround((float(y) - c - shift_y) / scale + c);
            const bool center_ok =
                xi >= 0 && xi < n && yi >= 0 && yi < n && mp[yi * n + xi] == 1.0f;
            const long ux = center_ok ? xi : cxi;
            const long uy = center_ok ? yi : cyi;
            mo[y * n + x] = 1.0f;
            for (int ch = 0; ch < 3; ++ch)
                ro[(ch * n + y) * n + x] = rp[(ch * n + uy) * n + ux];
        }
    return {std::move(ref_out), std::move(mask_out)};
}

std::pair<TensorF, TensorF> augment_reference(const TensorF& reference, const TensorF& mask,
                                              Rng& rng) {
    const int n = reference.rank() == 3 ? reference.dim(1) : 0;
    for (int attempt = 0; attempt < kAugmentRetries; ++attempt) {
        const float s = float(rng.uniform(kScaleLo, kScaleHi));
        const float sx = float(rng.uniform(-kShiftFrac, kShiftFrac)) * n;
        const float sy = float(rng.uniform(-kShiftFrac, kShiftFrac)) * n;
        auto out = transform_reference(reference, mask, s, sx, sy);
        const float* mo = out.second.data();
        for (int i = 0; i < n * n; ++i)
            if (mo[i] == 1.0f)
                return out;
    }
    fail(ErrorCode::numeric, "reference augmentation retries exhausted: subject left the frame");
}

std::string manifest_line(const ManifestRecord& rec) {
    check_attrs(rec.attrs);
    std::string pos = rec.attrs.position == 0
                          ? "center"
                          : position_phrases()[std::size_t(rec.attrs.position)];
    std::string s = rec.caption;
    s += "\ttarget=" + rec.target_path;
    s += "\treference=" + rec.reference_path;
    s += "\tmask=" + rec.mask_path;
    s += "\tshape=" + shape_words()[std::size_t(rec.attrs.shape)];
    s += "\tcolor=" + subject_color_words()[std::size_t(rec.attrs.color)];
    s += "\ttexture=" + texture_words()[std::size_t(rec.attrs.texture)];
    s += "\tbackground=" + background_color_words()[std::size_t(rec.attrs.background)];
    s += "\tposition=" + pos;
    s += "\tscale=" + format_float(rec.attrs.scale);
    return s;
}

ManifestRecord parse_manifest_line(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
        if (tab == std::string::npos)
            break;
        start = tab + 1;
    }
    require(fields.size() == 10, ErrorCode::format, "manifest record must have 10 fields");
    ManifestRecord rec;
    rec.caption = fields[0];
    bool seen[9] = {};
    for (std::size_t i = 1; i < fields.size(); ++i) {
        const std::size_t eq = fields[i].find('=');
        require(eq != std::string::npos, ErrorCode::format,
                "manifest field is not key=value: " + fields[i]);
        const std::string key = fields[i].substr(0, eq);
        const std::string val = fields[i].substr(eq + 1);
        int slot = -1;
        if (key == "target") {
            slot = 0;
            rec.target_path = val;
        } else if (key == "reference") {
            slot = 1;
            rec.reference_path = val;
        } else if (key == "mask") {
            slot = 2;
            rec.mask_path = val;
        } else if (key == "shape") {
            slot = 3;
            rec.attrs.shape = index_of(shape_words(), val);
            require(rec.attrs.shape >= 0, ErrorCode::format, "unknown shape: " + val);
        } else if (key == "color") {
            slot = 4;
            rec.attrs.color = index_of(subject_color_words(), val);
            require(rec.attrs.color >= 0, ErrorCode::format, "unknown color: " + val);
        } else if (key == "texture") {
            slot = 5;
            rec.attrs.texture = index_of(texture_words(), val);
            require(rec.attrs.texture >= 0, ErrorCode::format, "unknown texture: " + val);
        } else if (key == "background") {
            slot = 6;
            rec.attrs.background = index_of(background_color_words(), val);
            require(rec.attrs.background >= 0, ErrorCode::format, "unknown background: " + val);
        } else if (key == "position") {
            slot = 7;
            rec.attrs.position = val == "center" ? 0 : index_of(position_phrases(), val);
            require(rec.attrs.position >= 0, ErrorCode::format, "unknown position: " + val);
        } else if (key == "scale") {
            slot = 8;
            rec.attrs.scale = parse_float(val);
        } else {
            fail(ErrorCode::format, "unknown manifest key: " + key);
        }
        require(!seen[slot], ErrorCode::format, "duplicate manifest key: " + key);
        seen[slot] = true;
    }
    for (bool b : seen)
        require(b, ErrorCode::format, "manifest record is missing a key");
    return rec;
}

std::vector<ManifestRecord> write_dataset(const std::string& dir,
                                          const std::vector<Triplet>& triplets) {
    require(!triplets.empty(), ErrorCode::config, "dataset is empty");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    require(!ec, ErrorCode::io, "cannot create dataset directory " + dir);

    std::vector<ManifestRecord> records;
    std::string manifest;
    for (std::size_t i = 0; i < triplets.size(); ++i) {
        const Triplet& t = triplets[i];
        char suffix[16];
        std::snprintf(suffix, sizeof(suffix), "%05zu.png", i);
        ManifestRecord rec;
        rec.caption = t.caption_text;
        rec.target_path = std::string("target_") + suffix;
        rec.reference_path = std::string("reference_") + suffix;
        rec.mask_path = std::string("mask_") + suffix;
        rec.attrs = t.attrs;

        save_png(dir + "/" + rec.target_path, image_from_tensor(t.target));
        save_png(dir + "/" + rec.reference_path, image_from_tensor(t.reference));
        const int n = t.mask.dim(0);
        Image8 m(n, n, 1);
        const float* mp = t.mask.data();
        for (int j = 0; j < n * n; ++j)
            m.px[std::size_t(j)] = mp[j] > 0.5f ? 255 : 0;
        save_png(dir + "/" + rec.mask_path, m);

        manifest += manifest_line(rec);
        manifest += '\n';
        records.push_back(std::move(rec));
    }
    std::ofstream out(dir + "/manifest.txt", std::ios::binary);
    out.write(manifest.data(), std::streamsize(manifest.size()));
    require(out.good(), ErrorCode::io, "cannot write manifest under " + dir);
    return records;
}

std::vector<ManifestRecord> read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorCode::io, "cannot open manifest " + path);
    std::vector<ManifestRecord> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        records.push_back(parse_manifest_line(line));
    }
    require(!records.empty(), ErrorCode::format, "manifest has no records: " + path);
    return records;
}

} // namespace dc
