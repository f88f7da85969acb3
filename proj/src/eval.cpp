#include "dc/eval.hpp"

#include <algorithm>
#include <chrono>
#include <climits>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "dc/common.hpp"
#include "dc/image.hpp"
#include "dc/rng.hpp"
#include "dc/text.hpp"

namespace dc {

namespace {

// Foreground rule: a pixel belongs to the subject when it sits closer (8-bit
// L1, with this margin of slack) to one of the subject references than to
// the border-estimated background color. Pure background-distance
// thresholding would lose stripe shades that happen to sit near a background
// color (cyan's shade vs the teal background differ by only 18).
constexpr double kFgMargin = 8.0;
constexpr int kMinBlobArea = 8;
// Color credit fades linearly and hits zero at this mean per-pixel L1.
constexpr float kColorNorm = 192.0f;

int num_shapes() { return int(shape_words().size()); }
int num_colors() { return int(subject_color_words().size()); }
int num_backgrounds() { return int(background_color_words().size()); }
int num_positions() { return int(position_phrases().size()); }

// Unit-scale geometry of each shape, measured once from a high-resolution
// raster (r = 100): area in units of r^2 and the centroid's offset from the
// raster center in units of r (the triangle's centroid sits below its
// bounding center, so template placement must compensate).
struct ShapeGeometry {
    double unit_area = 0.0;
    double off_x = 0.0, off_y = 0.0;
};

const std::vector<ShapeGeometry>& shape_geometry() {
    static const std::vector<ShapeGeometry> geo = [] {
        std::vector<ShapeGeometry> out;
        const int n = 257;
        const float c = float(n) / 2.0f;
        const float r = 100.0f;
        for (int s = 0; s < num_shapes(); ++s) {
            const TensorF big = rasterize_shape(s, c, c, r, n);
            double area = 0, sx = 0, sy = 0;
            const float* p = big.data();
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x)
                    if (p[y * n + x] == 1.0f) {
                        area += 1;
                        sx += x + 0.5;
                        sy += y + 0.5;
                    }
            ShapeGeometry g;
            g.unit_area = area / double(r) / double(r);
            g.off_x = (sx / area - double(c)) / double(r);
            g.off_y = (sy / area - double(c)) / double(r);
            out.push_back(g);
        }
        return out;
    }();
    return geo;
}

// The 16 subject references: solid and stripe-shaded versions of each color.
struct ColorRef {
    int color = 0;
    std::array<std::uint8_t, 3> rgb{};
};

const std::vector<ColorRef>& color_refs() {
    static const std::vector<ColorRef> refs = [] {
        std::vector<ColorRef> out;
        for (int c = 0; c < num_colors(); ++c) {
            out.push_back({c, subject_rgb(c)});
            out.push_back({c, stripe_rgb(c)});
        }
        return out;
    }();
    return refs;
}

int l1(const std::uint8_t* a, const std::array<std::uint8_t, 3>& b) {
    return std::abs(int(a[0]) - int(b[0])) + std::abs(int(a[1]) - int(b[1])) +
           std::abs(int(a[2]) - int(b[2]));
}

double iou(const TensorF& a, const TensorF& b) {
    int inter = 0, uni = 0;
    const float* pa = a.data();
    const float* pb = b.data();
    for (int i = 0; i < a.numel(); ++i) {
        const bool ia = pa[i] == 1.0f, ib = pb[i] == 1.0f;
        inter += ia && ib;
        uni += ia || ib;
    }
    return uni == 0 ? 0.0 : double(inter) / double(uni);
}

int grid_side(int numel, const char* what) {
    const int g = int(std::lround(std::sqrt(double(numel))));
    require(g * g == numel, ErrorCode::dimension,
            std::string(what) + " length is not a square grid");
    return g;
}

std::string format_row_label(const std::string& label) {
    require(!label.empty() && label.find(',') == std::string::npos &&
                label.find('\n') == std::string::npos,
            ErrorCode::format, "report labels must be non-empty and comma/newline free");
    return label;
}

} // namespace

BlobDetection detect_subject(const TensorF& gen) {
    require(gen.rank() == 3 && gen.dim(0) == 3 && gen.dim(1) == gen.dim(2) && gen.dim(1) >= 8,
            ErrorCode::dimension, "detector expects a [3,n,n] image, n >= 8");
    const int n = gen.dim(1);
    const Image8 img = image_from_tensor(gen);

    BlobDetection det;

    // Background estimate: mean of the one-pixel border ring, then the
    // nearest background palette entry.
    double bg[3] = {0, 0, 0};
    int border = 0;
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            if (y == 0 || y == n - 1 || x == 0 || x == n - 1) {
                for (int ch = 0; ch < 3; ++ch)
                    bg[ch] += img.at(y, x, ch);
                ++border;
            }
    for (double& v : bg)
        v /= border;
    {
        double best = 1e18;
        for (int b = 0; b < num_backgrounds(); ++b) {
            const auto& rgb = background_rgb(b);
            const double d = std::fabs(bg[0] - rgb[0]) + std::fabs(bg[1] - rgb[1]) +
                             std::fabs(bg[2] - rgb[2]);
            if (d < best) {
                best = d;
                det.background = b;
            }
        }
    }

    // Foreground: nearer to a subject reference than to the background.
    std::vector<std::uint8_t> fg(std::size_t(n) * n, 0);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const std::uint8_t px[3] = {img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)};
            int dsub = INT_MAX;
            for (const ColorRef& ref : color_refs())
                dsub = std::min(dsub, l1(px, ref.rgb));
            const double dbg = std::fabs(px[0] - bg[0]) + std::fabs(px[1] - bg[1]) +
                               std::fabs(px[2] - bg[2]);
            fg[std::size_t(y) * n + x] = double(dsub) + kFgMargin <= dbg;
        }

    // Largest 4-connected foreground component.
    std::vector<int> label(std::size_t(n) * n, -1);
    int best_area = 0, best_label = -1;
    std::vector<int> stack;
    int next = 0;
    for (int start = 0; start < n * n; ++start) {
        if (!fg[std::size_t(start)] || label[std::size_t(start)] >= 0)
            continue;
        int area = 0;
        stack.assign(1, start);
        label[std::size_t(start)] = next;
        while (!stack.empty()) {
            const int cur = stack.back();
            stack.pop_back();
            ++area;
            const int y = cur / n, x = cur % n;
            const int nb[4] = {cur - n, cur + n, cur - 1, cur + 1};
            const bool ok[4] = {y > 0, y < n - 1, x > 0, x < n - 1};
            for (int k = 0; k < 4; ++k)
                if (ok[k] && fg[std::size_t(nb[k])] && label[std::size_t(nb[k])] < 0) {
                    label[std::size_t(nb[k])] = next;
                    stack.push_back(nb[k]);
                }
        }
        if (area > best_area) {
            best_area = area;
            best_label = next;
        }
        ++next;
    }
    if (best_area < kMinBlobArea)
        return det; // found == false; background estimate still valid

    det.found = true;
    det.area = best_area;
    det.blob = TensorF({n, n});
    double sx = 0, sy = 0;
    for (int i = 0; i < n * n; ++i)
        if (label[std::size_t(i)] == best_label) {
            det.blob.data()[i] = 1.0f;
            sx += i % n + 0.5;
            sy += i / n + 0.5;
        }
    det.cx = sx / best_area;
    det.cy = sy / best_area;

    // Position: nearest bucket center to the centroid, in fractional coords.
    {
        double best = 1e18;
        for (int p = 0; p < num_positions(); ++p) {
            const auto [fx, fy] = position_fraction(p);
            const double dx = det.cx / n - fx, dy = det.cy / n - fy;
            const double d = dx * dx + dy * dy;
            if (d < best) {
                best = d;
                det.position = p;
            }
        }
    }

    // Shape: best IoU over area-fitted templates with a small deterministic
    // search over center offsets and scale, compensating each shape's
    // centroid offset.
    {
        double best = -1.0;
        for (int s = 0; s < num_shapes(); ++s) {
            const ShapeGeometry& g = shape_geometry()[std::size_t(s)];
            const double r0 = std::sqrt(double(best_area) / g.unit_area);
            double shape_best = -1.0;
            for (const double scale : {0.94, 1.0, 1.06}) {
                const double r = r0 * scale;
                for (const double dx : {-0.5, 0.0, 0.5})
                    for (const double dy : {-0.5, 0.0, 0.5}) {
                        const TensorF tmpl =
                            rasterize_shape(s, float(det.cx - g.off_x * r + dx),
                                            float(det.cy - g.off_y * r + dy), float(r), n);
                        shape_best = std::max(shape_best, iou(det.blob, tmpl));
                    }
            }
            if (shape_best > best) {
                best = shape_best;
                det.shape = s;
            }
        }
        det.shape_iou = float(best);
    }

    // Color: per-pixel nearest reference (solid or stripe shade of any
    // color), majority vote, then the mean distance to the voted pair.
    {
        std::vector<int> votes(std::size_t(num_colors()), 0);
        for (int i = 0; i < n * n; ++i) {
            if (det.blob.data()[i] != 1.0f)
                continue;
            const int y = i / n, x = i % n;
            const std::uint8_t px[3] = {img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)};
            int bd = INT_MAX, bc = 0;
            for (const ColorRef& ref : color_refs()) {
                const int d = l1(px, ref.rgb);
                if (d < bd) {
                    bd = d;
                    bc = ref.color;
                }
            }
            ++votes[std::size_t(bc)];
        }
        det.color = int(std::max_element(votes.begin(), votes.end()) - votes.begin());
        const auto solid = subject_rgb(det.color);
        const auto shade = stripe_rgb(det.color);
        double sum = 0;
        for (int i = 0; i < n * n; ++i) {
            if (det.blob.data()[i] != 1.0f)
                continue;
            const int y = i / n, x = i % n;
            const std::uint8_t px[3] = {img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)};
            sum += std::min(l1(px, solid), l1(px, shade));
        }
        det.color_distance = float(sum / best_area);
    }
    return det;
}

float masked_fidelity(const TensorF& gen, const SubjectAttrs& attrs, BlobDetection* detail) {
    check_attrs(attrs);
    BlobDetection det = detect_subject(gen);
    float score = 0.0f;
    if (det.found) {
        const float shape_term = det.shape == attrs.shape ? 1.0f : 0.0f;
        const float color_term =
            det.color == attrs.color
                ? std::max(0.0f, 1.0f - std::min(1.0f, det.color_distance / kColorNorm))
                : 0.0f;
        score = 0.5f * shape_term + 0.5f * color_term;
    }
    if (detail)
        *detail = std::move(det);
    return score;
}

float prompt_adherence(const TensorF& gen, const SubjectAttrs& attrs,
                       AdherenceBreakdown* detail) {
    check_attrs(attrs);
    const BlobDetection det = detect_subject(gen);
    AdherenceBreakdown br;
    br.found = det.found;
    br.background_term = det.background == attrs.background ? 1.0f : 0.0f;
    br.position_term = det.found && det.position == attrs.position ? 1.0f : 0.0f;
    const float score =
        det.found ? 0.5f * (br.background_term + br.position_term) : br.background_term;
    if (detail)
        *detail = br;
    return score;
}

ForwardHooks AttentionTrace::recorder() {
    ForwardHooks hooks;
    hooks.adapter_attention = [this](const LayerSite& site, const TensorF& rows) {
        // A site repeating means a new forward pass began (each adapter runs
        // once per forward, in forward order).
        bool fresh = passes.empty();
        if (!fresh)
            for (const auto& [s, r] : passes.back())
                if (s.same_block(site)) {
                    fresh = true;
                    break;
                }
        if (fresh)
            passes.emplace_back();
        passes.back().emplace_back(site, rows);
    };
    return hooks;
}

TensorF attention_map(const AttentionTrace& trace, const LayerSite& site, int pass, int qx,
                      int qy, int image_size) {
    require(pass >= 0 && pass < int(trace.passes.size()), ErrorCode::usage,
            "no probe data for pass " + std::to_string(pass));
    const TensorF* rows = nullptr;
    for (const auto& [s, r] : trace.passes[std::size_t(pass)])
        if (s.same_block(site)) {
            rows = &r;
            break;
        }
    require(rows != nullptr, ErrorCode::usage, "no probe data for site " + site.str());
    require(rows->rank() == 2, ErrorCode::dimension, "probe rows must be [N,M]");
    require(image_size > 0 && qx >= 0 && qx < image_size && qy >= 0 && qy < image_size,
            ErrorCode::dimension, "query pixel outside the image");

    const int gq = grid_side(rows->dim(0), "query grid");
    const int gm = grid_side(rows->dim(1), "reference grid");
    const int gx = qx * gq / image_size;
    const int gy = qy * gq / image_size;
    const int row = gy * gq + gx;

    TensorF map({gm, gm});
    const float* src = rows->data() + std::int64_t(row) * rows->dim(1);
    std::copy(src, src + map.numel(), map.data());
    return map;
}

std::string export_attention(const std::string& dir, const AttentionTrace& trace,
                             const LayerSite& site, int pass, int qx, int qy, int image_size) {
    const TensorF map = attention_map(trace, site, pass, qx, qy, image_size);
    const int g = map.dim(0);
    float lo = map.data()[0], hi = map.data()[0];
    for (int i = 0; i < map.numel(); ++i) {
        lo = std::min(lo, map.data()[i]);
        hi = std::max(hi, map.data()[i]);
    }
    Image8 img(g, g, 1);
    const float span = hi - lo;
    for (int i = 0; i < map.numel(); ++i)
        img.px[std::size_t(i)] =
            span > 0 ? std::uint8_t(std::lround((map.data()[i] - lo) / span * 255.0f)) : 0;

    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    require(!ec, ErrorCode::io, "cannot create directory " + dir);
    char name[128];
    std::snprintf(name, sizeof(name), "attn_%s%d_%d_%d_%d.png", region_name(site.region),
                  site.index, pass, qx, qy);
    const std::string path = dir + "/" + name;
    save_png(path, img);
    return path;
}

double localization_ratio(const TensorF& map, const TensorF& ref_mask) {
    require(map.rank() == 2 && map.dim(0) == map.dim(1), ErrorCode::dimension,
            "attention map must be square");
    require(ref_mask.rank() == 2 && ref_mask.dim(0) == ref_mask.dim(1), ErrorCode::dimension,
            "reference mask must be square");
    const int g = map.dim(0);
    const int n = ref_mask.dim(0);
    require(n % g == 0, ErrorCode::dimension, "mask side must be a multiple of the map side");
    const int block = n / g;

    double inside = 0, outside = 0, covered = 0;
    for (int cy = 0; cy < g; ++cy)
        for (int cx = 0; cx < g; ++cx) {
            double frac = 0;
            for (int y = cy * block; y < (cy + 1) * block; ++y)
                for (int x = cx * block; x < (cx + 1) * block; ++x)
                    frac += ref_mask.data()[std::int64_t(y) * n + x];
            frac /= double(block) * block;
            covered += frac;
            const double m = double(map.data()[std::int64_t(cy) * g + cx]);
            inside += m * frac;
            outside += m * (1.0 - frac);
        }
    require(covered < double(g) * g, ErrorCode::eval, "mask covers the whole reference grid");
    // Softmax rows are strictly positive, so probes always land some mass
    // outside; only synthetic maps reach the infinite limit.
    return outside == 0.0 ? std::numeric_limits<double>::infinity() : inside / outside;
}

EvalReport evaluate_arms(const Denoiser& den, const NoiseSchedule& sched,
                         const std::vector<ArmSpec>& arms, const std::vector<EvalCase>& cases) {
    require(!arms.empty(), ErrorCode::config, "no arms to evaluate");
    require(!cases.empty(), ErrorCode::config, "no eval cases");

    EvalReport report;
    report.cases = int(cases.size());
    for (const ArmSpec& arm : arms) {
        EvalRow row;
        row.label = arm.label;
        if (arm.use_image && arm.bank == nullptr) {
            report.rows.push_back(row); // checkpoint missing: absent, not zero
            continue;
        }
        arm.guidance.validate();
        const int per_step = arm.guidance.mode == GuidanceMode::joint ? 2 : 3;
        const long long expected =
            (arm.use_image ? 1 : 0) + (long long)(arm.guidance.steps) * per_step;

        const auto start = std::chrono::steady_clock::now();
        double fid = 0, adh = 0;
        for (const EvalCase& c : cases) {
            const Triplet& tr = c.triplet;
            const long long before = den.forward_count();
            FeatureCache cache;
            const FeatureCache* cache_p = nullptr;
            const AdapterBank* bank_p = nullptr;
            if (arm.use_image) {
                const std::vector<LayerSite> sites =
                    arm.sites.empty() ? arm.bank->site_list() : arm.sites;
                const std::uint64_t cache_seed = Rng::mix(c.seed, 1);
                cache = arm.cache_with_text
                            ? build_cache_with_prompt(den, sched, tr.reference, &tr.mask,
                                                      tr.caption, sites, arm.cache_t, cache_seed)
                            : build_cache(den, sched, tr.reference, &tr.mask, sites, arm.cache_t,
                                          cache_seed);
                cache_p = &cache;
                bank_p = arm.bank;
            }
            Rng rng(Rng::mix(c.seed, 2));
            const TensorF img =
                sample(den, sched, tr.caption, bank_p, cache_p, arm.guidance, rng);
            const long long evals = den.forward_count() - before;
            require(evals == expected, ErrorCode::eval,
                    "denoiser evaluation count " + std::to_string(evals) + " != expected " +
                        std::to_string(expected) + " for arm " + arm.label);
            row.denoiser_evals = evals;
            fid += masked_fidelity(img, tr.attrs);
            adh += prompt_adherence(img, tr.attrs);
        }
        row.present = true;
        row.fidelity = fid / double(cases.size());
        row.adherence = adh / double(cases.size());
        require(std::isfinite(row.fidelity) && std::isfinite(row.adherence), ErrorCode::eval,
                "non-finite metric for arm " + arm.label);
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                          .count() /
                      double(cases.size());
        report.rows.push_back(row);
    }
    return report;
}

void write_report_csv(const std::string& path, const EvalReport& report) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorCode::io, "cannot write report " + path);
    out << "label,present,fidelity,adherence,denoiser_evals,cases\n";
    for (const EvalRow& r : report.rows) {
        out << format_row_label(r.label) << ',';
        if (r.present) {
            char buf[96];
            std::snprintf(buf, sizeof(buf), "1,%.17g,%.17g,%lld,", r.fidelity, r.adherence,
                          r.denoiser_evals);
            out << buf;
        } else {
            out << "0,absent,absent,0,";
        }
        out << report.cases << '\n';
    }
    require(out.good(), ErrorCode::io, "cannot write report " + path);
}

EvalReport read_report_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorCode::io, "cannot read report " + path);
    std::string line;
    require(bool(std::getline(in, line)) &&
                line == "label,present,fidelity,adherence,denoiser_evals,cases",
            ErrorCode::format, "report missing its header: " + path);
    EvalReport report;
    bool first = true;
    while (std::getline(in, line)) {
        std::vector<std::string> f;
        std::size_t pos = 0;
        while (true) {
            const std::size_t c = line.find(',', pos);
            f.push_back(line.substr(pos, c == std::string::npos ? c : c - pos));
            if (c == std::string::npos)
                break;
            pos = c + 1;
        }
        require(f.size() == 6, ErrorCode::format, "report row needs six fields: " + line);
        EvalRow r;
        r.label = f[0];
        require(f[1] == "0" || f[1] == "1", ErrorCode::format, "bad present flag: " + line);
        r.present = f[1] == "1";
        char* end = nullptr;
        if (r.present) {
            r.fidelity = std::strtod(f[2].c_str(), &end);
            require(end == f[2].c_str() + f[2].size(), ErrorCode::format,
                    "bad fidelity: " + line);
            r.adherence = std::strtod(f[3].c_str(), &end);
            require(end == f[3].c_str() + f[3].size(), ErrorCode::format,
                    "bad adherence: " + line);
        } else {
            require(f[2] == "absent" && f[3] == "absent", ErrorCode::format,
                    "absent rows must spell 'absent': " + line);
        }
        r.denoiser_evals = std::strtoll(f[4].c_str(), &end, 10);
        require(end == f[4].c_str() + f[4].size(), ErrorCode::format, "bad eval count: " + line);
        const int cases = int(std::strtol(f[5].c_str(), &end, 10));
        require(end == f[5].c_str() + f[5].size(), ErrorCode::format, "bad case count: " + line);
        require(first || cases == report.cases, ErrorCode::format,
                "inconsistent case counts in " + path);
        report.cases = cases;
        first = false;
        report.rows.push_back(r);
    }
    return report;
}

void write_report_bars(const std::string& path, const EvalReport& report) {
    require(!report.rows.empty(), ErrorCode::config, "empty report");
    const int plot = 100, margin = 4, bar = 8, gap = 2;
    const int stride = 2 * bar + gap + 6;
    const int w = 2 * margin + int(report.rows.size()) * stride - 6;
    const int h = plot + 2 * margin + 1;
    Image8 img(w, h, 3);
    std::fill(img.px.begin(), img.px.end(), std::uint8_t(255));
    for (int x = 0; x < w; ++x) // baseline
        for (int ch = 0; ch < 3; ++ch)
            img.at(h - margin, x, ch) = 40;

    const std::uint8_t fid_rgb[3] = {60, 120, 220};
    const std::uint8_t adh_rgb[3] = {240, 160, 60};
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        const EvalRow& r = report.rows[i];
        if (!r.present)
            continue;
        const int x0 = margin + int(i) * stride;
        const auto draw = [&](int x_start, double v, const std::uint8_t* rgb) {
            const int height = int(std::lround(std::clamp(v, 0.0, 1.0) * plot));
            for (int y = 0; y < height; ++y)
                for (int x = x_start; x < x_start + bar; ++x)
                    for (int ch = 0; ch < 3; ++ch)
                        img.at(h - margin - 1 - y, x, ch) = rgb[ch];
        };
        draw(x0, r.fidelity, fid_rgb);
        draw(x0 + bar + gap, r.adherence, adh_rgb);
    }
    save_png(path, img);
}

} // namespace dc
