#pragma once
// Deterministic grading of generated images against the dataset's attribute
// grammar, attention-map diagnostics, and ablation reports.
//
// The dataset's generator is the ground truth, so instead of embedding-model
// similarity scores every metric here is an exact attribute detector: find
// the dominant foreground blob, identify its shape by rasterized-template
// IoU and its color by per-pixel nearest-reference vote, and check the
// caption-visible attributes (background color, position bucket) against the
// image. Nothing in this module draws randomness; identical inputs always
// produce identical scores, files, and reports.

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dc/adapter.hpp"
#include "dc/cache.hpp"
#include "dc/data.hpp"
#include "dc/denoiser.hpp"
#include "dc/sampler.hpp"
#include "dc/tensor.hpp"

namespace dc {

// ---------------------------------------------------------------------------
// Subject detection and the two metrics.

// What the detector saw. Indices follow the word classes in text.hpp /
// data.hpp; -1 where nothing was identified.
struct BlobDetection {
    bool found = false;     // a foreground blob of at least kMinBlobArea pixels
    int shape = -1;         // best template by IoU
    float shape_iou = 0.0f; // that best IoU
    int color = -1;         // majority per-pixel vote over solid+stripe references
    float color_distance = 0.0f; // mean 8-bit L1 to the voted color's pair
    int background = -1;    // nearest background palette entry to the border mean
    int position = -1;      // nearest position bucket to the blob centroid
    double cx = 0.0, cy = 0.0; // blob centroid, pixel coordinates
    int area = 0;              // blob pixel count
    TensorF blob;              // [n,n] 0/1 blob mask (empty when !found)
};

// Locate and classify the subject of a [3,n,n] image in [-1,1]. Pixels are
// quantized to 8 bits with the same mapping the PNG artifacts use, so clean
// rendered targets classify exactly.
BlobDetection detect_subject(const TensorF& gen);

// Subject preservation in [0,1]: 0.5*[shape matches] + 0.5*(1 - normalized
// color distance), where the color term is zero unless the voted color
// matches. No blob -> 0 (detail->found reports the flag).
float masked_fidelity(const TensorF& gen, const SubjectAttrs& attrs,
                      BlobDetection* detail = nullptr);

// Caption obedience in [0,1]: the mean of a background-color indicator and a
// position-bucket indicator. Without a detected blob the position indicator
// is vacuous and the background indicator alone is returned, so a featureless
// image scores exactly the chance rate of the background term.
struct AdherenceBreakdown {
    bool found = false;
    float background_term = 0.0f;
    float position_term = 0.0f;
};
float prompt_adherence(const TensorF& gen, const SubjectAttrs& attrs,
                       AdherenceBreakdown* detail = nullptr);

// ---------------------------------------------------------------------------
// Attention diagnostics.

// Recorder for the adapters' softmax rows during sampling. Attach via
// recorder() as forward hooks; each forward pass that ran adapters appends
// one entry to `passes` holding (site, rows [N x M]) in forward order. Under
// joint guidance exactly one forward per sampling step runs adapters, so the
// pass index equals the step index.
struct AttentionTrace {
    std::vector<std::vector<std::pair<LayerSite, TensorF>>> passes;
    ForwardHooks recorder();
};

// The softmax row of the query pixel (qx, qy) — image coordinates, mapped
// onto the site's query grid — reshaped to the site's reference grid [g,g].
// Rows are returned raw (they sum to 1). Usage error when the trace holds no
// such pass or site; dimension error for out-of-range query pixels.
TensorF attention_map(const AttentionTrace& trace, const LayerSite& site, int pass, int qx,
                      int qy, int image_size);

// Writes attn_<region><index>_<pass>_<qx>_<qy>.png (min-max normalized to
// 8-bit grayscale) into dir and returns the full path.
std::string export_attention(const std::string& dir, const AttentionTrace& trace,
                             const LayerSite& site, int pass, int qx, int qy, int image_size);

// Attention mass landing inside the reference subject divided by the mass
// landing outside, with the [n,n] mask averaged onto the map's grid. A
// uniform map scores area_in/area_out (< 1 for our subjects); localized maps
// score above 1.
double localization_ratio(const TensorF& map, const TensorF& ref_mask);

// ---------------------------------------------------------------------------
// Arm evaluation and reports.

// One graded generation: sample from the triplet's caption (and reference,
// when the arm conditions on images) and compare against the triplet's attrs.
// The seed fixes the sampler's starting noise, shared across arms.
struct EvalCase {
    Triplet triplet;
    std::uint64_t seed = 0;
};

// One configuration to grade. bank == nullptr with use_image means the
// checkpoint is missing: the row is reported absent instead of zero.
struct ArmSpec {
    std::string label;
    const AdapterBank* bank = nullptr;
    bool use_image = true;        // false: text-only baseline, no cache, no adapters
    std::vector<LayerSite> sites; // cache sites (normally bank->site_list())
    int cache_t = 1;
    bool cache_with_text = false; // ablation: cache built on the caption instead of null
    GuidanceConfig guidance;
};

struct EvalRow {
    std::string label;
    bool present = false;
    double fidelity = 0.0;
    double adherence = 0.0;
    // Denoiser forwards per case, verified exact: (1 if a cache is built
    // else 0) + steps x (2 joint / 3 combined).
    long long denoiser_evals = 0;
    double seconds = 0.0; // wall clock per case; never serialized
};

struct EvalReport {
    std::vector<EvalRow> rows;
    int cases = 0;
};

// Evaluate every arm over every case; rows in arm order, metrics averaged
// over cases. Deterministic apart from `seconds`.
EvalReport evaluate_arms(const Denoiser& den, const NoiseSchedule& sched,
                         const std::vector<ArmSpec>& arms, const std::vector<EvalCase>& cases);

// CSV report: header "label,present,fidelity,adherence,denoiser_evals,cases",
// metrics with round-trip precision, absent rows spelled "absent". seconds is
// wall-clock noise and deliberately not stored, so reruns are byte-identical.
void write_report_csv(const std::string& path, const EvalReport& report);
EvalReport read_report_csv(const std::string& path); // strict; exact round-trip

// Bar-chart rendering of the report (two bars per row: fidelity then
// adherence, absent rows left empty). Deterministic pixels.
void write_report_bars(const std::string& path, const EvalReport& report);

} // namespace dc
