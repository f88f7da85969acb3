#pragma once
// Procedural dataset: (caption, target, reference, mask) triplets over a
// closed scene grammar. Each sample places one textured shape on a colored
// background (the target), renders the same subject canonically centered on
// white (the reference), and keeps the subject's exact silhouette (the mask).
// Everything is a pure function of (seed, index), so datasets can be sharded
// and regenerated on demand instead of stored.
//
// Captions cover shape, subject color, background color, and placement.
// Texture (solid vs striped) and the target's size jitter are deliberately
// absent from the grammar: texture is the part of subject identity that can
// only be recovered from the reference image, which is what makes
// reference-conditioned generation measurably different from captions alone.

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dc/rng.hpp"
#include "dc/tensor.hpp"
#include "dc/text.hpp"

namespace dc {

// Fixed raster size of every dataset image.
inline constexpr int kImageSize = 32;

// Subject textures; index 0 must stay "solid" (the untextured baseline).
const std::vector<std::string>& texture_words(); // {"solid", "striped"}

// 8-bit palettes indexed by the word classes in text.hpp. The two palettes
// are disjoint and exclude white, so subject, background, and the reference's
// white backdrop can never be confused by color alone.
const std::array<std::uint8_t, 3>& subject_rgb(int color);
const std::array<std::uint8_t, 3>& background_rgb(int background);

// The darker band shade a striped subject of this color carries (the exact
// values paint_subject writes, so detectors can match stripes losslessly).
std::array<std::uint8_t, 3> stripe_rgb(int color);

// Center of a position bucket as fractions of the image side (x, y).
std::pair<float, float> position_fraction(int position);

struct SubjectAttrs;
// Config error when any attribute index or the scale is out of range.
void check_attrs(const SubjectAttrs& attrs);

// Scene description behind one sample. shape / color / background / position
// index into the word lists in text.hpp, texture into texture_words(); scale
// is the target's size jitter relative to the canonical reference size.
struct SubjectAttrs {
    int shape = 0;
    int color = 0;
    int texture = 0;
    int background = 0;
    int position = 0; // 0 = centered, phrase omitted from the caption
    float scale = 1.0f;
    bool operator==(const SubjectAttrs&) const = default;
};

struct Triplet {
    TokenSequence caption;
    std::string caption_text;
    TensorF target;    // [3,n,n] in [-1,1], subject over colored background
    TensorF reference; // [3,n,n], same subject centered on white
    TensorF mask;      // [n,n] binary, silhouette of the reference subject
    SubjectAttrs attrs;
};

// Binary silhouette of shape `shape` centered at (cx,cy) with nominal radius
// r on an n x n grid; a pixel is 1 iff at least half of a 4x4 subsample grid
// falls inside (area-faithful coverage test). Shared by the renderer and by
// silhouette-matching metrics downstream.
TensorF rasterize_shape(int shape, float cx, float cy, float r, int n);

// Caption text for a scene ("a <color> <shape> on a <bgcolor> background
// [<position>]") and its inverse. Parsing recovers exactly the attributes a
// caption can express (shape, color, background, position); texture and
// scale in the result keep their defaults. Non-grammar text is a format
// error.
std::string caption_for_attrs(const SubjectAttrs& attrs);
SubjectAttrs parse_caption(const std::string& text);

// Render the target / reference / mask images for a fully specified scene.
// Exposed so metrics can rebuild ideal rasters for comparison.
Triplet render_triplet(const SubjectAttrs& attrs, float jitter_x, float jitter_y,
                       const Vocabulary& vocab);

// Sample index `index` of the dataset with the given master seed: attribute
// draws and placement jitter come from an Rng keyed on (seed, index), so
// generate_dataset(n, seed)[i] == generate_single(seed, i) for every i.
Triplet generate_single(std::uint64_t seed, int index, const Vocabulary& vocab);
std::vector<Triplet> generate_dataset(int n, std::uint64_t seed, const Vocabulary& vocab);

// Scale the subject about the image center by `scale`, then shift it by
// (shift_x, shift_y) pixels, re-composited on white; the mask gets the
// identical transform. Subject membership uses the same coverage sampling as
// rasterize_shape (mask area tracks scale^2), colors are copied from source
// pixels rather than blended, and the identity transform (scale 1, shift 0)
// reproduces a white-backed input bit-exactly.
std::pair<TensorF, TensorF> transform_reference(const TensorF& reference, const TensorF& mask,
                                                float scale, float shift_x, float shift_y);

// Training-time reference augmentation: random scale in [0.8,1.2] and shift
// of at most 10% of the width, via transform_reference. Draws that push the
// subject fully out of frame are retried a bounded number of times, then
// fail with a numeric error.
std::pair<TensorF, TensorF> augment_reference(const TensorF& reference, const TensorF& mask,
                                              Rng& rng);

// Dataset manifest: one tab-separated record per line — caption text, the
// three image paths, then the attributes as key=value pairs. Floats are
// printed with enough digits to round-trip exactly.
struct ManifestRecord {
    std::string caption;
    std::string target_path;
    std::string reference_path;
    std::string mask_path;
    SubjectAttrs attrs;
    bool operator==(const ManifestRecord&) const = default;
};

std::string manifest_line(const ManifestRecord& rec);
ManifestRecord parse_manifest_line(const std::string& line);

// Write triplets[i] as target_%05d.png / reference_%05d.png / mask_%05d.png
// plus manifest.txt under dir (created if missing); returns the manifest
// records with paths relative to dir.
std::vector<ManifestRecord> write_dataset(const std::string& dir,
                                          const std::vector<Triplet>& triplets);
std::vector<ManifestRecord> read_manifest(const std::string& path);

} // namespace dc
