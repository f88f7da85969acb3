#pragma once
// 8-bit image container with PNG (zlib deflate) and binary PNM (P5/P6)
// codecs, plus the linear mapping between images and [-1,1] tensors used by
// the rest of the pipeline.
//
// PNG support is deliberately narrow: 8-bit depth, grayscale / RGB output,
// non-interlaced, all standard scanline filters accepted on decode (RGBA
// inputs are composited over white, matching the white-background convention
// of reference images). Encoding always uses filter 0 and a fixed zlib level
// so identical pixels yield identical files.

#include <cstdint>
#include <string>
#include <vector>

#include "dc/tensor.hpp"

namespace dc {

struct Image8 {
    int w = 0;
    int h = 0;
    int c = 0;                    // 1 = grayscale, 3 = RGB
    std::vector<std::uint8_t> px; // row-major, channel-interleaved, h*w*c bytes

    Image8() = default;
    Image8(int w_, int h_, int c_)
        : w(w_), h(h_), c(c_), px(std::size_t(w_) * h_ * c_, 0) {}
    std::uint8_t& at(int y, int x, int ch) { return px[std::size_t(y * w + x) * c + ch]; }
    std::uint8_t at(int y, int x, int ch) const { return px[std::size_t(y * w + x) * c + ch]; }
};

// PNG: in-memory codec plus file wrappers.
std::vector<std::uint8_t> encode_png(const Image8& img);
Image8 decode_png(const std::vector<std::uint8_t>& bytes);
void save_png(const std::string& path, const Image8& img);
Image8 load_png(const std::string& path);

// Binary PNM fallback: P5 for grayscale, P6 for RGB.
std::vector<std::uint8_t> encode_pnm(const Image8& img);
Image8 decode_pnm(const std::vector<std::uint8_t>& bytes);
void save_pnm(const std::string& path, const Image8& img);
Image8 load_pnm(const std::string& path);

// Dispatch on content magic (PNG signature vs "P5"/"P6").
Image8 load_image(const std::string& path);

// Value mapping: tensor [c,h,w] in [-1,1] <-> 8-bit pixels via
// u = round((v+1)/2*255) clamped, v = u/255*2-1.
Image8 image_from_tensor(const TensorF& t);
TensorF tensor_from_image(const Image8& img);

} // namespace dc
