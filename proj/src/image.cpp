#include "dc/image.hpp"

#include <cctype>
#include <cmath>
#include <cstring>

#include <zlib.h>

#include "dc/common.hpp"
#include "dc/hashes.hpp"
#include "dc/serialize.hpp"

namespace dc {

namespace {

const std::uint8_t kPngSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) out.push_back(std::uint8_t(v >> (8 * i)));
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
               const std::vector<std::uint8_t>& data) {
    put_u32_be(out, std::uint32_t(data.size()));
    std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    put_u32_be(out, crc32_bytes(out.data() + crc_start, out.size() - crc_start));
}

void check_dims(const Image8& img) {
    require(img.w >= 1 && img.h >= 1 && (img.c == 1 || img.c == 3), ErrorCode::dimension,
            "image must be non-empty with 1 or 3 channels");
    require(img.px.size() == std::size_t(img.w) * img.h * img.c, ErrorCode::dimension,
            "image pixel buffer size mismatch");
}

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

} // namespace

std::vector<std::uint8_t> encode_png(const Image8& img) {
    check_dims(img);
    // Raw scanlines, each prefixed with filter byte 0 (no prediction).
    std::size_t stride = std::size_t(img.w) * img.c;
    std::vector<std::uint8_t> raw;
    raw.reserve((stride + 1) * img.h);
    for (int y = 0; y < img.h; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), img.px.begin() + y * stride, img.px.begin() + (y + 1) * stride);
    }
    uLongf comp_cap = compressBound(uLong(raw.size()));
    std::vector<std::uint8_t> comp(comp_cap);
    int rc = compress2(comp.data(), &comp_cap, raw.data(), uLong(raw.size()), 9);
    require(rc == Z_OK, ErrorCode::format, "deflate failed");
    comp.resize(comp_cap);

    std::vector<std::uint8_t> out(kPngSig, kPngSig + 8);
    std::vector<std::uint8_t> ihdr;
    put_u32_be(ihdr, std::uint32_t(img.w));
    put_u32_be(ihdr, std::uint32_t(img.h));
    ihdr.push_back(8);                        // bit depth
    ihdr.push_back(img.c == 1 ? 0 : 2);       // color type: gray / truecolor
    ihdr.push_back(0);                        // compression
    ihdr.push_back(0);                        // filter method
    ihdr.push_back(0);                        // interlace: none
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", comp);
    put_chunk(out, "IEND", {});
    return out;
}

Image8 decode_png(const std::vector<std::uint8_t>& bytes) {
    require(bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSig, 8) == 0, ErrorCode::format,
            "not a PNG file");
    std::size_t pos = 8;
    auto read_u32_be = [&](std::size_t at) -> std::uint32_t {
        return (std::uint32_t(bytes[at]) << 24) | (std::uint32_t(bytes[at + 1]) << 16) |
               (std::uint32_t(bytes[at + 2]) << 8) | std::uint32_t(bytes[at + 3]);
    };

    int w = 0, h = 0, color_type = -1, src_c = 0;
    std::vector<std::uint8_t> idat;
    bool saw_ihdr = false, saw_iend = false;
    while (!saw_iend) {
        require(pos + 12 <= bytes.size(), ErrorCode::format, "truncated PNG chunk");
        std::uint32_t len = read_u32_be(pos);
        require(pos + 12 + len <= bytes.size(), ErrorCode::format, "truncated PNG chunk body");
        const std::uint8_t* type = bytes.data() + pos + 4;
        const std::uint8_t* data = bytes.data() + pos + 8;
        std::uint32_t crc = read_u32_be(pos + 8 + len);
        require(crc == crc32_bytes(type, 4 + len), ErrorCode::format, "PNG chunk CRC mismatch");
        if (std::memcmp(type, "IHDR", 4) == 0) {
            require(len == 13, ErrorCode::format, "bad IHDR length");
            w = int(read_u32_be(pos + 8));
            h = int(read_u32_be(pos + 12));
            int depth = data[8];
            color_type = data[9];
            int interlace = data[12];
            require(w >= 1 && h >= 1 && w <= 1 << 20 && h <= 1 << 20, ErrorCode::format,
                    "bad PNG dimensions");
            require(depth == 8, ErrorCode::format, "only 8-bit PNG supported");
            require(color_type == 0 || color_type == 2 || color_type == 6, ErrorCode::format,
                    "only gray/RGB/RGBA PNG supported");
            require(interlace == 0, ErrorCode::format, "interlaced PNG not supported");
            src_c = (color_type == 0) ? 1 : (color_type == 2 ? 3 : 4);
            saw_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            require(saw_ihdr, ErrorCode::format, "IDAT before IHDR");
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            saw_iend = true;
        } // ancillary chunks are skipped
        pos += 12 + len;
    }
    require(saw_ihdr && !idat.empty(), ErrorCode::format, "PNG missing IHDR or IDAT");

    std::size_t stride = std::size_t(w) * src_c;
    uLongf raw_len = uLongf((stride + 1) * h);
    std::vector<std::uint8_t> raw(raw_len);
    int rc = uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size()));
    require(rc == Z_OK && raw_len == (stride + 1) * std::size_t(h), ErrorCode::format,
            "PNG pixel data corrupt");

    // Undo per-scanline filters in place (recon buffer, bpp = src_c for 8-bit).
    std::vector<std::uint8_t> recon(stride * h);
    int bpp = src_c;
    for (int y = 0; y < h; ++y) {
        int filter = raw[y * (stride + 1)];
        const std::uint8_t* line = raw.data() + y * (stride + 1) + 1;
        std::uint8_t* cur = recon.data() + y * stride;
        const std::uint8_t* up = (y > 0) ? recon.data() + (y - 1) * stride : nullptr;
        for (std::size_t x = 0; x < stride; ++x) {
            int a = (x >= std::size_t(bpp)) ? cur[x - bpp] : 0;
            int b = up ? up[x] : 0;
            int c2 = (up && x >= std::size_t(bpp)) ? up[x - bpp] : 0;
            int v;
            switch (filter) {
            case 0: v = line[x]; break;
            case 1: v = line[x] + a; break;
            case 2: v = line[x] + b; break;
            case 3: v = line[x] + (a + b) / 2; break;
            case 4: v = line[x] + paeth(a, b, c2); break;
            default: fail(ErrorCode::format, "unknown PNG filter type");
            }
            cur[x] = std::uint8_t(v);
        }
    }

    if (src_c == 4) { // RGBA: composite over white, keep RGB
        Image8 img(w, h, 3);
        for (std::size_t i = 0; i < std::size_t(w) * h; ++i) {
            int a = recon[4 * i + 3];
            for (int ch = 0; ch < 3; ++ch) {
                int v = (recon[4 * i + ch] * a + 255 * (255 - a) + 127) / 255;
                img.px[3 * i + ch] = std::uint8_t(v);
            }
        }
        return img;
    }
    Image8 img(w, h, src_c);
    img.px = std::move(recon);
    return img;
}

void save_png(const std::string& path, const Image8& img) {
    std::vector<std::uint8_t> bytes = encode_png(img);
    write_file_bytes(path, bytes.data(), bytes.size());
}

Image8 load_png(const std::string& path) { return decode_png(read_file_bytes(path)); }

std::vector<std::uint8_t> encode_pnm(const Image8& img) {
    check_dims(img);
    std::string header = (img.c == 1 ? std::string("P5\n") : std::string("P6\n")) +
                         std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.px.begin(), img.px.end());
    return out;
}

Image8 decode_pnm(const std::vector<std::uint8_t>& bytes) {
    require(bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6'),
            ErrorCode::format, "not a binary PNM file");
    int c = (bytes[1] == '5') ? 1 : 3;
    std::size_t pos = 2;
    auto next_int = [&]() -> int {
        // Skip whitespace and '#' comments, then parse a decimal integer.
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
        require(pos < bytes.size() && std::isdigit(bytes[pos]), ErrorCode::format,
                "bad PNM header");
        long v = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + (bytes[pos] - '0');
            require(v <= 1 << 20, ErrorCode::format, "PNM value out of range");
            ++pos;
        }
        return int(v);
    };
    int w = next_int();
    int h = next_int();
    int maxval = next_int();
    require(w >= 1 && h >= 1 && maxval == 255, ErrorCode::format, "unsupported PNM header");
    require(pos < bytes.size() && std::isspace(bytes[pos]), ErrorCode::format, "bad PNM header");
    ++pos; // single whitespace byte separates header from pixels
    Image8 img(w, h, c);
    require(bytes.size() - pos == img.px.size(), ErrorCode::format, "PNM pixel count mismatch");
    std::memcpy(img.px.data(), bytes.data() + pos, img.px.size());
    return img;
}

void save_pnm(const std::string& path, const Image8& img) {
    std::vector<std::uint8_t> bytes = encode_pnm(img);
    write_file_bytes(path, bytes.data(), bytes.size());
}

Image8 load_pnm(const std::string& path) { return decode_pnm(read_file_bytes(path)); }

Image8 load_image(const std::string& path) {
    std::vector<std::uint8_t> bytes = read_file_bytes(path);
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSig, 8) == 0) return decode_png(bytes);
    return decode_pnm(bytes);
}

Image8 image_from_tensor(const TensorF& t) {
    require(t.rank() == 3 && (t.dim(0) == 1 || t.dim(0) == 3), ErrorCode::dimension,
            "image tensor must be [1|3,h,w]");
    int c = t.dim(0), h = t.dim(1), w = t.dim(2);
    Image8 img(w, h, c);
    const float* p = t.data();
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float v = p[(ch * h + y) * w + x];
                long u = std::lround((double(v) + 1.0) * 0.5 * 255.0);
                img.at(y, x, ch) = std::uint8_t(u < 0 ? 0 : (u > 255 ? 255 : u));
            }
    return img;
}

TensorF tensor_from_image(const Image8& img) {
    check_dims(img);
    TensorF t({img.c, img.h, img.w});
    float* p = t.data();
    for (int ch = 0; ch < img.c; ++ch)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                p[(ch * img.h + y) * img.w + x] = float(img.at(y, x, ch)) / 255.0f * 2.0f - 1.0f;
    return t;
}

} // namespace dc
