#include "dc/serialize.hpp"

#include <cstdio>
#include <cstring>

#include "dc/common.hpp"

namespace dc {

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    require(f != nullptr, ErrorCode::io, "cannot open for reading: " + path);
    std::fseek(f, 0, SEEK_END);
    long len = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    if (len < 0) {
        std::fclose(f);
        fail(ErrorCode::io, "cannot stat: " + path);
    }
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(len));
    std::size_t got = bytes.empty() ? 0 : std::fread(bytes.data(), 1, bytes.size(), f);
    std::fclose(f);
    require(got == bytes.size(), ErrorCode::io, "short read: " + path);
    return bytes;
}

void write_file_bytes(const std::string& path, const void* data, std::size_t n) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    require(f != nullptr, ErrorCode::io, "cannot open for writing: " + path);
    std::size_t put = (n == 0) ? 0 : std::fwrite(data, 1, n, f);
    int rc = std::fclose(f);
    require(put == n && rc == 0, ErrorCode::io, "short write: " + path);
}

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(std::uint8_t(v));
    out.push_back(std::uint8_t(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

std::uint8_t ByteReader::u8() {
    require(pos_ + 1 <= size_, ErrorCode::format, "truncated input (u8)");
    return data_[pos_++];
}

std::uint16_t ByteReader::u16() {
    require(pos_ + 2 <= size_, ErrorCode::format, "truncated input (u16)");
    std::uint16_t v = std::uint16_t(data_[pos_]) | (std::uint16_t(data_[pos_ + 1]) << 8);
    pos_ += 2;
    return v;
}

std::uint32_t ByteReader::u32() {
    require(pos_ + 4 <= size_, ErrorCode::format, "truncated input (u32)");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
}

std::uint64_t ByteReader::u64() {
    require(pos_ + 8 <= size_, ErrorCode::format, "truncated input (u64)");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
}

float ByteReader::f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

void ByteReader::bytes(void* dst, std::size_t n) {
    require(pos_ + n <= size_, ErrorCode::format, "truncated input (bytes)");
    std::memcpy(dst, data_ + pos_, n);
    pos_ += n;
}

std::uint16_t float_to_half(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    std::uint32_t sign = (bits >> 16) & 0x8000u;
    std::uint32_t exp = (bits >> 23) & 0xffu;
    std::uint32_t mant = bits & 0x7fffffu;
    if (exp == 0xffu) // inf / nan
        return std::uint16_t(sign | 0x7c00u | (mant ? 0x200u : 0u));
    int e = int(exp) - 127 + 15;
    if (e >= 31) // overflow -> inf
        return std::uint16_t(sign | 0x7c00u);
    if (e <= 0) { // subnormal half (or zero)
        if (e < -10) return std::uint16_t(sign);
        mant |= 0x800000u; // restore implicit bit
        int shift = 14 - e;
        std::uint32_t half = mant >> shift;
        std::uint32_t rem = mant & ((1u << shift) - 1);
        std::uint32_t mid = 1u << (shift - 1);
        if (rem > mid || (rem == mid && (half & 1u))) half++;
        return std::uint16_t(sign | half);
    }
    std::uint32_t half = std::uint32_t(e << 10) | (mant >> 13);
    std::uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) half++; // may carry into exponent; that is correct rounding
    return std::uint16_t(sign | half);
}

float half_to_float(std::uint16_t h) {
    std::uint32_t sign = (std::uint32_t(h) & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else { // subnormal: normalize
            int e = -1;
            do {
                mant <<= 1;
                ++e;
            } while ((mant & 0x400u) == 0);
            bits = sign | std::uint32_t(127 - 15 - e) << 23 | ((mant & 0x3ffu) << 13);
        }
    } else if (exp == 31) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

namespace {

constexpr char kMagic[4] = {'D', 'C', 'T', 'N'};
constexpr std::uint16_t kVersionF32 = 1;
constexpr std::uint16_t kVersionF16 = 2;
constexpr int kMaxRank = 8;

} // namespace

std::vector<std::uint8_t> encode_tensors(const std::vector<NamedTensor>& tensors, bool fp16) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u16(out, fp16 ? kVersionF16 : kVersionF32);
    put_u32(out, std::uint32_t(tensors.size()));
    for (const NamedTensor& nt : tensors) {
        require(nt.name.size() <= 0xffffu, ErrorCode::format, "tensor name too long: " + nt.name);
        require(int(nt.tensor.rank()) <= kMaxRank, ErrorCode::format,
                "tensor rank too large: " + nt.name);
        put_u16(out, std::uint16_t(nt.name.size()));
        out.insert(out.end(), nt.name.begin(), nt.name.end());
        put_u8(out, std::uint8_t(nt.tensor.rank()));
        for (int d : nt.tensor.shape()) put_u32(out, std::uint32_t(d));
        const float* p = nt.tensor.data();
        if (fp16) {
            for (std::size_t i = 0; i < nt.tensor.numel(); ++i) put_u16(out, float_to_half(p[i]));
        } else {
            for (std::size_t i = 0; i < nt.tensor.numel(); ++i) put_f32(out, p[i]);
        }
    }
    return out;
}

std::vector<NamedTensor> decode_tensors(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes);
    char magic[4];
    r.bytes(magic, 4);
    require(std::memcmp(magic, kMagic, 4) == 0, ErrorCode::format, "bad tensor-file magic");
    std::uint16_t version = r.u16();
    require(version == kVersionF32 || version == kVersionF16, ErrorCode::format,
            "unsupported tensor-file version " + std::to_string(version));
    bool fp16 = (version == kVersionF16);
    std::uint32_t count = r.u32();
    std::vector<NamedTensor> tensors;
    tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint16_t name_len = r.u16();
        std::string name(name_len, '\0');
        r.bytes(name.data(), name_len);
        std::uint8_t rank = r.u8();
        require(rank >= 1 && rank <= kMaxRank, ErrorCode::format, "bad tensor rank: " + name);
        std::vector<int> shape(rank);
        std::size_t numel = 1;
        for (int d = 0; d < rank; ++d) {
            std::uint32_t dim = r.u32();
            require(dim >= 1 && dim <= 0x7fffffffu, ErrorCode::format, "bad tensor dim: " + name);
            shape[d] = int(dim);
            numel *= dim;
            require(numel <= (std::size_t(1) << 33), ErrorCode::format,
                    "tensor too large: " + name);
        }
        TensorF t(shape);
        float* p = t.data();
        if (fp16) {
            for (std::size_t k = 0; k < numel; ++k) p[k] = half_to_float(r.u16());
        } else {
            for (std::size_t k = 0; k < numel; ++k) p[k] = r.f32();
        }
        tensors.push_back({std::move(name), std::move(t)});
    }
    require(r.remaining() == 0, ErrorCode::format, "trailing bytes after tensor data");
    return tensors;
}

void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors, bool fp16) {
    std::vector<std::uint8_t> bytes = encode_tensors(tensors, fp16);
    write_file_bytes(path, bytes.data(), bytes.size());
}

std::vector<NamedTensor> load_tensors(const std::string& path) {
    return decode_tensors(read_file_bytes(path));
}

} // namespace dc
