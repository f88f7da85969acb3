#pragma once
// Named-tensor checkpoint container ("DCTN") and small binary-file helpers.
//
// Layout, all integers little-endian:
//   magic "DCTN" | version u16 | tensor count u32
//   per tensor:  name length u16 | UTF-8 name | rank u8 | dims u32 each |
//                payload (row-major)
// Version 1 stores float32 payloads and round-trips bit-exactly; version 2
// stores float16 payloads (half the size) for exported inference weights and
// loads back as float32 with the usual half-precision rounding.

#include <cstdint>
#include <string>
#include <vector>

#include "dc/tensor.hpp"

namespace dc {

struct NamedTensor {
    std::string name;
    TensorF tensor;
};

// Whole-file byte IO. Both throw ErrorCode::io on failure.
std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const void* data, std::size_t n);

// Serialize to an in-memory byte image / parse one back. Parsing validates
// magic, version, bounds, and sizes; violations throw ErrorCode::format.
std::vector<std::uint8_t> encode_tensors(const std::vector<NamedTensor>& tensors,
                                         bool fp16 = false);
std::vector<NamedTensor> decode_tensors(const std::vector<std::uint8_t>& bytes);

// File-level wrappers around the encoders above.
void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors,
                  bool fp16 = false);
std::vector<NamedTensor> load_tensors(const std::string& path);

// Scalar <-> IEEE 754 binary16 with round-to-nearest-even; used by the fp16
// checkpoint payload and nowhere in the compute path.
std::uint16_t float_to_half(float v);
float half_to_float(std::uint16_t h);

// Little-endian primitive append/read helpers shared by the binary formats.
void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v);
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v);
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);

// Cursor-based reader; all getters throw ErrorCode::format on overrun.
class ByteReader {
public:
    ByteReader(const std::uint8_t* data, std::size_t n) : data_(data), size_(n) {}
    explicit ByteReader(const std::vector<std::uint8_t>& bytes)
        : ByteReader(bytes.data(), bytes.size()) {}

    std::uint8_t u8();
    std::uint16_t u16();
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    void bytes(void* dst, std::size_t n);
    std::size_t remaining() const { return size_ - pos_; }
    std::size_t pos() const { return pos_; }

private:
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

} // namespace dc
