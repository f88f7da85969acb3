#pragma once
// Checksums and digests used by the binary file formats: CRC-32 (zlib's
// polynomial, shared with PNG) guards cache files against corruption, and
// SHA-256 gives reference images a content identity that cache metadata can
// carry around.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

namespace dc {

// CRC-32 (IEEE, as used by zlib and PNG) over a byte range.
std::uint32_t crc32_bytes(const void* data, std::size_t n);

// Incremental SHA-256 (FIPS 180-4). digest() finalizes a copy, so the
// object stays usable for further update() calls.
class Sha256 {
public:
    Sha256();
    void update(const void* data, std::size_t n);
    std::array<std::uint8_t, 32> digest() const;
    static std::array<std::uint8_t, 32> of(const void* data, std::size_t n);

private:
    void compress(const std::uint8_t block[64]);

    std::uint32_t state_[8];
    std::uint64_t total_ = 0; // bytes absorbed so far
    std::uint8_t buf_[64];    // pending partial block
    std::size_t buflen_ = 0;
};

// Lowercase hex rendering of a byte string.
std::string hex_bytes(const std::uint8_t* bytes, std::size_t n);

} // namespace dc
