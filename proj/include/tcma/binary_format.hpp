// TCMA binary tensor container.
//
// Layout (all integers unsigned 32-bit little-endian):
//
//   offset 0   magic "TCMA"
//   offset 4   format_version   1 = float32 payload, 2 = float64 payload
//   offset 8   rank             1..4
//   offset 12  extents[rank]    each > 0
//   ...        payload          product(extents) little-endian IEEE-754 values
//
// Embedding files are always version 1. Version 2 is reserved for optimizer
// checkpoints, which must round-trip 64-bit state exactly.

#ifndef TCMA_BINARY_FORMAT_HPP
#define TCMA_BINARY_FORMAT_HPP

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "tcma/error.hpp"
#include "tcma/tensor.hpp"

namespace tcma::io {

inline constexpr std::array<char, 4> kMagic = {'T', 'C', 'M', 'A'};
inline constexpr std::uint32_t kFloat32Version = 1;
inline constexpr std::uint32_t kFloat64Version = 2;

enum class Precision { Float32, Float64 };

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[at + i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for large buffers.
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
    crc = ::crc32(crc, bytes.data() + offset, chunk);
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::string crc_hex(std::uint32_t crc) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", crc);
  return buf;
}

/// Serializes a tensor into the container format. Non-finite values, and
/// values that overflow float32 when narrowing, are refused.
inline std::vector<std::uint8_t> encode_tensor(const Tensor& t, Precision precision = Precision::Float32) {
  if (t.empty()) throw DimensionError("encode_tensor: empty tensor");
  std::vector<std::uint8_t> out;
  const std::size_t width = precision == Precision::Float32 ? 4 : 8;
  out.reserve(12 + 4 * t.rank() + width * t.size());
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  detail::put_u32(out, precision == Precision::Float32 ? kFloat32Version : kFloat64Version);
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) {
    if (e > UINT32_MAX) throw DimensionError("encode_tensor: extent exceeds 32 bits");
    detail::put_u32(out, static_cast<std::uint32_t>(e));
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double v = t[i];
    if (!std::isfinite(v)) {
      throw DomainError("encode_tensor: non-finite value at element " + std::to_string(i));
    }
    if (precision == Precision::Float32) {
      const float f = static_cast<float>(v);
      if (!std::isfinite(f)) {
        throw DomainError("encode_tensor: value at element " + std::to_string(i) + " overflows float32");
      }
      detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
    } else {
      detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  return out;
}

/// Parses and validates a container. `name` labels diagnostics. When
/// `expected_version` is non-zero, any other version is rejected.
inline Tensor decode_tensor(std::span<const std::uint8_t> bytes, const std::string& name,
                            std::uint32_t expected_version = 0) {
  auto fail = [&](const std::string& why) -> FormatError { return FormatError(name + ": " + why); };
  if (bytes.size() < 12) throw fail("truncated header (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kMagic.data(), 4) != 0) throw fail("bad magic, expected \"TCMA\"");
  const std::uint32_t version = detail::get_u32(bytes, 4);
  if (version != kFloat32Version && version != kFloat64Version) {
    throw fail("unsupported format version " + std::to_string(version));
  }
  if (expected_version != 0 && version != expected_version) {
    throw fail("format version " + std::to_string(version) + ", expected " + std::to_string(expected_version));
  }
  const std::uint32_t rank = detail::get_u32(bytes, 8);
  if (rank < 1 || rank > kMaxRank) throw fail("invalid rank " + std::to_string(rank));
  const std::size_t header = 12 + 4 * std::size_t{rank};
  if (bytes.size() < header) throw fail("truncated extents");
  Shape shape;
  const std::size_t width = version == kFloat32Version ? 4 : 8;
  std::size_t count = 1;
  const std::size_t max_count = (bytes.size() - header) / width;
  for (std::uint32_t r = 0; r < rank; ++r) {
    const std::uint32_t e = detail::get_u32(bytes, 12 + 4 * r);
    if (e == 0) throw fail("zero extent on axis " + std::to_string(r));
    if (count > max_count / e) throw fail("extents exceed payload size");
    count *= e;
    shape.push_back(e);
  }
  if (bytes.size() - header != count * width) {
    throw fail("payload is " + std::to_string(bytes.size() - header) + " bytes, extents " +
               shape_string(shape) + " require " + std::to_string(count * width));
  }
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t at = header + i * width;
    const double v = version == kFloat32Version
                         ? static_cast<double>(std::bit_cast<float>(detail::get_u32(bytes, at)))
                         : std::bit_cast<double>(detail::get_u64(bytes, at));
    if (!std::isfinite(v)) throw fail("non-finite payload value at element " + std::to_string(i));
    data[i] = v;
  }
  return Tensor(std::move(shape), std::move(data));
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(size);
  if (size && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw IoError("failed reading " + path.string());
  }
  return bytes;
}

inline std::string read_file_text(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

/// Writes `tensor` to `path`, narrowing to float32 unless Float64 is requested.
/// Returns the CRC-32 of the written bytes.
inline std::uint32_t write_embeddings(const Tensor& tensor, const std::filesystem::path& path,
                                      Precision precision = Precision::Float32) {
  const auto bytes = encode_tensor(tensor, precision);
  write_file(path, bytes);
  return crc32_of(bytes);
}

inline Tensor read_embeddings(const std::filesystem::path& path, std::uint32_t expected_version = 0) {
  return decode_tensor(read_file(path), path.string(), expected_version);
}

}  // namespace tcma::io

#endif  // TCMA_BINARY_FORMAT_HPP
