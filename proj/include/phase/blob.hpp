#pragma once

// "PHT1" tensor blobs: magic, dtype u8 (0=f32, 1=f64), ndim u8, dims as u64,
// then raw values. Every multi-byte field is little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "phase/errors.hpp"
#include "phase/tensor.hpp"

namespace phase::blob {

inline constexpr std::array<char, 4> kMagic{'P', 'H', 'T', '1'};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(buf, sizeof(U));
}

template <class U>
U get_le(std::istream& is) {
  static_assert(std::is_unsigned_v<U>);
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw FormatError("truncated blob");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

}  // namespace detail

/// Decoded blob; values are widened to double regardless of the stored dtype.
struct Blob {
  DType dtype = DType::f64;
  ad::Shape shape;
  std::vector<double> values;

  template <class T>
  std::vector<T> as() const {
    return std::vector<T>(values.begin(), values.end());
  }
  template <class T>
  ad::Tensor<T> tensor() const {
    return ad::Tensor<T>(shape, as<T>());
  }
};

template <class T>
void write(std::ostream& os, const ad::Shape& shape, std::span<const T> values) {
  if (ad::numel(shape) != values.size()) throw DimensionError("blob shape/value count mismatch");
  if (shape.size() > 255) throw DimensionError("blob rank exceeds 255");
  os.write(kMagic.data(), kMagic.size());
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(shape.size()));
  for (auto d : shape) detail::put_le<std::uint64_t>(os, d);
  for (const T v : values) {
    if constexpr (std::is_same_v<T, float>) {
      detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
    } else {
      detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    }
  }
}

template <class T>
void write(std::ostream& os, const ad::Tensor<T>& t) {
  write<T>(os, t.shape(), t.data());
}

inline Blob read(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size())) throw FormatError("truncated blob header");
  if (magic != kMagic) throw FormatError("bad blob magic");
  Blob b;
  const auto code = detail::get_le<std::uint8_t>(is);
  if (code > 1) throw FormatError("unknown blob dtype code " + std::to_string(code));
  b.dtype = static_cast<DType>(code);
  const auto ndim = detail::get_le<std::uint8_t>(is);
  b.shape.resize(ndim);
  for (auto& d : b.shape) d = static_cast<std::size_t>(detail::get_le<std::uint64_t>(is));
  const std::size_t n = ad::numel(b.shape);
  b.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (b.dtype == DType::f32) {
      b.values[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(is));
    } else {
      b.values[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
    }
  }
  return b;
}

}  // namespace phase::blob
