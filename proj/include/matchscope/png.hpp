#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "matchscope/binary.hpp"
#include "matchscope/error.hpp"

namespace matchscope::png {

// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct RgbImage {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(std::uint32_t w, std::uint32_t h) : width(w), height(h), pixels(std::size_t{w} * h * 3, 0) {}

  std::uint8_t* at(std::uint32_t x, std::uint32_t y) { return &pixels[(std::size_t{y} * width + x) * 3]; }
  const std::uint8_t* at(std::uint32_t x, std::uint32_t y) const { return &pixels[(std::size_t{y} * width + x) * 3]; }
};

namespace detail {

inline void put_u32_be(binary::Bytes& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_chunk(binary::Bytes& out, std::string_view type, std::span<const std::uint8_t> data) {
  put_u32_be(out, static_cast<std::uint32_t>(data.size()));
  std::size_t type_at = out.size();
  out.insert(out.end(), type.begin(), type.end());
  out.insert(out.end(), data.begin(), data.end());
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, out.data() + type_at, static_cast<uInt>(out.size() - type_at));
  put_u32_be(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

// Deterministic encoder: filter type 0 on every row, fixed zlib level.
inline binary::Bytes encode(const RgbImage& image) {
  if (image.width == 0 || image.height == 0) fail(ErrorCode::InvalidArgument, "empty image");
  if (image.pixels.size() != std::size_t{image.width} * image.height * 3)
    fail(ErrorCode::InvalidArgument, "pixel buffer does not match image size");

  binary::Bytes raw;
  const std::size_t stride = std::size_t{image.width} * 3;
  raw.reserve((stride + 1) * image.height);
  for (std::uint32_t y = 0; y < image.height; ++y) {
    raw.push_back(0);
    auto row = image.pixels.begin() + static_cast<std::ptrdiff_t>(y * stride);
    raw.insert(raw.end(), row, row + static_cast<std::ptrdiff_t>(stride));
  }
  uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
  binary::Bytes packed(packed_size);
  if (compress2(packed.data(), &packed_size, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    fail(ErrorCode::Io, "zlib compression failed");
  packed.resize(packed_size);

  static constexpr std::uint8_t kSignature[] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  binary::Bytes out(std::begin(kSignature), std::end(kSignature));
  binary::Bytes header;
  detail::put_u32_be(header, image.width);
  detail::put_u32_be(header, image.height);
  header.insert(header.end(), {8, 2, 0, 0, 0});  // depth 8, truecolor, deflate, filter 0, no interlace
  detail::put_chunk(out, "IHDR", header);
  detail::put_chunk(out, "IDAT", packed);
  detail::put_chunk(out, "IEND", {});
  return out;
}

}  // namespace matchscope::png
