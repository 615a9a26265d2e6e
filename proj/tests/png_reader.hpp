#pragma once

// Minimal reader for the 8-bit RGB, filter-0 PNGs the renderer writes.

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

struct DecodedPng {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> rgb;

  const std::uint8_t* at(std::uint32_t x, std::uint32_t y) const { return &rgb[(std::size_t{y} * width + x) * 3]; }
};

inline DecodedPng decode_png(const std::vector<std::uint8_t>& bytes) {
  static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0) throw std::runtime_error("not a PNG");
  auto be32 = [&](std::size_t at) {
    return (std::uint32_t{bytes[at]} << 24) | (std::uint32_t{bytes[at + 1]} << 16) |
           (std::uint32_t{bytes[at + 2]} << 8) | bytes[at + 3];
  };
  DecodedPng out;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  bool ended = false;
  while (pos + 12 <= bytes.size()) {
    std::uint32_t len = be32(pos);
    std::string type(bytes.begin() + pos + 4, bytes.begin() + pos + 8);
    const std::uint8_t* data = bytes.data() + pos + 8;
    std::uint32_t crc = crc32(0L, bytes.data() + pos + 4, len + 4);
    if (crc != be32(pos + 8 + len)) throw std::runtime_error("bad CRC in " + type);
    if (type == "IHDR") {
      out.width = be32(pos + 8);
      out.height = be32(pos + 12);
      if (data[8] != 8 || data[9] != 2) throw std::runtime_error("not 8-bit RGB");
    } else if (type == "IDAT") {
      idat.insert(idat.end(), data, data + len);
    } else if (type == "IEND") {
      ended = true;
      break;
    }
    pos += 12 + len;
  }
  if (!ended) throw std::runtime_error("missing IEND");
  const std::size_t stride = std::size_t{out.width} * 3 + 1;
  std::vector<std::uint8_t> raw(stride * out.height);
  uLongf raw_len = raw.size();
  if (uncompress(raw.data(), &raw_len, idat.data(), idat.size()) != Z_OK || raw_len != raw.size())
    throw std::runtime_error("bad IDAT");
  out.rgb.reserve(std::size_t{out.width} * out.height * 3);
  for (std::uint32_t y = 0; y < out.height; ++y) {
    if (raw[y * stride] != 0) throw std::runtime_error("unexpected filter type");
    out.rgb.insert(out.rgb.end(), raw.begin() + y * stride + 1, raw.begin() + (y + 1) * stride);
  }
  return out;
}
