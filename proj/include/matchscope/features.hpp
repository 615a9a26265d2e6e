#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "matchscope/error.hpp"
#include "matchscope/store.hpp"

namespace matchscope {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point2&) const = default;
};

using Polygon = std::vector<Point2>;

// Investigator-drawn occlusion polygons in normalized image coordinates
// (x to the right, y downward, both in [0, 1]).
struct MaskSpec {
  std::vector<Polygon> polygons;
  bool operator==(const MaskSpec&) const = default;
};

inline void validate(const MaskSpec& mask) {
  for (std::size_t p = 0; p < mask.polygons.size(); ++p) {
    const auto& poly = mask.polygons[p];
    if (poly.size() < 3)
      fail(ErrorCode::InvalidArgument, "degenerate polygon " + std::to_string(p) + ": fewer than 3 vertices");
    for (const auto& v : poly) {
      if (!(v.x >= 0.0 && v.x <= 1.0 && v.y >= 0.0 && v.y <= 1.0))
        fail(ErrorCode::OutOfRange, "mask vertex outside the unit square in polygon " + std::to_string(p));
    }
  }
}

inline nlohmann::json mask_to_json(const MaskSpec& mask) {
  auto polys = nlohmann::json::array();
  for (const auto& poly : mask.polygons) {
    auto verts = nlohmann::json::array();
    for (const auto& v : poly) verts.push_back({v.x, v.y});
    polys.push_back(std::move(verts));
  }
  return {{"polygons", polys}};
}

inline MaskSpec mask_from_json(const nlohmann::json& j) {
  auto bad = [](const std::string& what) { fail(ErrorCode::MalformedJson, "malformed mask: " + what); };
  if (!j.is_object()) bad("expected an object");
  MaskSpec mask;
  if (!j.contains("polygons")) return mask;
  const auto& polys = j.at("polygons");
  if (!polys.is_array()) bad("'polygons' must be an array");
  for (const auto& poly : polys) {
    if (!poly.is_array()) bad("polygon must be an array of [x, y] pairs");
    Polygon out;
    for (const auto& v : poly) {
      if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
        bad("vertex must be an [x, y] number pair");
      out.push_back({v[0].get<double>(), v[1].get<double>()});
    }
    mask.polygons.push_back(std::move(out));
  }
  validate(mask);
  return mask;
}

// Per-cell weight = unmasked fraction of the cell's image patch.
struct CellWeights {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<double> grid;  // row-major, H*W

  double at(std::uint32_t row, std::uint32_t col) const { return grid[std::size_t{row} * width + col]; }
};

inline CellWeights uniform_weights(std::uint32_t height, std::uint32_t width) {
  return {height, width, std::vector<double>(std::size_t{height} * width, 1.0)};
}

// Even-odd crossing test.
inline bool point_in_polygon(const Polygon& poly, double x, double y) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a.y > y) != (b.y > y)) {
      double x_cross = a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (x < x_cross) inside = !inside;
    }
  }
  return inside;
}

inline constexpr int kDefaultSupersample = 16;

// Splits the unit square into H x W patches and samples each patch on a
// supersample x supersample lattice of sub-cell centers. Error per cell is
// bounded by roughly 1 / supersample.
inline CellWeights rasterize_mask_weights(const MaskSpec& mask, std::uint32_t height, std::uint32_t width,
                                          int supersample = kDefaultSupersample) {
  if (height == 0 || width == 0) fail(ErrorCode::InvalidArgument, "grid dimensions must be >= 1");
  if (supersample < 1) fail(ErrorCode::InvalidArgument, "supersample must be >= 1");
  validate(mask);
  CellWeights w = uniform_weights(height, width);
  if (mask.polygons.empty()) return w;

  const double samples = static_cast<double>(supersample) * supersample;
  for (std::uint32_t row = 0; row < height; ++row) {
    for (std::uint32_t col = 0; col < width; ++col) {
      int outside = 0;
      for (int sy = 0; sy < supersample; ++sy) {
        double y = (row + (sy + 0.5) / supersample) / height;
        for (int sx = 0; sx < supersample; ++sx) {
          double x = (col + (sx + 0.5) / supersample) / width;
          bool masked = false;
          for (const auto& poly : mask.polygons) {
            if (point_in_polygon(poly, x, y)) {
              masked = true;
              break;
            }
          }
          if (!masked) ++outside;
        }
      }
      w.grid[std::size_t{row} * width + col] = outside / samples;
    }
  }
  return w;
}

struct Embedding {
  std::vector<float> values;
  bool normalized = false;

  std::size_t dim() const { return values.size(); }
};

// Weighted global average pooling in 64-bit accumulation. Throws FullyMasked
// when no weight survives.
inline std::vector<double> weighted_pool(const SpatialFeatureMap& map, const CellWeights& weights) {
  if (weights.height != map.height || weights.width != map.width)
    fail(ErrorCode::ShapeMismatch, "mask weight grid does not match feature map grid");
  double total = 0.0;
  for (double w : weights.grid) {
    if (!(w >= 0.0 && w <= 1.0)) fail(ErrorCode::OutOfRange, "cell weight outside [0, 1]");
    total += w;
  }
  if (!(total > 0.0)) fail(ErrorCode::FullyMasked, "fully masked query");

  std::vector<double> acc(map.channels, 0.0);
  for (std::size_t i = 0; i < map.cell_count(); ++i) {
    double w = weights.grid[i];
    if (w == 0.0) continue;
    auto cell = map.cell(i);
    for (std::size_t c = 0; c < cell.size(); ++c) acc[c] += w * cell[c];
  }
  for (double& v : acc) v /= total;
  return acc;
}

inline std::vector<double> mean_pool(const SpatialFeatureMap& map) {
  return weighted_pool(map, uniform_weights(map.height, map.width));
}

inline Embedding masked_gap_pool(const SpatialFeatureMap& map, const CellWeights& weights) {
  auto pooled = weighted_pool(map, weights);
  Embedding e;
  e.values.assign(pooled.begin(), pooled.end());
  return e;
}

inline constexpr double kNormEpsilon = 1e-12;

inline Embedding l2_normalize(const Embedding& e) {
  double sq = 0.0;
  for (float v : e.values) sq += static_cast<double>(v) * v;
  double norm = std::sqrt(sq);
  if (!(norm > kNormEpsilon)) fail(ErrorCode::DegenerateVector, "cannot normalize a near-zero vector");
  Embedding out;
  out.values.resize(e.values.size());
  for (std::size_t i = 0; i < e.values.size(); ++i) out.values[i] = static_cast<float>(e.values[i] / norm);
  out.normalized = true;
  return out;
}

inline double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

inline double cosine_similarity(const Embedding& a, const Embedding& b) {
  if (a.dim() != b.dim())
    fail(ErrorCode::DimensionMismatch,
         "embedding dimensions differ: " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  if (!a.normalized || !b.normalized)
    fail(ErrorCode::InvalidArgument, "cosine_similarity requires normalized embeddings");
  return dot(a.values, b.values);
}

// The retrieval embedding of a (possibly masked) query tensor.
inline Embedding query_embedding(const SpatialFeatureMap& map, const MaskSpec& mask = {}) {
  return l2_normalize(masked_gap_pool(map, rasterize_mask_weights(mask, map.height, map.width)));
}

}  // namespace matchscope
