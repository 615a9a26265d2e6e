#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "matchscope/error.hpp"
#include "matchscope/features.hpp"
#include "matchscope/linalg.hpp"
#include "matchscope/png.hpp"
#include "matchscope/store.hpp"

// Pairwise match explanations over two spatial feature maps of equal shape.
namespace matchscope::explain {

inline void require_same_shape(const SpatialFeatureMap& a, const SpatialFeatureMap& b) {
  if (!a.same_shape(b)) {
    auto shape = [](const SpatialFeatureMap& m) {
      return std::to_string(m.height) + "x" + std::to_string(m.width) + "x" + std::to_string(m.channels);
    };
    fail(ErrorCode::ShapeMismatch, "feature map shapes differ: " + shape(a) + " vs " + shape(b));
  }
}

// Entry (i, j) is the dot product of query cell i with result cell j, cells
// flattened row-major.
inline Matrix cell_similarity_matrix(const SpatialFeatureMap& query, const SpatialFeatureMap& result) {
  require_same_shape(query, result);
  const std::size_t n = query.cell_count();
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    auto qi = query.cell(i);
    for (std::size_t j = 0; j < n; ++j) m(i, j) = dot(qi, result.cell(j));
  }
  return m;
}

struct HeatmapPair {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<double> query_importance;   // row-major H x W
  std::vector<double> result_importance;  // row-major H x W
  double total_similarity = 0.0;
  double normalizer = 1.0;  // ||p_q|| * ||p_r|| when normalized, else 1
};

inline double cell_dot(std::span<const float> cell, const std::vector<double>& pooled) {
  double s = 0.0;
  for (std::size_t c = 0; c < cell.size(); ++c) s += static_cast<double>(cell[c]) * pooled[c];
  return s;
}

// Splits the pooled similarity p_q . p_r into per-cell contributions. With
// uniform weights, query cell i receives (1/(HW)^2) sum_j f_qi . f_rj, which
// equals (1/HW) f_qi . p_r; both grids therefore sum to p_q . p_r. Optional
// weights (e.g. a query mask) replace 1/HW by w_i / sum(w).
inline HeatmapPair importance_maps(const SpatialFeatureMap& query, const SpatialFeatureMap& result, bool normalize,
                                   const std::optional<CellWeights>& query_weights = std::nullopt,
                                   const std::optional<CellWeights>& result_weights = std::nullopt) {
  require_same_shape(query, result);
  const auto wq = query_weights.value_or(uniform_weights(query.height, query.width));
  const auto wr = result_weights.value_or(uniform_weights(result.height, result.width));
  const auto pq = weighted_pool(query, wq);
  const auto pr = weighted_pool(result, wr);
  double sum_wq = 0.0, sum_wr = 0.0;
  for (double w : wq.grid) sum_wq += w;
  for (double w : wr.grid) sum_wr += w;

  HeatmapPair out;
  out.height = query.height;
  out.width = query.width;
  const std::size_t n = query.cell_count();
  out.query_importance.resize(n);
  out.result_importance.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.query_importance[i] = (wq.grid[i] / sum_wq) * cell_dot(query.cell(i), pr);
    out.result_importance[i] = (wr.grid[i] / sum_wr) * cell_dot(result.cell(i), pq);
  }
  out.total_similarity = dot(pq, pr);

  if (normalize) {
    const double nq = norm(pq);
    const double nr = norm(pr);
    if (!(nq > kNormEpsilon) || !(nr > kNormEpsilon))
      fail(ErrorCode::DegenerateVector, "pooled vector has zero norm; cannot normalize importances");
    out.normalizer = nq * nr;
    for (double& v : out.query_importance) v /= out.normalizer;
    for (double& v : out.result_importance) v /= out.normalizer;
    out.total_similarity /= out.normalizer;
  }

  double sq = 0.0, sr = 0.0, mag = 0.0;
  for (double v : out.query_importance) sq += v, mag += std::abs(v);
  for (double v : out.result_importance) sr += v, mag += std::abs(v);
  const double tol = 1e-5 * std::abs(out.total_similarity) + 1e-12 * mag;
  if (std::abs(sq - out.total_similarity) > tol || std::abs(sr - out.total_similarity) > tol)
    throw std::logic_error("similarity decomposition identity violated");
  return out;
}

struct CorrespondenceMap {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<std::uint8_t> query_rgb;   // H x W x 3
  std::vector<std::uint8_t> result_rgb;  // H x W x 3
  std::vector<double> eigenvalues;       // top-3 sample variances, non-increasing
  double explained_fraction = 0.0;       // share of total variance in the top 3
  double total_variance = 0.0;
  Matrix components;   // 3 x C unit principal directions (zero rows when degenerate)
  Matrix projections;  // 2HW x 3 pre-quantization coordinates; query cells first
};

inline constexpr std::size_t kCorrespondenceComponents = 3;
inline constexpr std::uint8_t kMidGray = 128;
// Components whose Gram eigenvalue falls below this share of the trace are
// numerical noise and render as mid-gray.
inline constexpr double kDegenerateComponentRatio = 1e-10;

// Joint PCA over the stacked cell descriptors of both maps, computed from the
// (2HW x 2HW) Gram matrix of the centered stack. The top three components map
// to R, G, B after a sign fix (largest-magnitude projection positive) and a
// joint min-max stretch to [0, 255].
inline CorrespondenceMap pca_correspondence(const SpatialFeatureMap& query, const SpatialFeatureMap& result) {
  require_same_shape(query, result);
  const std::size_t cells = query.cell_count();
  const std::size_t n = 2 * cells;
  const std::size_t c = query.channels;
  if (n < 4) fail(ErrorCode::InvalidArgument, "correspondence needs at least 4 stacked cells");

  Matrix x(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    auto src = i < cells ? query.cell(i) : result.cell(i - cells);
    auto dst = x.row(i);
    for (std::size_t k = 0; k < c; ++k) dst[k] = src[k];
  }
  std::vector<double> mean(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) mean[k] += x(i, k);
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) x(i, k) -= mean[k];

  const Matrix gram = multiply_transposed(x, x);
  double trace = 0.0;
  for (std::size_t i = 0; i < n; ++i) trace += gram(i, i);
  const auto eig = symmetric_eigen(gram);
  const double dof = static_cast<double>(n - 1);

  CorrespondenceMap out;
  out.height = query.height;
  out.width = query.width;
  out.total_variance = trace / dof;
  out.components = Matrix(kCorrespondenceComponents, c);
  out.projections = Matrix(n, kCorrespondenceComponents);
  out.query_rgb.assign(cells * 3, kMidGray);
  out.result_rgb.assign(cells * 3, kMidGray);

  double kept = 0.0;
  for (std::size_t k = 0; k < kCorrespondenceComponents; ++k) {
    const double lambda = k < eig.values.size() ? eig.values[k] : 0.0;
    out.eigenvalues.push_back(lambda / dof);
    kept += lambda;
    if (!(trace > 0.0) || lambda <= kDegenerateComponentRatio * trace) continue;

    // Principal direction u = X^T v, renormalized.
    auto u = out.components.row(k);
    for (std::size_t i = 0; i < n; ++i) {
      const double vi = eig.vectors(i, k);
      auto xi = x.row(i);
      for (std::size_t d = 0; d < c; ++d) u[d] += vi * xi[d];
    }
    const double un = norm(u);
    for (double& v : u) v /= un;

    std::size_t largest = 0;
    for (std::size_t i = 0; i < n; ++i) {
      out.projections(i, k) = dot(x.row(i), u);
      if (std::abs(out.projections(i, k)) > std::abs(out.projections(largest, k))) largest = i;
    }
    if (out.projections(largest, k) < 0.0) {
      for (double& v : u) v = -v;
      for (std::size_t i = 0; i < n; ++i) out.projections(i, k) = -out.projections(i, k);
    }

    double lo = out.projections(0, k), hi = lo;
    for (std::size_t i = 1; i < n; ++i) {
      lo = std::min(lo, out.projections(i, k));
      hi = std::max(hi, out.projections(i, k));
    }
    if (!(hi > lo)) continue;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = (out.projections(i, k) - lo) / (hi - lo);
      const auto byte = static_cast<std::uint8_t>(std::nearbyint(std::clamp(t, 0.0, 1.0) * 255.0));
      if (i < cells)
        out.query_rgb[i * 3 + k] = byte;
      else
        out.result_rgb[(i - cells) * 3 + k] = byte;
    }
  }
  out.explained_fraction = trace > 0.0 ? std::clamp(kept / trace, 0.0, 1.0) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

struct PixelSize {
  std::uint32_t width = 224;
  std::uint32_t height = 224;
};

// t = 0 -> red (255, 0, 0), t = 1 -> blue (0, 0, 255); round half to even.
inline std::array<std::uint8_t, 3> heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return {static_cast<std::uint8_t>(std::nearbyint(255.0 * (1.0 - t))), 0,
          static_cast<std::uint8_t>(std::nearbyint(255.0 * t))};
}

inline void check_target(std::uint32_t grid_h, std::uint32_t grid_w, PixelSize target) {
  if (grid_h == 0 || grid_w == 0) fail(ErrorCode::InvalidArgument, "empty grid");
  if (target.width < grid_w || target.height < grid_h)
    fail(ErrorCode::InvalidArgument, "target pixel size smaller than the grid");
}

// Bilinear upsampling of scalar cells (sampled at cell centers), mapped to the
// red-to-blue ramp with [lo, hi] stretched to [0, 1]. A flat range maps to
// the ramp midpoint.
inline void draw_heatmap(png::RgbImage& image, std::uint32_t x0, const std::vector<double>& grid,
                         std::uint32_t grid_h, std::uint32_t grid_w, double lo, double hi, PixelSize target) {
  check_target(grid_h, grid_w, target);
  if (grid.size() != std::size_t{grid_h} * grid_w) fail(ErrorCode::ShapeMismatch, "grid size mismatch");
  auto sample = [&](double coord, std::uint32_t cells, std::uint32_t pixels, std::uint32_t& a, std::uint32_t& b,
                    double& f) {
    double g = (coord + 0.5) * cells / pixels - 0.5;
    g = std::clamp(g, 0.0, static_cast<double>(cells - 1));
    a = static_cast<std::uint32_t>(std::floor(g));
    b = std::min(a + 1, cells - 1);
    f = g - a;
  };
  for (std::uint32_t y = 0; y < target.height; ++y) {
    std::uint32_t r0, r1;
    double fy;
    sample(y, grid_h, target.height, r0, r1, fy);
    for (std::uint32_t x = 0; x < target.width; ++x) {
      std::uint32_t c0, c1;
      double fx;
      sample(x, grid_w, target.width, c0, c1, fx);
      auto v = [&](std::uint32_t r, std::uint32_t c) { return grid[std::size_t{r} * grid_w + c]; };
      const double top = v(r0, c0) * (1 - fx) + v(r0, c1) * fx;
      const double bottom = v(r1, c0) * (1 - fx) + v(r1, c1) * fx;
      const double value = top * (1 - fy) + bottom * fy;
      const double t = hi > lo ? (value - lo) / (hi - lo) : 0.5;
      auto rgb = heat_color(t);
      std::copy(rgb.begin(), rgb.end(), image.at(x0 + x, y));
    }
  }
}

// Nearest-neighbor upsampling: every cell stays one flat color.
inline void draw_correspondence(png::RgbImage& image, std::uint32_t x0, const std::vector<std::uint8_t>& rgb,
                                std::uint32_t grid_h, std::uint32_t grid_w, PixelSize target) {
  check_target(grid_h, grid_w, target);
  if (rgb.size() != std::size_t{grid_h} * grid_w * 3) fail(ErrorCode::ShapeMismatch, "rgb grid size mismatch");
  for (std::uint32_t y = 0; y < target.height; ++y) {
    const std::size_t row = std::size_t{y} * grid_h / target.height;
    for (std::uint32_t x = 0; x < target.width; ++x) {
      const std::size_t col = std::size_t{x} * grid_w / target.width;
      const auto* src = &rgb[(row * grid_w + col) * 3];
      std::copy(src, src + 3, image.at(x0 + x, y));
    }
  }
}

enum class RenderMode { Heatmap, Correspondence };

// Single-panel render of one grid. Heatmap grids hold H*W scalars,
// correspondence grids H*W*3 bytes.
inline binary::Bytes render_overlay(const std::vector<double>& heat_grid, std::uint32_t grid_h, std::uint32_t grid_w,
                                    PixelSize target) {
  if (heat_grid.empty()) fail(ErrorCode::InvalidArgument, "empty grid");
  auto [lo, hi] = std::minmax_element(heat_grid.begin(), heat_grid.end());
  png::RgbImage image(target.width, target.height);
  draw_heatmap(image, 0, heat_grid, grid_h, grid_w, *lo, *hi, target);
  return png::encode(image);
}

inline binary::Bytes render_overlay(const std::vector<std::uint8_t>& rgb_grid, std::uint32_t grid_h,
                                    std::uint32_t grid_w, PixelSize target) {
  if (rgb_grid.empty()) fail(ErrorCode::InvalidArgument, "empty grid");
  png::RgbImage image(target.width, target.height);
  draw_correspondence(image, 0, rgb_grid, grid_h, grid_w, target);
  return png::encode(image);
}

// Two panels side by side, query on the left. Heatmaps share one min-max
// range across both panels so colors are comparable.
inline png::RgbImage render_pair_image(const HeatmapPair& pair, PixelSize panel) {
  if (pair.query_importance.empty()) fail(ErrorCode::InvalidArgument, "empty grid");
  double lo = pair.query_importance.front(), hi = lo;
  for (const auto* grid : {&pair.query_importance, &pair.result_importance}) {
    for (double v : *grid) lo = std::min(lo, v), hi = std::max(hi, v);
  }
  png::RgbImage image(panel.width * 2, panel.height);
  draw_heatmap(image, 0, pair.query_importance, pair.height, pair.width, lo, hi, panel);
  draw_heatmap(image, panel.width, pair.result_importance, pair.height, pair.width, lo, hi, panel);
  return image;
}

inline png::RgbImage render_pair_image(const CorrespondenceMap& map, PixelSize panel) {
  png::RgbImage image(panel.width * 2, panel.height);
  draw_correspondence(image, 0, map.query_rgb, map.height, map.width, panel);
  draw_correspondence(image, panel.width, map.result_rgb, map.height, map.width, panel);
  return image;
}

inline binary::Bytes render_pair_png(const HeatmapPair& pair, PixelSize panel = {}) {
  return png::encode(render_pair_image(pair, panel));
}

inline binary::Bytes render_pair_png(const CorrespondenceMap& map, PixelSize panel = {}) {
  return png::encode(render_pair_image(map, panel));
}

// ---------------------------------------------------------------------------
// JSON export
// ---------------------------------------------------------------------------

inline nlohmann::json grid_to_json(const std::vector<double>& grid, std::uint32_t h, std::uint32_t w) {
  auto rows = nlohmann::json::array();
  for (std::uint32_t r = 0; r < h; ++r) {
    auto row = nlohmann::json::array();
    for (std::uint32_t c = 0; c < w; ++c) row.push_back(grid[std::size_t{r} * w + c]);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::json rgb_to_json(const std::vector<std::uint8_t>& rgb, std::uint32_t h, std::uint32_t w) {
  auto rows = nlohmann::json::array();
  for (std::uint32_t r = 0; r < h; ++r) {
    auto row = nlohmann::json::array();
    for (std::uint32_t c = 0; c < w; ++c) {
      const auto* px = &rgb[(std::size_t{r} * w + c) * 3];
      row.push_back({px[0], px[1], px[2]});
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::json to_json(const HeatmapPair& p) {
  return {{"query", grid_to_json(p.query_importance, p.height, p.width)},
          {"result", grid_to_json(p.result_importance, p.height, p.width)},
          {"total_similarity", p.total_similarity},
          {"normalizer", p.normalizer}};
}

inline nlohmann::json to_json(const CorrespondenceMap& m) {
  return {{"eigenvalues", m.eigenvalues},
          {"explained_fraction", m.explained_fraction},
          {"query_rgb", rgb_to_json(m.query_rgb, m.height, m.width)},
          {"result_rgb", rgb_to_json(m.result_rgb, m.height, m.width)}};
}

}  // namespace matchscope::explain
