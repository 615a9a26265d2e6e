#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "matchscope/explain.hpp"
#include "oracles.hpp"
#include "png_reader.hpp"

using namespace matchscope;
using namespace matchscope::explain;

namespace {

double sum(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s;
}

// Rank-1 stack: every cell of both maps is mean + alpha_i * u.
std::pair<SpatialFeatureMap, SpatialFeatureMap> rank_one_pair(std::uint32_t h, std::uint32_t w, std::uint32_t c) {
  std::mt19937_64 rng(8);
  std::normal_distribution<float> normal(0, 1);
  std::vector<float> u(c), mean(c);
  for (auto& v : u) v = normal(rng);
  for (auto& v : mean) v = normal(rng);
  auto fill = [&](SpatialFeatureMap& m) {
    m = make_feature_map(h, w, c);
    for (std::size_t i = 0; i < m.cell_count(); ++i) {
      float a = normal(rng);
      for (std::uint32_t k = 0; k < c; ++k) m.cell(i)[k] = mean[k] + a * u[k];
    }
  };
  SpatialFeatureMap q, r;
  fill(q);
  fill(r);
  return {q, r};
}

}  // namespace

TEST(CellSimilarity, HandComputed) {
  SpatialFeatureMap q{0, 1, 2, 2, {1, 0, 0, 1}};
  SpatialFeatureMap r{0, 1, 2, 2, {1, 0, 1, 1}};
  auto m = cell_similarity_matrix(q, r);
  EXPECT_EQ(m(0, 0), 1.0);
  EXPECT_EQ(m(0, 1), 1.0);
  EXPECT_EQ(m(1, 0), 0.0);
  EXPECT_EQ(m(1, 1), 1.0);
}

TEST(CellSimilarity, OrthogonalSetsGiveZeros) {
  SpatialFeatureMap q{0, 1, 2, 4, {1, 0, 0, 0, 0, 1, 0, 0}};
  SpatialFeatureMap r{0, 1, 2, 4, {0, 0, 1, 0, 0, 0, 0, 1}};
  for (double v : cell_similarity_matrix(q, r).data) EXPECT_EQ(v, 0.0);
}

TEST(CellSimilarity, ShapeMismatch) {
  try {
    cell_similarity_matrix(make_feature_map(2, 2, 3), make_feature_map(2, 3, 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

TEST(Importance, ConstantMapsSplitEvenly) {
  auto q = make_feature_map(3, 4, 2), r = make_feature_map(3, 4, 2);
  for (std::size_t i = 0; i < 12; ++i) {
    q.cell(i)[0] = 1, q.cell(i)[1] = 2;
    r.cell(i)[0] = 3, r.cell(i)[1] = -1;
  }
  auto p = importance_maps(q, r, false);
  for (double v : p.query_importance) EXPECT_NEAR(v, (1 * 3 + 2 * -1) / 12.0, 1e-12);
}

TEST(Importance, SumsToPooledCosineOnRandomPairs) {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 20; ++i) {
    auto q = oracle::random_map(rng, 2, 2, 4, 0.5), r = oracle::random_map(rng, 2, 2, 4, 0.5);
    auto p = importance_maps(q, r, true);
    double want = oracle::pooled_cosine_double_sum(q, r);
    EXPECT_NEAR(sum(p.query_importance), want, 1e-6);
    EXPECT_NEAR(sum(p.result_importance), want, 1e-6);
    EXPECT_NEAR(p.total_similarity, want, 1e-6);
  }
}

TEST(Importance, MaskedCellsContributeNothing) {
  std::mt19937_64 rng(13);
  auto q = oracle::random_map(rng, 2, 2, 3, 1.0), r = oracle::random_map(rng, 2, 2, 3, 1.0);
  CellWeights w{2, 2, {1, 0, 1, 0.5}};
  auto p = importance_maps(q, r, true, w);
  EXPECT_EQ(p.query_importance[1], 0.0);
  EXPECT_NEAR(sum(p.query_importance), p.total_similarity, 1e-9);
}

TEST(Pca, IdenticalMapsColorIdentically) {
  std::mt19937_64 rng(14);
  auto q = oracle::random_map(rng, 4, 4, 16);
  auto m = pca_correspondence(q, q);
  EXPECT_EQ(m.query_rgb, m.result_rgb);
}

TEST(Pca, MatchesDenseEigensolver) {
  std::mt19937_64 rng(15);
  for (int i = 0; i < 5; ++i) {
    auto q = oracle::random_map(rng, 7, 7, 64), r = oracle::random_map(rng, 7, 7, 64, 0.3);
    auto got = pca_correspondence(q, r);
    auto want = oracle::pca_reference(q, r);
    for (int k = 0; k < 3; ++k) {
      EXPECT_NEAR(got.eigenvalues[k], want.eigenvalues[k], 1e-6 * want.eigenvalues[k]);
      for (std::size_t d = 0; d < 64; ++d) EXPECT_NEAR(got.components(k, d), want.components[k](d), 1e-5);
    }
    EXPECT_NEAR(got.explained_fraction, want.explained_fraction, 1e-9);
  }
}

TEST(Pca, RankOneFixture) {
  auto [q, r] = rank_one_pair(7, 7, 32);
  auto m = pca_correspondence(q, r);
  EXPECT_GE(m.explained_fraction, 1 - 1e-6);
  auto want = oracle::pca_reference(q, r);
  EXPECT_NEAR(m.eigenvalues[0], want.eigenvalues[0], 1e-6 * want.eigenvalues[0]);
  for (std::size_t i = 0; i < q.cell_count(); ++i) {
    EXPECT_EQ(m.query_rgb[i * 3 + 1], 128);
    EXPECT_EQ(m.query_rgb[i * 3 + 2], 128);
    EXPECT_EQ(m.result_rgb[i * 3 + 1], 128);
    EXPECT_EQ(m.result_rgb[i * 3 + 2], 128);
  }
}

TEST(Pca, LargestProjectionIsPositiveAndStretched) {
  std::mt19937_64 rng(16);
  auto q = oracle::random_map(rng, 3, 3, 8), r = oracle::random_map(rng, 3, 3, 8);
  auto m = pca_correspondence(q, r);
  for (std::size_t k = 0; k < 3; ++k) {
    std::size_t best = 0;
    for (std::size_t i = 0; i < m.projections.rows; ++i)
      if (std::abs(m.projections(i, k)) > std::abs(m.projections(best, k))) best = i;
    EXPECT_GT(m.projections(best, k), 0.0);
    int lo = 255, hi = 0;
    for (std::size_t i = 0; i < 9; ++i)
      for (const auto* rgb : {&m.query_rgb, &m.result_rgb}) lo = std::min<int>(lo, (*rgb)[i * 3 + k]), hi = std::max<int>(hi, (*rgb)[i * 3 + k]);
    EXPECT_EQ(lo, 0);
    EXPECT_EQ(hi, 255);
  }
}

TEST(HeatColor, Endpoints) {
  EXPECT_EQ(heat_color(0.0), (std::array<std::uint8_t, 3>{255, 0, 0}));
  EXPECT_EQ(heat_color(1.0), (std::array<std::uint8_t, 3>{0, 0, 255}));
  EXPECT_EQ(heat_color(0.5), (std::array<std::uint8_t, 3>{128, 0, 128}));
}

TEST(Render, CorrespondenceBlocks) {
  std::mt19937_64 rng(17);
  auto q = oracle::random_map(rng, 7, 7, 16), r = oracle::random_map(rng, 7, 7, 16);
  auto m = pca_correspondence(q, r);
  auto png = decode_png(render_pair_png(m));
  ASSERT_EQ(png.width, 448u);
  ASSERT_EQ(png.height, 224u);
  for (std::uint32_t y = 0; y < 224; ++y)
    for (std::uint32_t x = 0; x < 448; ++x) {
      const bool left = x < 224;
      const auto& grid = left ? m.query_rgb : m.result_rgb;
      std::size_t cell = (y / 32) * 7 + (x % 224) / 32;
      ASSERT_EQ(png.at(x, y)[0], grid[cell * 3]);
      ASSERT_EQ(png.at(x, y)[1], grid[cell * 3 + 1]);
      ASSERT_EQ(png.at(x, y)[2], grid[cell * 3 + 2]);
    }
}

TEST(Render, HeatmapCellCentersCarryCellColors) {
  HeatmapPair p;
  p.height = 2;
  p.width = 2;
  p.query_importance = {0.0, 1.0, 0.25, 0.5};
  p.result_importance = {0.5, 0.5, 0.5, 0.5};
  auto png = decode_png(render_pair_png(p, {4, 4}));
  ASSERT_EQ(png.width, 8u);
  // pixel (0,0) samples cell (0,0) exactly after clamping
  EXPECT_EQ(png.at(0, 0)[0], 255);
  EXPECT_EQ(png.at(3, 0)[2], 255);
  EXPECT_EQ(png.at(5, 1)[0], 128);
}

TEST(Render, TargetSmallerThanGridRejected) {
  EXPECT_THROW(render_overlay(std::vector<double>(49, 0.0), 7, 7, {4, 4}), Error);
}

TEST(Json, SchemaKeys) {
  std::mt19937_64 rng(18);
  auto q = oracle::random_map(rng, 2, 3, 4, 1.0), r = oracle::random_map(rng, 2, 3, 4, 1.0);
  auto hj = to_json(importance_maps(q, r, true));
  EXPECT_EQ(hj["query"].size(), 2u);
  EXPECT_EQ(hj["query"][0].size(), 3u);
  EXPECT_TRUE(hj.contains("result"));
  EXPECT_TRUE(hj.contains("total_similarity"));
  auto cj = to_json(pca_correspondence(q, r));
  EXPECT_EQ(cj["eigenvalues"].size(), 3u);
  EXPECT_EQ(cj["query_rgb"][1][2].size(), 3u);
}
