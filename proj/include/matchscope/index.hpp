#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "matchscope/binary.hpp"
#include "matchscope/error.hpp"
#include "matchscope/features.hpp"
#include "matchscope/store.hpp"

namespace matchscope {

inline constexpr double kEarthRadiusKm = 6371.0;

struct GeoPoint {
  double lat = 0.0;
  double lon = 0.0;
};

inline void check_coordinates(const GeoPoint& p) {
  if (!(p.lat >= -90.0 && p.lat <= 90.0)) fail(ErrorCode::OutOfRange, "latitude out of range [-90, 90]");
  if (!(p.lon >= -180.0 && p.lon <= 180.0)) fail(ErrorCode::OutOfRange, "longitude out of range [-180, 180]");
}

inline double haversine_km(const GeoPoint& a, const GeoPoint& b) {
  check_coordinates(a);
  check_coordinates(b);
  constexpr double rad = std::numbers::pi / 180.0;
  const double dlat = (b.lat - a.lat) * rad;
  const double dlon = (b.lon - a.lon) * rad;
  const double s = std::sin(dlat / 2) * std::sin(dlat / 2) +
                   std::cos(a.lat * rad) * std::cos(b.lat * rad) * std::sin(dlon / 2) * std::sin(dlon / 2);
  return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(s)));
}

// west > east denotes a box crossing the antimeridian.
struct BoundingBox {
  double west = -180.0;
  double south = -90.0;
  double east = 180.0;
  double north = 90.0;

  bool contains(const GeoPoint& p) const {
    if (p.lat < south || p.lat > north) return false;
    if (west <= east) return p.lon >= west && p.lon <= east;
    return p.lon >= west || p.lon <= east;
  }
};

struct RadiusFilter {
  GeoPoint center;
  double radius_km = 0.0;
};

struct QueryFilters {
  std::optional<BoundingBox> bbox;
  std::optional<RadiusFilter> radius;
  std::optional<ChainId> chain;
  std::vector<std::string> terms;  // conjunctive, exact lowercase tokens

  bool empty() const { return !bbox && !radius && !chain && terms.empty(); }
};

inline void validate(const QueryFilters& f) {
  if (f.bbox) {
    check_coordinates({f.bbox->south, f.bbox->west});
    check_coordinates({f.bbox->north, f.bbox->east});
    if (f.bbox->south > f.bbox->north) fail(ErrorCode::InvalidArgument, "bounding box south exceeds north");
  }
  if (f.radius) {
    check_coordinates(f.radius->center);
    if (!(f.radius->radius_km > 0.0)) fail(ErrorCode::InvalidArgument, "radius must be > 0");
  }
  for (const auto& t : f.terms) {
    if (t.empty()) fail(ErrorCode::InvalidArgument, "empty search term");
    if (std::any_of(t.begin(), t.end(), [](unsigned char c) { return std::isupper(c); }))
      fail(ErrorCode::InvalidArgument, "search term '" + t + "' is not lowercase");
  }
}

struct QuerySpec {
  Embedding embedding;
  std::size_t k = 20;
  QueryFilters filters;
};

struct ScoredImage {
  ImageId image_id = 0;
  HotelId hotel_id = 0;
  double score = 0.0;
  bool operator==(const ScoredImage&) const = default;
};

struct HotelGroup {
  HotelId hotel_id = 0;
  double best_score = 0.0;
  std::size_t count = 0;
  bool operator==(const HotelGroup&) const = default;
};

struct SearchResult {
  std::vector<ScoredImage> results;
  std::vector<HotelGroup> hotel_groups;
};

// One group per hotel scored by its best member; ties by ascending hotel id.
inline std::vector<HotelGroup> aggregate_hotels(const std::vector<ScoredImage>& ranked) {
  std::map<HotelId, HotelGroup> groups;
  for (const auto& r : ranked) {
    auto [it, inserted] = groups.try_emplace(r.hotel_id, HotelGroup{r.hotel_id, r.score, 0});
    auto& g = it->second;
    g.best_score = std::max(g.best_score, r.score);
    ++g.count;
  }
  std::vector<HotelGroup> out;
  out.reserve(groups.size());
  for (auto& [_, g] : groups) out.push_back(g);
  std::stable_sort(out.begin(), out.end(), [](const HotelGroup& a, const HotelGroup& b) {
    return a.best_score > b.best_score || (a.best_score == b.best_score && a.hotel_id < b.hotel_id);
  });
  return out;
}

struct IndexRow {
  ImageId image_id = 0;
  HotelId hotel_id = 0;
  ChainId chain_id = 0;
  GeoPoint position;
  std::vector<std::string> terms;  // sorted for lookup
};

inline std::uint64_t next_generation_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

// Immutable exact-scan index. Rows are in ascending image_id order.
class SearchIndex {
 public:
  SearchIndex() = default;

  std::uint64_t generation() const { return generation_; }
  std::size_t size() const { return rows_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<IndexRow>& rows() const { return rows_; }

  std::span<const float> embedding(std::size_t row) const {
    return std::span<const float>(matrix_).subspan(row * dim_, dim_);
  }

  std::optional<std::size_t> row_of(ImageId id) const {
    auto it = std::lower_bound(rows_.begin(), rows_.end(), id,
                               [](const IndexRow& r, ImageId v) { return r.image_id < v; });
    if (it == rows_.end() || it->image_id != id) return std::nullopt;
    return static_cast<std::size_t>(it - rows_.begin());
  }

  bool passes(std::size_t row, const QueryFilters& f) const {
    const auto& r = rows_[row];
    if (f.chain && r.chain_id != *f.chain) return false;
    if (f.bbox && !f.bbox->contains(r.position)) return false;
    if (f.radius && haversine_km(f.radius->center, r.position) > f.radius->radius_km) return false;
    for (const auto& t : f.terms)
      if (!std::binary_search(r.terms.begin(), r.terms.end(), t)) return false;
    return true;
  }

  SearchResult search(const QuerySpec& q) const {
    if (q.k < 1) fail(ErrorCode::InvalidArgument, "k must be >= 1");
    validate(q.filters);
    SearchResult out;
    if (rows_.empty()) return out;
    if (q.embedding.dim() != dim_)
      fail(ErrorCode::DimensionMismatch, "query dimension " + std::to_string(q.embedding.dim()) +
                                             " does not match index dimension " + std::to_string(dim_));

    // Bounded selection: keep the k best (score desc, image_id asc). Row order
    // is ascending image_id, so a later row only displaces on a strictly
    // higher score.
    auto better = [](const ScoredImage& a, const ScoredImage& b) {
      return a.score > b.score || (a.score == b.score && a.image_id < b.image_id);
    };
    std::vector<ScoredImage> heap;
    heap.reserve(std::min(q.k, rows_.size()) + 1);
    const bool filtered = !q.filters.empty();
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      if (filtered && !passes(i, q.filters)) continue;
      ScoredImage s{rows_[i].image_id, rows_[i].hotel_id, dot(q.embedding.values, embedding(i))};
      if (heap.size() < q.k) {
        heap.push_back(s);
        std::push_heap(heap.begin(), heap.end(), better);
      } else if (better(s, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), better);
        heap.back() = s;
        std::push_heap(heap.begin(), heap.end(), better);
      }
    }
    std::sort_heap(heap.begin(), heap.end(), better);
    out.results = std::move(heap);
    out.hotel_groups = aggregate_hotels(out.results);
    return out;
  }

  friend SearchIndex build_index(const Catalog& catalog, const std::map<ImageId, Embedding>& embeddings);

 private:
  std::uint64_t generation_ = 0;
  std::size_t dim_ = 0;
  std::vector<IndexRow> rows_;
  std::vector<float> matrix_;
};

inline SearchIndex build_index(const Catalog& catalog, const std::map<ImageId, Embedding>& embeddings) {
  SearchIndex index;
  index.generation_ = next_generation_id();
  if (embeddings.empty()) return index;
  index.dim_ = embeddings.begin()->second.dim();
  if (index.dim_ == 0) fail(ErrorCode::DimensionMismatch, "embeddings must have dimension >= 1");
  index.rows_.reserve(embeddings.size());
  index.matrix_.reserve(embeddings.size() * index.dim_);
  for (const auto& [id, e] : embeddings) {
    const ImageRecord* rec = catalog.find(id);
    if (!rec) fail(ErrorCode::OrphanEmbedding, "embedding for image_id " + std::to_string(id) + " has no catalog record");
    if (e.dim() != index.dim_)
      fail(ErrorCode::DimensionMismatch, "embedding for image_id " + std::to_string(id) + " has dimension " +
                                             std::to_string(e.dim()) + ", expected " + std::to_string(index.dim_));
    double sq = 0.0;
    for (float v : e.values) sq += static_cast<double>(v) * v;
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-5)
      fail(ErrorCode::InvalidArgument, "embedding for image_id " + std::to_string(id) + " is not unit-norm");
    IndexRow row{id, rec->hotel_id, rec->chain_id, {rec->latitude, rec->longitude}, rec->terms};
    std::sort(row.terms.begin(), row.terms.end());
    index.rows_.push_back(std::move(row));
    index.matrix_.insert(index.matrix_.end(), e.values.begin(), e.values.end());
  }
  return index;
}

// ---------------------------------------------------------------------------
// EMB1 embedding table: "EMB1", u32 count, u32 dim, then per row u64 image_id
// followed by dim f32, all little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::string_view kEmbMagic = "EMB1";

using EmbeddingTable = std::map<ImageId, Embedding>;

inline binary::Bytes encode_embedding_table(const EmbeddingTable& table) {
  std::uint32_t dim = table.empty() ? 0 : static_cast<std::uint32_t>(table.begin()->second.dim());
  binary::Bytes out(kEmbMagic.begin(), kEmbMagic.end());
  binary::put_u32(out, static_cast<std::uint32_t>(table.size()));
  binary::put_u32(out, dim);
  for (const auto& [id, e] : table) {
    if (e.dim() != dim) fail(ErrorCode::DimensionMismatch, "embedding table rows differ in dimension");
    binary::put_u64(out, id);
    for (float v : e.values) {
      if (!std::isfinite(v)) fail(ErrorCode::NonFinite, "non-finite embedding value for image_id " + std::to_string(id));
      binary::put_f32(out, v);
    }
  }
  return out;
}

// Rows are flagged normalized when their norm is within 1e-5 of 1.
inline EmbeddingTable decode_embedding_table(std::span<const std::uint8_t> bytes) {
  if (!binary::has_magic(bytes, kEmbMagic)) fail(ErrorCode::BadMagic, "not an EMB1 table (bad magic)");
  if (bytes.size() < 12) fail(ErrorCode::Truncated, "EMB1 header truncated");
  const std::uint64_t count = binary::get_u32(bytes, 4);
  const std::uint64_t dim = binary::get_u32(bytes, 8);
  const std::uint64_t row_bytes = 8 + 4 * dim;
  if (bytes.size() - 12 != count * row_bytes)
    fail(ErrorCode::Truncated, "EMB1 payload size mismatch: declared " + std::to_string(count) + " rows of " +
                                   std::to_string(row_bytes) + " bytes, found " + std::to_string(bytes.size() - 12));
  EmbeddingTable table;
  std::size_t at = 12;
  for (std::uint64_t r = 0; r < count; ++r) {
    ImageId id = binary::get_u64(bytes, at);
    at += 8;
    Embedding e;
    e.values.resize(dim);
    double sq = 0.0;
    for (std::uint64_t c = 0; c < dim; ++c, at += 4) {
      e.values[c] = binary::get_f32(bytes, at);
      if (!std::isfinite(e.values[c])) fail(ErrorCode::NonFinite, "non-finite value in EMB1 row " + std::to_string(r));
      sq += static_cast<double>(e.values[c]) * e.values[c];
    }
    e.normalized = std::abs(std::sqrt(sq) - 1.0) <= 1e-5;
    if (!table.emplace(id, std::move(e)).second)
      fail(ErrorCode::DuplicateId, "duplicate image_id " + std::to_string(id) + " in EMB1 table");
  }
  return table;
}

inline std::size_t write_embedding_table(const EmbeddingTable& table, const std::filesystem::path& path) {
  auto bytes = encode_embedding_table(table);
  binary::write_file_atomic(path, bytes);
  return bytes.size();
}

inline EmbeddingTable read_embedding_table(const std::filesystem::path& path) {
  return decode_embedding_table(binary::read_file(path));
}

// ---------------------------------------------------------------------------
// JSON shapes shared by the CLI and HTTP layers.
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const QueryFilters& f) {
  nlohmann::json j = nlohmann::json::object();
  if (f.bbox) j["bbox"] = {f.bbox->west, f.bbox->south, f.bbox->east, f.bbox->north};
  if (f.radius) {
    j["center"] = {f.radius->center.lat, f.radius->center.lon};
    j["radius_km"] = f.radius->radius_km;
  }
  if (f.chain) j["chain_id"] = *f.chain;
  if (!f.terms.empty()) j["terms"] = f.terms;
  return j;
}

// {"bbox": [w, s, e, n], "center": [lat, lon], "radius_km": r,
//  "chain_id": id, "terms": ["..."]}; every key optional.
inline QueryFilters filters_from_json(const nlohmann::json& j) {
  QueryFilters f;
  try {
    if (!j.is_object()) fail(ErrorCode::MalformedJson, "filters must be a JSON object");
    if (j.contains("bbox")) {
      auto b = j.at("bbox").get<std::vector<double>>();
      if (b.size() != 4) fail(ErrorCode::MalformedJson, "bbox must be [west, south, east, north]");
      f.bbox = BoundingBox{b[0], b[1], b[2], b[3]};
    }
    if (j.contains("center") || j.contains("radius_km")) {
      if (!j.contains("center") || !j.contains("radius_km"))
        fail(ErrorCode::MalformedJson, "center and radius_km must be given together");
      auto c = j.at("center").get<std::vector<double>>();
      if (c.size() != 2) fail(ErrorCode::MalformedJson, "center must be [lat, lon]");
      f.radius = RadiusFilter{{c[0], c[1]}, j.at("radius_km").get<double>()};
    }
    if (j.contains("chain_id")) f.chain = j.at("chain_id").get<ChainId>();
    if (j.contains("terms")) f.terms = j.at("terms").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::MalformedJson, std::string("malformed filters: ") + e.what());
  }
  validate(f);
  return f;
}

inline nlohmann::json to_json(const SearchResult& r) {
  auto results = nlohmann::json::array();
  for (const auto& s : r.results)
    results.push_back({{"image_id", s.image_id}, {"hotel_id", s.hotel_id}, {"score", s.score}});
  auto groups = nlohmann::json::array();
  for (const auto& g : r.hotel_groups)
    groups.push_back({{"hotel_id", g.hotel_id}, {"best_score", g.best_score}, {"count", g.count}});
  return {{"results", results}, {"hotel_groups", groups}};
}

}  // namespace matchscope
