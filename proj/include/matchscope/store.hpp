#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <regex>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "matchscope/binary.hpp"
#include "matchscope/error.hpp"

namespace matchscope {

using ImageId = std::uint64_t;
using HotelId = std::uint64_t;
using ChainId = std::uint64_t;

// H x W grid of C-dimensional local descriptors, row-major with the channel
// index varying fastest. Cell i = y * W + x occupies values[i*C, (i+1)*C).
struct SpatialFeatureMap {
  ImageId image_id = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::vector<float> values;

  std::size_t cell_count() const { return std::size_t{height} * width; }

  std::span<const float> cell(std::size_t i) const {
    return std::span<const float>(values).subspan(i * channels, channels);
  }
  std::span<float> cell(std::size_t i) {
    return std::span<float>(values).subspan(i * channels, channels);
  }

  bool same_shape(const SpatialFeatureMap& other) const {
    return height == other.height && width == other.width && channels == other.channels;
  }
};

inline SpatialFeatureMap make_feature_map(std::uint32_t height, std::uint32_t width, std::uint32_t channels,
                                          ImageId id = 0) {
  SpatialFeatureMap map{id, height, width, channels, {}};
  map.values.assign(std::size_t{height} * width * channels, 0.0f);
  return map;
}

inline void validate(const SpatialFeatureMap& map) {
  if (map.height == 0 || map.width == 0 || map.channels == 0)
    fail(ErrorCode::InvalidArgument, "feature map dimensions must be >= 1");
  if (map.values.size() != map.cell_count() * map.channels)
    fail(ErrorCode::InvalidArgument, "feature map value count does not match H*W*C");
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    if (!std::isfinite(map.values[i]))
      fail(ErrorCode::NonFinite, "non-finite feature value at flat index " + std::to_string(i));
  }
}

// ---------------------------------------------------------------------------
// SFM1 format: "SFM1", u32 H, u32 W, u32 C (little-endian), then H*W*C f32.
// ---------------------------------------------------------------------------

inline constexpr std::string_view kSfmMagic = "SFM1";
inline constexpr std::size_t kSfmHeaderBytes = 16;

inline binary::Bytes encode_spatial_tensor(const SpatialFeatureMap& map) {
  validate(map);
  binary::Bytes out;
  out.reserve(kSfmHeaderBytes + map.values.size() * 4);
  out.insert(out.end(), kSfmMagic.begin(), kSfmMagic.end());
  binary::put_u32(out, map.height);
  binary::put_u32(out, map.width);
  binary::put_u32(out, map.channels);
  for (float v : map.values) binary::put_f32(out, v);
  return out;
}

inline SpatialFeatureMap decode_spatial_tensor(std::span<const std::uint8_t> bytes, ImageId id = 0) {
  if (!binary::has_magic(bytes, kSfmMagic)) fail(ErrorCode::BadMagic, "not an SFM1 tensor (bad magic)");
  if (bytes.size() < kSfmHeaderBytes) fail(ErrorCode::Truncated, "SFM1 header truncated");
  SpatialFeatureMap map;
  map.image_id = id;
  map.height = binary::get_u32(bytes, 4);
  map.width = binary::get_u32(bytes, 8);
  map.channels = binary::get_u32(bytes, 12);
  if (map.height == 0 || map.width == 0 || map.channels == 0)
    fail(ErrorCode::InvalidArgument, "SFM1 declares a zero dimension");
  const std::uint64_t count = std::uint64_t{map.height} * map.width * map.channels;
  const std::uint64_t remaining = bytes.size() - kSfmHeaderBytes;
  if (remaining != count * 4) {
    fail(ErrorCode::Truncated, "SFM1 payload size mismatch: declared " + std::to_string(count) +
                                   " floats, found " + std::to_string(remaining) + " bytes");
  }
  map.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    map.values[i] = binary::get_f32(bytes, kSfmHeaderBytes + 4 * i);
    if (!std::isfinite(map.values[i]))
      fail(ErrorCode::NonFinite, "non-finite value in SFM1 payload at index " + std::to_string(i));
  }
  return map;
}

// Returns the number of bytes written. Validation happens before the file is
// touched, so a rejected tensor never leaves a file behind.
inline std::size_t write_spatial_tensor(const SpatialFeatureMap& map, const std::filesystem::path& destination) {
  auto bytes = encode_spatial_tensor(map);
  binary::write_file_atomic(destination, bytes);
  return bytes.size();
}

inline SpatialFeatureMap read_spatial_tensor(const std::filesystem::path& source, ImageId id = 0) {
  auto bytes = binary::read_file(source);
  return decode_spatial_tensor(bytes, id);
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

enum class ImageSource { Crowdsourced, TravelSite, Other };

inline std::string to_string(ImageSource s) {
  switch (s) {
    case ImageSource::Crowdsourced: return "crowdsourced";
    case ImageSource::TravelSite: return "travel_site";
    case ImageSource::Other: return "other";
  }
  return "other";
}

inline std::optional<ImageSource> parse_image_source(std::string_view s) {
  if (s == "crowdsourced") return ImageSource::Crowdsourced;
  if (s == "travel_site") return ImageSource::TravelSite;
  if (s == "other") return ImageSource::Other;
  return std::nullopt;
}

struct ImageRecord {
  ImageId image_id = 0;
  HotelId hotel_id = 0;
  ChainId chain_id = 0;  // 0 = independent / unknown
  double latitude = 0.0;
  double longitude = 0.0;
  ImageSource source = ImageSource::Other;
  std::string captured_at;
  std::vector<std::string> terms;

  bool operator==(const ImageRecord&) const = default;
};

inline void to_json(nlohmann::json& j, const ImageRecord& r) {
  j = nlohmann::json{{"image_id", r.image_id},   {"hotel_id", r.hotel_id},   {"chain_id", r.chain_id},
                     {"latitude", r.latitude},   {"longitude", r.longitude}, {"source", to_string(r.source)},
                     {"terms", r.terms}};
  if (!r.captured_at.empty()) j["captured_at"] = r.captured_at;
}

inline bool is_rfc3339(const std::string& s) {
  static const std::regex pattern(
      R"(^\d{4}-\d{2}-\d{2}[Tt]\d{2}:\d{2}:\d{2}(\.\d+)?([Zz]|[+-]\d{2}:\d{2})$)");
  return std::regex_match(s, pattern);
}

// Parses and validates one catalog object; throws Error describing the first
// violated field.
inline ImageRecord parse_image_record(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorCode::MalformedJson, "catalog line is not a JSON object");
  auto u64_field = [&](const char* key, bool required) -> std::uint64_t {
    if (!j.contains(key)) {
      if (required) fail(ErrorCode::InvalidArgument, std::string("missing field '") + key + "'");
      return 0;
    }
    const auto& v = j.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
      fail(ErrorCode::InvalidArgument, std::string("field '") + key + "' must be an unsigned integer");
    return v.get<std::uint64_t>();
  };
  auto number_field = [&](const char* key) -> double {
    if (!j.contains(key) || !j.at(key).is_number())
      fail(ErrorCode::InvalidArgument, std::string("field '") + key + "' must be a number");
    return j.at(key).get<double>();
  };

  ImageRecord r;
  r.image_id = u64_field("image_id", true);
  r.hotel_id = u64_field("hotel_id", true);
  r.chain_id = u64_field("chain_id", false);
  r.latitude = number_field("latitude");
  r.longitude = number_field("longitude");
  if (!(r.latitude >= -90.0 && r.latitude <= 90.0))
    fail(ErrorCode::OutOfRange, "latitude out of range [-90, 90]");
  if (!(r.longitude >= -180.0 && r.longitude <= 180.0))
    fail(ErrorCode::OutOfRange, "longitude out of range [-180, 180]");

  if (j.contains("source")) {
    if (!j.at("source").is_string()) fail(ErrorCode::InvalidArgument, "field 'source' must be a string");
    auto src = parse_image_source(j.at("source").get<std::string>());
    if (!src) fail(ErrorCode::InvalidArgument, "unknown source '" + j.at("source").get<std::string>() + "'");
    r.source = *src;
  }
  if (j.contains("captured_at")) {
    if (!j.at("captured_at").is_string()) fail(ErrorCode::InvalidArgument, "field 'captured_at' must be a string");
    r.captured_at = j.at("captured_at").get<std::string>();
    if (!is_rfc3339(r.captured_at))
      fail(ErrorCode::InvalidArgument, "captured_at is not an RFC 3339 timestamp");
  }
  if (j.contains("terms")) {
    if (!j.at("terms").is_array()) fail(ErrorCode::InvalidArgument, "field 'terms' must be an array");
    for (const auto& t : j.at("terms")) {
      if (!t.is_string()) fail(ErrorCode::InvalidArgument, "terms must be strings");
      auto term = t.get<std::string>();
      if (term.empty()) fail(ErrorCode::InvalidArgument, "empty search term");
      if (std::any_of(term.begin(), term.end(), [](unsigned char c) { return std::isupper(c); }))
        fail(ErrorCode::InvalidArgument, "search term '" + term + "' is not lowercase");
      r.terms.push_back(std::move(term));
    }
  }
  return r;
}

struct CatalogStats {
  std::size_t image_count = 0;
  std::size_t hotel_count = 0;
  std::size_t chain_count = 0;  // distinct non-zero chain ids

  bool operator==(const CatalogStats&) const = default;
};

// In-memory image catalog. Treated as an immutable value once published:
// ingestion builds a new Catalog rather than mutating a shared one.
class Catalog {
 public:
  const ImageRecord* find(ImageId id) const {
    auto it = records_.find(id);
    return it == records_.end() ? nullptr : &it->second;
  }

  bool contains(ImageId id) const { return records_.count(id) != 0; }

  // Rejects duplicates; provenance is never silently replaced.
  void insert(ImageRecord record) {
    if (contains(record.image_id))
      fail(ErrorCode::DuplicateId, "duplicate image_id " + std::to_string(record.image_id));
    auto id = record.image_id;
    by_hotel_[record.hotel_id].insert(id);
    records_.emplace(id, std::move(record));
  }

  // Records at one hotel in ascending image_id order; unknown hotel -> empty.
  std::vector<ImageRecord> hotel_images(HotelId hotel) const {
    std::vector<ImageRecord> out;
    auto it = by_hotel_.find(hotel);
    if (it == by_hotel_.end()) return out;
    out.reserve(it->second.size());
    for (ImageId id : it->second) out.push_back(records_.at(id));
    return out;
  }

  CatalogStats stats() const {
    std::set<ChainId> chains;
    for (const auto& [id, r] : records_)
      if (r.chain_id != 0) chains.insert(r.chain_id);
    return {records_.size(), by_hotel_.size(), chains.size()};
  }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  // Ascending image_id order.
  const std::map<ImageId, ImageRecord>& records() const { return records_; }

  std::vector<HotelId> hotel_ids() const {
    std::vector<HotelId> ids;
    for (const auto& [h, _] : by_hotel_) ids.push_back(h);
    return ids;
  }

 private:
  std::map<ImageId, ImageRecord> records_;
  std::map<HotelId, std::set<ImageId>> by_hotel_;
};

struct Rejection {
  std::size_t line = 0;  // 1-based
  ErrorCode code = ErrorCode::InvalidArgument;
  std::string message;
};

struct IngestOutcome {
  Catalog catalog;
  CatalogStats stats;
  std::size_t inserted = 0;
  std::vector<Rejection> rejects;
};

// Ingests newline-delimited JSON on top of `base`. Each line is accepted or
// rejected as a unit; blank lines are ignored. The returned stats describe the
// resulting catalog.
inline IngestOutcome ingest_catalog(std::istream& source, const Catalog& base = {}) {
  IngestOutcome outcome{base, {}, 0, {}};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(source, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorCode::MalformedJson, std::string("malformed JSON: ") + e.what());
      }
      outcome.catalog.insert(parse_image_record(j));
      ++outcome.inserted;
    } catch (const Error& e) {
      outcome.rejects.push_back({line_no, e.code(), e.what()});
    }
  }
  outcome.stats = outcome.catalog.stats();
  return outcome;
}

inline IngestOutcome ingest_catalog_text(const std::string& text, const Catalog& base = {}) {
  std::istringstream is(text);
  return ingest_catalog(is, base);
}

inline std::vector<ImageRecord> get_hotel_images(const Catalog& catalog, HotelId hotel) {
  return catalog.hotel_images(hotel);
}

inline void write_catalog(const Catalog& catalog, std::ostream& os) {
  for (const auto& [id, r] : catalog.records()) os << nlohmann::json(r).dump() << '\n';
}

inline void save_catalog(const Catalog& catalog, const std::filesystem::path& path) {
  std::ostringstream os;
  write_catalog(catalog, os);
  binary::write_text_atomic(path, os.str());
}

// Loads a persisted catalog. Unlike ingestion, any bad line is fatal: a
// stored catalog is expected to be clean.
inline Catalog load_catalog(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) return {};
  std::istringstream is(binary::read_text(path));
  auto outcome = ingest_catalog(is);
  if (!outcome.rejects.empty()) {
    const auto& r = outcome.rejects.front();
    fail(r.code, path.string() + ":" + std::to_string(r.line) + ": " + r.message);
  }
  return std::move(outcome.catalog);
}

}  // namespace matchscope
