#pragma once

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "matchscope/binary.hpp"
#include "matchscope/error.hpp"
#include "matchscope/features.hpp"
#include "matchscope/index.hpp"
#include "matchscope/store.hpp"

namespace matchscope {

inline std::optional<std::uint64_t> parse_u64(std::string_view s) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

// On-disk layout shared by the CLI and the HTTP service:
//   catalog.jsonl           image catalog
//   features/<id>.sfm       spatial tensors per catalog image
//   index/embeddings.emb1   pooled, normalized embeddings (built)
//   thumbnails/<id>.png|jpg optional thumbnails for reports
//   queries/<query_id>/     query sessions
//   reports/<report_id>.json
struct DataRoot {
  std::filesystem::path root;

  std::filesystem::path catalog_path() const { return root / "catalog.jsonl"; }
  std::filesystem::path features_dir() const { return root / "features"; }
  std::filesystem::path feature_path(ImageId id) const { return features_dir() / (std::to_string(id) + ".sfm"); }
  std::filesystem::path index_path() const { return root / "index" / "embeddings.emb1"; }
  std::filesystem::path queries_dir() const { return root / "queries"; }
  std::filesystem::path reports_dir() const { return root / "reports"; }
  std::filesystem::path thumbnails_dir() const { return root / "thumbnails"; }

  std::optional<std::filesystem::path> thumbnail(ImageId id) const {
    for (const char* ext : {".png", ".jpg", ".jpeg"}) {
      auto p = thumbnails_dir() / (std::to_string(id) + ext);
      if (std::filesystem::is_regular_file(p)) return p;
    }
    return std::nullopt;
  }

  void ensure_layout() const {
    std::error_code ec;
    for (const auto& d : {root, features_dir(), index_path().parent_path(), queries_dir(), reports_dir()}) {
      std::filesystem::create_directories(d, ec);
      if (ec) fail(ErrorCode::Io, "cannot create directory " + d.string());
    }
  }
};

// One immutable (catalog, index) pair. Readers hold a shared_ptr for the
// duration of a request; publishing a new generation never disturbs them.
struct Generation {
  Catalog catalog;
  SearchIndex index;
};

// Pools and normalizes every features/<id>.sfm. File names that are not an
// unsigned integer id are ignored.
inline EmbeddingTable embeddings_from_features(const DataRoot& data) {
  EmbeddingTable table;
  if (!std::filesystem::exists(data.features_dir())) return table;
  for (const auto& entry : std::filesystem::directory_iterator(data.features_dir())) {
    if (!entry.is_regular_file() || entry.path().extension() != ".sfm") continue;
    auto id = parse_u64(entry.path().stem().string());
    if (!id) continue;
    auto map = read_spatial_tensor(entry.path(), *id);
    try {
      table.emplace(*id, query_embedding(map));
    } catch (const Error& e) {
      fail(e.code(), "image_id " + std::to_string(*id) + ": " + e.what());
    }
  }
  return table;
}

struct BuildSummary {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::size_t bytes = 0;
};

// Builds the index from the stored tensors, validating against the catalog
// before anything is written.
inline BuildSummary build_index_files(const DataRoot& data, const std::filesystem::path& out) {
  auto catalog = load_catalog(data.catalog_path());
  auto table = embeddings_from_features(data);
  auto index = build_index(catalog, table);
  std::error_code ec;
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path(), ec);
  auto bytes = write_embedding_table(table, out);
  return {index.size(), index.dim(), bytes};
}

inline std::shared_ptr<const Generation> load_generation(const DataRoot& data,
                                                         std::optional<std::filesystem::path> index_path = {}) {
  auto gen = std::make_shared<Generation>();
  gen->catalog = load_catalog(data.catalog_path());
  auto path = index_path.value_or(data.index_path());
  EmbeddingTable table;
  if (std::filesystem::exists(path)) table = read_embedding_table(path);
  gen->index = build_index(gen->catalog, table);
  return gen;
}

struct ServiceConfig {
  std::filesystem::path data_root = "matchscope-data";
  int port = 8080;
  std::string extractor_url;  // empty: raw image uploads are rejected with 502
  std::size_t max_upload_bytes = 64u << 20;
  int extractor_timeout_seconds = 10;
  int extractor_retries = 1;
};

inline void apply_environment(ServiceConfig& c) {
  if (const char* v = std::getenv("MATCHSCOPE_DATA_ROOT")) c.data_root = v;
  if (const char* v = std::getenv("MATCHSCOPE_PORT")) {
    auto p = parse_u64(v);
    if (!p || *p > 65535) fail(ErrorCode::InvalidArgument, "MATCHSCOPE_PORT is not a valid port");
    c.port = static_cast<int>(*p);
  }
  if (const char* v = std::getenv("MATCHSCOPE_EXTRACTOR_URL")) c.extractor_url = v;
  if (const char* v = std::getenv("MATCHSCOPE_MAX_UPLOAD_BYTES")) {
    auto n = parse_u64(v);
    if (!n || *n == 0) fail(ErrorCode::InvalidArgument, "MATCHSCOPE_MAX_UPLOAD_BYTES must be a positive integer");
    c.max_upload_bytes = *n;
  }
}

// Config file (JSON) first, then environment overrides.
inline ServiceConfig load_service_config(const std::optional<std::filesystem::path>& file) {
  ServiceConfig c;
  if (file) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(binary::read_text(*file));
      c.data_root = j.value("data_root", c.data_root.string());
      c.port = j.value("port", c.port);
      c.extractor_url = j.value("extractor_url", c.extractor_url);
      c.max_upload_bytes = j.value("max_upload_bytes", c.max_upload_bytes);
      c.extractor_timeout_seconds = j.value("extractor_timeout_seconds", c.extractor_timeout_seconds);
      c.extractor_retries = j.value("extractor_retries", c.extractor_retries);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::MalformedJson, "bad config file " + file->string() + ": " + e.what());
    }
  }
  apply_environment(c);
  return c;
}

}  // namespace matchscope
