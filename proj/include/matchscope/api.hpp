#pragma once

#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <shared_mutex>
#include <string>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "matchscope/error.hpp"
#include "matchscope/explain.hpp"
#include "matchscope/features.hpp"
#include "matchscope/index.hpp"
#include "matchscope/report.hpp"
#include "matchscope/store.hpp"
#include "matchscope/text.hpp"
#include "matchscope/workspace.hpp"

// HTTP/JSON service under /api/v1. Every error body is {"code", "message"}.
namespace matchscope::api {

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::NotFound: return 404;
    case ErrorCode::FullyMasked: return 422;
    case ErrorCode::Extractor: return 502;
    case ErrorCode::ShapeMismatch:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::Conflict:
    case ErrorCode::OutOfRange:
    case ErrorCode::DuplicateId: return 409;
    case ErrorCode::Io: return 500;
    default: return 400;
  }
}

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
  send_json(res, status, {{"code", code}, {"message", message}});
}

struct UrlParts {
  std::string base;  // scheme://host[:port]
  std::string path;
};

inline UrlParts split_url(const std::string& url) {
  static const std::regex pattern(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, pattern)) fail(ErrorCode::Extractor, "extractor URL is not http(s)://host[:port]/path");
  return {m[1].str(), m[2].matched ? m[2].str() : "/"};
}

// Forwards raw image bytes to the external feature extractor, which must
// answer 200 with an SFM1 tensor body.
class ExtractorClient {
 public:
  ExtractorClient(std::string url, int timeout_seconds, int retries)
      : url_(std::move(url)), timeout_seconds_(timeout_seconds), retries_(retries) {}

  bool configured() const { return !url_.empty(); }

  SpatialFeatureMap extract(const std::string& image_bytes, const std::string& content_type) const {
    if (!configured()) fail(ErrorCode::Extractor, "no feature extractor configured (MATCHSCOPE_EXTRACTOR_URL); submit an SFM1 tensor instead");
    auto parts = split_url(url_);
    httplib::Client client(parts.base);
    client.set_connection_timeout(timeout_seconds_, 0);
    client.set_read_timeout(timeout_seconds_, 0);
    client.set_write_timeout(timeout_seconds_, 0);
    std::string last_error = "no attempt made";
    for (int attempt = 0; attempt <= std::max(0, retries_); ++attempt) {
      auto res = client.Post(parts.path, image_bytes,
                             content_type.empty() ? "application/octet-stream" : content_type);
      if (!res) {
        last_error = "extractor unreachable: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status != 200) {
        last_error = "extractor answered HTTP " + std::to_string(res->status);
        continue;
      }
      try {
        const auto* p = reinterpret_cast<const std::uint8_t*>(res->body.data());
        return decode_spatial_tensor(std::span(p, res->body.size()));
      } catch (const Error& e) {
        fail(ErrorCode::Extractor, std::string("extractor returned an invalid SFM1 tensor: ") + e.what());
      }
    }
    fail(ErrorCode::Extractor, last_error);
  }

 private:
  std::string url_;
  int timeout_seconds_;
  int retries_;
};

struct QuerySession {
  std::string query_id;
  MaskSpec mask;
  QueryFilters filters;
  SpatialFeatureMap map;
  CellWeights weights;
  Embedding embedding;
  std::string created_at;
  std::optional<std::filesystem::path> image_path;  // uploaded query image, when one was sent
};

class Service {
 public:
  explicit Service(ServiceConfig config)
      : config_(std::move(config)),
        data_{config_.data_root},
        extractor_(config_.extractor_url, config_.extractor_timeout_seconds, config_.extractor_retries),
        reports_((data_.ensure_layout(), data_.reports_dir())) {
    reload_index();
    routes();
  }

  ~Service() { stop(); }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Loads the persisted catalog and index as a new generation and swaps it
  // in; in-flight requests finish on the generation they started with.
  void reload_index() {
    auto next = load_generation(data_);
    std::unique_lock lock(generation_mutex_);
    generation_ = std::move(next);
  }

  std::shared_ptr<const Generation> generation() const {
    std::shared_lock lock(generation_mutex_);
    return generation_;
  }

  httplib::Server& http() { return server_; }
  const ServiceConfig& config() const { return config_; }

  int bind_to_any_port(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
  bool bind(const std::string& host, int port) { return server_.bind_to_port(host, port); }
  bool listen_after_bind() { return server_.listen_after_bind(); }
  bool listen(const std::string& host, int port) { return server_.listen(host, port); }
  void stop() {
    if (server_.is_running()) server_.stop();
  }
  void wait_until_ready() const { server_.wait_until_ready(); }

  std::shared_ptr<const QuerySession> session(const std::string& id) const {
    {
      std::lock_guard lock(sessions_mutex_);
      auto it = sessions_.find(id);
      if (it != sessions_.end()) return it->second;
    }
    auto s = load_session(id);
    std::lock_guard lock(sessions_mutex_);
    return sessions_.emplace(id, std::move(s)).first->second;
  }

 private:
  // ------------------------------------------------------------------ setup
  void routes() {
    server_.set_payload_max_length(config_.max_upload_bytes);
    server_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
      std::string code = res.status == 413 ? "payload_too_large" : res.status == 404 ? "not_found" : "http_error";
      std::string message = res.status == 413 ? "payload exceeds the configured upload limit"
                            : res.status == 404 ? "no such endpoint"
                                                : httplib::status_message(res.status);
      send_error(res, res.status, code, message);
      return httplib::Server::HandlerResponse::Handled;
    });
    server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const Error& e) {
        send_error(res, http_status(e.code()), to_string(e.code()), e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "internal_error", e.what());
      }
    });

    server_.Post("/api/v1/queries", [this](const auto& req, auto& res) { create_query(req, res); });
    server_.Get(R"(/api/v1/queries/([0-9a-f]+)/results)", [this](const auto& req, auto& res) { results(req, res); });
    server_.Get(R"(/api/v1/queries/([0-9a-f]+)/explain/([^/]+))",
                [this](const auto& req, auto& res) { explain(req, res); });
    server_.Get(R"(/api/v1/hotels/([^/]+)/images)", [this](const auto& req, auto& res) { hotel_images(req, res); });
    server_.Post("/api/v1/reports", [this](const auto& req, auto& res) { create_report(req, res); });
    server_.Patch(R"(/api/v1/reports/([^/]+))", [this](const auto& req, auto& res) { edit_report(req, res); });
    server_.Get(R"(/api/v1/reports/([^/]+))", [this](const auto& req, auto& res) { get_report(req, res); });
  }

  // -------------------------------------------------------------- sessions
  std::filesystem::path session_dir(const std::string& id) const { return data_.queries_dir() / id; }

  static nlohmann::json parse_json_field(const std::string& text, const char* what) {
    try {
      return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorCode::MalformedJson, std::string("malformed ") + what + " JSON: " + e.what());
    }
  }

  std::shared_ptr<const QuerySession> load_session(const std::string& id) const {
    auto dir = session_dir(id);
    if (!text::is_hex_id(id) || !std::filesystem::exists(dir / "session.json"))
      fail(ErrorCode::NotFound, "unknown query '" + id + "'");
    auto meta = parse_json_field(binary::read_text(dir / "session.json"), "session");
    auto s = std::make_shared<QuerySession>();
    s->query_id = id;
    s->mask = mask_from_json(meta.at("mask"));
    s->filters = filters_from_json(meta.at("filters"));
    s->created_at = meta.value("created_at", std::string{});
    if (meta.value("has_image", false)) s->image_path = dir / "query_image";
    s->map = read_spatial_tensor(dir / "query.sfm");
    s->weights = rasterize_mask_weights(s->mask, s->map.height, s->map.width);
    s->embedding = l2_normalize(masked_gap_pool(s->map, s->weights));
    return s;
  }

  // --------------------------------------------------------------- handlers
  void create_query(const httplib::Request& req, httplib::Response& res) {
    if (!req.is_multipart_form_data())
      return send_error(res, 400, "invalid_argument", "expected multipart/form-data with a 'tensor' or 'image' part");
    const bool has_tensor = req.has_file("tensor");
    const bool has_image = req.has_file("image");
    if (has_tensor == has_image)
      return send_error(res, 400, "invalid_argument", "provide exactly one of the 'tensor' and 'image' parts");

    MaskSpec mask;
    QueryFilters filters;
    try {
      if (req.has_file("mask")) mask = mask_from_json(parse_json_field(req.get_file_value("mask").content, "mask"));
      if (req.has_file("filters"))
        filters = filters_from_json(parse_json_field(req.get_file_value("filters").content, "filters"));
    } catch (const Error& e) {
      return send_error(res, 400, to_string(e.code()), e.what());
    }

    auto s = std::make_shared<QuerySession>();
    s->mask = mask;
    s->filters = filters;
    std::string image_bytes;
    if (has_tensor) {
      const auto& part = req.get_file_value("tensor").content;
      s->map = decode_spatial_tensor(std::span(reinterpret_cast<const std::uint8_t*>(part.data()), part.size()));
    } else {
      const auto file = req.get_file_value("image");
      image_bytes = file.content;
      s->map = extractor_.extract(image_bytes, file.content_type);
    }
    s->weights = rasterize_mask_weights(mask, s->map.height, s->map.width);
    s->embedding = l2_normalize(masked_gap_pool(s->map, s->weights));
    s->created_at = text::now_utc();

    std::string id;
    std::error_code ec;
    do {
      id = text::random_hex_id();
    } while (!std::filesystem::create_directory(session_dir(id), ec) && !ec);
    if (ec) fail(ErrorCode::Io, "cannot create session directory");
    s->query_id = id;
    auto dir = session_dir(id);
    write_spatial_tensor(s->map, dir / "query.sfm");
    if (has_image) {
      binary::write_text_atomic(dir / "query_image", image_bytes);
      s->image_path = dir / "query_image";
    }
    nlohmann::json meta{{"query_id", id},
                        {"mask", mask_to_json(mask)},
                        {"filters", to_json(filters)},
                        {"created_at", s->created_at},
                        {"has_image", has_image}};
    binary::write_text_atomic(dir / "session.json", meta.dump(2));
    {
      std::lock_guard lock(sessions_mutex_);
      sessions_[id] = s;
    }
    send_json(res, 201, {{"query_id", id},
                         {"grid", {s->map.height, s->map.width}},
                         {"embedding_dim", s->embedding.dim()},
                         {"created_at", s->created_at}});
  }

  void results(const httplib::Request& req, httplib::Response& res) {
    auto s = session(req.matches[1]);
    std::size_t k = 20;
    if (req.has_param("k")) {
      auto parsed = parse_u64(req.get_param_value("k"));
      if (!parsed || *parsed < 1) return send_error(res, 400, "invalid_argument", "k must be an integer >= 1");
      k = *parsed;
    }
    auto gen = generation();
    QuerySpec q{s->embedding, k, s->filters};
    auto body = to_json(gen->index.search(q));
    body["query_id"] = s->query_id;
    body["k"] = k;
    body["generation"] = gen->index.generation();
    send_json(res, 200, body);
  }

  void explain(const httplib::Request& req, httplib::Response& res) {
    const std::string mode = req.has_param("mode") ? req.get_param_value("mode") : "heatmap";
    const std::string format = req.has_param("format") ? req.get_param_value("format") : "png";
    if (mode != "heatmap" && mode != "correspondence")
      return send_error(res, 400, "invalid_argument", "invalid mode '" + mode + "'; valid modes: heatmap, correspondence");
    if (format != "png" && format != "json")
      return send_error(res, 400, "invalid_argument", "invalid format '" + format + "'; valid formats: png, json");
    explain::PixelSize panel;
    if (req.has_param("size")) {
      auto size = parse_u64(req.get_param_value("size"));
      if (!size || *size < 1 || *size > 4096) return send_error(res, 400, "invalid_argument", "size must be in [1, 4096]");
      panel = {static_cast<std::uint32_t>(*size), static_cast<std::uint32_t>(*size)};
    }
    auto s = session(req.matches[1]);
    auto image_id = parse_u64(req.matches[2].str());
    if (!image_id) return send_error(res, 404, "not_found", "unknown image '" + req.matches[2].str() + "'");
    auto gen = generation();
    if (!gen->catalog.contains(*image_id) || !std::filesystem::exists(data_.feature_path(*image_id)))
      return send_error(res, 404, "not_found", "no stored tensor for image_id " + std::to_string(*image_id));
    auto result_map = read_spatial_tensor(data_.feature_path(*image_id), *image_id);
    if (!s->map.same_shape(result_map))
      return send_error(res, 409, "shape_mismatch", "query and result tensors have different grid shapes");

    if (mode == "heatmap") {
      auto pair = explain::importance_maps(s->map, result_map, true, s->weights);
      if (format == "json") return send_json(res, 200, explain::to_json(pair));
      auto png = explain::render_pair_png(pair, panel);
      res.set_content(std::string(png.begin(), png.end()), "image/png");
    } else {
      auto corr = explain::pca_correspondence(s->map, result_map);
      if (format == "json") return send_json(res, 200, explain::to_json(corr));
      auto png = explain::render_pair_png(corr, panel);
      res.set_content(std::string(png.begin(), png.end()), "image/png");
    }
    res.status = 200;
  }

  void hotel_images(const httplib::Request& req, httplib::Response& res) {
    auto hotel = parse_u64(req.matches[1].str());
    if (!hotel) return send_error(res, 400, "invalid_argument", "hotel id must be an unsigned integer");
    auto images = nlohmann::json::array();
    for (const auto& r : generation()->catalog.hotel_images(*hotel)) images.push_back(r);
    send_json(res, 200, {{"hotel_id", *hotel}, {"images", images}});
  }

  void create_report(const httplib::Request& req, httplib::Response& res) {
    auto body = parse_json_field(req.body, "report");
    if (!body.is_object()) return send_error(res, 400, "malformed_json", "report body must be a JSON object");
    std::string query_ref = body.value("query_ref", std::string{});
    nlohmann::json criteria = body.value("criteria", nlohmann::json::object());
    if (body.contains("query_id")) {
      auto s = session(body.at("query_id").get<std::string>());
      if (query_ref.empty() && s->image_path) query_ref = s->image_path->string();
      if (criteria.empty()) criteria = {{"query_id", s->query_id}, {"filters", to_json(s->filters)},
                                        {"mask", mask_to_json(s->mask)}};
    }
    std::vector<report::ReportEntry> entries;
    if (body.contains("entries")) {
      if (!body.at("entries").is_array()) return send_error(res, 400, "malformed_json", "'entries' must be an array");
      for (const auto& e : body.at("entries")) entries.push_back(report::entry_from_json(e));
    }
    auto r = reports_.create(query_ref, criteria, std::move(entries), body.value("notes", std::string{}));
    send_json(res, 201, report::to_json(r));
  }

  void edit_report(const httplib::Request& req, httplib::Response& res) {
    auto edit = report::edit_from_json(parse_json_field(req.body, "edit"));
    send_json(res, 200, report::to_json(reports_.curate(req.matches[1], edit)));
  }

  void get_report(const httplib::Request& req, httplib::Response& res) {
    const std::string format = req.has_param("format") ? req.get_param_value("format") : "json";
    if (format != "json" && format != "html")
      return send_error(res, 400, "invalid_argument", "invalid format '" + format + "'; valid formats: json, html");
    auto r = reports_.load(req.matches[1]);
    if (format == "json") {
      res.status = 200;
      res.set_content(report::render_json(r), "application/json");
      return;
    }
    auto rendered = report::render_html(r, [this](ImageId id) { return data_.thumbnail(id); });
    res.status = 200;
    res.set_content(rendered.html, "text/html; charset=utf-8");
  }

  ServiceConfig config_;
  DataRoot data_;
  ExtractorClient extractor_;
  report::ReportStore reports_;
  httplib::Server server_;

  mutable std::shared_mutex generation_mutex_;
  std::shared_ptr<const Generation> generation_;

  mutable std::mutex sessions_mutex_;
  mutable std::map<std::string, std::shared_ptr<const QuerySession>> sessions_;
};

}  // namespace matchscope::api
