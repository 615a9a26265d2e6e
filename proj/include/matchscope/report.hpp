#pragma once

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "matchscope/binary.hpp"
#include "matchscope/error.hpp"
#include "matchscope/index.hpp"
#include "matchscope/store.hpp"
#include "matchscope/text.hpp"

namespace matchscope::report {

struct ReportEntry {
  ImageId image_id = 0;
  HotelId hotel_id = 0;
  double similarity = 0.0;
  std::vector<std::string> explanations;  // references to exported explanation files

  bool operator==(const ReportEntry&) const = default;
};

struct Report {
  std::string report_id;
  std::string query_ref;  // path to the masked query image
  nlohmann::json criteria = nlohmann::json::object();
  std::string notes;
  std::vector<ReportEntry> entries;
  std::string created_at;
  std::string updated_at;
  std::uint64_t revision = 0;

  bool operator==(const Report&) const = default;
};

inline void check_unique(const std::vector<ReportEntry>& entries) {
  std::set<ImageId> seen;
  for (const auto& e : entries)
    if (!seen.insert(e.image_id).second)
      fail(ErrorCode::DuplicateId, "duplicate report entry for image_id " + std::to_string(e.image_id));
}

inline nlohmann::json to_json(const ReportEntry& e) {
  return {{"image_id", e.image_id},
          {"hotel_id", e.hotel_id},
          {"similarity", e.similarity},
          {"explanations", e.explanations}};
}

inline ReportEntry entry_from_json(const nlohmann::json& j) {
  try {
    ReportEntry e;
    e.image_id = j.at("image_id").get<ImageId>();
    e.hotel_id = j.value("hotel_id", HotelId{0});
    e.similarity = j.value("similarity", 0.0);
    if (j.contains("explanations")) e.explanations = j.at("explanations").get<std::vector<std::string>>();
    return e;
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::MalformedJson, std::string("malformed report entry: ") + ex.what());
  }
}

inline nlohmann::json to_json(const Report& r) {
  auto entries = nlohmann::json::array();
  for (const auto& e : r.entries) entries.push_back(to_json(e));
  return {{"report_id", r.report_id}, {"query_ref", r.query_ref}, {"criteria", r.criteria},
          {"notes", r.notes},         {"entries", entries},       {"created_at", r.created_at},
          {"updated_at", r.updated_at}, {"revision", r.revision}};
}

inline Report report_from_json(const nlohmann::json& j) {
  Report r;
  try {
    r.report_id = j.at("report_id").get<std::string>();
    r.query_ref = j.value("query_ref", std::string{});
    r.criteria = j.value("criteria", nlohmann::json::object());
    r.notes = j.value("notes", std::string{});
    for (const auto& e : j.at("entries")) r.entries.push_back(entry_from_json(e));
    r.created_at = j.value("created_at", std::string{});
    r.updated_at = j.value("updated_at", std::string{});
    r.revision = j.value("revision", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::MalformedJson, std::string("malformed report: ") + e.what());
  }
  check_unique(r.entries);
  return r;
}

// ---------------------------------------------------------------------------
// Curation edits
// ---------------------------------------------------------------------------

struct AddEntry {
  ReportEntry entry;
  std::optional<std::size_t> position;  // default: append
};
struct RemoveEntry {
  ImageId image_id = 0;
};
struct MoveEntry {
  ImageId image_id = 0;
  std::size_t position = 0;
};
struct SetNotes {
  std::string notes;
};

using Edit = std::variant<AddEntry, RemoveEntry, MoveEntry, SetNotes>;

// {"op": "add", "entry": {...}, "position": n} | {"op": "remove", "image_id": id}
// | {"op": "move", "image_id": id, "position": n} | {"op": "set_notes", "notes": "..."}
inline Edit edit_from_json(const nlohmann::json& j) {
  try {
    const auto op = j.at("op").get<std::string>();
    if (op == "add") {
      AddEntry a{entry_from_json(j.at("entry")), std::nullopt};
      if (j.contains("position") && !j.at("position").is_null()) a.position = j.at("position").get<std::size_t>();
      return a;
    }
    if (op == "remove") return RemoveEntry{j.at("image_id").get<ImageId>()};
    if (op == "move") return MoveEntry{j.at("image_id").get<ImageId>(), j.at("position").get<std::size_t>()};
    if (op == "set_notes") return SetNotes{j.at("notes").get<std::string>()};
    fail(ErrorCode::InvalidArgument, "unknown edit op '" + op + "' (add|remove|move|set_notes)");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::MalformedJson, std::string("malformed edit: ") + e.what());
  }
}

inline nlohmann::json to_json(const Edit& edit) {
  return std::visit(
      [](const auto& e) -> nlohmann::json {
        using T = std::decay_t<decltype(e)>;
        if constexpr (std::is_same_v<T, AddEntry>) {
          nlohmann::json j{{"op", "add"}, {"entry", to_json(e.entry)}};
          if (e.position) j["position"] = *e.position;
          return j;
        } else if constexpr (std::is_same_v<T, RemoveEntry>) {
          return {{"op", "remove"}, {"image_id", e.image_id}};
        } else if constexpr (std::is_same_v<T, MoveEntry>) {
          return {{"op", "move"}, {"image_id", e.image_id}, {"position", e.position}};
        } else {
          return {{"op", "set_notes"}, {"notes", e.notes}};
        }
      },
      edit);
}

inline std::vector<ReportEntry>::iterator find_entry(Report& r, ImageId id) {
  return std::find_if(r.entries.begin(), r.entries.end(), [id](const ReportEntry& e) { return e.image_id == id; });
}

// Applies one edit to a copy of the report; the input is untouched on error.
inline Report apply_edit(Report r, const Edit& edit) {
  std::visit(
      [&r](const auto& e) {
        using T = std::decay_t<decltype(e)>;
        if constexpr (std::is_same_v<T, AddEntry>) {
          if (find_entry(r, e.entry.image_id) != r.entries.end())
            fail(ErrorCode::DuplicateId, "image_id " + std::to_string(e.entry.image_id) + " is already in the report");
          std::size_t pos = e.position.value_or(r.entries.size());
          if (pos > r.entries.size())
            fail(ErrorCode::OutOfRange, "add position " + std::to_string(pos) + " out of range [0, " +
                                            std::to_string(r.entries.size()) + "]");
          r.entries.insert(r.entries.begin() + static_cast<std::ptrdiff_t>(pos), e.entry);
        } else if constexpr (std::is_same_v<T, RemoveEntry>) {
          auto it = find_entry(r, e.image_id);
          if (it == r.entries.end())
            fail(ErrorCode::NotFound, "image_id " + std::to_string(e.image_id) + " is not in the report");
          r.entries.erase(it);
        } else if constexpr (std::is_same_v<T, MoveEntry>) {
          auto it = find_entry(r, e.image_id);
          if (it == r.entries.end())
            fail(ErrorCode::NotFound, "image_id " + std::to_string(e.image_id) + " is not in the report");
          if (e.position >= r.entries.size())
            fail(ErrorCode::OutOfRange, "move position " + std::to_string(e.position) + " out of range [0, " +
                                            std::to_string(r.entries.size() - 1) + "]");
          ReportEntry moved = *it;
          r.entries.erase(it);
          r.entries.insert(r.entries.begin() + static_cast<std::ptrdiff_t>(e.position), std::move(moved));
        } else {
          r.notes = e.notes;
        }
      },
      edit);
  return r;
}

// ---------------------------------------------------------------------------
// Persistence: one JSON file per report under a reports directory.
// ---------------------------------------------------------------------------

class ReportStore {
 public:
  using Clock = std::function<std::string()>;  // RFC 3339 UTC timestamps

  explicit ReportStore(std::filesystem::path dir, Clock clock = text::now_utc)
      : dir_(std::move(dir)), clock_(std::move(clock)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) fail(ErrorCode::Io, "cannot create reports directory " + dir_.string());
  }

  const std::filesystem::path& directory() const { return dir_; }

  Report create(std::string query_ref, nlohmann::json criteria, std::vector<ReportEntry> entries,
                std::string notes = {}) {
    check_unique(entries);
    Report r;
    r.report_id = text::random_hex_id();
    while (std::filesystem::exists(path_of(r.report_id))) r.report_id = text::random_hex_id();
    r.query_ref = std::move(query_ref);
    r.criteria = criteria.is_null() ? nlohmann::json::object() : std::move(criteria);
    r.notes = std::move(notes);
    r.entries = std::move(entries);
    r.created_at = clock_();
    r.updated_at = r.created_at;
    r.revision = 1;
    auto lock = lock_for(r.report_id);
    save(r);
    return r;
  }

  Report load(const std::string& id) const {
    if (!text::is_hex_id(id)) fail(ErrorCode::NotFound, "unknown report '" + id + "'");
    auto path = path_of(id);
    if (!std::filesystem::exists(path)) fail(ErrorCode::NotFound, "unknown report '" + id + "'");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(binary::read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorCode::MalformedJson, "corrupt report file " + path.string() + ": " + e.what());
    }
    return report_from_json(j);
  }

  // One edit, applied under the report's lock and persisted atomically.
  // updated_at strictly increases with every successful edit.
  Report curate(const std::string& id, const Edit& edit) {
    auto lock = lock_for(id);
    Report current = load(id);
    Report next = apply_edit(current, edit);
    std::string now = clock_();
    next.updated_at = now > current.updated_at ? now : bump(current.updated_at);
    ++next.revision;
    save(next);
    return next;
  }

 private:
  std::filesystem::path path_of(const std::string& id) const { return dir_ / (id + ".json"); }

  void save(const Report& r) const { binary::write_text_atomic(path_of(r.report_id), to_json(r).dump(2)); }

  std::unique_lock<std::mutex> lock_for(const std::string& id) {
    std::shared_ptr<std::mutex> m;
    {
      std::lock_guard guard(locks_mutex_);
      auto& slot = locks_[id];
      if (!slot) slot = std::make_shared<std::mutex>();
      m = slot;
    }
    return std::unique_lock(*m);
  }

  // One millisecond past `ts`, for edits landing within the clock's resolution.
  static std::string bump(const std::string& ts) {
    auto tp = text::parse_utc(ts);
    if (!tp) fail(ErrorCode::MalformedJson, "unparseable updated_at '" + ts + "'");
    return text::format_utc(*tp + std::chrono::milliseconds(1));
  }

  std::filesystem::path dir_;
  Clock clock_;
  std::mutex locks_mutex_;
  std::map<std::string, std::shared_ptr<std::mutex>> locks_;  // entries live as long as the store
};

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

inline std::string mime_for(std::span<const std::uint8_t> bytes) {
  auto starts = [&](std::initializer_list<std::uint8_t> sig) {
    return bytes.size() >= sig.size() && std::equal(sig.begin(), sig.end(), bytes.begin());
  };
  if (starts({0x89, 'P', 'N', 'G'})) return "image/png";
  if (starts({0xff, 0xd8, 0xff})) return "image/jpeg";
  if (starts({'G', 'I', 'F', '8'})) return "image/gif";
  if (bytes.size() >= 12 && starts({'R', 'I', 'F', 'F'}) && bytes[8] == 'W' && bytes[9] == 'E') return "image/webp";
  return "application/octet-stream";
}

inline std::string data_uri(std::span<const std::uint8_t> bytes) {
  return "data:" + mime_for(bytes) + ";base64," + text::base64_encode(bytes);
}

using ThumbnailResolver = std::function<std::optional<std::filesystem::path>(ImageId)>;

struct RenderedHtml {
  std::string html;
  std::vector<std::string> warnings;  // one per missing image
};

inline constexpr std::string_view kReportCss = R"(
@page { size: A4; margin: 15mm; }
body { font-family: sans-serif; font-size: 11pt; color: #111; max-width: 180mm; margin: 0 auto; }
h1 { font-size: 16pt; border-bottom: 1px solid #444; }
h2 { font-size: 13pt; margin-top: 1.2em; }
section { page-break-inside: avoid; }
pre { background: #f4f4f4; padding: 6px; white-space: pre-wrap; }
.query img { max-width: 90mm; }
.results { display: flex; flex-wrap: wrap; gap: 6mm; }
.result { width: 52mm; border: 1px solid #ccc; padding: 2mm; page-break-inside: avoid; }
.result img { width: 100%; }
.placeholder { width: 100%; height: 30mm; background: #ddd; display: flex; align-items: center; justify-content: center; color: #555; }
table { border-collapse: collapse; }
td, th { border: 1px solid #ccc; padding: 2px 6px; text-align: left; }
@media print { .result { break-inside: avoid; } }
)";

// Self-contained HTML: images are inlined as data URIs and the stylesheet is
// embedded. Sections appear as masked query, criteria, notes, results, then
// the derived hotel summary.
inline RenderedHtml render_html(const Report& r, const ThumbnailResolver& thumbnails = {}) {
  RenderedHtml out;
  auto image_tag = [&](const std::optional<std::filesystem::path>& path, const std::string& alt,
                       const std::string& what) -> std::string {
    if (path && std::filesystem::is_regular_file(*path)) {
      try {
        auto bytes = binary::read_file(*path);
        return "<img alt=\"" + text::html_escape(alt) + "\" src=\"" + data_uri(bytes) + "\">";
      } catch (const Error&) {
      }
    }
    out.warnings.push_back("missing image for " + what);
    return "<div class=\"placeholder\">image unavailable</div>";
  };

  std::ostringstream h;
  h << "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n"
    << "<title>Investigation report " << text::html_escape(r.report_id) << "</title>\n"
    << "<style>" << kReportCss << "</style>\n</head>\n<body>\n";
  h << "<h1>Investigation report " << text::html_escape(r.report_id) << "</h1>\n";
  h << "<p>Created " << text::html_escape(r.created_at) << ", updated " << text::html_escape(r.updated_at) << "</p>\n";

  h << "<section id=\"masked-query\" class=\"query\">\n<h2>Masked query image</h2>\n";
  std::optional<std::filesystem::path> query_path;
  if (!r.query_ref.empty()) query_path = r.query_ref;
  h << image_tag(query_path, "masked query", "query image") << "\n</section>\n";

  h << "<section id=\"criteria\">\n<h2>Search criteria</h2>\n<pre>" << text::html_escape(r.criteria.dump(2))
    << "</pre>\n</section>\n";

  h << "<section id=\"notes\">\n<h2>Analyst notes</h2>\n<pre>" << text::html_escape(r.notes) << "</pre>\n</section>\n";

  h << "<section id=\"results\">\n<h2>Selected results</h2>\n<div class=\"results\">\n";
  for (std::size_t i = 0; i < r.entries.size(); ++i) {
    const auto& e = r.entries[i];
    h << "<div class=\"result\" data-image-id=\"" << e.image_id << "\">\n";
    h << image_tag(thumbnails ? thumbnails(e.image_id) : std::nullopt, "image " + std::to_string(e.image_id),
                   "image_id " + std::to_string(e.image_id));
    char score[32];
    std::snprintf(score, sizeof score, "%.4f", e.similarity);
    h << "\n<p>#" << (i + 1) << " &middot; image " << e.image_id << "<br>hotel " << e.hotel_id
      << "<br>similarity " << score << "</p>\n";
    if (!e.explanations.empty()) {
      h << "<p>explanations: ";
      for (std::size_t k = 0; k < e.explanations.size(); ++k)
        h << (k ? ", " : "") << text::html_escape(e.explanations[k]);
      h << "</p>\n";
    }
    h << "</div>\n";
  }
  h << "</div>\n</section>\n";

  std::vector<ScoredImage> ranked;
  for (const auto& e : r.entries) ranked.push_back({e.image_id, e.hotel_id, e.similarity});
  auto hotels = aggregate_hotels(ranked);
  if (!hotels.empty()) {
    h << "<section id=\"hotels\">\n<h2>Most likely hotels</h2>\n<table>\n"
      << "<tr><th>hotel</th><th>best similarity</th><th>selected images</th></tr>\n";
    for (const auto& g : hotels) {
      char score[32];
      std::snprintf(score, sizeof score, "%.4f", g.best_score);
      h << "<tr><td>" << g.hotel_id << "</td><td>" << score << "</td><td>" << g.count << "</td></tr>\n";
    }
    h << "</table>\n</section>\n";
  }
  h << "</body>\n</html>\n";
  out.html = h.str();
  return out;
}

inline std::string render_json(const Report& r) { return to_json(r).dump(2); }

}  // namespace matchscope::report
