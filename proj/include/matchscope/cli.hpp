#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "matchscope/api.hpp"
#include "matchscope/binary.hpp"
#include "matchscope/error.hpp"
#include "matchscope/explain.hpp"
#include "matchscope/index.hpp"
#include "matchscope/metric.hpp"
#include "matchscope/report.hpp"
#include "matchscope/store.hpp"
#include "matchscope/workspace.hpp"

namespace matchscope::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kIo = 3 };

// Bad flag values found after parsing; reported like parse errors.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::vector<double> parse_number_list(const std::string& text, std::size_t expected, const char* flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(std::string(flag) + ": '" + item + "' is not a number");
    }
  }
  if (out.size() != expected)
    throw UsageError(std::string(flag) + " expects " + std::to_string(expected) + " comma-separated numbers");
  return out;
}

inline std::vector<std::string> split_terms(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  auto text = binary::read_text(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::MalformedJson, path.string() + ": " + e.what());
  }
}

inline MaskSpec read_mask(const std::optional<std::string>& path) {
  if (!path) return {};
  return mask_from_json(read_json_file(*path));
}

struct QueryFlags {
  std::string tensor;
  std::optional<std::string> mask;
  std::size_t k = 20;
  std::optional<std::string> bbox;
  std::optional<std::string> center;
  std::optional<double> radius_km;
  std::optional<ChainId> chain;
  std::optional<std::string> terms;
};

inline QueryFilters filters_from_flags(const QueryFlags& f) {
  QueryFilters filters;
  if (f.bbox) {
    auto b = parse_number_list(*f.bbox, 4, "--bbox");
    filters.bbox = BoundingBox{b[0], b[1], b[2], b[3]};
  }
  if (f.center.has_value() != f.radius_km.has_value()) throw UsageError("--center and --radius-km go together");
  if (f.center) {
    auto c = parse_number_list(*f.center, 2, "--center");
    filters.radius = RadiusFilter{{c[0], c[1]}, *f.radius_km};
  }
  filters.chain = f.chain;
  if (f.terms) filters.terms = split_terms(*f.terms);
  try {
    validate(filters);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  return filters;
}

class Driver {
 public:
  Driver(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int run(const std::vector<std::string>& args) {
    CLI::App app{"matchscope: masked-query image retrieval with explanations", "matchscope"};
    app.require_subcommand(1);
    ServiceConfig defaults;
    try {
      apply_environment(defaults);
    } catch (const Error& e) {
      err_ << "error: " << e.what() << "\n";
      return kUsage;
    }
    std::string data_root = defaults.data_root.string();
    app.add_option("--data-root", data_root, "data directory (env MATCHSCOPE_DATA_ROOT)");

    // ingest
    auto* ingest = app.add_subcommand("ingest", "add catalog records and their feature tensors");
    std::string catalog_file;
    std::optional<std::string> features_dir;
    ingest->add_option("--catalog", catalog_file, "JSONL catalog")->required()->check(CLI::ExistingFile);
    ingest->add_option("--features-dir", features_dir, "directory of <image_id>.sfm tensors")
        ->check(CLI::ExistingDirectory);

    // index build
    auto* index = app.add_subcommand("index", "index maintenance");
    index->require_subcommand(1);
    auto* build = index->add_subcommand("build", "pool, normalize and store catalog embeddings");
    std::optional<std::string> index_out;
    build->add_option("--out", index_out, "output EMB1 path (default <data-root>/index/embeddings.emb1)");

    // query
    auto* query = app.add_subcommand("query", "search the index with a query tensor");
    QueryFlags qf;
    query->add_option("--tensor", qf.tensor, "query SFM1 tensor")->required();
    query->add_option("--mask", qf.mask, "mask JSON");
    query->add_option("--k", qf.k, "number of results")->check(CLI::PositiveNumber);
    auto* bbox_opt = query->add_option("--bbox", qf.bbox, "west,south,east,north");
    auto* center_opt = query->add_option("--center", qf.center, "lat,lon");
    query->add_option("--radius-km", qf.radius_km, "radius around --center");
    bbox_opt->excludes(center_opt);
    query->add_option("--chain", qf.chain, "chain id");
    query->add_option("--terms", qf.terms, "comma-separated terms, all required");

    // explain
    auto* explain_cmd = app.add_subcommand("explain", "explain one query/result pair");
    std::string explain_query, explain_mode = "heatmap", out_prefix;
    std::optional<std::string> explain_mask;
    ImageId result_id = 0;
    std::uint32_t panel_size = 224;
    explain_cmd->add_option("--query", explain_query, "query SFM1 tensor")->required();
    explain_cmd->add_option("--mask", explain_mask, "mask JSON applied to the query");
    explain_cmd->add_option("--result-id", result_id, "catalog image id")->required();
    explain_cmd->add_option("--mode", explain_mode, "heatmap|correspondence")
        ->check(CLI::IsMember({"heatmap", "correspondence"}));
    explain_cmd->add_option("--out-prefix", out_prefix, "writes <prefix>.json and <prefix>.png")->required();
    explain_cmd->add_option("--size", panel_size, "panel size in pixels")->check(CLI::Range(1u, 4096u));

    // report
    auto* report_cmd = app.add_subcommand("report", "create, edit and render reports");
    report_cmd->require_subcommand(1);
    auto* report_new = report_cmd->add_subcommand("new", "create a report");
    std::string query_ref, notes;
    std::optional<std::string> criteria_file, entries_file;
    report_new->add_option("--query-ref", query_ref, "path of the query image");
    report_new->add_option("--criteria", criteria_file, "criteria JSON");
    report_new->add_option("--entries", entries_file, "JSON array of entries");
    report_new->add_option("--notes", notes, "free-text notes");
    auto* report_edit = report_cmd->add_subcommand("edit", "apply one edit to a report");
    std::string report_id, edit_text;
    report_edit->add_option("--id", report_id, "report id")->required();
    report_edit->add_option("--edit", edit_text, "edit JSON (inline, or @file)")->required();
    auto* report_render = report_cmd->add_subcommand("render", "render a report");
    std::string render_format = "html";
    std::optional<std::string> render_out;
    report_render->add_option("--id", report_id, "report id")->required();
    report_render->add_option("--format", render_format, "html|json")->check(CLI::IsMember({"html", "json"}));
    report_render->add_option("--out", render_out, "output file (required for html)");

    // lab
    auto* lab = app.add_subcommand("lab", "metric-learning experiments");
    lab->require_subcommand(1);
    auto* lab_run = lab->add_subcommand("run", "train and evaluate the configured losses");
    std::string lab_config;
    lab_run->add_option("--config", lab_config, "experiment JSON")->required();

    // serve
    auto* serve = app.add_subcommand("serve", "run the HTTP service");
    int port = defaults.port;
    std::string host = "0.0.0.0";
    std::string extractor_url = defaults.extractor_url;
    serve->add_option("--port", port, "listen port (env MATCHSCOPE_PORT)")->check(CLI::Range(0, 65535));
    serve->add_option("--host", host, "listen address");
    serve->add_option("--extractor-url", extractor_url, "feature extractor endpoint (env MATCHSCOPE_EXTRACTOR_URL)");

    std::vector<const char*> argv{"matchscope"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
      out_ << app.help();
      return kOk;
    } catch (const CLI::ParseError& e) {
      err_ << "error: " << e.what() << "\n\n" << app.help();
      return kUsage;
    }

    DataRoot data{data_root};
    try {
      if (*ingest) return do_ingest(data, catalog_file, features_dir);
      if (*build) return do_index_build(data, index_out);
      if (*query) return do_query(data, qf);
      if (*explain_cmd) return do_explain(data, explain_query, explain_mask, result_id, explain_mode, out_prefix,
                                          {panel_size, panel_size});
      if (*report_new) return do_report_new(data, query_ref, criteria_file, entries_file, notes);
      if (*report_edit) return do_report_edit(data, report_id, edit_text);
      if (*report_render) return do_report_render(data, report_id, render_format, render_out);
      if (*lab_run) return do_lab(lab_config);
      if (*serve) {
        defaults.data_root = data.root;
        defaults.port = port;
        defaults.extractor_url = extractor_url;
        return do_serve(defaults, host);
      }
    } catch (const UsageError& e) {
      err_ << "error: " << e.what() << "\n";
      return kUsage;
    } catch (const Error& e) {
      err_ << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
      return e.code() == ErrorCode::Io ? kIo : kData;
    } catch (const std::filesystem::filesystem_error& e) {
      err_ << "error [io_error]: " << e.what() << "\n";
      return kIo;
    } catch (const nlohmann::json::exception& e) {
      err_ << "error [malformed_json]: " << e.what() << "\n";
      return kData;
    }
    err_ << app.help();
    return kUsage;
  }

 private:
  void emit(const nlohmann::json& j) { out_ << j.dump(2) << "\n"; }

  int do_ingest(const DataRoot& data, const std::string& catalog_file, const std::optional<std::string>& features_dir) {
    std::ifstream in(catalog_file);
    if (!in) fail(ErrorCode::Io, "cannot open " + catalog_file);
    auto base = load_catalog(data.catalog_path());
    auto outcome = ingest_catalog(in, base);

    // Read every tensor before touching the data root.
    std::vector<std::pair<ImageId, SpatialFeatureMap>> tensors;
    auto missing = nlohmann::json::array();
    for (const auto& [id, record] : outcome.catalog.records()) {
      if (base.contains(id) || !features_dir) continue;
      auto src = std::filesystem::path(*features_dir) / (std::to_string(id) + ".sfm");
      if (!std::filesystem::exists(src)) {
        missing.push_back(id);
        continue;
      }
      tensors.emplace_back(id, read_spatial_tensor(src, id));
    }

    data.ensure_layout();
    for (const auto& [id, map] : tensors) write_spatial_tensor(map, data.feature_path(id));
    save_catalog(outcome.catalog, data.catalog_path());

    auto rejects = nlohmann::json::array();
    for (const auto& r : outcome.rejects) {
      rejects.push_back({{"line", r.line}, {"code", to_string(r.code)}, {"message", r.message}});
      err_ << "line " << r.line << " rejected: " << r.message << "\n";
    }
    emit({{"inserted", outcome.inserted},
          {"rejected", rejects},
          {"features_stored", tensors.size()},
          {"missing_features", missing},
          {"stats",
           {{"images", outcome.stats.image_count},
            {"hotels", outcome.stats.hotel_count},
            {"chains", outcome.stats.chain_count}}}});
    return kOk;
  }

  int do_index_build(const DataRoot& data, const std::optional<std::string>& out) {
    std::filesystem::path path = out ? std::filesystem::path(*out) : data.index_path();
    auto summary = build_index_files(data, path);
    emit({{"rows", summary.rows}, {"dim", summary.dim}, {"bytes", summary.bytes}, {"path", path.string()}});
    return kOk;
  }

  int do_query(const DataRoot& data, const QueryFlags& f) {
    auto filters = filters_from_flags(f);
    auto mask = read_mask(f.mask);
    auto map = read_spatial_tensor(f.tensor);
    auto embedding = query_embedding(map, mask);
    auto gen = load_generation(data);
    auto body = to_json(gen->index.search({embedding, f.k, filters}));
    body["k"] = f.k;
    emit(body);
    return kOk;
  }

  int do_explain(const DataRoot& data, const std::string& query_path, const std::optional<std::string>& mask_path,
                 ImageId result_id, const std::string& mode, const std::string& prefix, explain::PixelSize panel) {
    auto mask = read_mask(mask_path);
    auto query = read_spatial_tensor(query_path);
    auto result_path = data.feature_path(result_id);
    if (!std::filesystem::exists(result_path))
      fail(ErrorCode::NotFound, "no stored tensor for image_id " + std::to_string(result_id));
    auto result = read_spatial_tensor(result_path, result_id);
    explain::require_same_shape(query, result);

    nlohmann::json body;
    binary::Bytes png;
    if (mode == "heatmap") {
      auto weights = rasterize_mask_weights(mask, query.height, query.width);
      auto pair = explain::importance_maps(query, result, true, weights);
      body = explain::to_json(pair);
      png = explain::render_pair_png(pair, panel);
    } else {
      auto corr = explain::pca_correspondence(query, result);
      body = explain::to_json(corr);
      png = explain::render_pair_png(corr, panel);
    }
    body["mode"] = mode;
    body["result_id"] = result_id;
    const std::string json_path = prefix + ".json", png_path = prefix + ".png";
    binary::write_text_atomic(json_path, body.dump(2));
    binary::write_file_atomic(png_path, png);
    emit({{"mode", mode}, {"json", json_path}, {"png", png_path}});
    return kOk;
  }

  int do_report_new(const DataRoot& data, const std::string& query_ref, const std::optional<std::string>& criteria,
                    const std::optional<std::string>& entries_file, const std::string& notes) {
    nlohmann::json crit = criteria ? read_json_file(*criteria) : nlohmann::json::object();
    std::vector<report::ReportEntry> entries;
    if (entries_file) {
      auto j = read_json_file(*entries_file);
      if (!j.is_array()) fail(ErrorCode::MalformedJson, "entries file must hold a JSON array");
      for (const auto& e : j) entries.push_back(report::entry_from_json(e));
    }
    report::ReportStore store(data.reports_dir());
    emit(report::to_json(store.create(query_ref, crit, std::move(entries), notes)));
    return kOk;
  }

  int do_report_edit(const DataRoot& data, const std::string& id, const std::string& edit_text) {
    nlohmann::json j;
    if (!edit_text.empty() && edit_text.front() == '@') {
      j = read_json_file(edit_text.substr(1));
    } else {
      try {
        j = nlohmann::json::parse(edit_text);
      } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorCode::MalformedJson, std::string("--edit: ") + e.what());
      }
    }
    report::ReportStore store(data.reports_dir());
    emit(report::to_json(store.curate(id, report::edit_from_json(j))));
    return kOk;
  }

  int do_report_render(const DataRoot& data, const std::string& id, const std::string& format,
                       const std::optional<std::string>& out) {
    report::ReportStore store(data.reports_dir());
    auto r = store.load(id);
    if (format == "json") {
      if (out) {
        binary::write_text_atomic(*out, report::render_json(r));
        emit({{"path", *out}, {"format", "json"}});
      } else {
        emit(report::to_json(r));
      }
      return kOk;
    }
    if (!out) throw UsageError("--out is required for --format html");
    auto rendered = report::render_html(r, [&data](ImageId image) { return data.thumbnail(image); });
    binary::write_text_atomic(*out, rendered.html);
    for (const auto& w : rendered.warnings) err_ << "warning: " << w << "\n";
    emit({{"path", *out}, {"format", "html"}, {"warnings", rendered.warnings}});
    return kOk;
  }

  int do_lab(const std::string& config_path) {
    auto config = metric::experiment_config_from_json(read_json_file(config_path));
    auto result = metric::run_experiment(config);
    emit(metric::to_json(result));
    return kOk;
  }

  int do_serve(const ServiceConfig& config, const std::string& host) {
    api::Service service(config);
    int port = config.port;
    if (port == 0) {
      port = service.http().bind_to_any_port(host);
    } else if (!service.bind(host, port)) {
      fail(ErrorCode::Io, "cannot bind " + host + ":" + std::to_string(port));
    }
    emit({{"listening", {{"host", host}, {"port", port}}}, {"data_root", config.data_root.string()}});
    out_.flush();
    if (!service.listen_after_bind()) fail(ErrorCode::Io, "server stopped unexpectedly");
    return kOk;
  }

  std::ostream& out_;
  std::ostream& err_;
};

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return Driver(out, err).run(args);
}

}  // namespace matchscope::cli
