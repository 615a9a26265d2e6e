#include <gtest/gtest.h>

#include <thread>

#include "data_fixture.hpp"
#include "matchscope/api.hpp"
#include "png_reader.hpp"

using namespace matchscope;
using nlohmann::json;

namespace {

// Runs a Service on an ephemeral port for the lifetime of the object.
class Running {
 public:
  explicit Running(ServiceConfig config) : service_(std::move(config)) {
    port_ = service_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { service_.listen_after_bind(); });
    service_.wait_until_ready();
  }
  ~Running() {
    service_.stop();
    thread_.join();
  }
  api::Service& service() { return service_; }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(30, 0);
    return c;
  }

 private:
  api::Service service_;
  int port_ = 0;
  std::thread thread_;
};

// Extractor stand-in: answers every POST with a fixed SFM1 body.
class StubExtractor {
 public:
  explicit StubExtractor(std::string body) : body_(std::move(body)) {
    server_.Post("/extract", [this](const httplib::Request& req, httplib::Response& res) {
      last_request_size_ = req.body.size();
      res.set_content(body_, "application/octet-stream");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubExtractor() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/extract"; }
  std::size_t last_request_size() const { return last_request_size_; }

 private:
  std::string body_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<std::size_t> last_request_size_{0};
};

ServiceConfig config_for(const DataFixture& f, std::string extractor = {}) {
  ServiceConfig c;
  c.data_root = f.dir.path();
  c.extractor_url = std::move(extractor);
  c.max_upload_bytes = 1 << 20;
  c.extractor_timeout_seconds = 2;
  c.extractor_retries = 0;
  return c;
}

httplib::MultipartFormDataItems tensor_form(const std::string& tensor, const std::string& mask = {},
                                            const std::string& filters = {}) {
  httplib::MultipartFormDataItems items{{"tensor", tensor, "q.sfm", "application/octet-stream"}};
  if (!mask.empty()) items.push_back({"mask", mask, "", "application/json"});
  if (!filters.empty()) items.push_back({"filters", filters, "", "application/json"});
  return items;
}

std::string create_query(httplib::Client& c, const std::string& tensor, const std::string& mask = {}) {
  auto res = c.Post("/api/v1/queries", tensor_form(tensor, mask));
  EXPECT_TRUE(res);
  EXPECT_EQ(res->status, 201) << res->body;
  return json::parse(res->body).at("query_id").get<std::string>();
}

void expect_error_body(const httplib::Result& res, int status) {
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, status) << res->body;
  auto j = json::parse(res->body);
  EXPECT_TRUE(j.contains("code"));
  EXPECT_TRUE(j.contains("message"));
}

}  // namespace

TEST(Api, QueryWithTensorAndResults) {
  DataFixture f;
  Running s(config_for(f));
  auto c = s.client();
  auto id = create_query(c, f.tensor_bytes(3));
  auto res = c.Get("/api/v1/queries/" + id + "/results?k=20");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  auto j = json::parse(res->body);
  EXPECT_LE(j["results"].size(), 20u);
  EXPECT_EQ(j["results"][0]["image_id"], DataFixture::image_id(3));
  EXPECT_NEAR(j["results"][0]["score"].get<double>(), 1.0, 1e-6);
  EXPECT_FALSE(j["hotel_groups"].empty());
  auto again = c.Get("/api/v1/queries/" + id + "/results?k=20");
  EXPECT_EQ(again->body, res->body);
}

TEST(Api, ResultsMatchDirectSearch) {
  DataFixture f;
  Running s(config_for(f));
  auto c = s.client();
  auto id = create_query(c, f.tensor_bytes(5));
  auto body = json::parse(c.Get("/api/v1/queries/" + id + "/results?k=7")->body);
  auto direct = s.service().generation()->index.search({query_embedding(f.tensor(5)), 7, {}});
  EXPECT_EQ(body["results"], to_json(direct)["results"]);
}

TEST(Api, FiltersApplied) {
  DataFixture f;
  Running s(config_for(f));
  auto c = s.client();
  auto res = c.Post("/api/v1/queries", tensor_form(f.tensor_bytes(0), "", R"({"chain_id": 1, "terms": ["pool"]})"));
  ASSERT_EQ(res->status, 201);
  auto id = json::parse(res->body)["query_id"].get<std::string>();
  auto j = json::parse(c.Get("/api/v1/queries/" + id + "/results")->body);
  for (const auto& r : j["results"]) {
    auto hotel = r["hotel_id"].get<int>();
    EXPECT_EQ(hotel % 2, 0);
    EXPECT_EQ((r["image_id"].get<int>() - 100) % 3, 0);
  }
}

TEST(Api, FullyMaskedIs422) {
  DataFixture f;
  Running s(config_for(f));
  auto c = s.client();
  auto res = c.Post("/api/v1/queries",
                    tensor_form(f.tensor_bytes(0), R"({"polygons": [[[0,0],[1,0],[1,1],[0,1]]]})"));
  expect_error_body(res, 422);
  EXPECT_NE(res->body.find("fully masked query"), std::string::npos);
}

TEST(Api, BadInputsAre400) {
  DataFixture f;
  Running s(config_for(f));
  auto c = s.client();
  expect_error_body(c.Post("/api/v1/queries", tensor_form(f.tensor_bytes(0), "{not json")), 400);
  expect_error_body(c.Post("/api/v1/queries", tensor_form(f.tensor_bytes(0), R"({"polygons": [[[0,0],[2,0],[0,1]]]})")), 400);
  expect_error_body(c.Post("/api/v1/queries", tensor_form(f.tensor_bytes(0), "", R"({"center": [95, 0], "radius_km": 3})")), 400);
  expect_error_body(c.Post("/api/v1/queries", tensor_form("XXXX0000")), 400);
  expect_error_body(c.Post("/api/v1/queries", "{}", "application/json"), 400);
}

TEST(Api, PayloadLimitIs413) {
  DataFixture f;
  auto cfg = config_for(f);
  cfg.max_upload_bytes = 256;
  Running s(cfg);
  auto c = s.client();
  expect_error_body(c.Post("/api/v1/queries", tensor_form(std::string(4096, 'x'))), 413);
}

TEST(Api, UnknownQueryAndBadK) {
  DataFixture f;
  Running s(config_for(f));
  auto c = s.client();
  expect_error_body(c.Get("/api/v1/queries/deadbeef/results"), 404);
  auto id = create_query(c, f.tensor_bytes(1));
  expect_error_body(c.Get("/api/v1/queries/" + id + "/results?k=0"), 400);
  expect_error_body(c.Get("/api/v1/queries/" + id + "/results?k=abc"), 400);
  expect_error_body(c.Get("/api/v1/nothing/here"), 404);
}

TEST(Api, ImageWithoutExtractorIs502) {
  DataFixture f;
  Running s(config_for(f));
  auto c = s.client();
  httplib::MultipartFormDataItems items{{"image", "\xff\xd8\xff jpeg bytes", "q.jpg", "image/jpeg"}};
  auto res = c.Post("/api/v1/queries", items);
  expect_error_body(res, 502);
  EXPECT_NE(res->body.find("extractor"), std::string::npos);
}

TEST(Api, ExtractorDownIs502) {
  DataFixture f;
  int dead_port;
  {
    httplib::Server probe;
    dead_port = probe.bind_to_any_port("127.0.0.1");
  }
  Running s(config_for(f, "http://127.0.0.1:" + std::to_string(dead_port) + "/extract"));
  auto c = s.client();
  httplib::MultipartFormDataItems items{{"image", "jpeg bytes", "q.jpg", "image/jpeg"}};
  expect_error_body(c.Post("/api/v1/queries", items), 502);
}

TEST(Api, ImageThroughStubExtractor) {
  DataFixture f;
  StubExtractor stub(f.tensor_bytes(4));
  Running s(config_for(f, stub.url()));
  auto c = s.client();
  httplib::MultipartFormDataItems items{{"image", std::string(100, 'j'), "q.jpg", "image/jpeg"}};
  auto res = c.Post("/api/v1/queries", items);
  ASSERT_EQ(res->status, 201) << res->body;
  EXPECT_EQ(stub.last_request_size(), 100u);
  auto id = json::parse(res->body)["query_id"].get<std::string>();
  auto j = json::parse(c.Get("/api/v1/queries/" + id + "/results?k=1")->body);
  EXPECT_EQ(j["results"][0]["image_id"], DataFixture::image_id(4));
}

TEST(Api, ExplainHeatmapJsonAndCorrespondencePng) {
  DataFixture f;
  Running s(config_for(f));
  auto c = s.client();
  auto id = create_query(c, f.tensor_bytes(2));
  auto target = std::to_string(DataFixture::image_id(7));
  auto heat = c.Get("/api/v1/queries/" + id + "/explain/" + target + "?mode=heatmap&format=json");
  ASSERT_EQ(heat->status, 200) << heat->body;
  auto hj = json::parse(heat->body);
  EXPECT_EQ(hj["query"].size(), 4u);
  EXPECT_EQ(hj["result"].size(), 4u);
  EXPECT_TRUE(hj.contains("total_similarity"));
  double total = 0;
  for (const auto& row : hj["query"])
    for (const auto& v : row) total += v.get<double>();
  EXPECT_NEAR(total, hj["total_similarity"].get<double>(), 1e-9);

  auto corr = c.Get("/api/v1/queries/" + id + "/explain/" + target + "?mode=correspondence&format=png");
  ASSERT_EQ(corr->status, 200);
  EXPECT_EQ(corr->get_header_value("Content-Type"), "image/png");
  auto png = decode_png(std::vector<std::uint8_t>(corr->body.begin(), corr->body.end()));
  EXPECT_EQ(png.width, 448u);
  EXPECT_EQ(png.height, 224u);
  auto cj = json::parse(c.Get("/api/v1/queries/" + id + "/explain/" + target + "?mode=correspondence&format=json")->body);
  // top-left pixel of the left panel carries query cell (0,0)
  EXPECT_EQ(png.at(0, 0)[0], cj["query_rgb"][0][0][0].get<int>());
  EXPECT_EQ(png.at(224, 0)[0], cj["result_rgb"][0][0][0].get<int>());
}

TEST(Api, ExplainErrors) {
  DataFixture f;
  Running s(config_for(f));
  auto c = s.client();
  auto id = create_query(c, f.tensor_bytes(2));
  auto target = std::to_string(DataFixture::image_id(1));
  auto bad = c.Get("/api/v1/queries/" + id + "/explain/" + target + "?mode=saliency");
  expect_error_body(bad, 400);
  EXPECT_NE(bad->body.find("heatmap"), std::string::npos);
  EXPECT_NE(bad->body.find("correspondence"), std::string::npos);
  expect_error_body(c.Get("/api/v1/queries/" + id + "/explain/999999"), 404);
  expect_error_body(c.Get("/api/v1/queries/abcdef12/explain/" + target), 404);

  auto other_shape = make_feature_map(2, 2, 8);
  for (auto& v : other_shape.values) v = 1.0f;
  auto bytes = encode_spatial_tensor(other_shape);
  auto small = create_query(c, std::string(bytes.begin(), bytes.end()));
  expect_error_body(c.Get("/api/v1/queries/" + small + "/explain/" + target), 409);
}

TEST(Api, HotelImages) {
  DataFixture f;
  Running s(config_for(f));
  auto c = s.client();
  auto j = json::parse(c.Get("/api/v1/hotels/2/images")->body);
  ASSERT_EQ(j["images"].size(), 5u);
  for (std::size_t i = 1; i < j["images"].size(); ++i)
    EXPECT_LT(j["images"][i - 1]["image_id"].get<int>(), j["images"][i]["image_id"].get<int>());
  auto none = c.Get("/api/v1/hotels/424242/images");
  EXPECT_EQ(none->status, 200);
  EXPECT_TRUE(json::parse(none->body)["images"].empty());
}

TEST(Api, ReportLifecycle) {
  DataFixture f;
  Running s(config_for(f));
  auto c = s.client();
  auto qid = create_query(c, f.tensor_bytes(0));
  json body{{"query_id", qid},
            {"entries", {{{"image_id", 101}, {"hotel_id", 2}, {"similarity", 0.9}},
                         {{"image_id", 102}, {"hotel_id", 3}, {"similarity", 0.8}},
                         {{"image_id", 103}, {"hotel_id", 4}, {"similarity", 0.7}}}}};
  auto created = c.Post("/api/v1/reports", body.dump(), "application/json");
  ASSERT_EQ(created->status, 201) << created->body;
  auto rid = json::parse(created->body)["report_id"].get<std::string>();
  EXPECT_EQ(json::parse(created->body)["criteria"]["query_id"], qid);

  auto moved = c.Patch("/api/v1/reports/" + rid, R"({"op": "move", "image_id": 103, "position": 0})", "application/json");
  ASSERT_EQ(moved->status, 200) << moved->body;
  auto mj = json::parse(moved->body);
  EXPECT_EQ(mj["entries"][0]["image_id"], 103);
  EXPECT_EQ(mj["entries"][1]["image_id"], 101);
  EXPECT_EQ(mj["revision"], 2);

  expect_error_body(c.Patch("/api/v1/reports/" + rid, R"({"op": "move", "image_id": 103, "position": 9})", "application/json"), 409);
  expect_error_body(c.Patch("/api/v1/reports/" + rid, R"({"op": "remove", "image_id": 5})", "application/json"), 404);
  expect_error_body(c.Patch("/api/v1/reports/" + rid, R"({"op": "add", "entry": {"image_id": 101}})", "application/json"), 409);
  expect_error_body(c.Patch("/api/v1/reports/" + rid, "{oops", "application/json"), 400);
  expect_error_body(c.Patch("/api/v1/reports/0123abcd", R"({"op": "set_notes", "notes": ""})", "application/json"), 404);

  auto as_json = c.Get("/api/v1/reports/" + rid + "?format=json");
  EXPECT_EQ(json::parse(as_json->body), mj);
  auto html = c.Get("/api/v1/reports/" + rid + "?format=html");
  ASSERT_EQ(html->status, 200);
  EXPECT_NE(html->get_header_value("Content-Type").find("text/html"), std::string::npos);
  EXPECT_EQ(html->body.find("http://"), std::string::npos);
  EXPECT_EQ(html->body.find("https://"), std::string::npos);
  EXPECT_LT(html->body.find("data-image-id=\"103\""), html->body.find("data-image-id=\"101\""));
  expect_error_body(c.Get("/api/v1/reports/" + rid + "?format=pdf"), 400);
}

TEST(Api, SessionsSurviveRestart) {
  DataFixture f;
  std::string id, first;
  {
    Running s(config_for(f));
    auto c = s.client();
    id = create_query(c, f.tensor_bytes(6), R"({"polygons": [[[0,0],[0.5,0],[0.5,0.5]]]})");
    first = c.Get("/api/v1/queries/" + id + "/results?k=5")->body;
  }
  Running s(config_for(f));
  auto c = s.client();
  auto again = c.Get("/api/v1/queries/" + id + "/results?k=5");
  ASSERT_EQ(again->status, 200);
  auto a = json::parse(first), b = json::parse(again->body);
  EXPECT_EQ(a["results"], b["results"]);
}
