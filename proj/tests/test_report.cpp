#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <set>

#include "matchscope/report.hpp"
#include "matchscope/png.hpp"
#include "report_model.hpp"
#include "temp_dir.hpp"

using namespace matchscope;
using namespace matchscope::report;

namespace {

ReportEntry entry(ImageId id, HotelId hotel = 1, double s = 0.5) { return {id, hotel, s, {}}; }

Report with_ids(std::vector<ImageId> ids) {
  Report r;
  r.report_id = "abc";
  for (auto id : ids) r.entries.push_back(entry(id));
  return r;
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

// Clock that hands out the same instant every time.
struct FrozenClock {
  std::string operator()() const { return "2026-01-01T00:00:00.000Z"; }
};

}  // namespace

TEST(ReportCreate, EmptyAndOrdered) {
  TempDir dir;
  ReportStore store(dir.path());
  auto empty = store.create("", {}, {});
  EXPECT_TRUE(empty.entries.empty());
  EXPECT_EQ(empty.revision, 1u);
  auto three = store.create("", {}, {entry(3), entry(1), entry(2)});
  EXPECT_EQ(oracle::ids_of(three), (std::vector<ImageId>{3, 1, 2}));
  EXPECT_EQ(store.load(three.report_id), three);
}

TEST(ReportCreate, DuplicateRejectedWithId) {
  TempDir dir;
  ReportStore store(dir.path());
  try {
    store.create("", {}, {entry(5), entry(5)});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DuplicateId);
    EXPECT_NE(std::string(e.what()).find('5'), std::string::npos);
  }
}

TEST(ReportEdit, MoveToFront) {
  auto r = apply_edit(with_ids({1, 2, 3}), MoveEntry{3, 0});
  EXPECT_EQ(oracle::ids_of(r), (std::vector<ImageId>{3, 1, 2}));
}

TEST(ReportEdit, RemoveThenAddAppends) {
  auto r = apply_edit(with_ids({1, 2, 3}), RemoveEntry{2});
  r = apply_edit(r, AddEntry{entry(2), std::nullopt});
  EXPECT_EQ(oracle::ids_of(r), (std::vector<ImageId>{1, 3, 2}));
}

TEST(ReportEdit, ClearNotesKeepsEntries) {
  auto r = with_ids({1, 2});
  r.notes = "lobby carpet matches";
  auto out = apply_edit(r, SetNotes{""});
  EXPECT_EQ(out.notes, "");
  EXPECT_EQ(out.entries, r.entries);
}

TEST(ReportEdit, Errors) {
  auto code = [](const Report& r, const Edit& e) {
    try {
      apply_edit(r, e);
    } catch (const Error& err) {
      return err.code();
    }
    return ErrorCode::Conflict;
  };
  auto r = with_ids({1, 2});
  EXPECT_EQ(code(r, AddEntry{entry(1), std::nullopt}), ErrorCode::DuplicateId);
  EXPECT_EQ(code(r, AddEntry{entry(9), 3}), ErrorCode::OutOfRange);
  EXPECT_EQ(code(r, RemoveEntry{9}), ErrorCode::NotFound);
  EXPECT_EQ(code(r, MoveEntry{9, 0}), ErrorCode::NotFound);
  EXPECT_EQ(code(r, MoveEntry{1, 2}), ErrorCode::OutOfRange);
}

TEST(ReportEdit, RandomSequencesMatchListModel) {
  std::mt19937_64 rng(99);
  for (int seq = 0; seq < 100; ++seq) {
    Report r = with_ids({});
    std::vector<ImageId> model;
    for (int step = 0; step < 30; ++step) {
      auto edit = oracle::random_edit(rng, model.size());
      auto expected = oracle::model_apply(model, edit);
      try {
        auto next = apply_edit(r, edit);
        ASSERT_TRUE(expected.has_value());
        if (std::holds_alternative<MoveEntry>(edit)) {
          auto a = oracle::ids_of(r), b = oracle::ids_of(next);
          EXPECT_EQ(std::multiset<ImageId>(a.begin(), a.end()), std::multiset<ImageId>(b.begin(), b.end()));
        }
        r = std::move(next);
        model = *expected;
      } catch (const Error&) {
        ASSERT_FALSE(expected.has_value());
      }
      ASSERT_EQ(oracle::ids_of(r), model);
      std::set<ImageId> unique(model.begin(), model.end());
      ASSERT_EQ(unique.size(), model.size());
    }
  }
}

TEST(ReportEdit, EditJsonRoundTrip) {
  for (const Edit& e : std::vector<Edit>{AddEntry{entry(4, 2, 0.25), 1}, RemoveEntry{3}, MoveEntry{2, 0}, SetNotes{"x"}})
    EXPECT_EQ(to_json(edit_from_json(to_json(e))), to_json(e));
  EXPECT_THROW(edit_from_json(nlohmann::json::parse(R"({"op": "swap"})")), Error);
  EXPECT_THROW(edit_from_json(nlohmann::json::parse(R"({"op": "move"})")), Error);
}

TEST(ReportStore, CurateBumpsRevisionAndTime) {
  TempDir dir;
  ReportStore store(dir.path(), FrozenClock{});
  auto r = store.create("", {}, {entry(1), entry(2)});
  auto a = store.curate(r.report_id, MoveEntry{2, 0});
  auto b = store.curate(r.report_id, SetNotes{"n"});
  EXPECT_EQ(a.revision, 2u);
  EXPECT_EQ(b.revision, 3u);
  EXPECT_LT(r.updated_at, a.updated_at);
  EXPECT_LT(a.updated_at, b.updated_at);
  EXPECT_EQ(store.load(r.report_id), b);
}

TEST(ReportStore, FailedEditLeavesFileAlone) {
  TempDir dir;
  ReportStore store(dir.path());
  auto r = store.create("", {}, {entry(1)});
  EXPECT_THROW(store.curate(r.report_id, RemoveEntry{7}), Error);
  EXPECT_EQ(store.load(r.report_id), r);
  EXPECT_THROW(store.load("ffff0000"), Error);
  EXPECT_THROW(store.load("../etc"), Error);
}

TEST(ReportRender, JsonRoundTrip) {
  Report r = with_ids({4, 9});
  r.criteria = {{"k", 20}, {"filters", {{"chain_id", 3}}}};
  r.notes = "carpet pattern";
  r.entries[0].similarity = 0.123456789012345;
  r.entries[1].explanations = {"e/9.png"};
  r.created_at = r.updated_at = "2026-01-01T00:00:00.000Z";
  r.revision = 4;
  EXPECT_EQ(report_from_json(nlohmann::json::parse(render_json(r))), r);
}

TEST(ReportRender, HtmlBlocksAndNoExternalReferences) {
  TempDir dir;
  {
    png::RgbImage img(2, 2);
    auto bytes = png::encode(img);
    binary::write_file_atomic(dir / "7.png", bytes);
  }
  Report r = with_ids({7, 3});
  r.notes = "see http://example.com and https://example.org <script>";
  r.query_ref = "http://evil.example/q.jpg";
  r.criteria = {{"url", "https://tracker.example"}};
  auto out = render_html(r, [&](ImageId id) -> std::optional<std::filesystem::path> {
    if (id == 7) return dir / "7.png";
    return std::nullopt;
  });
  EXPECT_EQ(count(out.html, "http://"), 0u);
  EXPECT_EQ(count(out.html, "https://"), 0u);
  EXPECT_EQ(count(out.html, "<script"), 0u);
  EXPECT_EQ(count(out.html, "class=\"result\""), 2u);
  EXPECT_LT(out.html.find("data-image-id=\"7\""), out.html.find("data-image-id=\"3\""));
  EXPECT_NE(out.html.find("data:image/png;base64,"), std::string::npos);
  EXPECT_NE(out.html.find("@page"), std::string::npos);
  EXPECT_EQ(out.warnings.size(), 2u);  // query image and image 3
}

TEST(ReportRender, EmptyReport) {
  auto out = render_html(with_ids({}));
  EXPECT_EQ(count(out.html, "class=\"result\""), 0u);
  EXPECT_NE(out.html.find("id=\"results\""), std::string::npos);
}
