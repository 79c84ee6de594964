#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mmdit/datafilter.hpp"
#include "mmdit/synthface.hpp"
#include "support/filter_fixtures.hpp"

using namespace mmdit;

namespace {

PointList square_box(double side, double x0, double y0) {
  PointList pts;
  for (int i = 0; i < 10; ++i) pts.push_back({x0 + side * (i % 2), y0 + side * ((i / 2) % 2) * (i < 4 ? 1.0 : 0.5)});
  return pts;
}

}  // namespace

TEST_CASE("facial resolution") {
  const auto r = fixtures::record("a", "d", 1.0, {square_box(480, 10, 20), square_box(480, 10, 20)});
  const FaceSize fs = facial_resolution(r);
  CHECK(fs.width == 600.0);
  CHECK(fs.height == 600.0);
  const auto one = fixtures::record("b", "d", 1.0, {square_box(100, 0, 0)});
  CHECK(facial_resolution(one).width == 125.0);
  const auto moved = fixtures::record("c", "d", 1.0, {square_box(480, 300, -50), square_box(480, 10, 20)});
  CHECK(facial_resolution(moved).width == fs.width);
  CHECK(facial_resolution(moved).height == fs.height);
  CHECK_THROWS_AS(facial_resolution(fixtures::record("e", "d", 1.0, {})), ContractError);
}

TEST_CASE("head rotation angle") {
  CHECK(std::abs(head_rotation_angle(fixtures::record("a", "d", 1, {fixtures::posed_landmarks(20, 10)}))) ==
        doctest::Approx(10.0).epsilon(1e-9));
  const double frontal = head_rotation_angle(fixtures::record("b", "d", 1, {fixtures::posed_landmarks(20, 0, 3, -7)}));
  CHECK(std::abs(frontal) < 1e-9);
  const auto alternating = fixtures::record(
      "c", "d", 1, {fixtures::posed_landmarks(20, 20), fixtures::posed_landmarks(20, -20), fixtures::posed_landmarks(18, 20)});
  CHECK(std::abs(head_rotation_angle(alternating) - 20.0) < 1e-6);
  // A rendered clip rotated by a constant 10 degrees.
  FaceParams p;
  p.rotation_deg = 10.0;
  p.tx = 1.5;
  const auto rendered = fixtures::record("r", "d", 1, {render(p).landmarks, render(p).landmarks});
  CHECK(std::abs(head_rotation_angle(rendered) - 10.0) < 1e-6);
  // Degenerate frames are skipped, all-degenerate is an error.
  const PointList flat(10, Point{4, 4});
  CHECK(std::abs(head_rotation_angle(fixtures::record("s", "d", 1, {flat, fixtures::posed_landmarks(20, 15)})) - 15.0) <
        1e-6);
  CHECK_THROWS_AS(head_rotation_angle(fixtures::record("t", "d", 1, {flat})), ContractError);
}

TEST_CASE("threshold gating") {
  const GateResult ok = gate(fixtures::hdtf_like());
  CHECK(ok.keep);
  CHECK(ok.reasons.empty());
  for (const auto& v : fixtures::single_violations()) {
    const GateResult g = gate(v.metrics);
    CHECK_FALSE(g.keep);
    REQUIRE(g.reasons.size() == 1);
    CHECK(g.reasons[0] == v.reason);
  }
  // Strict and non-strict boundaries.
  ClipMetrics m = fixtures::hdtf_like();
  m.face_height = 600.0;
  CHECK_FALSE(gate(m).keep);
  m = fixtures::hdtf_like();
  m.sync_c = 6.0;
  CHECK_FALSE(gate(m).keep);
  m = fixtures::hdtf_like();
  m.sync_d = 8.5;
  CHECK_FALSE(gate(m).keep);
  m = fixtures::hdtf_like();
  m.head_angle_deg = 30.0;
  CHECK(gate(m).keep);
  m = {};
  CHECK(gate(m).reasons.size() == 2);

  FilterThresholds t;
  t.apply_override("sync_c=8");
  CHECK(t.min_sync_c == 8.0);
  CHECK_FALSE(gate(fixtures::hdtf_like(), t).keep);
  CHECK_THROWS_AS(t.apply_override("sync_c"), ConfigError);
  CHECK_THROWS_AS(t.apply_override("pitch=3"), ConfigError);
  CHECK_THROWS_AS(t.apply_override("angle=3x"), ConfigError);
}

TEST_CASE("gating is monotone in every metric") {
  Rng rng(2);
  for (int i = 0; i < 2000; ++i) {
    ClipMetrics m;
    m.face_width = rng.uniform(400, 800);
    m.face_height = rng.uniform(400, 800);
    m.sync_c = rng.uniform(4, 9);
    m.sync_d = rng.uniform(6, 11);
    m.head_angle_deg = rng.uniform(0, 45);
    if (!gate(m).keep) continue;
    ClipMetrics b = m;
    b.face_width += rng.uniform(0, 100);
    b.face_height += rng.uniform(0, 100);
    CHECK(gate(b).keep);
    b = m;
    b.sync_c += rng.uniform(0, 3);
    CHECK(gate(b).keep);
    b = m;
    b.sync_d -= rng.uniform(0, 3);
    CHECK(gate(b).keep);
    b = m;
    b.head_angle_deg -= rng.uniform(0, m.head_angle_deg);
    CHECK(gate(b).keep);
  }
}

TEST_CASE("aggregation of the published table") {
  const FilterReport rep = aggregate(fixtures::published_rows());
  CHECK(rep.hours_in == doctest::Approx(4669.8).epsilon(1e-12));
  CHECK(rep.hours_kept == 313.0);
  CHECK(rep.retained_percent() == "6.7%");
  CHECK(rep.datasets.size() == 5);
  const auto j = rep.to_json();
  CHECK(j.at("totals").at("retained_percent") == "6.7%");
  CHECK(rep.render_table() == aggregate(fixtures::published_rows()).render_table());

  DatasetSummary all;
  all.dataset = "x";
  all.hours_in = 2;
  all.hours_kept = 2;
  CHECK(aggregate({all}).retained_percent() == "100.0%");
  all.hours_kept = 0;
  CHECK(aggregate({all}).retained_fraction == 0.0);
  CHECK(aggregate({all}).hours_kept == 0.0);
  CHECK_THROWS_AS(aggregate(std::vector<DatasetSummary>{}), ContractError);
  CHECK_THROWS_AS(aggregate(std::vector<ClipRecord>{}), ContractError);
  all.hours_kept = 3;
  CHECK_THROWS_AS(aggregate({all}), ContractError);
}

TEST_CASE("record aggregation matches summary aggregation") {
  using fixtures::posed_landmarks;
  std::vector<ClipRecord> recs{
      fixtures::record("c3", "B", 7200, {posed_landmarks(31, 5)}, 7.0, 7.0),
      fixtures::record("c1", "A", 3600, {posed_landmarks(31, 2)}, 7.5, 7.0),
      fixtures::record("c2", "A", 1800, {posed_landmarks(31, 40)}, 7.5, 7.0),
      fixtures::record("c4", "B", 900, {posed_landmarks(10, 0)}, 7.5, 7.0),
  };
  const auto rows = summarize(recs);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].dataset == "A");
  CHECK(rows[0].hours_in == 1.5);
  CHECK(rows[0].hours_kept == 1.0);
  CHECK(rows[1].hours_kept == 2.0);
  CHECK(rows[1].clips_kept == 1);
  CHECK(rows[0].mean_head_angle.value() == doctest::Approx(21.0));
  const FilterReport direct = aggregate(recs), via = aggregate(rows);
  CHECK(direct.hours_in == via.hours_in);
  CHECK(direct.hours_kept == via.hours_kept);
  CHECK(direct.retained_fraction == via.retained_fraction);
  CHECK(direct.render_table() == via.render_table());
  CHECK(direct.to_json() == via.to_json());
}

TEST_CASE("report rendering golden output") {
  const std::string expect =
      "Dataset          Hours in  Hours kept  Retained  Resolution  Sync-C  Sync-D  Angle\n"
      "----------------------------------------------------------------------------------\n"
      "VoxCeleb           2794.0       140.0      5.0%           -       -       -      -\n"
      "Talking-Head 1k    1000.0        80.0      8.0%           -       -       -      -\n"
      "MultiTalk           420.0        34.0      8.1%           -       -       -      -\n"
      "CCv2                440.0        44.0     10.0%           -       -       -      -\n"
      "HDTF                 15.8        15.0     94.9%           -       -       -      -\n"
      "----------------------------------------------------------------------------------\n"
      "Total              4669.8       313.0      6.7%\n";
  CHECK(aggregate(fixtures::published_rows()).render_table() == expect);
}

TEST_CASE("manifest reading") {
  const auto dir = std::filesystem::temp_directory_path() / "mmdit_manifest_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "ok.jsonl");
    f << R"({"dataset": "A", "hours_in": 3, "hours_kept": 1})" << "\n\n";
    f << R"({"clip_id": "x", "dataset": "B", "duration_s": 2, "sync_c": 7, "sync_d": 7, "landmarks": [)";
    const auto pts = fixtures::posed_landmarks(30, 3);
    for (std::size_t i = 0; i < pts.size(); ++i) f << (i ? "," : "[") << "[" << pts[i].x << "," << pts[i].y << "]";
    f << "]]}\n";
  }
  const Manifest m = read_manifest(dir / "ok.jsonl", false);
  CHECK(m.summaries.size() == 1);
  CHECK(m.records.size() == 1);
  CHECK(m.records[0].landmarks[0].size() == 10);
  {
    std::ofstream f(dir / "bad.jsonl");
    f << R"({"dataset": "A", "hours_in": 3, "hours_kept": 1})" << "\n";
    f << "not json\n";
    f << R"({"dataset": "A", "hours_in": 1, "hours_kept": 3})" << "\n";
  }
  try {
    read_manifest(dir / "bad.jsonl", false);
    FAIL("expected an IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  const Manifest lenient = read_manifest(dir / "bad.jsonl", true);
  CHECK(lenient.summaries.size() == 1);
  REQUIRE(lenient.errors.size() == 2);
  CHECK(lenient.errors[0].line == 2);
  CHECK(lenient.errors[1].line == 3);
  CHECK_THROWS_AS(read_manifest(dir / "missing.jsonl", true), IoError);
  std::filesystem::remove_all(dir);
}
