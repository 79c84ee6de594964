#pragma once

// Dataset-filter fixtures: the published per-dataset hour totals, gating
// metric fixtures, and synthetic clip records with known geometry.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "mmdit/datafilter.hpp"
#include "mmdit/face_layout.hpp"

namespace fixtures {

using namespace mmdit;

inline std::vector<DatasetSummary> published_rows() {
  auto row = [](const char* name, double in, double kept) {
    DatasetSummary s;
    s.dataset = name;
    s.hours_in = in;
    s.hours_kept = kept;
    return s;
  };
  return {row("VoxCeleb", 2794, 140), row("Talking-Head 1k", 1000, 80), row("MultiTalk", 420, 34),
          row("CCv2", 440, 44), row("HDTF", 15.8, 15)};
}

// HDTF-like clip: passes every threshold.
inline ClipMetrics hdtf_like() {
  ClipMetrics m;
  m.face_width = 650;
  m.face_height = 650;
  m.sync_c = 7.9;
  m.sync_d = 7.3;
  m.head_angle_deg = 5.2;
  return m;
}

struct Violation {
  std::string reason;
  ClipMetrics metrics;
};

// One fixture per threshold, each breaking exactly that threshold.
inline std::vector<Violation> single_violations() {
  std::vector<Violation> out;
  ClipMetrics m = hdtf_like();
  m.face_width = 590;
  out.push_back({"facial_resolution", m});
  m = hdtf_like();
  m.sync_c = 5.9;
  out.push_back({"sync_c", m});
  m = hdtf_like();
  m.sync_d = 9.0;
  out.push_back({"sync_d", m});
  m = hdtf_like();
  m.head_angle_deg = 35.0;
  out.push_back({"head_angle", m});
  return out;
}

// Canonical template scaled by `scale` about the origin, rotated by `deg`
// about its centre, and shifted by (dx, dy).
inline PointList posed_landmarks(double scale, double deg, double dx = 0.0, double dy = 0.0) {
  const auto tmpl = face::canonical_landmarks(face::kReferenceSize);
  const double a = deg * std::numbers::pi / 180.0, c = std::cos(a), s = std::sin(a);
  PointList out;
  for (const auto& p : tmpl) {
    const double x = (p.x - face::kCenterX) * scale, y = (p.y - face::kCenterY) * scale;
    out.push_back({c * x - s * y + dx + 500.0, s * x + c * y + dy + 500.0});
  }
  return out;
}

inline ClipRecord record(const std::string& id, const std::string& dataset, double duration_s,
                         std::vector<PointList> landmarks, double sync_c = 7.0, double sync_d = 7.0) {
  ClipRecord r;
  r.clip_id = id;
  r.dataset = dataset;
  r.duration_s = duration_s;
  r.landmarks = std::move(landmarks);
  r.sync_c = sync_c;
  r.sync_d = sync_d;
  return r;
}

}  // namespace fixtures
