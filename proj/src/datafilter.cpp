#include "mmdit/datafilter.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>

#include "mmdit/errors.hpp"
#include "mmdit/face_layout.hpp"
#include "mmdit/synthface.hpp"

namespace mmdit {

namespace {

using nlohmann::json;

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

// Signed in-plane rotation of the least-squares similarity template -> pts.
std::optional<double> procrustes_angle(const PointList& pts) {
  const auto tmpl = face::canonical_landmarks(face::kReferenceSize);
  const std::size_t n = pts.size();
  double tx = 0, ty = 0, ox = 0, oy = 0;
  for (std::size_t i = 0; i < n; ++i) tx += tmpl[i].x, ty += tmpl[i].y, ox += pts[i].x, oy += pts[i].y;
  tx /= n, ty /= n, ox /= n, oy /= n;
  double sxx = 0, syy = 0, sxy = 0, dot = 0, cross = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double cx = tmpl[i].x - tx, cy = tmpl[i].y - ty;
    const double px = pts[i].x - ox, py = pts[i].y - oy;
    sxx += px * px, syy += py * py, sxy += px * py;
    dot += cx * px + cy * py;
    cross += cx * py - cy * px;
  }
  const double spread = sxx + syy;
  if (!std::isfinite(spread) || spread <= 1e-12) return std::nullopt;
  if (sxx * syy - sxy * sxy <= 1e-12 * spread * spread) return std::nullopt;  // collinear
  return std::atan2(cross, dot);
}

}  // namespace

void ClipRecord::validate() const {
  if (!(duration_s > 0.0) || !std::isfinite(duration_s)) {
    throw ContractError("clip " + clip_id + ": duration must be positive");
  }
  if (!std::isfinite(sync_c) || !std::isfinite(sync_d)) throw ContractError("clip " + clip_id + ": sync scores must be finite");
  if (landmarks.empty()) throw ContractError("clip " + clip_id + ": landmark stream is empty");
  for (const auto& f : landmarks) {
    if (f.size() != face::kNumLandmarks) {
      throw ContractError("clip " + clip_id + ": expected " + std::to_string(face::kNumLandmarks) +
                          " landmarks per frame, got " + std::to_string(f.size()));
    }
  }
}

void FilterThresholds::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("threshold override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  double value = 0.0;
  try {
    std::size_t used = 0;
    value = std::stod(assignment.substr(eq + 1), &used);
    if (used != assignment.size() - eq - 1) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw ConfigError("threshold override '" + assignment + "' has a non-numeric value");
  }
  if (key == "resolution") min_resolution = value;
  else if (key == "sync_c") min_sync_c = value;
  else if (key == "sync_d") max_sync_d = value;
  else if (key == "angle") max_angle_deg = value;
  else throw ConfigError("unknown threshold '" + key + "' (resolution, sync_c, sync_d, angle)");
}

FaceSize facial_resolution(const ClipRecord& record) {
  if (record.landmarks.empty()) throw ContractError("facial_resolution: empty landmark stream");
  double w = 0.0, h = 0.0;
  for (const auto& f : record.landmarks) {
    if (f.empty()) throw ContractError("facial_resolution: frame without landmarks");
    auto [minx, maxx] = std::minmax_element(f.begin(), f.end(), [](auto& a, auto& b) { return a.x < b.x; });
    auto [miny, maxy] = std::minmax_element(f.begin(), f.end(), [](auto& a, auto& b) { return a.y < b.y; });
    w += (maxx->x - minx->x) * (1.0 + kFaceBoxMargin);
    h += (maxy->y - miny->y) * (1.0 + kFaceBoxMargin);
  }
  const auto n = static_cast<double>(record.landmarks.size());
  return {w / n, h / n};
}

double head_rotation_angle(const ClipRecord& record) {
  double total = 0.0;
  std::size_t used = 0;
  for (const auto& f : record.landmarks) {
    if (f.size() != face::kNumLandmarks) continue;
    if (auto a = procrustes_angle(f)) {
      total += std::abs(*a) * 180.0 / std::numbers::pi;
      ++used;
    }
  }
  if (used == 0) throw ContractError("clip " + record.clip_id + ": every frame is degenerate");
  return total / static_cast<double>(used);
}

ClipMetrics clip_metrics(const ClipRecord& record) {
  record.validate();
  ClipMetrics m;
  const FaceSize fs = facial_resolution(record);
  m.face_width = fs.width;
  m.face_height = fs.height;
  m.sync_c = record.sync_c;
  m.sync_d = record.sync_d;
  m.head_angle_deg = head_rotation_angle(record);
  return m;
}

GateResult gate(const ClipMetrics& m, const FilterThresholds& t) {
  GateResult r;
  if (!(m.face_width > t.min_resolution && m.face_height > t.min_resolution)) r.reasons.push_back("facial_resolution");
  if (!(m.sync_c > t.min_sync_c)) r.reasons.push_back("sync_c");
  if (!(m.sync_d < t.max_sync_d)) r.reasons.push_back("sync_d");
  if (!(m.head_angle_deg <= t.max_angle_deg)) r.reasons.push_back("head_angle");
  r.keep = r.reasons.empty();
  return r;
}

GateResult gate(const ClipRecord& record, const FilterThresholds& t) { return gate(clip_metrics(record), t); }

std::vector<DatasetSummary> summarize(const std::vector<ClipRecord>& records, const FilterThresholds& t) {
  if (records.empty()) throw ContractError("no clip records to summarize");
  std::vector<const ClipRecord*> order;
  for (const auto& r : records) order.push_back(&r);
  std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->clip_id < b->clip_id; });

  struct Acc {
    DatasetSummary row;
    double w = 0, h = 0, sc = 0, sd = 0, ang = 0;
  };
  std::vector<Acc> acc;
  std::map<std::string, std::size_t> slot;
  for (const ClipRecord* r : order) {
    const ClipMetrics m = clip_metrics(*r);
    const bool keep = gate(m, t).keep;
    auto [it, fresh] = slot.emplace(r->dataset, acc.size());
    if (fresh) {
      acc.emplace_back();
      acc.back().row.dataset = r->dataset;
    }
    Acc& a = acc[it->second];
    const double hours = r->duration_s / 3600.0;
    a.row.hours_in += hours;
    a.row.clips_in += 1;
    if (keep) a.row.hours_kept += hours, a.row.clips_kept += 1;
    a.w += m.face_width, a.h += m.face_height, a.sc += m.sync_c, a.sd += m.sync_d, a.ang += m.head_angle_deg;
  }
  std::vector<DatasetSummary> rows;
  for (auto& a : acc) {
    const auto n = static_cast<double>(a.row.clips_in);
    a.row.mean_facial_res = FaceSize{a.w / n, a.h / n};
    a.row.mean_sync_c = a.sc / n;
    a.row.mean_sync_d = a.sd / n;
    a.row.mean_head_angle = a.ang / n;
    rows.push_back(a.row);
  }
  return rows;
}

FilterReport aggregate(const std::vector<DatasetSummary>& rows) {
  if (rows.empty()) throw ContractError("nothing to aggregate");
  FilterReport rep;
  for (const auto& r : rows) {
    if (!(r.hours_in >= 0.0) || !(r.hours_kept >= 0.0) || r.hours_kept > r.hours_in) {
      throw ContractError("dataset " + r.dataset + ": kept hours must lie in [0, hours_in]");
    }
    rep.datasets.push_back(r);
    rep.hours_in += r.hours_in;
    rep.hours_kept += r.hours_kept;
  }
  rep.retained_fraction = rep.hours_in > 0.0 ? rep.hours_kept / rep.hours_in : 0.0;
  return rep;
}

FilterReport aggregate(const std::vector<ClipRecord>& records, const FilterThresholds& t) {
  return aggregate(summarize(records, t));
}

std::string FilterReport::retained_percent() const { return fixed(100.0 * retained_fraction, 1) + "%"; }

json FilterReport::to_json() const {
  json ds = json::array();
  for (const auto& r : datasets) {
    json row{{"dataset", r.dataset}, {"hours_in", r.hours_in}, {"hours_kept", r.hours_kept}};
    if (r.clips_in) row["clips_in"] = r.clips_in, row["clips_kept"] = r.clips_kept;
    if (r.mean_facial_res) row["mean_facial_res"] = {r.mean_facial_res->width, r.mean_facial_res->height};
    if (r.mean_sync_c) row["mean_sync_c"] = *r.mean_sync_c;
    if (r.mean_sync_d) row["mean_sync_d"] = *r.mean_sync_d;
    if (r.mean_head_angle) row["mean_head_angle"] = *r.mean_head_angle;
    ds.push_back(std::move(row));
  }
  return {{"datasets", ds},
          {"totals",
           {{"hours_in", hours_in},
            {"hours_kept", hours_kept},
            {"retained_fraction", retained_fraction},
            {"retained_percent", retained_percent()}}}};
}

std::string FilterReport::render_table() const {
  std::vector<std::vector<std::string>> cells;
  cells.push_back({"Dataset", "Hours in", "Hours kept", "Retained", "Resolution", "Sync-C", "Sync-D", "Angle"});
  auto opt = [](const std::optional<double>& v) { return v ? fixed(*v, 1) : std::string("-"); };
  for (const auto& r : datasets) {
    const double frac = r.hours_in > 0.0 ? r.hours_kept / r.hours_in : 0.0;
    cells.push_back({r.dataset, fixed(r.hours_in, 1), fixed(r.hours_kept, 1), fixed(100.0 * frac, 1) + "%",
                     r.mean_facial_res ? fixed(r.mean_facial_res->width, 0) + "x" + fixed(r.mean_facial_res->height, 0) : "-",
                     opt(r.mean_sync_c), opt(r.mean_sync_d), opt(r.mean_head_angle)});
  }
  cells.push_back({"Total", fixed(hours_in, 1), fixed(hours_kept, 1), retained_percent(), "", "", "", ""});

  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& row : cells)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::string out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    std::string line;
    for (std::size_t c = 0; c < cells[r].size(); ++c) {
      const std::string& s = cells[r][c];
      const std::string pad(width[c] - s.size(), ' ');
      line += c == 0 ? s + pad : "  " + pad + s;
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
    if (r == 0 || r + 2 == cells.size()) {
      std::size_t total = 0;
      for (std::size_t c = 0; c < width.size(); ++c) total += width[c] + (c ? 2 : 0);
      out += std::string(total, '-') + "\n";
    }
  }
  return out;
}

Manifest read_manifest(const std::filesystem::path& path, bool lenient) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  const auto base = path.parent_path();
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      if (!j.is_object()) throw std::runtime_error("line is not a JSON object");
      if (j.contains("hours_in")) {
        DatasetSummary s;
        s.dataset = j.at("dataset").get<std::string>();
        s.hours_in = j.at("hours_in").get<double>();
        s.hours_kept = j.at("hours_kept").get<double>();
        if (!(s.hours_in >= 0.0) || !(s.hours_kept >= 0.0) || s.hours_kept > s.hours_in) {
          throw std::runtime_error("hours_kept must lie in [0, hours_in]");
        }
        m.summaries.push_back(std::move(s));
        continue;
      }
      ClipRecord r;
      r.clip_id = j.at("clip_id").get<std::string>();
      r.dataset = j.at("dataset").get<std::string>();
      r.duration_s = j.at("duration_s").get<double>();
      r.sync_c = j.at("sync_c").get<double>();
      r.sync_d = j.at("sync_d").get<double>();
      if (j.contains("landmarks")) {
        for (const auto& f : j.at("landmarks")) {
          PointList pts;
          for (const auto& p : f) pts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
          r.landmarks.push_back(std::move(pts));
        }
      } else {
        r.landmarks = read_landmarks_json(base / j.at("landmarks_file").get<std::string>());
      }
      r.validate();
      m.records.push_back(std::move(r));
    } catch (const std::exception& e) {
      ManifestLineError err{lineno, e.what()};
      if (!lenient) throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + err.message);
      m.errors.push_back(std::move(err));
    }
  }
  return m;
}

}  // namespace mmdit
