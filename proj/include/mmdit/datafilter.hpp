#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmdit/geometry.hpp"

namespace mmdit {

// Bounding-box margin applied to the tight landmark box.
inline constexpr double kFaceBoxMargin = 0.25;

struct ClipRecord {
  std::string clip_id;
  std::string dataset;
  double duration_s = 0.0;
  std::vector<PointList> landmarks;  // per frame, canonical index layout
  double sync_c = 0.0;
  double sync_d = 0.0;

  void validate() const;
};

struct FilterThresholds {
  double min_resolution = 600.0;  // both sides strictly greater
  double min_sync_c = 6.0;        // strictly greater
  double max_sync_d = 8.5;        // strictly less
  double max_angle_deg = 30.0;    // excluded when the angle exceeds this

  // "key=value" with keys resolution, sync_c, sync_d, angle.
  void apply_override(const std::string& assignment);
};

struct ClipMetrics {
  double face_width = 0.0, face_height = 0.0;
  double sync_c = 0.0, sync_d = 0.0;
  double head_angle_deg = 0.0;
};

struct GateResult {
  bool keep = true;
  std::vector<std::string> reasons;  // "facial_resolution", "sync_c", "sync_d", "head_angle"
};

struct FaceSize {
  double width = 0.0, height = 0.0;
};

// Mean margin-expanded landmark box over frames.
FaceSize facial_resolution(const ClipRecord& record);
// Mean absolute in-plane rotation (degrees) of the least-squares similarity
// from the frontal template to each frame. Degenerate frames are skipped.
double head_rotation_angle(const ClipRecord& record);
ClipMetrics clip_metrics(const ClipRecord& record);

GateResult gate(const ClipMetrics& metrics, const FilterThresholds& thresholds = {});
GateResult gate(const ClipRecord& record, const FilterThresholds& thresholds = {});

// Per-dataset summary. Metric means are over all input clips of the dataset
// and absent for rows given as plain hour totals.
struct DatasetSummary {
  std::string dataset;
  double hours_in = 0.0;
  double hours_kept = 0.0;
  std::size_t clips_in = 0;
  std::size_t clips_kept = 0;
  std::optional<FaceSize> mean_facial_res;
  std::optional<double> mean_sync_c, mean_sync_d, mean_head_angle;
};

struct FilterReport {
  std::vector<DatasetSummary> datasets;  // first-appearance order
  double hours_in = 0.0;
  double hours_kept = 0.0;
  double retained_fraction = 0.0;

  std::string retained_percent() const;  // one decimal, e.g. "6.7%"
  nlohmann::json to_json() const;
  std::string render_table() const;
};

// Gates and folds records in clip_id order into one row per dataset.
std::vector<DatasetSummary> summarize(const std::vector<ClipRecord>& records,
                                      const FilterThresholds& thresholds = {});
FilterReport aggregate(const std::vector<DatasetSummary>& rows);
FilterReport aggregate(const std::vector<ClipRecord>& records, const FilterThresholds& thresholds = {});

// JSON-lines manifest: either clip records ({clip_id, dataset, duration_s,
// sync_c, sync_d, landmarks | landmarks_file}) or summary rows ({dataset,
// hours_in, hours_kept}).
struct ManifestLineError {
  std::size_t line = 0;
  std::string message;
};

struct Manifest {
  std::vector<ClipRecord> records;
  std::vector<DatasetSummary> summaries;
  std::vector<ManifestLineError> errors;
  bool empty() const { return records.empty() && summaries.empty(); }
};

// Malformed lines are collected in `errors`; with lenient == false the
// first one is thrown as an IoError naming the line.
Manifest read_manifest(const std::filesystem::path& path, bool lenient);

}  // namespace mmdit
