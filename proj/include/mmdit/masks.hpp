#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mmdit/geometry.hpp"
#include "mmdit/random.hpp"
#include "mmdit/tensor.hpp"

namespace mmdit {

// Eye and mouth regions of one frame at pixel and token resolution.
// Pixel masks are [H, W] tensors holding only 0/1; token masks are
// row-major over the (H/patch) x (W/patch) token grid.
struct RegionMaskSet {
  Tensor eye;
  Tensor mouth;
  std::vector<std::uint8_t> token_eye;
  std::vector<std::uint8_t> token_mouth;
  std::size_t patch = 1;

  std::size_t height() const { return eye.dim(0); }
  std::size_t width() const { return eye.dim(1); }
  std::size_t num_tokens() const { return token_eye.size(); }
};

// Which facial regions of the ground-truth frame are shown as the visual
// driving signal. Never empty.
class DrivingSelection {
 public:
  DrivingSelection(bool eye, bool mouth);
  static DrivingSelection eye_only() { return {true, false}; }
  static DrivingSelection mouth_only() { return {false, true}; }
  static DrivingSelection eye_and_mouth() { return {true, true}; }

  bool eye() const { return eye_; }
  bool mouth() const { return mouth_; }
  std::string name() const;
  friend bool operator==(const DrivingSelection&, const DrivingSelection&) = default;

 private:
  bool eye_;
  bool mouth_;
};

// Conditioning mix of one training sample.
enum class Modality { kVisualDropout, kAudioOnly, kMixed };
std::string modality_name(Modality m);

// Token bit is set iff any pixel of its patch is set.
std::vector<std::uint8_t> pool_to_tokens(const Tensor& mask, std::size_t patch);

// Axis-aligned rectangles around the eye and mouth landmarks (canonical
// index layout), dilated by one pixel. Overlapping dilations are split at the
// midline between the undilated boxes; boxes that overlap outright are a
// GeometryError.
RegionMaskSet region_masks_from_landmarks(const PointList& landmarks, std::size_t height,
                                          std::size_t width, std::size_t patch);

// Zero outside the union of the selected regions.
Tensor compose_driving(const Tensor& ground_truth, const RegionMaskSet& masks,
                       const DrivingSelection& selection);

// Sum(mask * (pred - target)^2) / Sum(mask). The gradient at positions with
// mask == 0 is written as +0.0.
Tensor masked_mse(const Tensor& pred, const Tensor& target, const Tensor& loss_mask);

// Stage 1 and visual-dropout samples draw uniformly from {eye}, {mouth},
// {eye, mouth}; mixed-modality samples in stages 2-3 always drive the eyes
// only. Audio-only samples carry no visual selection (ConfigError).
DrivingSelection sample_dropout(Rng& rng, int stage_id,
                                Modality modality = Modality::kVisualDropout);

// All ones when the mouth is driven (visually or by audio); otherwise the
// complement of the mouth region. Returns an [H, W] mask.
Tensor loss_mask_for(const std::optional<DrivingSelection>& selection, bool audio_present,
                     const RegionMaskSet& masks);

// Broadcasts an [H, W] mask over leading axes to `shape` (trailing axes H, W).
Tensor expand_mask(const Tensor& mask, const Shape& shape);

}  // namespace mmdit
