#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmdit/diffusion.hpp"
#include "mmdit/masks.hpp"
#include "mmdit/model.hpp"
#include "mmdit/retarget.hpp"

namespace mmdit {

struct AnimateRequest {
  ControlModality modality = ControlModality::kVisual;
  Tensor reference_image;          // [3, H, W]
  PointList reference_landmarks;   // masks for audio-only animation
  Tensor driving_frames;           // [F, 3, H, W]
  std::vector<PointList> driving_landmarks;
  std::vector<double> audio_track;
  // Regions of the (retargeted) driving frames shown to the model.
  DrivingSelection selection = DrivingSelection::eye_and_mouth();
  double alpha = 1.0;
  RescaleMode rescale_mode = RescaleMode::kIdentityAnchored;
  double audio_scale = 1.0;
  std::uint64_t audio_seed = 0;
  SamplerOptions sampler;
};

struct AnimateResult {
  Tensor frames;                      // [F, 3, H, W] in [0, 1]
  Tensor driving;                     // composed driving frames, undefined for A
  std::vector<PointList> landmarks;   // landmarks behind each frame's masks
  std::vector<RegionMaskSet> masks;
};

// Retargets the driving clip against its first frame with `alpha`, keeps the
// selected regions, embeds the audio track and samples the video.
AnimateResult animate(const MixedModalDiT& model, const AnimateRequest& request,
                      const NoiseSchedule& schedule);

// Retargeting step alone: frames and landmarks after amplitude adjustment.
struct RetargetedClip {
  Tensor frames;
  std::vector<PointList> landmarks;
};
RetargetedClip retarget_clip(const Tensor& frames, const std::vector<PointList>& landmarks,
                             double alpha, RescaleMode mode);

// 64-bit FNV-1a of the compact config JSON, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

// frames/NNNN.ppm plus index.json {fps, frames, seed, config_hash}.
void write_video(const std::filesystem::path& dir, const Tensor& frames, std::uint64_t seed,
                 const nlohmann::json& config, double fps = 25.0);

}  // namespace mmdit
