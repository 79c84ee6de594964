#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mmdit/geometry.hpp"
#include "mmdit/tensor.hpp"

namespace mmdit {

// Pose and expression of one synthetic face.
struct FaceParams {
  double eye_open = 1.0;      // [0, 1]
  double mouth_open = 0.0;    // [0, 1]
  double rotation_deg = 0.0;  // in-plane, [-45, 45]
  double tx = 0.0, ty = 0.0;  // pixels
  double hue = 0.0;           // [0, 1)
  double scale = 1.0;         // [0.8, 1.2]

  void validate() const;
  // The similarity mapping canonical coordinates to image coordinates.
  Affine pose(std::size_t size) const;
};

struct RenderedFace {
  Tensor image;  // [3, size, size]
  PointList landmarks;
};

// Ellipse head, two eyes and a mouth whose apertures follow eye_open and
// mouth_open. Landmarks sit on fixed region sockets (they do not move with
// the apertures) and are mapped by the same similarity as the pixels.
RenderedFace render(const FaceParams& p, std::size_t size = 32);

enum class MotionProfile { kSpeech, kSilent };
MotionProfile parse_motion_profile(const std::string& name);
std::string motion_profile_name(MotionProfile p);

struct ClipOptions {
  std::size_t size = 32;
  double rotation_jitter_deg = 2.0;  // random-walk step of the head rotation
  double translation_jitter = 0.5;   // random-walk step of the translation, pixels
};

struct ClipSample {
  std::uint64_t seed = 0;
  MotionProfile profile = MotionProfile::kSpeech;
  Tensor frames;  // [F, 3, size, size]
  std::vector<FaceParams> params;
  std::vector<PointList> landmarks;
  std::vector<double> audio_track;  // audio_track[t] == params[t].mouth_open

  std::size_t num_frames() const { return params.size(); }
  std::size_t size() const { return frames.dim(2); }
  Tensor frame(std::size_t i) const;
};

// "speech": mouth openness follows a syllable-like curve and the eyes open
// wider while speaking. "silent": mouth closed, eyes blink.
ClipSample make_clip(std::uint64_t seed, std::size_t frames, MotionProfile profile,
                     const ClipOptions& options = {});

// Audio proxy tokens: frame t carries the window track[t-1 .. t+tokens-2]
// (clamped at the ends). Each value v becomes [v * u | pos(k)] with a fixed
// seeded direction u and sinusoidal channels for the window slot k.
// Returns [F, tokens, dim].
Tensor audio_embed(const std::vector<double>& track, std::size_t dim, std::uint64_t seed,
                   std::size_t tokens = 4);

// Directory layout: frames/NNNN.ppm, landmarks.json, audio.csv, params.json.
void export_clip(const ClipSample& clip, const std::filesystem::path& dir);
ClipSample import_clip(const std::filesystem::path& dir);

std::vector<PointList> read_landmarks_json(const std::filesystem::path& path);
void write_landmarks_json(const std::filesystem::path& path, const std::vector<PointList>& landmarks);
std::vector<double> read_audio_csv(const std::filesystem::path& path);
void write_audio_csv(const std::filesystem::path& path, const std::vector<double>& track);

}  // namespace mmdit
