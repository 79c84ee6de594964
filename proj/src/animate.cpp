#include "mmdit/animate.hpp"

#include <cstdio>
#include <fstream>

#include "mmdit/image.hpp"
#include "mmdit/ops.hpp"
#include "mmdit/synthface.hpp"

namespace mmdit {

namespace {

Tensor frame_at(const Tensor& frames, std::size_t i) {
  return reshape(slice(frames, 0, i, i + 1), {frames.dim(1), frames.dim(2), frames.dim(3)});
}

Tensor stack(const std::vector<Tensor>& frames) {
  std::vector<double> d;
  for (const auto& f : frames) d.insert(d.end(), f.data().begin(), f.data().end());
  Shape s{frames.size()};
  s.insert(s.end(), frames.front().shape().begin(), frames.front().shape().end());
  return Tensor(s, std::move(d));
}

}  // namespace

RetargetedClip retarget_clip(const Tensor& frames, const std::vector<PointList>& landmarks,
                             double alpha, RescaleMode mode) {
  if (frames.rank() != 4 || frames.dim(0) != landmarks.size() || landmarks.empty()) {
    throw ShapeError("driving clip " + shape_str(frames.shape()) + " needs one landmark set per frame");
  }
  RetargetedClip out;
  std::vector<Tensor> imgs;
  for (std::size_t i = 0; i < landmarks.size(); ++i) {
    RetargetResult r = retarget_frame(frame_at(frames, i), landmarks.front(), landmarks[i], alpha, mode);
    imgs.push_back(std::move(r.frame));
    out.landmarks.push_back(std::move(r.landmarks));
  }
  out.frames = stack(imgs);
  return out;
}

AnimateResult animate(const MixedModalDiT& model, const AnimateRequest& req,
                      const NoiseSchedule& schedule) {
  const auto& cfg = model.config();
  const bool visual = req.modality != ControlModality::kAudio;
  const bool audio = req.modality != ControlModality::kVisual;
  const std::string name = control_modality_name(req.modality);
  if (!req.reference_image.defined()) throw ConfigError("animation needs a reference image");
  if (visual && (!req.driving_frames.defined() || req.driving_landmarks.empty())) {
    throw ConfigError("modality " + name + " needs a driving clip with landmarks");
  }
  if (audio && req.audio_track.empty()) throw ConfigError("modality " + name + " needs an audio track");

  AnimateResult res;
  SampleConditions cond;
  cond.modality = req.modality;
  cond.reference_image = req.reference_image;
  cond.audio_scale = req.audio_scale;

  std::size_t frames = 0;
  if (visual) {
    const RetargetedClip clip = retarget_clip(req.driving_frames, req.driving_landmarks, req.alpha, req.rescale_mode);
    frames = clip.landmarks.size();
    std::vector<Tensor> composed;
    for (std::size_t i = 0; i < frames; ++i) {
      RegionMaskSet m = region_masks_from_landmarks(clip.landmarks[i], cfg.image_size, cfg.image_size, cfg.patch);
      composed.push_back(compose_driving(frame_at(clip.frames, i), m, req.selection));
      res.masks.push_back(std::move(m));
    }
    res.landmarks = clip.landmarks;
    res.driving = stack(composed);
    cond.driving = res.driving;
    cond.mouth_driven = req.selection.mouth();
  } else {
    if (req.reference_landmarks.empty()) throw ConfigError("modality A needs reference landmarks for the region masks");
    frames = req.audio_track.size();
    const RegionMaskSet m = region_masks_from_landmarks(req.reference_landmarks, cfg.image_size, cfg.image_size, cfg.patch);
    res.masks.assign(frames, m);
    res.landmarks.assign(frames, req.reference_landmarks);
    cond.mouth_driven = false;
  }
  if (audio) {
    if (req.audio_track.size() != frames) {
      throw ConfigError("audio track has " + std::to_string(req.audio_track.size()) + " frames, driving clip has " +
                        std::to_string(frames));
    }
    cond.audio = audio_embed(req.audio_track, cfg.audio_dim, req.audio_seed, cfg.audio_tokens);
  }
  for (const auto& m : res.masks) cond.roles.push_back(TokenRoleMap::from_masks(m, 0));
  cond.frames = frames;
  res.frames = sample(model, cond, schedule, req.sampler);
  return res;
}

std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_video(const std::filesystem::path& dir, const Tensor& frames, std::uint64_t seed,
                 const nlohmann::json& config, double fps) {
  if (frames.rank() != 4) throw ShapeError("video must be [F, 3, H, W]");
  std::error_code ec;
  std::filesystem::create_directories(dir / "frames", ec);
  if (ec) throw IoError("cannot create " + (dir / "frames").string() + ": " + ec.message());
  nlohmann::json names = nlohmann::json::array();
  for (std::size_t i = 0; i < frames.dim(0); ++i) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "frames/%04zu.ppm", i);
    write_ppm(dir / buf, frame_at(frames, i));
    names.push_back(buf);
  }
  const nlohmann::json index{{"fps", fps}, {"frames", names}, {"seed", seed}, {"config_hash", config_hash(config)}};
  std::ofstream out(dir / "index.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "index.json").string());
  out << index.dump(2) << '\n';
}

}  // namespace mmdit
