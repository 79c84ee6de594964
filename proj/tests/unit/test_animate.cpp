#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "mmdit/animate.hpp"
#include "mmdit/image.hpp"
#include "mmdit/ops.hpp"
#include "mmdit/training.hpp"

using namespace mmdit;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 16;
  c.patch = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_blocks = 2;
  c.ref_inject_last = 1;
  c.motion_channels = 2;
  c.audio_dim = 4;
  c.audio_tokens = 2;
  c.driven_hidden = 4;
  return c;
}

struct Setup {
  MixedModalDiT model{tiny_config(), 5};
  ClipSample drive;
  ClipSample ref;
  Setup() {
    prepare_model_for_stage(model, 3, 6);
    ClipOptions o;
    o.size = 16;
    o.rotation_jitter_deg = 4.0;
    drive = make_clip(31, 3, MotionProfile::kSpeech, o);
    ref = make_clip(32, 1, MotionProfile::kSilent, o);
  }
  AnimateRequest request(ControlModality m) const {
    AnimateRequest r;
    r.modality = m;
    r.reference_image = ref.frame(0);
    r.reference_landmarks = ref.landmarks[0];
    r.driving_frames = drive.frames;
    r.driving_landmarks = drive.landmarks;
    r.audio_track = drive.audio_track;
    r.sampler.steps = 2;
    r.sampler.seed = 8;
    return r;
  }
};

}  // namespace

TEST_CASE("modalities and their required inputs") {
  const Setup s;
  const auto sched = NoiseSchedule::linear();
  for (auto m : {ControlModality::kAudio, ControlModality::kVisual, ControlModality::kAudioVisual}) {
    const AnimateResult r = animate(s.model, s.request(m), sched);
    CHECK(r.frames.shape() == Shape{3, 3, 16, 16});
    CHECK(r.masks.size() == 3);
    CHECK(r.driving.defined() == (m != ControlModality::kAudio));
  }
  AnimateRequest a = s.request(ControlModality::kAudio);
  a.driving_frames = Tensor();
  a.driving_landmarks.clear();
  CHECK_NOTHROW(animate(s.model, a, sched));
  a.audio_track.clear();
  CHECK_THROWS_AS(animate(s.model, a, sched), ConfigError);
  AnimateRequest v = s.request(ControlModality::kVisual);
  v.driving_frames = Tensor();
  CHECK_THROWS_AS(animate(s.model, v, sched), ConfigError);
  AnimateRequest av = s.request(ControlModality::kAudioVisual);
  av.audio_track.pop_back();
  CHECK_THROWS_AS(animate(s.model, av, sched), ConfigError);
  av = s.request(ControlModality::kAudioVisual);
  av.reference_image = Tensor();
  CHECK_THROWS_AS(animate(s.model, av, sched), ConfigError);
}

TEST_CASE("audio scale zero removes the audio from the video") {
  const Setup s;
  const auto sched = NoiseSchedule::linear();
  AnimateRequest av = s.request(ControlModality::kAudioVisual);
  av.audio_scale = 0.0;
  const Tensor with = animate(s.model, av, sched).frames;
  av.audio_track = {0.9, 0.0, 0.4};
  CHECK(bitwise_equal(animate(s.model, av, sched).frames, with));
  CHECK(bitwise_equal(animate(s.model, s.request(ControlModality::kVisual), sched).frames, with));
  av.audio_scale = 1.0;
  CHECK_FALSE(bitwise_equal(animate(s.model, av, sched).frames, with));
  // Deterministic in the seed.
  CHECK(bitwise_equal(animate(s.model, av, sched).frames, animate(s.model, av, sched).frames));
}

TEST_CASE("eye-only selection hides the mouth of the driving clip") {
  const Setup s;
  AnimateRequest r = s.request(ControlModality::kVisual);
  r.selection = DrivingSelection::eye_only();
  const AnimateResult res = animate(s.model, r, NoiseSchedule::linear());
  for (std::size_t f = 0; f < 3; ++f) {
    const auto& mouth = res.masks[f].mouth;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 256; ++i)
        if (mouth[i] != 0.0) CHECK(res.driving[(f * 3 + c) * 256 + i] == 0.0);
  }
}

TEST_CASE("retargeting the driving clip") {
  ClipOptions o;
  o.rotation_jitter_deg = 6.0;
  o.translation_jitter = 0.8;
  const ClipSample clip = make_clip(44, 6, MotionProfile::kSilent, o);
  const RetargetedClip same = retarget_clip(clip.frames, clip.landmarks, 1.0, RescaleMode::kIdentityAnchored);
  for (std::size_t f = 0; f < 6; ++f)
    for (std::size_t i = 0; i < clip.landmarks[f].size(); ++i) {
      CHECK(std::abs(same.landmarks[f][i].x - clip.landmarks[f][i].x) < 1e-6);
      CHECK(std::abs(same.landmarks[f][i].y - clip.landmarks[f][i].y) < 1e-6);
    }
  // alpha 0 pins the head to the first frame's pose, so only the eyes move.
  const RetargetedClip still = retarget_clip(clip.frames, clip.landmarks, 0.0, RescaleMode::kIdentityAnchored);
  for (std::size_t f = 1; f < 6; ++f)
    for (std::size_t i = 0; i < clip.landmarks[f].size(); ++i) {
      CHECK(std::abs(still.landmarks[f][i].x - still.landmarks[0][i].x) < 1e-6);
      CHECK(std::abs(still.landmarks[f][i].y - still.landmarks[0][i].y) < 1e-6);
    }
  const Tensor face = Tensor::ones({32, 32});
  CHECK(leakage_metric(still.frames, face) < leakage_metric(same.frames, face));
  CHECK_THROWS_AS(retarget_clip(clip.frames, {clip.landmarks[0]}, 1.0, RescaleMode::kLiteral), ShapeError);
}

TEST_CASE("video output") {
  const auto dir = std::filesystem::temp_directory_path() / "mmdit_video_test";
  std::filesystem::remove_all(dir);
  Rng rng(1);
  const Tensor frames = Tensor::uniform({2, 3, 4, 4}, rng, 0.0, 1.0);
  const nlohmann::json cfg{{"a", 1}};
  write_video(dir, frames, 9, cfg);
  std::ifstream in(dir / "index.json");
  const auto idx = nlohmann::json::parse(in);
  CHECK(idx.at("fps") == 25.0);
  CHECK(idx.at("seed") == 9);
  CHECK(idx.at("frames").size() == 2);
  CHECK(idx.at("config_hash") == config_hash(cfg));
  CHECK(config_hash(cfg).size() == 16);
  CHECK(config_hash(cfg) != config_hash(nlohmann::json{{"a", 2}}));
  CHECK(read_ppm(dir / "frames" / "0001.ppm").shape() == Shape{3, 4, 4});
  std::filesystem::remove_all(dir);
}
