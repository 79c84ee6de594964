#include <cmath>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "mmdit/face_layout.hpp"
#include "mmdit/masks.hpp"
#include "mmdit/ops.hpp"
#include "mmdit/synthface.hpp"

using namespace mmdit;

namespace {

// Pixels where two renders differ in any channel, as an [H, W] 0/1 grid.
std::vector<int> diff_pixels(const Tensor& a, const Tensor& b) {
  const std::size_t hw = a.dim(1) * a.dim(2);
  std::vector<int> out(hw, 0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      if (a[c * hw + i] != b[c * hw + i]) out[i] = 1;
  return out;
}

struct Box {
  long y0 = 1 << 20, y1 = -1, x0 = 1 << 20, x1 = -1;
};

Box bbox(const std::vector<int>& on, std::size_t w) {
  Box b;
  for (std::size_t i = 0; i < on.size(); ++i)
    if (on[i]) {
      const long y = static_cast<long>(i / w), x = static_cast<long>(i % w);
      b.y0 = std::min(b.y0, y), b.y1 = std::max(b.y1, y), b.x0 = std::min(b.x0, x), b.x1 = std::max(b.x1, x);
    }
  return b;
}

std::vector<int> mask_pixels(const Tensor& m) {
  std::vector<int> out(m.numel());
  for (std::size_t i = 0; i < m.numel(); ++i) out[i] = m[i] != 0.0;
  return out;
}

}  // namespace

TEST_CASE("canonical pose places landmarks at the canonical coordinates") {
  const RenderedFace f = render(FaceParams{});
  const auto canon = face::canonical_landmarks(32);
  REQUIRE(f.landmarks.size() == face::kNumLandmarks);
  for (std::size_t i = 0; i < canon.size(); ++i) CHECK(f.landmarks[i] == canon[i]);
  CHECK(f.landmarks[0] == Point{8, 11});
  CHECK(f.landmarks[1] == Point{24, 11});
  CHECK(f.landmarks[4] == Point{12, 23});
  CHECK(f.image.shape() == Shape{3, 32, 32});
  for (double v : f.image.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("rotation acts on landmarks by the rotation matrix") {
  for (double deg : {-30.0, 7.5, 45.0}) {
    FaceParams p;
    p.rotation_deg = deg;
    const RenderedFace r = render(p);
    const auto canon = face::canonical_landmarks(32);
    const double a = deg * std::numbers::pi / 180.0;
    for (std::size_t i = 0; i < canon.size(); ++i) {
      const double dx = canon[i].x - 16.0, dy = canon[i].y - 16.0;
      CHECK(std::abs(r.landmarks[i].x - (16.0 + std::cos(a) * dx - std::sin(a) * dy)) < 1e-12);
      CHECK(std::abs(r.landmarks[i].y - (16.0 + std::sin(a) * dx + std::cos(a) * dy)) < 1e-12);
    }
  }
}

TEST_CASE("parameter validation") {
  FaceParams p;
  p.eye_open = 1.5;
  CHECK_THROWS_AS(render(p), ContractError);
  p = {};
  p.rotation_deg = 50;
  CHECK_THROWS_AS(render(p), ContractError);
  p = {};
  p.hue = 1.0;
  CHECK_THROWS_AS(render(p), ContractError);
  p = {};
  p.scale = 1.3;
  CHECK_THROWS_AS(render(p), ContractError);
}

TEST_CASE("mouth pixels depend on mouth openness only, eye pixels on eye openness only") {
  FaceParams closed;
  closed.eye_open = 0.0;
  closed.mouth_open = 0.0;
  closed.hue = 0.3;
  const RenderedFace base = render(closed);
  const RegionMaskSet masks = region_masks_from_landmarks(base.landmarks, 32, 32, 4);
  const auto eye = mask_pixels(masks.eye), mouth = mask_pixels(masks.mouth);
  for (double v : {0.25, 0.5, 1.0}) {
    FaceParams pm = closed, pe = closed;
    pm.mouth_open = v;
    pe.eye_open = v;
    const auto dm = diff_pixels(render(pm).image, base.image);
    const auto de = diff_pixels(render(pe).image, base.image);
    std::size_t nm = 0, ne = 0;
    for (std::size_t i = 0; i < dm.size(); ++i) {
      if (dm[i]) CHECK(mouth[i] == 1);
      if (de[i]) CHECK(eye[i] == 1);
      nm += dm[i], ne += de[i];
    }
    CHECK(nm > 0);
    CHECK(ne > 0);
  }
}

TEST_CASE("region masks cover the painted features dilated by one pixel") {
  FaceParams closed;
  closed.eye_open = 0.0;
  closed.mouth_open = 0.0;
  const RenderedFace base = render(closed);
  for (int ie = 0; ie < 5; ++ie)
    for (int im = 0; im < 5; ++im) {
      FaceParams p = closed;
      p.eye_open = ie / 4.0;
      p.mouth_open = im / 4.0;
      const RenderedFace r = render(p);
      const RegionMaskSet m = region_masks_from_landmarks(r.landmarks, 32, 32, 4);
      const auto eye = mask_pixels(m.eye), mouth = mask_pixels(m.mouth);
      FaceParams only_eye = closed, only_mouth = closed;
      only_eye.eye_open = p.eye_open;
      only_mouth.mouth_open = p.mouth_open;
      const auto pe = diff_pixels(render(only_eye).image, base.image);
      const auto pm = diff_pixels(render(only_mouth).image, base.image);
      for (std::size_t i = 0; i < pe.size(); ++i) {
        const long y = static_cast<long>(i / 32), x = static_cast<long>(i % 32);
        // Every pixel within one of a painted pixel is inside the mask.
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx) {
            const std::size_t j = static_cast<std::size_t>((y + dy) * 32 + (x + dx));
            if (pe[i]) CHECK(eye[j] == 1);
            if (pm[i]) CHECK(mouth[j] == 1);
          }
      }
      if (ie == 4) {
        // Fully open features fill the sockets: the dilated paint is the mask box.
        const Box paint = bbox(pe, 32), mask = bbox(eye, 32);
        CHECK(paint.y0 - 1 == mask.y0);
        CHECK(paint.y1 + 1 == mask.y1);
        CHECK(paint.x0 - 1 == mask.x0);
        CHECK(paint.x1 + 1 == mask.x1);
      }
      if (im == 4) {
        const Box paint = bbox(pm, 32), mask = bbox(mouth, 32);
        CHECK(paint.y0 - 1 == mask.y0);
        CHECK(paint.y1 + 1 == mask.y1);
        CHECK(paint.x0 - 1 == mask.x0);
        CHECK(paint.x1 + 1 == mask.x1);
      }
    }
}

TEST_CASE("clips") {
  const ClipSample one = make_clip(3, 1, MotionProfile::kSpeech);
  CHECK(one.num_frames() == 1);
  CHECK(one.audio_track.size() == 1);
  CHECK(one.frames.shape() == Shape{1, 3, 32, 32});
  CHECK_THROWS_AS(make_clip(3, 0, MotionProfile::kSpeech), ContractError);

  const ClipSample a = make_clip(9, 12, MotionProfile::kSpeech), b = make_clip(9, 12, MotionProfile::kSpeech);
  CHECK(bitwise_equal(a.frames, b.frames));
  CHECK(a.audio_track == b.audio_track);
  CHECK(a.landmarks == b.landmarks);
  for (std::size_t t = 0; t < a.num_frames(); ++t) {
    CHECK(a.audio_track[t] == a.params[t].mouth_open);
    CHECK(a.landmarks[t] == render(a.params[t]).landmarks);
    CHECK(bitwise_equal(a.frame(t), render(a.params[t]).image));
  }
  double spread = 0.0;
  for (double v : a.audio_track) spread = std::max(spread, std::abs(v - a.audio_track[0]));
  CHECK(spread > 0.1);

  const ClipSample s = make_clip(9, 12, MotionProfile::kSilent);
  for (std::size_t t = 0; t < s.num_frames(); ++t) {
    CHECK(s.params[t].mouth_open == 0.0);
    CHECK(s.audio_track[t] == 0.0);
  }
  CHECK(s.params[0].hue == a.params[0].hue);
  CHECK(parse_motion_profile("silent") == MotionProfile::kSilent);
  CHECK(motion_profile_name(MotionProfile::kSpeech) == "speech");
  CHECK_THROWS_AS(parse_motion_profile("shout"), ConfigError);
}

TEST_CASE("audio embedding") {
  const std::size_t dim = 8, tokens = 3;
  const Tensor e = audio_embed({0.2, 0.7, 0.2, 1.0}, dim, 5, tokens);
  CHECK(e.shape() == Shape{4, tokens, dim});
  // Frame t, slot k carries track[clamp(t + k - 1)]: frames 0 and 2 see
  // windows (0.2, 0.2, 0.7) and (0.7, 0.2, 1.0).
  auto token = [&](const Tensor& x, std::size_t t, std::size_t k) {
    return std::vector<double>(x.data().begin() + static_cast<long>((t * tokens + k) * dim),
                               x.data().begin() + static_cast<long>((t * tokens + k + 1) * dim));
  };
  auto value = [&](std::size_t t, std::size_t k) { return token(e, t, k)[0]; };
  CHECK(value(0, 0) == value(0, 1));
  CHECK(value(0, 1) == value(2, 1));
  CHECK(value(0, 2) != value(0, 1));
  CHECK(token(e, 0, 1) == token(e, 2, 1));
  CHECK(token(e, 1, 0) != token(e, 1, 1));

  // The value channels are v * u for a fixed seeded direction u.
  Rng rng(5);
  std::vector<double> u(dim / 2);
  for (auto& x : u) x = rng.normal();
  const Tensor ones = audio_embed(std::vector<double>(4, 1.0), dim, 5, tokens);
  const Tensor zeros = audio_embed(std::vector<double>(4, 0.0), dim, 5, tokens);
  double uu = 0.0;
  for (double x : u) uu += x * x;
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t k = 0; k < tokens; ++k) {
      const auto o = token(ones, t, k), z = token(zeros, t, k);
      double no = 0.0, nz = 0.0;
      for (std::size_t j = 0; j < dim; ++j) no += o[j] * o[j], nz += z[j] * z[j];
      for (std::size_t j = 0; j < dim / 2; ++j) CHECK(o[j] == u[j]);
      CHECK(std::abs(no - nz - uu) < 1e-12);
    }
  CHECK(bitwise_equal(audio_embed({0.4}, dim, 5), audio_embed({0.4}, dim, 5)));
  CHECK_FALSE(bitwise_equal(audio_embed({0.4}, dim, 5), audio_embed({0.41}, dim, 5)));
  CHECK_THROWS_AS(audio_embed({0.4}, 3, 5), ContractError);
  CHECK_THROWS_AS(audio_embed({}, 8, 5), ContractError);
}

TEST_CASE("clip export round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "mmdit_synthface_roundtrip";
  std::filesystem::remove_all(dir);
  ClipOptions opt;
  opt.rotation_jitter_deg = 5.0;
  const ClipSample a = make_clip(41, 5, MotionProfile::kSpeech, opt);
  export_clip(a, dir);
  CHECK(std::filesystem::exists(dir / "frames" / "0000.ppm"));
  CHECK(std::filesystem::exists(dir / "landmarks.json"));
  CHECK(std::filesystem::exists(dir / "audio.csv"));
  const ClipSample b = import_clip(dir);
  CHECK(b.landmarks == a.landmarks);
  CHECK(b.audio_track == a.audio_track);
  CHECK(b.num_frames() == a.num_frames());
  // PPM stores 8-bit samples.
  CHECK(max_abs_diff(b.frames, a.frames) <= 0.5 / 255.0 + 1e-12);
  // Once quantized, a clip survives further round trips bit-exactly.
  const auto dir2 = dir.string() + "_again";
  export_clip(b, dir2);
  const ClipSample c = import_clip(dir2);
  CHECK(bitwise_equal(c.frames, b.frames));
  CHECK(c.landmarks == b.landmarks);
  std::filesystem::remove_all(dir2);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(import_clip(dir), IoError);
}
