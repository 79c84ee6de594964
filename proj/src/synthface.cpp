#include "mmdit/synthface.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "mmdit/face_layout.hpp"
#include "mmdit/image.hpp"
#include "mmdit/ops.hpp"

namespace mmdit {

namespace {

using nlohmann::json;

constexpr double kBackground[3] = {0.10, 0.12, 0.15};
constexpr double kEyeColor[3] = {0.05, 0.05, 0.08};
constexpr double kMouthColor[3] = {0.45, 0.05, 0.10};

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

// Opening coverage of a horizontal slit centred at (cx, cy) in reference
// canvas units: full inside |dy| < h - 1, ramps to zero at |dy| = h.
double slit_coverage(double u, double v, double cx, double cy, double rx, double ry, double open) {
  const double dx = u - cx, dy = v - cy;
  if (std::abs(dx) > rx + 1e-9) return 0.0;
  const double h = open * (ry + 1.0);
  return std::clamp(h - std::abs(dy), 0.0, 1.0);
}

std::string frame_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu.ppm", i);
  return buf;
}

std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json params_to_json(const FaceParams& p) {
  return {{"eye_open", p.eye_open}, {"mouth_open", p.mouth_open}, {"rotation_deg", p.rotation_deg},
          {"tx", p.tx},             {"ty", p.ty},                 {"hue", p.hue},
          {"scale", p.scale}};
}

FaceParams params_from_json(const json& j) {
  FaceParams p;
  p.eye_open = j.at("eye_open").get<double>();
  p.mouth_open = j.at("mouth_open").get<double>();
  p.rotation_deg = j.at("rotation_deg").get<double>();
  p.tx = j.at("tx").get<double>();
  p.ty = j.at("ty").get<double>();
  p.hue = j.at("hue").get<double>();
  p.scale = j.at("scale").get<double>();
  return p;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

void FaceParams::validate() const {
  auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
  if (!in(eye_open, 0, 1) || !in(mouth_open, 0, 1)) throw ContractError("openness must lie in [0, 1]");
  if (!in(rotation_deg, -45, 45)) throw ContractError("rotation must lie in [-45, 45] degrees");
  if (!(hue >= 0 && hue < 1)) throw ContractError("hue must lie in [0, 1)");
  if (!in(scale, 0.8, 1.2)) throw ContractError("scale must lie in [0.8, 1.2]");
  if (!std::isfinite(tx) || !std::isfinite(ty)) throw ContractError("translation must be finite");
}

Affine FaceParams::pose(std::size_t size) const {
  const double k = static_cast<double>(size) / face::kReferenceSize;
  return Affine::similarity(scale, deg2rad(rotation_deg), {face::kCenterX * k, face::kCenterY * k},
                            tx, ty);
}

RenderedFace render(const FaceParams& p, std::size_t size) {
  p.validate();
  if (size == 0) throw ContractError("render size must be positive");
  const double k = static_cast<double>(size) / face::kReferenceSize;
  const Affine m = p.pose(size);
  const double det = m.det();
  // Inverse similarity, image -> canonical.
  const Affine inv{m.d / det, -m.b / det, 0.0, -m.c / det, m.a / det, 0.0};
  Affine inverse = inv;
  inverse.tx = -(inv.a * m.tx + inv.b * m.ty);
  inverse.ty = -(inv.c * m.tx + inv.d * m.ty);

  double skin[3];
  for (int c = 0; c < 3; ++c) {
    skin[c] = 0.55 + 0.3 * std::cos(2.0 * std::numbers::pi * (p.hue + c / 3.0));
  }

  Tensor img = make_image(size, size);
  auto d = img.mutable_data();
  const std::size_t plane = size * size;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const Point q = inverse.apply({static_cast<double>(x), static_cast<double>(y)});
      const double u = q.x / k, v = q.y / k;
      const double hx = (u - face::kCenterX) / face::kHeadRx, hy = (v - face::kCenterY) / face::kHeadRy;
      double rgb[3];
      if (hx * hx + hy * hy <= 1.0) {
        std::copy(skin, skin + 3, rgb);
        const double eye = std::max(
            slit_coverage(u, v, face::kLeftEyeX, face::kEyeY, face::kEyeRx, face::kEyeRy, p.eye_open),
            slit_coverage(u, v, face::kRightEyeX, face::kEyeY, face::kEyeRx, face::kEyeRy, p.eye_open));
        const double mouth = slit_coverage(u, v, face::kMouthX, face::kMouthY, face::kMouthRx,
                                           face::kMouthRy, p.mouth_open);
        for (int c = 0; c < 3; ++c) {
          rgb[c] = rgb[c] * (1.0 - eye) + kEyeColor[c] * eye;
          rgb[c] = rgb[c] * (1.0 - mouth) + kMouthColor[c] * mouth;
        }
      } else {
        std::copy(kBackground, kBackground + 3, rgb);
      }
      for (int c = 0; c < 3; ++c) d[c * plane + y * size + x] = rgb[c];
    }

  const auto canon = face::canonical_landmarks(static_cast<double>(size));
  return {img, transform(m, PointList(canon.begin(), canon.end()))};
}

MotionProfile parse_motion_profile(const std::string& name) {
  if (name == "speech") return MotionProfile::kSpeech;
  if (name == "silent") return MotionProfile::kSilent;
  throw ConfigError("unknown motion profile '" + name + "' (expected speech or silent)");
}

std::string motion_profile_name(MotionProfile p) {
  return p == MotionProfile::kSpeech ? "speech" : "silent";
}

Tensor ClipSample::frame(std::size_t i) const {
  if (i >= num_frames()) throw ContractError("frame index out of range");
  const std::size_t s = size();
  return reshape(slice(frames, 0, i, i + 1), {kImageChannels, s, s});
}

ClipSample make_clip(std::uint64_t seed, std::size_t frames, MotionProfile profile,
                     const ClipOptions& options) {
  if (frames == 0) throw ContractError("a clip needs at least one frame");
  Rng rng(seed);
  ClipSample clip;
  clip.seed = seed;
  clip.profile = profile;

  const double hue = rng.uniform();
  const double period = rng.uniform(3.0, 7.0);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const bool jitter = options.rotation_jitter_deg > 0.0 || options.translation_jitter > 0.0;
  const double scale = jitter ? rng.uniform(0.9, 1.1) : 1.0;
  double rot = jitter ? rng.uniform(-10.0, 10.0) : 0.0;
  double tx = 0.0, ty = 0.0;

  std::vector<double> images;
  images.reserve(frames * kImageChannels * options.size * options.size);
  for (std::size_t t = 0; t < frames; ++t) {
    const double wave = std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / period + phase);
    FaceParams p;
    p.hue = hue;
    p.scale = scale;
    if (profile == MotionProfile::kSpeech) {
      p.mouth_open = std::clamp(0.5 + 0.45 * wave + 0.08 * rng.normal(), 0.0, 1.0);
      p.eye_open = 0.35 + 0.6 * p.mouth_open;
    } else {
      p.mouth_open = 0.0;
      p.eye_open = std::clamp(0.5 + 0.45 * wave, 0.0, 1.0);
    }
    if (t > 0) {
      rot = std::clamp(rot + options.rotation_jitter_deg * rng.normal(), -45.0, 45.0);
      tx = std::clamp(tx + options.translation_jitter * rng.normal(), -3.0, 3.0);
      ty = std::clamp(ty + options.translation_jitter * rng.normal(), -3.0, 3.0);
    }
    p.rotation_deg = rot;
    p.tx = tx;
    p.ty = ty;
    RenderedFace r = render(p, options.size);
    images.insert(images.end(), r.image.data().begin(), r.image.data().end());
    clip.params.push_back(p);
    clip.landmarks.push_back(std::move(r.landmarks));
    clip.audio_track.push_back(p.mouth_open);
  }
  clip.frames = Tensor(Shape{frames, kImageChannels, options.size, options.size}, std::move(images));
  return clip;
}

Tensor audio_embed(const std::vector<double>& track, std::size_t dim, std::uint64_t seed,
                   std::size_t tokens) {
  if (dim < 4) throw ContractError("audio embedding width must be at least 4");
  if (track.empty()) throw ContractError("audio track is empty");
  if (tokens == 0) throw ContractError("audio window must be positive");
  const std::size_t value_dims = dim / 2, pos_dims = dim - value_dims;
  Rng rng(seed);
  std::vector<double> u(value_dims);
  for (auto& x : u) x = rng.normal();

  const std::size_t frames = track.size();
  std::vector<double> out;
  out.reserve(frames * tokens * dim);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t k = 0; k < tokens; ++k) {
      const long idx = std::clamp(static_cast<long>(t + k) - 1, 0L, static_cast<long>(frames) - 1);
      const double v = track[static_cast<std::size_t>(idx)];
      for (double x : u) out.push_back(v * x);
      for (std::size_t j = 0; j < pos_dims; ++j) {
        const double freq = 1.0 / std::pow(4.0, static_cast<double>(j / 2));
        const double a = static_cast<double>(k) * freq;
        out.push_back(j % 2 == 0 ? std::sin(a) : std::cos(a));
      }
    }
  return Tensor(Shape{frames, tokens, dim}, std::move(out));
}

// --- export / import -----------------------------------------------------

void write_landmarks_json(const std::filesystem::path& path, const std::vector<PointList>& landmarks) {
  json frames = json::array();
  for (const auto& pts : landmarks) {
    json f = json::array();
    for (const auto& p : pts) f.push_back({p.x, p.y});
    frames.push_back(std::move(f));
  }
  write_text_file(path, json{{"frames", frames}}.dump() + "\n");
}

std::vector<PointList> read_landmarks_json(const std::filesystem::path& path) {
  const json j = read_json_file(path);
  std::vector<PointList> out;
  try {
    const json& frames = j.is_array() ? j : j.at("frames");
    for (const auto& f : frames) {
      PointList pts;
      for (const auto& p : f) pts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      out.push_back(std::move(pts));
    }
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed landmarks: " + e.what());
  }
  return out;
}

void write_audio_csv(const std::filesystem::path& path, const std::vector<double>& track) {
  std::string text;
  for (double v : track) text += exact(v) + "\n";
  write_text_file(path, text);
}

std::vector<double> read_audio_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<double> track;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string cell = line.substr(0, line.find(','));
    try {
      std::size_t used = 0;
      track.push_back(std::stod(cell, &used));
    } catch (const std::exception&) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": not a number: '" + cell + "'");
    }
  }
  return track;
}

void export_clip(const ClipSample& clip, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "frames", ec);
  if (ec) throw IoError("cannot create " + (dir / "frames").string() + ": " + ec.message());
  for (std::size_t i = 0; i < clip.num_frames(); ++i) write_ppm(dir / "frames" / frame_name(i), clip.frame(i));
  write_landmarks_json(dir / "landmarks.json", clip.landmarks);
  write_audio_csv(dir / "audio.csv", clip.audio_track);
  json params = json::array();
  for (const auto& p : clip.params) params.push_back(params_to_json(p));
  write_text_file(dir / "params.json",
                  json{{"seed", clip.seed}, {"profile", motion_profile_name(clip.profile)},
                       {"params", params}}.dump() + "\n");
}

ClipSample import_clip(const std::filesystem::path& dir) {
  ClipSample clip;
  clip.landmarks = read_landmarks_json(dir / "landmarks.json");
  clip.audio_track = read_audio_csv(dir / "audio.csv");
  const json meta = read_json_file(dir / "params.json");
  try {
    clip.seed = meta.at("seed").get<std::uint64_t>();
    clip.profile = parse_motion_profile(meta.at("profile").get<std::string>());
    for (const auto& p : meta.at("params")) clip.params.push_back(params_from_json(p));
  } catch (const json::exception& e) {
    throw IoError((dir / "params.json").string() + ": " + e.what());
  }
  const std::size_t n = clip.params.size();
  if (n == 0 || clip.landmarks.size() != n || clip.audio_track.size() != n) {
    throw IoError(dir.string() + ": frame, landmark and audio counts disagree");
  }
  std::vector<double> images;
  std::size_t size = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor f = read_ppm(dir / "frames" / frame_name(i));
    if (i == 0) size = f.dim(1);
    if (f.dim(1) != size || f.dim(2) != size) throw IoError(dir.string() + ": frames differ in size");
    images.insert(images.end(), f.data().begin(), f.data().end());
  }
  clip.frames = Tensor(Shape{n, kImageChannels, size, size}, std::move(images));
  return clip;
}

}  // namespace mmdit
