#include "mmdit/masks.hpp"

#include <algorithm>
#include <cmath>

#include "mmdit/face_layout.hpp"
#include "mmdit/image.hpp"
#include "mmdit/ops.hpp"

namespace mmdit {

namespace {

struct Box {
  long y0, y1, x0, x1;  // inclusive
  bool intersects(const Box& o) const {
    return y0 <= o.y1 && o.y0 <= y1 && x0 <= o.x1 && o.x0 <= x1;
  }
};

template <std::size_t N>
Box core_box(const PointList& lm, const std::array<std::size_t, N>& idx) {
  double min_x = lm[idx[0]].x, max_x = min_x, min_y = lm[idx[0]].y, max_y = min_y;
  for (auto i : idx) {
    min_x = std::min(min_x, lm[i].x), max_x = std::max(max_x, lm[i].x);
    min_y = std::min(min_y, lm[i].y), max_y = std::max(max_y, lm[i].y);
  }
  return {static_cast<long>(std::floor(min_y)), static_cast<long>(std::ceil(max_y)),
          static_cast<long>(std::floor(min_x)), static_cast<long>(std::ceil(max_x))};
}

Box dilate(const Box& b) { return {b.y0 - 1, b.y1 + 1, b.x0 - 1, b.x1 + 1}; }

// Shrinks the dilated boxes so they meet at the midline between the cores.
void separate(Box& first, Box& second, const Box& core_first, const Box& core_second) {
  if (core_first.y1 < core_second.y0) {
    const long mid = (core_first.y1 + core_second.y0) / 2;
    first.y1 = std::min(first.y1, mid);
    second.y0 = std::max(second.y0, mid + 1);
  } else if (core_second.y1 < core_first.y0) {
    const long mid = (core_second.y1 + core_first.y0) / 2;
    second.y1 = std::min(second.y1, mid);
    first.y0 = std::max(first.y0, mid + 1);
  } else if (core_first.x1 < core_second.x0) {
    const long mid = (core_first.x1 + core_second.x0) / 2;
    first.x1 = std::min(first.x1, mid);
    second.x0 = std::max(second.x0, mid + 1);
  } else if (core_second.x1 < core_first.x0) {
    const long mid = (core_second.x1 + core_first.x0) / 2;
    second.x1 = std::min(second.x1, mid);
    first.x0 = std::max(first.x0, mid + 1);
  } else {
    throw GeometryError("eye and mouth regions overlap and cannot be separated");
  }
}

Tensor rasterize(const Box& b, std::size_t height, std::size_t width) {
  Tensor m(Shape{height, width}, 0.0);
  auto d = m.mutable_data();
  const long h = static_cast<long>(height), w = static_cast<long>(width);
  for (long y = std::max(0L, b.y0); y <= std::min(h - 1, b.y1); ++y)
    for (long x = std::max(0L, b.x0); x <= std::min(w - 1, b.x1); ++x)
      d[static_cast<std::size_t>(y * w + x)] = 1.0;
  return m;
}

void require_mask_shape(const Tensor& mask) {
  if (mask.rank() != 2) throw ShapeError("mask must be [H, W], got " + shape_str(mask.shape()));
}

}  // namespace

DrivingSelection::DrivingSelection(bool eye, bool mouth) : eye_(eye), mouth_(mouth) {
  if (!eye && !mouth) throw ContractError("driving selection must include eye or mouth");
}

std::string DrivingSelection::name() const {
  if (eye_ && mouth_) return "eye+mouth";
  return eye_ ? "eye" : "mouth";
}

std::string modality_name(Modality m) {
  switch (m) {
    case Modality::kVisualDropout:
      return "visual_dropout";
    case Modality::kAudioOnly:
      return "audio_only";
    case Modality::kMixed:
      return "mixed";
  }
  return "unknown";
}

std::vector<std::uint8_t> pool_to_tokens(const Tensor& mask, std::size_t patch) {
  require_mask_shape(mask);
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  if (patch == 0 || h % patch || w % patch) {
    throw ShapeError("mask " + shape_str(mask.shape()) + " not divisible by patch " +
                     std::to_string(patch));
  }
  const std::size_t th = h / patch, tw = w / patch;
  std::vector<std::uint8_t> tokens(th * tw, 0);
  auto d = mask.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (d[y * w + x] != 0.0) tokens[(y / patch) * tw + x / patch] = 1;
  return tokens;
}

RegionMaskSet region_masks_from_landmarks(const PointList& landmarks, std::size_t height,
                                          std::size_t width, std::size_t patch) {
  if (landmarks.size() != face::kNumLandmarks) {
    throw ShapeError("expected " + std::to_string(face::kNumLandmarks) + " landmarks, got " +
                     std::to_string(landmarks.size()));
  }
  const Box core_eye = core_box(landmarks, face::kEyeIndices);
  const Box core_mouth = core_box(landmarks, face::kMouthIndices);
  Box eye = dilate(core_eye), mouth = dilate(core_mouth);
  if (core_eye.intersects(core_mouth)) {
    throw GeometryError("eye and mouth regions overlap and cannot be separated");
  }
  if (eye.intersects(mouth)) separate(eye, mouth, core_eye, core_mouth);

  RegionMaskSet set;
  set.eye = rasterize(eye, height, width);
  set.mouth = rasterize(mouth, height, width);
  set.patch = patch;
  set.token_eye = pool_to_tokens(set.eye, patch);
  set.token_mouth = pool_to_tokens(set.mouth, patch);
  return set;
}

Tensor compose_driving(const Tensor& ground_truth, const RegionMaskSet& masks,
                       const DrivingSelection& selection) {
  require_image(ground_truth, "compose_driving");
  const std::size_t h = ground_truth.dim(1), w = ground_truth.dim(2);
  if (masks.height() != h || masks.width() != w) {
    throw ShapeError("compose_driving: masks " + shape_str(masks.eye.shape()) +
                     " do not match image " + shape_str(ground_truth.shape()));
  }
  auto eye = masks.eye.data();
  auto mouth = masks.mouth.data();
  std::vector<double> sel(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    const bool on = (selection.eye() && eye[i] != 0.0) || (selection.mouth() && mouth[i] != 0.0);
    sel[i] = on ? 1.0 : 0.0;
  }
  return mul(ground_truth, expand_mask(Tensor(Shape{h, w}, std::move(sel)), ground_truth.shape()));
}

Tensor masked_mse(const Tensor& pred, const Tensor& target, const Tensor& loss_mask) {
  if (pred.shape() != target.shape() || pred.shape() != loss_mask.shape()) {
    throw ShapeError("masked_mse: shapes " + shape_str(pred.shape()) + ", " +
                     shape_str(target.shape()) + ", " + shape_str(loss_mask.shape()) +
                     " must agree");
  }
  auto p = pred.data(), t = target.data(), m = loss_mask.data();
  double count = 0.0, total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (m[i] != 0.0 && m[i] != 1.0) throw ContractError("masked_mse: loss mask must be binary");
    if (m[i] == 0.0) continue;
    const double r = p[i] - t[i];
    total += r * r;
    count += 1.0;
  }
  if (count == 0.0) throw ContractError("masked_mse: loss mask selects no elements");
  return Tensor::from_op(
      Shape{1}, {total / count}, {pred, target},
      [pred, target, loss_mask, count](std::span<const double> g,
                                       std::span<std::vector<double>*> gin) {
        auto p = pred.data(), t = target.data(), m = loss_mask.data();
        const double k = 2.0 * g[0] / count;
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (m[i] == 0.0) continue;  // leave the accumulator untouched
          const double gi = k * (p[i] - t[i]);
          if (gin[0]) (*gin[0])[i] += gi;
          if (gin[1]) (*gin[1])[i] -= gi;
        }
      });
}

DrivingSelection sample_dropout(Rng& rng, int stage_id, Modality modality) {
  if (stage_id < 1 || stage_id > 3) {
    throw ConfigError("unknown training stage " + std::to_string(stage_id));
  }
  if (stage_id == 1 && modality != Modality::kVisualDropout) {
    throw ConfigError("stage 1 trains the visual modality only");
  }
  switch (modality) {
    case Modality::kVisualDropout: {
      switch (rng.uniform_int(0, 2)) {
        case 0:
          return DrivingSelection::eye_only();
        case 1:
          return DrivingSelection::mouth_only();
        default:
          return DrivingSelection::eye_and_mouth();
      }
    }
    case Modality::kMixed:
      return DrivingSelection::eye_only();
    case Modality::kAudioOnly:
      break;
  }
  throw ConfigError("audio-only samples carry no visual driving selection");
}

Tensor loss_mask_for(const std::optional<DrivingSelection>& selection, bool audio_present,
                     const RegionMaskSet& masks) {
  const bool mouth_driven = selection.has_value() && selection->mouth();
  if (mouth_driven || audio_present) return Tensor::ones(masks.mouth.shape());
  std::vector<double> d(masks.mouth.data().begin(), masks.mouth.data().end());
  for (auto& v : d) v = 1.0 - v;
  return Tensor(masks.mouth.shape(), std::move(d));
}

Tensor expand_mask(const Tensor& mask, const Shape& shape) {
  require_mask_shape(mask);
  if (shape.size() < 2 || shape[shape.size() - 2] != mask.dim(0) || shape.back() != mask.dim(1)) {
    throw ShapeError("expand_mask: " + shape_str(mask.shape()) + " cannot broadcast to " +
                     shape_str(shape));
  }
  const std::size_t plane = mask.numel();
  const std::size_t reps = shape_numel(shape) / plane;
  std::vector<double> d;
  d.reserve(plane * reps);
  auto md = mask.data();
  for (std::size_t r = 0; r < reps; ++r) d.insert(d.end(), md.begin(), md.end());
  return Tensor(shape, std::move(d));
}

}  // namespace mmdit
