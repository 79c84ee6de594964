#include "mmdit/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "mmdit/image.hpp"
#include "mmdit/ops.hpp"

namespace mmdit {

// --- schedule ------------------------------------------------------------

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("noise schedule needs at least one step");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
  }
  return NoiseSchedule(std::move(betas));
}

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.empty()) throw ConfigError("noise schedule is empty");
  double prev = 0.0, running = 1.0;
  alpha_bars_.reserve(betas_.size());
  for (double b : betas_) {
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("betas must lie in (0, 1)");
    if (b < prev) throw ConfigError("betas must be non-decreasing");
    prev = b;
    running *= 1.0 - b;
    alpha_bars_.push_back(running);
  }
}

std::size_t NoiseSchedule::index(int t) const {
  if (t < 1 || t > steps()) {
    throw ContractError("timestep " + std::to_string(t) + " outside [1, " +
                        std::to_string(steps()) + "]");
  }
  return static_cast<std::size_t>(t - 1);
}

Tensor q_sample(const NoiseSchedule& schedule, const Tensor& x0, int t, const Tensor& eps) {
  if (x0.shape() != eps.shape()) {
    throw ShapeError("q_sample: noise " + shape_str(eps.shape()) + " does not match " +
                     shape_str(x0.shape()));
  }
  const double ab = schedule.alpha_bar(t);
  return add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

Tensor image_to_latent(const Tensor& image) { return add_scalar(scale(image, 2.0), -1.0); }

Tensor latent_to_image(const Tensor& latent) {
  return clamp01(scale(add_scalar(latent, 1.0), 0.5));
}

// --- training objective --------------------------------------------------

Tensor diffusion_loss(const EpsFn& predict, const Tensor& x0, const Tensor& loss_mask,
                      const NoiseSchedule& schedule, Rng& rng, LossInfo* info) {
  const int t = static_cast<int>(rng.uniform_int(1, schedule.steps()));
  const Tensor eps = Tensor::randn(x0.shape(), rng);
  const Tensor noisy = q_sample(schedule, x0, t, eps);
  if (info) info->timestep = t;
  return masked_mse(predict(noisy, t), eps, loss_mask);
}

namespace {

Tensor encode_driving(const MixedModalDiT& model, const Tensor& driving) {
  std::vector<Tensor> feats;
  feats.reserve(driving.dim(0));
  for (std::size_t f = 0; f < driving.dim(0); ++f) {
    const Tensor frame = reshape(slice(driving, 0, f, f + 1), {driving.dim(1), driving.dim(2), driving.dim(3)});
    const Tensor m = model.driven_encode(frame);
    feats.push_back(reshape(m, {1, m.dim(0), m.dim(1), m.dim(2)}));
  }
  return feats.size() == 1 ? feats.front() : concat(feats, 0);
}

void require_frames(const Tensor& t, std::size_t frames, const char* what) {
  if (t.defined() && (t.rank() < 1 || t.dim(0) != frames)) {
    throw ShapeError(std::string(what) + " has " + shape_str(t.shape()) + ", expected " +
                     std::to_string(frames) + " frames");
  }
}

}  // namespace

DenoiserInputs training_inputs(const MixedModalDiT& model, const TrainingExample& ex) {
  const std::size_t frames = ex.frames();
  require_frames(ex.driving, frames, "driving clip");
  require_frames(ex.audio, frames, "audio tokens");
  if (ex.masks.size() != frames) throw ShapeError("need one region mask set per frame");
  DenoiserInputs in;
  if (ex.driving.defined()) in.motion = encode_driving(model, ex.driving);
  in.audio = ex.audio;
  in.reference = model.reference_features(ex.reference_image);
  for (const auto& m : ex.masks) in.roles.push_back(TokenRoleMap::from_masks(m, 0));
  in.mouth_driven = ex.selection.has_value() && ex.selection->mouth();
  in.audio_scale = 1.0;
  return in;
}

Tensor training_loss(const MixedModalDiT& model, const TrainingExample& ex,
                     const NoiseSchedule& schedule, Rng& rng, LossInfo* info) {
  const DenoiserInputs in = training_inputs(model, ex);
  const Tensor x0 = image_to_latent(ex.target);
  const std::size_t plane = x0.numel() / x0.dim(0);
  std::vector<double> mask;
  mask.reserve(x0.numel());
  for (std::size_t f = 0; f < ex.frames(); ++f) {
    if (!model.config().masked_attention) {
      mask.insert(mask.end(), plane, 1.0);
      continue;
    }
    const Tensor m = loss_mask_for(ex.selection, ex.audio.defined(), ex.masks[f]);
    const Tensor e = expand_mask(m, {x0.dim(1), x0.dim(2), x0.dim(3)});
    mask.insert(mask.end(), e.data().begin(), e.data().end());
  }
  const Tensor loss_mask(x0.shape(), std::move(mask));
  const EpsFn predict = [&](const Tensor& noisy, int t) { return model.forward(noisy, t, in); };
  return diffusion_loss(predict, x0, loss_mask, schedule, rng, info);
}

// --- sampling ------------------------------------------------------------

ControlModality parse_control_modality(const std::string& name) {
  if (name == "A") return ControlModality::kAudio;
  if (name == "V") return ControlModality::kVisual;
  if (name == "A+V" || name == "AV") return ControlModality::kAudioVisual;
  throw ConfigError("unknown modality '" + name + "' (expected A, V or A+V)");
}

std::string control_modality_name(ControlModality m) {
  switch (m) {
    case ControlModality::kAudio:
      return "A";
    case ControlModality::kVisual:
      return "V";
    case ControlModality::kAudioVisual:
      return "A+V";
  }
  return "?";
}

SamplerMode parse_sampler_mode(const std::string& name) {
  if (name == "ancestral") return SamplerMode::kAncestral;
  if (name == "deterministic") return SamplerMode::kDeterministic;
  throw ConfigError("unknown sampler mode '" + name + "'");
}

Tensor sample_latent(const EpsFn& predict, const NoiseSchedule& schedule, const Shape& shape,
                     const SamplerOptions& options) {
  const int total = schedule.steps();
  if (options.steps < 1 || total % options.steps != 0) {
    throw ConfigError("sampling steps " + std::to_string(options.steps) +
                      " must divide the schedule length " + std::to_string(total));
  }
  if (shape.size() < 2) throw ShapeError("sample shape needs a frame axis");
  const int stride = total / options.steps;
  Rng init_rng(options.seed);
  Rng step_rng = init_rng.split(0x5a4d504c);

  Shape slot = shape;
  slot[0] = 1;
  const Tensor first = Tensor::randn(slot, init_rng);
  std::vector<double> x;
  x.reserve(shape_numel(shape));
  for (std::size_t f = 0; f < shape[0]; ++f) x.insert(x.end(), first.data().begin(), first.data().end());

  NoGradGuard no_grad;
  for (int i = options.steps; i >= 1; --i) {
    const int t = i * stride;
    const int t_prev = (i - 1) * stride;
    const double ab = schedule.alpha_bar(t);
    const double ab_prev = t_prev > 0 ? schedule.alpha_bar(t_prev) : 1.0;
    const Tensor eps = predict(Tensor(shape, x), t);
    if (eps.shape() != shape) throw ShapeError("eps prediction has the wrong shape");
    auto e = eps.data();
    const double sa = std::sqrt(ab), s1a = std::sqrt(1.0 - ab);
    if (options.mode == SamplerMode::kDeterministic) {
      const double sp = std::sqrt(ab_prev), s1p = std::sqrt(1.0 - ab_prev);
      for (std::size_t k = 0; k < x.size(); ++k) {
        double x0 = (x[k] - s1a * e[k]) / sa;
        double ek = e[k];
        if (options.clip_x0 && std::abs(x0) > 1.0) {
          x0 = std::clamp(x0, -1.0, 1.0);
          ek = (x[k] - sa * x0) / s1a;
        }
        x[k] = sp * x0 + s1p * ek;
      }
    } else {
      // Posterior q(x_prev | x_t, x0) of the strided chain.
      const double a_step = ab / ab_prev;
      const double b_step = 1.0 - a_step;
      const double c0 = std::sqrt(ab_prev) * b_step / (1.0 - ab);
      const double ct = std::sqrt(a_step) * (1.0 - ab_prev) / (1.0 - ab);
      const double var = t_prev > 0 ? b_step * (1.0 - ab_prev) / (1.0 - ab) : 0.0;
      const double sd = std::sqrt(var);
      for (std::size_t k = 0; k < x.size(); ++k) {
        double x0 = (x[k] - s1a * e[k]) / sa;
        if (options.clip_x0) x0 = std::clamp(x0, -1.0, 1.0);
        x[k] = c0 * x0 + ct * x[k];
        if (sd > 0.0) x[k] += sd * step_rng.normal();
      }
    }
  }
  return Tensor(shape, std::move(x));
}

DenoiserInputs sampling_inputs(const MixedModalDiT& model, const SampleConditions& c,
                               std::size_t* frames_out) {
  const bool needs_audio = c.modality != ControlModality::kVisual;
  const bool needs_visual = c.modality != ControlModality::kAudio;
  const std::string name = control_modality_name(c.modality);
  if (!c.reference_image.defined()) throw ConfigError("sampling needs a reference image");
  if (needs_audio && !c.audio.defined()) throw ConfigError("modality " + name + " needs an audio track");
  if (needs_visual && !c.driving.defined()) throw ConfigError("modality " + name + " needs a driving clip");
  if (needs_audio && !model.has_audio()) {
    throw ConfigError("modality " + name + " needs a model with audio attention layers");
  }

  std::size_t frames = c.frames;
  if (c.driving.defined() && needs_visual) frames = c.driving.dim(0);
  else if (c.audio.defined() && needs_audio) frames = c.audio.dim(0);
  if (frames == 0) throw ConfigError("frame count is not determined by the conditions");

  DenoiserInputs in;
  if (needs_visual) {
    require_frames(c.driving, frames, "driving clip");
    in.motion = encode_driving(model, c.driving);
  }
  if (needs_audio) {
    require_frames(c.audio, frames, "audio tokens");
    in.audio = c.audio;
  }
  in.reference = model.reference_features(c.reference_image);
  if (!c.roles.empty() && c.roles.size() != frames) {
    throw ShapeError("need one token role map per frame");
  }
  in.roles = c.roles;
  in.mouth_driven = c.mouth_driven;
  in.audio_scale = c.audio_scale;
  if (frames_out) *frames_out = frames;
  return in;
}

Tensor sample(const MixedModalDiT& model, const SampleConditions& conditions,
              const NoiseSchedule& schedule, const SamplerOptions& options) {
  NoGradGuard no_grad;
  std::size_t frames = 0;
  const DenoiserInputs in = sampling_inputs(model, conditions, &frames);
  const auto& cfg = model.config();
  const Shape shape{frames, cfg.image_channels, cfg.image_size, cfg.image_size};
  const EpsFn predict = [&](const Tensor& noisy, int t) { return model.forward(noisy, t, in); };
  return latent_to_image(sample_latent(predict, schedule, shape, options));
}

}  // namespace mmdit
