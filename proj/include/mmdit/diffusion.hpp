#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mmdit/masks.hpp"
#include "mmdit/model.hpp"
#include "mmdit/tensor.hpp"

namespace mmdit {

// Discrete DDPM variance schedule, 1-indexed: beta(1) .. beta(T).
class NoiseSchedule {
 public:
  static NoiseSchedule linear(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);
  explicit NoiseSchedule(std::vector<double> betas);

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_.at(index(t)); }
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const { return alpha_bars_.at(index(t)); }

 private:
  std::size_t index(int t) const;
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
Tensor q_sample(const NoiseSchedule& schedule, const Tensor& x0, int t, const Tensor& eps);

// Maps images in [0, 1] to latents in [-1, 1] and back (clamped).
Tensor image_to_latent(const Tensor& image);
Tensor latent_to_image(const Tensor& latent);

// eps prediction for a noisy latent at timestep t.
using EpsFn = std::function<Tensor(const Tensor& noisy, int t)>;

struct LossInfo {
  int timestep = 0;
};

// Draws t ~ U{1..T} and eps ~ N(0, I), and returns the masked MSE between
// the prediction and eps. `loss_mask` has the latent's shape.
Tensor diffusion_loss(const EpsFn& predict, const Tensor& x0, const Tensor& loss_mask,
                      const NoiseSchedule& schedule, Rng& rng, LossInfo* info = nullptr);

// One training clip with its conditions, as seen by the loss.
struct TrainingExample {
  Tensor reference_image;                   // [3, H, W]
  Tensor target;                            // [F, 3, H, W] ground-truth frames in [0, 1]
  Tensor driving;                           // [F, 3, H, W] composed driving frames, or undefined
  Tensor audio;                             // [F, A, d_a], or undefined
  std::vector<RegionMaskSet> masks;         // per frame, from the target landmarks
  std::optional<DrivingSelection> selection;
  Modality modality = Modality::kVisualDropout;

  std::size_t frames() const { return target.dim(0); }
};

// Denoiser inputs for a training example: encoded driving frames, reference
// features, token roles, and the masked-attention flag.
DenoiserInputs training_inputs(const MixedModalDiT& model, const TrainingExample& example);

// Masked diffusion objective. With the model's masked_attention switch off
// (the "w/o MA and ML" ablation) the loss covers every pixel.
Tensor training_loss(const MixedModalDiT& model, const TrainingExample& example,
                     const NoiseSchedule& schedule, Rng& rng, LossInfo* info = nullptr);

// Which control signals drive a generated video.
enum class ControlModality { kAudio, kVisual, kAudioVisual };
ControlModality parse_control_modality(const std::string& name);  // "A", "V", "A+V"
std::string control_modality_name(ControlModality m);

struct SampleConditions {
  ControlModality modality = ControlModality::kVisual;
  Tensor reference_image;             // [3, H, W]
  Tensor driving;                     // [F, 3, H, W], needed for V and A+V
  Tensor audio;                       // [F, A, d_a], needed for A and A+V
  std::vector<TokenRoleMap> roles;    // per frame; empty = no region flags
  bool mouth_driven = true;
  double audio_scale = 1.0;
  std::size_t frames = 0;             // required when neither driving nor audio fix F
};

enum class SamplerMode { kAncestral, kDeterministic };
SamplerMode parse_sampler_mode(const std::string& name);

struct SamplerOptions {
  int steps = 50;
  SamplerMode mode = SamplerMode::kDeterministic;
  std::uint64_t seed = 0;
  // Clamp each step's x0 estimate to the latent range [-1, 1]; the
  // deterministic update then uses the noise implied by the clamped x0.
  bool clip_x0 = true;
};

// Reverse process over a strided subset of the schedule. The initial noise
// is drawn once per latent frame slot [1, C, H, W] and shared by all F
// frames. Returns the final latent before the image-range clamp.
Tensor sample_latent(const EpsFn& predict, const NoiseSchedule& schedule, const Shape& shape,
                     const SamplerOptions& options);

// Full conditional sampling; returns F frames in [0, 1].
Tensor sample(const MixedModalDiT& model, const SampleConditions& conditions,
              const NoiseSchedule& schedule, const SamplerOptions& options);

// Builds the denoiser inputs for sampling. Throws ConfigError when the
// modality's required conditions are missing.
DenoiserInputs sampling_inputs(const MixedModalDiT& model, const SampleConditions& conditions,
                               std::size_t* frames_out = nullptr);

}  // namespace mmdit
