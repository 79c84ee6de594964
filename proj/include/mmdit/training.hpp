#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mmdit/diffusion.hpp"
#include "mmdit/masks.hpp"
#include "mmdit/model.hpp"
#include "mmdit/synthface.hpp"

namespace mmdit {

// Probabilities of the three sample kinds.
struct ModalityMix {
  double visual_dropout = 1.0;
  double audio_only = 0.0;
  double mixed = 0.0;

  double weight(Modality m) const;
  // Inverse-CDF draw in the fixed order visual_dropout, audio_only, mixed.
  Modality draw(Rng& rng) const;
  void validate() const;
};

struct StagePlan {
  int stage_id = 1;
  ModalityMix mix;
  std::size_t steps = 0;
  double lr = 1e-5;
  std::size_t warmup_steps = 100;
  double weight_decay = 0.0;
  std::size_t frames_per_sample = 1;

  // Stage 3 trains the temporal layers only; stages 1-2 train everything else.
  bool trainable(const std::string& param_name) const;
  double lr_at(std::size_t step) const;
};

struct PlanOverrides {
  std::optional<std::size_t> steps;
  std::optional<double> lr;
  std::optional<ModalityMix> mix;
  std::optional<std::size_t> warmup_steps;
  std::optional<double> weight_decay;
  std::optional<std::size_t> frames_per_sample;
};

// Default desk-scale step counts: 2000 / 2000 / 1000.
StagePlan make_stage_plan(int stage_id, const PlanOverrides& overrides = {});

// Adds the layers a stage introduces: audio attention at stage 2 (random
// init), temporal attention at stage 3. Idempotent.
void prepare_model_for_stage(MixedModalDiT& model, int stage_id, std::uint64_t seed);

// Adam with decoupled weight decay.
class AdamW {
 public:
  explicit AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Updates every trainable parameter holding a gradient, then clears all
  // gradients. Frozen parameters are never written.
  void step(ParameterStore& params, const std::function<bool(const std::string&)>& trainable,
            double lr, double weight_decay);
  std::size_t steps_taken() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

// Down-up resample, crop-shift jitter and per-channel colour affine.
struct AugmentParams {
  double resample_factor = 1.0;  // [0.5, 1]
  int shift_x = 0, shift_y = 0;  // [-2, 2] pixels
  double gain[3] = {1.0, 1.0, 1.0};
  double bias[3] = {0.0, 0.0, 0.0};
};
AugmentParams draw_augment(Rng& rng);
Tensor apply_augment(const Tensor& image, const AugmentParams& params);
Tensor augment_driving(const Tensor& image, Rng& rng);

// Mean over mouth-mask pixels (all channels) of the per-pixel variance
// across frames. frames: [F, C, H, W] with F >= 2; mouth_mask: [H, W].
double leakage_metric(const Tensor& frames, const Tensor& mouth_mask);

// Clips plus everything derived from them once: region masks per frame and
// audio tokens per clip.
class TrainingCorpus {
 public:
  TrainingCorpus(std::vector<ClipSample> clips, const ModelConfig& cfg, std::uint64_t audio_seed);

  std::size_t size() const { return clips_.size(); }
  const ClipSample& clip(std::size_t i) const { return clips_.at(i); }
  const std::vector<RegionMaskSet>& masks(std::size_t i) const { return masks_.at(i); }
  const Tensor& audio(std::size_t i) const { return audio_.at(i); }

  // Draws the sample kind from the plan, a clip, a frame window and a
  // reference frame, and composes the conditions accordingly.
  TrainingExample draw(const StagePlan& plan, Rng& rng, bool augment = true) const;

 private:
  std::vector<ClipSample> clips_;
  std::vector<std::vector<RegionMaskSet>> masks_;
  std::vector<Tensor> audio_;
  std::size_t audio_tokens_;
};

struct StepResult {
  double loss = 0.0;
  int timestep = 0;
  Modality modality = Modality::kVisualDropout;
};

// One optimisation step. A non-finite loss raises NumericError carrying the
// step, seed and modality.
StepResult train_step(MixedModalDiT& model, AdamW& optimizer, const TrainingExample& example,
                      const StagePlan& plan, const NoiseSchedule& schedule, Rng& rng,
                      std::size_t step_index, std::uint64_t seed);

struct TrainOptions {
  std::uint64_t seed = 0;
  std::ostream* log = nullptr;  // JSON lines {step, stage, modality, loss, lr}
  std::size_t log_every = 1;
  std::size_t checkpoint_every = 0;  // 0 = only at the end
  std::optional<std::filesystem::path> checkpoint_path;
  bool augment = true;
};

// Runs plan.steps steps and returns the per-step losses.
std::vector<double> train_stage(MixedModalDiT& model, const TrainingCorpus& corpus,
                                const StagePlan& plan, const NoiseSchedule& schedule,
                                const TrainOptions& options);

}  // namespace mmdit
