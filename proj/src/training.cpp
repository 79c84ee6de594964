#include "mmdit/training.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "mmdit/image.hpp"
#include "mmdit/ops.hpp"

namespace mmdit {

// --- plans ---------------------------------------------------------------

double ModalityMix::weight(Modality m) const {
  switch (m) {
    case Modality::kVisualDropout:
      return visual_dropout;
    case Modality::kAudioOnly:
      return audio_only;
    case Modality::kMixed:
      return mixed;
  }
  return 0.0;
}

Modality ModalityMix::draw(Rng& rng) const {
  const double u = rng.uniform() * (visual_dropout + audio_only + mixed);
  if (u < visual_dropout) return Modality::kVisualDropout;
  if (u < visual_dropout + audio_only) return Modality::kAudioOnly;
  return mixed > 0.0 ? Modality::kMixed : (audio_only > 0.0 ? Modality::kAudioOnly : Modality::kVisualDropout);
}

void ModalityMix::validate() const {
  if (visual_dropout < 0 || audio_only < 0 || mixed < 0) {
    throw ConfigError("modality weights must be non-negative");
  }
  if (std::abs(visual_dropout + audio_only + mixed - 1.0) > 1e-9) {
    throw ConfigError("modality weights must sum to 1");
  }
}

bool StagePlan::trainable(const std::string& name) const {
  const bool temporal = MixedModalDiT::is_temporal_param(name);
  return stage_id == 3 ? temporal : !temporal;
}

double StagePlan::lr_at(std::size_t step) const {
  if (warmup_steps == 0) return lr;
  return lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup_steps));
}

StagePlan make_stage_plan(int stage_id, const PlanOverrides& o) {
  if (stage_id < 1 || stage_id > 3) throw ConfigError("unknown training stage " + std::to_string(stage_id));
  StagePlan plan;
  plan.stage_id = stage_id;
  if (stage_id == 1) {
    plan.mix = {1.0, 0.0, 0.0};
    plan.steps = 2000;
  } else {
    plan.mix = {0.10, 0.20, 0.70};
    plan.steps = stage_id == 2 ? 2000 : 1000;
  }
  plan.frames_per_sample = stage_id == 3 ? 4 : 1;
  if (o.steps) plan.steps = *o.steps;
  if (o.lr) {
    if (!(*o.lr > 0.0) || !std::isfinite(*o.lr)) throw ConfigError("learning rate must be positive");
    plan.lr = *o.lr;
  }
  if (o.mix) {
    o.mix->validate();
    if (stage_id == 1 && (o.mix->audio_only > 0.0 || o.mix->mixed > 0.0)) {
      throw ConfigError("stage 1 has no audio attention; its mix must be visual only");
    }
    plan.mix = *o.mix;
  }
  if (o.warmup_steps) plan.warmup_steps = *o.warmup_steps;
  if (o.weight_decay) {
    if (*o.weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    plan.weight_decay = *o.weight_decay;
  }
  if (o.frames_per_sample) {
    if (*o.frames_per_sample == 0) throw ConfigError("frames_per_sample must be positive");
    plan.frames_per_sample = *o.frames_per_sample;
  }
  plan.mix.validate();
  return plan;
}

void prepare_model_for_stage(MixedModalDiT& model, int stage_id, std::uint64_t seed) {
  if (stage_id < 1 || stage_id > 3) throw ConfigError("unknown training stage " + std::to_string(stage_id));
  if (stage_id >= 2) model.add_audio_layers(seed ^ 0xa0d10ULL);
  if (stage_id >= 3) model.add_temporal_layers(seed ^ 0x7e3f0ULL);
}

// --- optimiser -----------------------------------------------------------

void AdamW::step(ParameterStore& params, const std::function<bool(const std::string&)>& trainable,
                 double lr, double weight_decay) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    if (!trainable(name) || !p.has_grad()) {
      p.zero_grad();
      continue;
    }
    auto g = p.grad();
    auto& st = state_[name];
    if (st.m.empty()) st.m.assign(g.size(), 0.0), st.v.assign(g.size(), 0.0);
    std::vector<double> grad(g.begin(), g.end());
    p.zero_grad();
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * grad[i];
      st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * grad[i] * grad[i];
      const double mhat = st.m[i] / bc1, vhat = st.v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay * w[i]);
    }
  }
}

// --- augmentation --------------------------------------------------------

AugmentParams draw_augment(Rng& rng) {
  AugmentParams a;
  a.resample_factor = rng.uniform(0.5, 1.0);
  a.shift_x = static_cast<int>(rng.uniform_int(-2, 2));
  a.shift_y = static_cast<int>(rng.uniform_int(-2, 2));
  for (int c = 0; c < 3; ++c) {
    a.gain[c] = rng.uniform(0.8, 1.2);
    a.bias[c] = rng.uniform(-0.1, 0.1);
  }
  return a;
}

Tensor apply_augment(const Tensor& image, const AugmentParams& a) {
  require_image(image, "augment");
  const std::size_t h = image.dim(1), w = image.dim(2);
  Tensor out = image;
  if (a.resample_factor != 1.0) {
    const auto sh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(h) * a.resample_factor)));
    const auto sw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(w) * a.resample_factor)));
    out = resize_bilinear(resize_bilinear(out, sh, sw), h, w);
  }
  std::vector<double> d(out.numel());
  auto src = out.data();
  for (std::size_t c = 0; c < kImageChannels; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const long sy = std::clamp(static_cast<long>(y) - a.shift_y, 0L, static_cast<long>(h) - 1);
        const long sx = std::clamp(static_cast<long>(x) - a.shift_x, 0L, static_cast<long>(w) - 1);
        const double v = src[(c * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
        d[(c * h + y) * w + x] = std::clamp(a.gain[c] * v + a.bias[c], 0.0, 1.0);
      }
  return Tensor(image.shape(), std::move(d));
}

Tensor augment_driving(const Tensor& image, Rng& rng) { return apply_augment(image, draw_augment(rng)); }

// --- leakage -------------------------------------------------------------

double leakage_metric(const Tensor& frames, const Tensor& mouth_mask) {
  if (frames.rank() != 4) throw ShapeError("leakage_metric expects [F, C, H, W], got " + shape_str(frames.shape()));
  const std::size_t f = frames.dim(0), c = frames.dim(1), h = frames.dim(2), w = frames.dim(3);
  if (f < 2) throw ContractError("leakage_metric needs at least two frames");
  if (mouth_mask.shape() != Shape{h, w}) throw ShapeError("mouth mask does not match the frames");
  auto d = frames.data();
  auto m = mouth_mask.data();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) {
      if (m[i] == 0.0) continue;
      double mean = 0.0;
      for (std::size_t t = 0; t < f; ++t) mean += d[(t * c + ch) * h * w + i];
      mean /= static_cast<double>(f);
      double var = 0.0;
      for (std::size_t t = 0; t < f; ++t) {
        const double r = d[(t * c + ch) * h * w + i] - mean;
        var += r * r;
      }
      total += var / static_cast<double>(f);
      ++count;
    }
  if (count == 0) throw ContractError("mouth mask is empty");
  return total / static_cast<double>(count);
}

// --- corpus --------------------------------------------------------------

TrainingCorpus::TrainingCorpus(std::vector<ClipSample> clips, const ModelConfig& cfg,
                               std::uint64_t audio_seed)
    : clips_(std::move(clips)), audio_tokens_(cfg.audio_tokens) {
  if (clips_.empty()) throw ConfigError("training corpus is empty");
  for (const auto& c : clips_) {
    if (c.size() != cfg.image_size) {
      throw ConfigError("clip size " + std::to_string(c.size()) + " does not match image_size " +
                        std::to_string(cfg.image_size));
    }
    std::vector<RegionMaskSet> m;
    for (const auto& lm : c.landmarks) m.push_back(region_masks_from_landmarks(lm, c.size(), c.size(), cfg.patch));
    masks_.push_back(std::move(m));
    audio_.push_back(audio_embed(c.audio_track, cfg.audio_dim, audio_seed, cfg.audio_tokens));
  }
}

TrainingExample TrainingCorpus::draw(const StagePlan& plan, Rng& rng, bool augment) const {
  TrainingExample ex;
  ex.modality = plan.mix.draw(rng);
  const auto ci = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(clips_.size()) - 1));
  const ClipSample& clip = clips_[ci];
  const std::size_t n = clip.num_frames();
  const std::size_t f = std::min(plan.frames_per_sample, n);
  const auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - f)));
  const auto ref = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));

  ex.reference_image = clip.frame(ref);
  ex.target = slice(clip.frames, 0, start, start + f).detach();
  ex.masks.assign(masks_[ci].begin() + static_cast<long>(start), masks_[ci].begin() + static_cast<long>(start + f));

  if (ex.modality != Modality::kAudioOnly) {
    ex.selection = sample_dropout(rng, plan.stage_id, ex.modality);
    std::vector<double> drive;
    drive.reserve(ex.target.numel());
    for (std::size_t k = 0; k < f; ++k) {
      Tensor gt = clip.frame(start + k);
      if (augment) gt = augment_driving(gt, rng);
      const Tensor composed = compose_driving(gt, ex.masks[k], *ex.selection);
      drive.insert(drive.end(), composed.data().begin(), composed.data().end());
    }
    ex.driving = Tensor(ex.target.shape(), std::move(drive));
  }
  if (ex.modality != Modality::kVisualDropout) {
    ex.audio = slice(audio_[ci], 0, start, start + f).detach();
  }
  return ex;
}

// --- steps ---------------------------------------------------------------

StepResult train_step(MixedModalDiT& model, AdamW& optimizer, const TrainingExample& example,
                      const StagePlan& plan, const NoiseSchedule& schedule, Rng& rng,
                      std::size_t step_index, std::uint64_t seed) {
  // Frozen parameters stay off the tape entirely.
  for (auto& [name, p] : model.params()) {
    p.zero_grad();
    p.set_requires_grad(plan.trainable(name));
  }
  StepResult r;
  r.modality = example.modality;
  auto fail = [&](const std::string& why) {
    return NumericError("non-finite loss at stage " + std::to_string(plan.stage_id) + " step " +
                        std::to_string(step_index) + " (seed " + std::to_string(seed) +
                        ", modality " + modality_name(example.modality) + "): " + why);
  };
  LossInfo info;
  Tensor loss;
  try {
    loss = training_loss(model, example, schedule, rng, &info);
  } catch (const NumericError& e) {
    throw fail(e.what());
  }
  r.loss = loss.item();
  r.timestep = info.timestep;
  if (!std::isfinite(r.loss)) throw fail("loss is " + std::to_string(r.loss));
  try {
    loss.backward();
  } catch (const NumericError& e) {
    throw fail(e.what());
  }
  optimizer.step(model.params(), [&plan](const std::string& n) { return plan.trainable(n); },
                 plan.lr_at(step_index), plan.weight_decay);
  return r;
}

std::vector<double> train_stage(MixedModalDiT& model, const TrainingCorpus& corpus,
                                const StagePlan& plan, const NoiseSchedule& schedule,
                                const TrainOptions& options) {
  if (plan.stage_id >= 2 && !model.has_audio()) {
    throw ConfigError("stage " + std::to_string(plan.stage_id) + " needs audio attention layers");
  }
  if (plan.stage_id == 3 && !model.has_temporal()) throw ConfigError("stage 3 needs temporal layers");
  Rng rng = Rng(options.seed).split(static_cast<std::uint64_t>(plan.stage_id));
  AdamW optimizer;
  std::vector<double> losses;
  losses.reserve(plan.steps);
  for (std::size_t step = 0; step < plan.steps; ++step) {
    const TrainingExample ex = corpus.draw(plan, rng, options.augment);
    const StepResult r = train_step(model, optimizer, ex, plan, schedule, rng, step, options.seed);
    losses.push_back(r.loss);
    if (options.log && (step % std::max<std::size_t>(1, options.log_every) == 0 || step + 1 == plan.steps)) {
      *options.log << nlohmann::json{{"step", step},
                                     {"stage", plan.stage_id},
                                     {"modality", modality_name(r.modality)},
                                     {"loss", r.loss},
                                     {"lr", plan.lr_at(step)}}
                          .dump()
                   << '\n';
    }
    const bool periodic = options.checkpoint_every > 0 && (step + 1) % options.checkpoint_every == 0;
    if (options.checkpoint_path && (periodic || step + 1 == plan.steps)) {
      model.save(*options.checkpoint_path, {{"stage", plan.stage_id}, {"step", step + 1}});
    }
  }
  for (auto& [name, p] : model.params()) p.set_requires_grad(true);
  return losses;
}

}  // namespace mmdit
