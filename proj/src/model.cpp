#include "mmdit/model.hpp"

#include <bit>
#include <cmath>

#include "mmdit/archive.hpp"
#include "mmdit/image.hpp"
#include "mmdit/ops.hpp"

namespace mmdit {

namespace {

constexpr std::size_t kEncoderLayers = 4;

std::string block_prefix(const std::string& prefix, std::size_t i) {
  return prefix + ".blocks." + std::to_string(i) + ".";
}

Tensor normal_init(Shape shape, Rng& rng, double stddev) {
  Tensor t = Tensor::randn(std::move(shape), rng, stddev);
  t.set_requires_grad(true);
  return t;
}

Tensor zero_init(Shape shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

double fan_in_std(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

// x * (1 + scale) + shift, with per-channel vectors.
Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale_vec) {
  return add_rowvec(mul_rowvec(x, add_scalar(scale_vec, 1.0)), shift);
}

// Repeats a [T, d] tensor to [F, T, d].
Tensor repeat_frames(const Tensor& x, std::size_t frames) {
  const Tensor one = reshape(x, {1, x.dim(0), x.dim(1)});
  if (frames == 1) return one;
  return concat(std::vector<Tensor>(frames, one), 0);
}

std::size_t log2_exact(std::size_t v) {
  std::size_t s = 0;
  while ((std::size_t{1} << s) < v) ++s;
  return s;
}

// Driven Encoder layer shapes. A 3x3 layer first, then 2x2 stride-2 layers
// down to the token grid, then 1x1 layers. Each output cell sees its own
// patch plus a one-pixel border, so an eye-only driving frame cannot reach
// the motion features of mouth tokens.
struct EncoderLayer {
  std::size_t kernel, stride, pad;
};

EncoderLayer encoder_layer(std::size_t l, std::size_t downsample) {
  if (l == 0) return {3, 1, 1};
  if (l <= downsample) return {2, 2, 0};
  return {1, 1, 0};
}

}  // namespace

// --- ModelConfig ---------------------------------------------------------

void ModelConfig::validate() const {
  if (patch == 0 || image_size % patch != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by patch " +
                      std::to_string(patch));
  }
  if (!std::has_single_bit(patch) || log2_exact(patch) > kEncoderLayers - 1) {
    throw ConfigError("patch must be a power of two no larger than 8");
  }
  if (n_blocks == 0 || n_blocks % 2 != 0) throw ConfigError("block count must be even and positive");
  if (ref_inject_last > n_blocks) throw ConfigError("ref_inject_last exceeds n_blocks");
  if (d_model % 4 != 0) throw ConfigError("d_model must be divisible by 4");
  attention().validate();
  if (motion_channels == 0 || image_channels == 0 || audio_dim == 0 || audio_tokens == 0 ||
      mlp_ratio == 0 || driven_hidden == 0 || frames == 0) {
    throw ConfigError("model dimensions must be positive");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"image_size", image_size},       {"patch", patch},
          {"d_model", d_model},             {"n_heads", n_heads},
          {"n_blocks", n_blocks},           {"ref_inject_last", ref_inject_last},
          {"temporal_on_odd", temporal_on_odd}, {"motion_channels", motion_channels},
          {"frames", frames},               {"image_channels", image_channels},
          {"audio_dim", audio_dim},         {"audio_tokens", audio_tokens},
          {"mlp_ratio", mlp_ratio},         {"driven_hidden", driven_hidden},
          {"masked_attention", masked_attention}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  auto take = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  try {
    take("image_size", c.image_size);
    take("patch", c.patch);
    take("d_model", c.d_model);
    take("n_heads", c.n_heads);
    take("n_blocks", c.n_blocks);
    take("ref_inject_last", c.ref_inject_last);
    take("temporal_on_odd", c.temporal_on_odd);
    take("motion_channels", c.motion_channels);
    take("frames", c.frames);
    take("image_channels", c.image_channels);
    take("audio_dim", c.audio_dim);
    take("audio_tokens", c.audio_tokens);
    take("mlp_ratio", c.mlp_ratio);
    take("driven_hidden", c.driven_hidden);
    take("masked_attention", c.masked_attention);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
  c.validate();
  return c;
}

// --- ParameterStore ------------------------------------------------------

Tensor& ParameterStore::add(const std::string& name, Tensor value) {
  if (params_.count(name)) throw ContractError("duplicate parameter " + name);
  if (!value.requires_grad()) value.set_requires_grad(true);
  return params_.emplace(name, std::move(value)).first->second;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter " + name);
  return it->second;
}

Tensor& ParameterStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter " + name);
  return it->second;
}

std::size_t ParameterStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

// --- free helpers --------------------------------------------------------

Tensor conv_in_expand(const Tensor& pretrained_weight, std::size_t extra_channels) {
  if (pretrained_weight.rank() != 4) {
    throw ShapeError("conv-in weight must be [d, C, p, p], got " +
                     shape_str(pretrained_weight.shape()));
  }
  const std::size_t d = pretrained_weight.dim(0), c = pretrained_weight.dim(1);
  const std::size_t k = pretrained_weight.dim(2) * pretrained_weight.dim(3);
  std::vector<double> out(d * (c + extra_channels) * k, 0.0);
  auto w = pretrained_weight.data();
  for (std::size_t o = 0; o < d; ++o)
    std::copy_n(w.begin() + o * c * k, c * k, out.begin() + o * (c + extra_channels) * k);
  Tensor expanded(Shape{d, c + extra_channels, pretrained_weight.dim(2), pretrained_weight.dim(3)},
                  std::move(out));
  expanded.set_requires_grad(pretrained_weight.requires_grad());
  return expanded;
}

Tensor patchify(const Tensor& x, std::size_t patch) {
  if (x.rank() != 4) throw ShapeError("patchify expects [F, C, H, W], got " + shape_str(x.shape()));
  const std::size_t f = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % patch || w % patch) throw ShapeError("patchify: size not divisible by patch");
  const std::size_t gh = h / patch, gw = w / patch, feat = c * patch * patch;
  std::vector<std::size_t> index;
  index.reserve(x.numel());
  for (std::size_t fi = 0; fi < f; ++fi)
    for (std::size_t ty = 0; ty < gh; ++ty)
      for (std::size_t tx = 0; tx < gw; ++tx)
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t py = 0; py < patch; ++py)
            for (std::size_t px = 0; px < patch; ++px)
              index.push_back(((fi * c + ci) * h + ty * patch + py) * w + tx * patch + px);
  return gather(x, std::move(index), {f, gh * gw, feat});
}

Tensor unpatchify(const Tensor& tokens, std::size_t channels, std::size_t height,
                  std::size_t width, std::size_t patch) {
  const std::size_t gh = height / patch, gw = width / patch, feat = channels * patch * patch;
  if (tokens.rank() != 3 || tokens.dim(1) != gh * gw || tokens.dim(2) != feat) {
    throw ShapeError("unpatchify: tokens " + shape_str(tokens.shape()) + " do not tile " +
                     std::to_string(channels) + "x" + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  const std::size_t f = tokens.dim(0);
  std::vector<std::size_t> index;
  index.reserve(tokens.numel());
  for (std::size_t fi = 0; fi < f; ++fi)
    for (std::size_t ci = 0; ci < channels; ++ci)
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const std::size_t tok = (y / patch) * gw + x / patch;
          const std::size_t k = (ci * patch + y % patch) * patch + x % patch;
          index.push_back((fi * gh * gw + tok) * feat + k);
        }
  return gather(tokens, std::move(index), {f, channels, height, width});
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  if (x.rank() != 4) throw ShapeError("upsample expects [F, C, h, w], got " + shape_str(x.shape()));
  const std::size_t f = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (factor == 1) return x;
  std::vector<std::size_t> index;
  index.reserve(x.numel() * factor * factor);
  for (std::size_t fc = 0; fc < f * c; ++fc)
    for (std::size_t y = 0; y < h * factor; ++y)
      for (std::size_t xx = 0; xx < w * factor; ++xx)
        index.push_back((fc * h + y / factor) * w + xx / factor);
  return gather(x, std::move(index), {f, c, h * factor, w * factor});
}

Tensor sinusoidal_embedding(double t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> e(dim, 0.0);
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    e[k] = std::cos(t * freq);
    e[half + k] = std::sin(t * freq);
  }
  return Tensor(Shape{dim}, std::move(e));
}

Tensor positional_embedding_2d(std::size_t grid, std::size_t dim) {
  const std::size_t quarter = dim / 4;
  std::vector<double> e(grid * grid * dim, 0.0);
  for (std::size_t y = 0; y < grid; ++y)
    for (std::size_t x = 0; x < grid; ++x) {
      double* row = e.data() + (y * grid + x) * dim;
      for (std::size_t k = 0; k < quarter; ++k) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(quarter));
        row[k] = std::sin(static_cast<double>(y) * omega);
        row[quarter + k] = std::cos(static_cast<double>(y) * omega);
        row[2 * quarter + k] = std::sin(static_cast<double>(x) * omega);
        row[3 * quarter + k] = std::cos(static_cast<double>(x) * omega);
      }
    }
  return Tensor(Shape{grid * grid, dim}, std::move(e));
}

// --- MixedModalDiT -------------------------------------------------------

MixedModalDiT::MixedModalDiT(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  init_transformer("denoiser", cfg_.image_channels, true, rng);
  init_transformer("reference", cfg_.image_channels, false, rng);
  init_driven_encoder(rng);
  // Motion features join the latent on the channel axis; the conv-in keeps
  // its image-channel weights and starts the new slices at zero.
  Tensor& w = params_.get("denoiser.conv_in.weight");
  w = conv_in_expand(w, cfg_.motion_channels);
  pos_embed_ = positional_embedding_2d(cfg_.grid(), cfg_.d_model);
}

void MixedModalDiT::init_transformer(const std::string& prefix, std::size_t in_channels,
                                     bool with_final, Rng& rng) {
  const std::size_t d = cfg_.d_model, pp = cfg_.patch * cfg_.patch, hidden = cfg_.mlp_ratio * d;
  params_.add(prefix + ".conv_in.weight",
              normal_init({d, in_channels, cfg_.patch, cfg_.patch}, rng, fan_in_std(in_channels * pp)));
  params_.add(prefix + ".conv_in.bias", zero_init({d}));
  params_.add(prefix + ".t_embed.fc1.weight", normal_init({d, d}, rng, fan_in_std(d)));
  params_.add(prefix + ".t_embed.fc1.bias", zero_init({d}));
  params_.add(prefix + ".t_embed.fc2.weight", normal_init({d, d}, rng, fan_in_std(d)));
  params_.add(prefix + ".t_embed.fc2.bias", zero_init({d}));
  for (std::size_t i = 0; i < cfg_.n_blocks; ++i) {
    const std::string b = block_prefix(prefix, i);
    // Modulation starts as a plain pre-norm block: zero shift/scale, unit gates.
    params_.add(b + "ada.weight", zero_init({d, 6 * d}));
    Tensor ada_bias = zero_init({6 * d});
    auto ab = ada_bias.mutable_data();
    std::fill(ab.begin() + 2 * d, ab.begin() + 3 * d, 1.0);
    std::fill(ab.begin() + 5 * d, ab.begin() + 6 * d, 1.0);
    params_.add(b + "ada.bias", std::move(ada_bias));
    for (const char* n : {"q", "k", "v", "o"})
      params_.add(b + "attn." + n + ".weight", normal_init({d, d}, rng, fan_in_std(d)));
    params_.add(b + "attn.o.bias", zero_init({d}));
    params_.add(b + "mlp.fc1.weight", normal_init({d, hidden}, rng, fan_in_std(d)));
    params_.add(b + "mlp.fc1.bias", zero_init({hidden}));
    params_.add(b + "mlp.fc2.weight", normal_init({hidden, d}, rng, fan_in_std(hidden)));
    params_.add(b + "mlp.fc2.bias", zero_init({d}));
  }
  if (with_final) {
    params_.add(prefix + ".final.ada.weight", zero_init({d, 2 * d}));
    params_.add(prefix + ".final.ada.bias", zero_init({2 * d}));
    params_.add(prefix + ".final.proj.weight",
                normal_init({d, cfg_.image_channels * pp}, rng, 0.02));
    params_.add(prefix + ".final.proj.bias", zero_init({cfg_.image_channels * pp}));
  }
}

void MixedModalDiT::init_driven_encoder(Rng& rng) {
  std::size_t in = cfg_.image_channels;
  for (std::size_t l = 0; l < kEncoderLayers; ++l) {
    const std::size_t out = l + 1 == kEncoderLayers ? cfg_.motion_channels : cfg_.driven_hidden;
    const std::string n = "driven.conv" + std::to_string(l);
    const std::size_t k = encoder_layer(l, log2_exact(cfg_.patch)).kernel;
    params_.add(n + ".weight", normal_init({out, in, k, k}, rng, fan_in_std(in * k * k)));
    params_.add(n + ".bias", zero_init({out}));
    in = out;
  }
}

void MixedModalDiT::add_audio_layers(std::uint64_t seed) {
  if (has_audio_) return;
  Rng rng(seed);
  const std::size_t d = cfg_.d_model;
  for (std::size_t i = 0; i < cfg_.n_blocks; ++i) {
    const std::string b = block_prefix("denoiser", i) + "audio.";
    params_.add(b + "q.weight", normal_init({d, d}, rng, fan_in_std(d)));
    params_.add(b + "k.weight", normal_init({cfg_.audio_dim, d}, rng, fan_in_std(cfg_.audio_dim)));
    params_.add(b + "v.weight", normal_init({cfg_.audio_dim, d}, rng, fan_in_std(cfg_.audio_dim)));
    params_.add(b + "o.weight", normal_init({d, d}, rng, fan_in_std(d)));
    params_.add(b + "o.bias", zero_init({d}));
  }
  has_audio_ = true;
}

void MixedModalDiT::add_temporal_layers(std::uint64_t seed) {
  if (has_temporal_) return;
  Rng rng(seed);
  const std::size_t d = cfg_.d_model;
  for (std::size_t i = 0; i < cfg_.n_blocks; ++i) {
    if (!cfg_.has_temporal_slot(i)) continue;
    const std::string b = block_prefix("denoiser", i) + "temporal.";
    for (const char* n : {"q", "k", "v"})
      params_.add(b + n + ".weight", normal_init({d, d}, rng, fan_in_std(d)));
    params_.add(b + "o.weight", zero_init({d, d}));
    params_.add(b + "o.bias", zero_init({d}));
  }
  has_temporal_ = true;
}

bool MixedModalDiT::has_motion_pathway() const {
  return p("denoiser.conv_in.weight").dim(1) > cfg_.image_channels;
}

void MixedModalDiT::drop_motion_pathway() {
  Tensor& w = params_.get("denoiser.conv_in.weight");
  Tensor base = slice(w, 1, 0, cfg_.image_channels).detach();
  base.set_requires_grad(true);
  w = base;
}

Tensor MixedModalDiT::driven_encode(const Tensor& driving_frame) const {
  require_image(driving_frame, "driven_encode");
  if (driving_frame.dim(1) != cfg_.image_size || driving_frame.dim(2) != cfg_.image_size) {
    throw ShapeError("driving frame " + shape_str(driving_frame.shape()) +
                     " does not match image_size " + std::to_string(cfg_.image_size));
  }
  const std::size_t downsample = log2_exact(cfg_.patch);
  Tensor h = driving_frame;
  for (std::size_t l = 0; l < kEncoderLayers; ++l) {
    const std::string n = "driven.conv" + std::to_string(l);
    const EncoderLayer layer = encoder_layer(l, downsample);
    h = conv2d(h, p(n + ".weight"), p(n + ".bias"), layer.stride, layer.pad);
    if (l + 1 < kEncoderLayers) h = silu(h);
  }
  return h;
}

Tensor MixedModalDiT::conv_in(const std::string& prefix, const Tensor& features) const {
  const Tensor& w = p(prefix + ".conv_in.weight");
  const Tensor flat = transpose(reshape(w, {w.dim(0), w.numel() / w.dim(0)}));
  return add_rowvec(linear(features, flat, p(prefix + ".conv_in.bias")), pos_embed_);
}

Tensor MixedModalDiT::embed_tokens(const Tensor& noisy_latent, const Tensor& motion) const {
  Tensor x = noisy_latent;
  if (has_motion_pathway()) {
    const std::size_t f = noisy_latent.dim(0), g = cfg_.grid();
    Tensor m = motion.defined() ? motion : Tensor::zeros({f, cfg_.motion_channels, g, g});
    if (m.shape() != Shape{f, cfg_.motion_channels, g, g}) {
      throw ShapeError("motion features " + shape_str(m.shape()) + " do not match " +
                       std::to_string(f) + " frames of the token grid");
    }
    x = concat({noisy_latent, upsample_nearest(m, cfg_.patch)}, 1);
  } else if (motion.defined()) {
    throw ConfigError("model has no motion pathway but motion features were given");
  }
  return conv_in("denoiser", patchify(x, cfg_.patch));
}

Tensor MixedModalDiT::temb_for(const std::string& prefix, int timestep) const {
  const Tensor s = sinusoidal_embedding(static_cast<double>(timestep), cfg_.d_model);
  const Tensor h = silu(linear(s, p(prefix + ".t_embed.fc1.weight"), p(prefix + ".t_embed.fc1.bias")));
  return linear(h, p(prefix + ".t_embed.fc2.weight"), p(prefix + ".t_embed.fc2.bias"));
}

Tensor MixedModalDiT::timestep_embedding(int timestep) const { return temb_for("denoiser", timestep); }

Tensor MixedModalDiT::run_block(std::size_t index, const Tensor& h, const Tensor& temb,
                                const DenoiserInputs& in) const {
  return run_stack_block("denoiser", index, h, temb, &in);
}

Tensor MixedModalDiT::run_stack_block(const std::string& prefix, std::size_t index,
                                      const Tensor& h, const Tensor& temb,
                                      const DenoiserInputs* in) const {
  if (index >= cfg_.n_blocks) throw ContractError("block index out of range");
  const std::string b = block_prefix(prefix, index);
  const std::size_t d = cfg_.d_model, frames = h.dim(0), tokens = h.dim(1);
  const AttentionConfig acfg = cfg_.attention();

  const Tensor mod = linear(silu(temb), p(b + "ada.weight"), p(b + "ada.bias"));
  auto chunk = [&](std::size_t k) { return slice(mod, 0, k * d, (k + 1) * d); };

  // Spatial self-attention; the last ref_inject_last denoiser blocks append
  // the reference tokens to the keys and values.
  const Tensor xn = modulate(layer_norm(h), chunk(0), chunk(1));
  const Tensor q = linear(xn, p(b + "attn.q.weight"));
  Tensor k = linear(xn, p(b + "attn.k.weight"));
  Tensor v = linear(xn, p(b + "attn.v.weight"));
  std::size_t n_ref = 0;
  if (in && cfg_.injects_reference(index)) {
    const std::size_t slot = index + cfg_.ref_inject_last - cfg_.n_blocks;
    if (in->reference.size() != cfg_.ref_inject_last) {
      throw ShapeError("expected " + std::to_string(cfg_.ref_inject_last) +
                       " reference feature maps, got " + std::to_string(in->reference.size()));
    }
    const Tensor rn = layer_norm(in->reference[slot]);
    n_ref = rn.dim(0);
    k = concat({k, repeat_frames(linear(rn, p(b + "attn.k.weight")), frames)}, 1);
    v = concat({v, repeat_frames(linear(rn, p(b + "attn.v.weight")), frames)}, 1);
  }
  const OutputProjection out{p(b + "attn.o.weight"), p(b + "attn.o.bias")};
  Tensor attn;
  if (in && cfg_.masked_attention && !in->mouth_driven && !in->roles.empty()) {
    if (in->roles.size() != frames) {
      throw ShapeError("expected one token role map per frame (" + std::to_string(frames) +
                       "), got " + std::to_string(in->roles.size()));
    }
    std::vector<TokenRoleMap> roles;
    roles.reserve(frames);
    for (const auto& r : in->roles) {
      if (r.num_latent() != tokens) throw ShapeError("token role map does not cover the token grid");
      TokenRoleMap block_roles = r;
      block_roles.key_roles.assign(tokens, TokenRole::kLatent);
      block_roles.key_roles.resize(tokens + n_ref, TokenRole::kReference);
      roles.push_back(std::move(block_roles));
    }
    attn = masked_spatial_attention(q, k, v, roles, false, out, acfg);
  } else {
    attn = mhsa(q, k, v, out, acfg);
  }
  Tensor x = add(h, mul_rowvec(attn, chunk(2)));

  // Temporal attention across frames at each token position.
  if (prefix == "denoiser" && has_temporal_ && cfg_.has_temporal_slot(index)) {
    const std::string t = b + "temporal.";
    const Tensor seq = permute(x, {1, 0, 2});  // [T, F, d]
    const Tensor tn = layer_norm(seq);
    const Tensor ta = mhsa(linear(tn, p(t + "q.weight")), linear(tn, p(t + "k.weight")),
                           linear(tn, p(t + "v.weight")), {p(t + "o.weight"), p(t + "o.bias")}, acfg);
    x = add(x, permute(ta, {1, 0, 2}));
  }

  if (prefix == "denoiser" && in && in->audio.defined()) {
    if (!has_audio_) throw ConfigError("audio given to a model without audio attention layers");
    const std::string a = b + "audio.";
    const AudioAttentionWeights aw{p(a + "q.weight"), p(a + "k.weight"), p(a + "v.weight"),
                                   {p(a + "o.weight"), p(a + "o.bias")}};
    x = audio_cross_attention(x, in->audio, in->audio_scale, aw, acfg);
  }

  const Tensor xn2 = modulate(layer_norm(x), chunk(3), chunk(4));
  const Tensor hidden = gelu(linear(xn2, p(b + "mlp.fc1.weight"), p(b + "mlp.fc1.bias")));
  const Tensor mlp = linear(hidden, p(b + "mlp.fc2.weight"), p(b + "mlp.fc2.bias"));
  return add(x, mul_rowvec(mlp, chunk(5)));
}

std::vector<Tensor> MixedModalDiT::reference_features(const Tensor& reference_image) const {
  require_image(reference_image, "reference_features");
  if (reference_image.dim(1) != cfg_.image_size || reference_image.dim(2) != cfg_.image_size) {
    throw ShapeError("reference image does not match image_size");
  }
  const std::size_t s = cfg_.image_size;
  const Tensor latent = reshape(add_scalar(scale(reference_image, 2.0), -1.0), {1, cfg_.image_channels, s, s});
  Tensor h = conv_in("reference", patchify(latent, cfg_.patch));
  const Tensor temb = temb_for("reference", 0);
  std::vector<Tensor> feats;
  const std::size_t first = cfg_.n_blocks - cfg_.ref_inject_last;
  for (std::size_t i = 0; i < cfg_.n_blocks; ++i) {
    if (i >= first) feats.push_back(reshape(h, {h.dim(1), h.dim(2)}));
    if (i + 1 < cfg_.n_blocks) h = run_stack_block("reference", i, h, temb, nullptr);
  }
  return feats;
}

Tensor MixedModalDiT::forward(const Tensor& noisy_latent, int timestep, const DenoiserInputs& in,
                              ForwardTrace* trace) const {
  const std::size_t s = cfg_.image_size;
  if (noisy_latent.rank() != 4 || noisy_latent.dim(1) != cfg_.image_channels ||
      noisy_latent.dim(2) != s || noisy_latent.dim(3) != s) {
    throw ShapeError("noisy latent " + shape_str(noisy_latent.shape()) + " does not match [F, " +
                     std::to_string(cfg_.image_channels) + ", " + std::to_string(s) + ", " +
                     std::to_string(s) + "]");
  }
  const std::size_t frames = noisy_latent.dim(0);
  if (in.audio.defined() &&
      in.audio.shape() != Shape{frames, cfg_.audio_tokens, cfg_.audio_dim}) {
    throw ShapeError("audio tokens " + shape_str(in.audio.shape()) + " do not match " +
                     std::to_string(frames) + " frames");
  }
  if (!in.roles.empty() && in.roles.size() != frames) {
    throw ShapeError("token role maps (" + std::to_string(in.roles.size()) +
                     ") do not match frame count " + std::to_string(frames));
  }
  Tensor h = embed_tokens(noisy_latent, in.motion);
  const Tensor temb = timestep_embedding(timestep);
  for (std::size_t i = 0; i < cfg_.n_blocks; ++i) {
    h = run_stack_block("denoiser", i, h, temb, &in);
    if (trace) trace->block_outputs.push_back(h);
  }
  const std::size_t d = cfg_.d_model;
  const Tensor mod = linear(silu(temb), p("denoiser.final.ada.weight"), p("denoiser.final.ada.bias"));
  const Tensor y = modulate(layer_norm(h), slice(mod, 0, 0, d), slice(mod, 0, d, 2 * d));
  const Tensor out = linear(y, p("denoiser.final.proj.weight"), p("denoiser.final.proj.bias"));
  return unpatchify(out, cfg_.image_channels, s, s, cfg_.patch);
}

bool MixedModalDiT::is_temporal_param(const std::string& name) {
  return name.find(".temporal.") != std::string::npos;
}

bool MixedModalDiT::is_attention_param(const std::string& name) {
  return name.find(".attn.") != std::string::npos || name.find(".audio.") != std::string::npos;
}

void MixedModalDiT::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  TensorArchive archive;
  for (const auto& [name, t] : params_) archive.tensors.emplace(name, t.detach());
  archive.metadata = {{"config", cfg_.to_json()},
                      {"has_audio", has_audio_},
                      {"has_temporal", has_temporal_},
                      {"has_motion", has_motion_pathway()}};
  if (!extra.is_null()) archive.metadata["extra"] = extra;
  save_archive(path, archive);
}

MixedModalDiT MixedModalDiT::load(const std::filesystem::path& path,
                                  const std::optional<ModelConfig>& expected) {
  TensorArchive archive = load_archive(path);
  if (!archive.metadata.contains("config")) throw IoError(path.string() + ": checkpoint has no config");
  const ModelConfig cfg = ModelConfig::from_json(archive.metadata.at("config"));
  if (expected && !(*expected == cfg)) {
    throw ConfigError(path.string() + ": checkpoint config " + cfg.to_json().dump() +
                      " differs from expected " + expected->to_json().dump());
  }
  MixedModalDiT model;
  model.cfg_ = cfg;
  model.pos_embed_ = positional_embedding_2d(cfg.grid(), cfg.d_model);
  model.has_audio_ = archive.metadata.value("has_audio", false);
  model.has_temporal_ = archive.metadata.value("has_temporal", false);
  for (auto& [name, t] : archive.tensors) model.params_.add(name, t);
  return model;
}

}  // namespace mmdit
