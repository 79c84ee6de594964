#include "mmdit/attention.hpp"

#include "mmdit/ops.hpp"

namespace mmdit {

void AttentionConfig::validate() const {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (d_head() < 4) throw ConfigError("attention head width must be at least 4");
}

TokenRoleMap TokenRoleMap::from_masks(const RegionMaskSet& masks, std::size_t n_reference) {
  TokenRoleMap roles;
  roles.eye = masks.token_eye;
  roles.mouth = masks.token_mouth;
  roles.key_roles.assign(roles.eye.size(), TokenRole::kLatent);
  roles.key_roles.resize(roles.eye.size() + n_reference, TokenRole::kReference);
  return roles;
}

TokenRoleMap TokenRoleMap::plain(std::size_t n_latent, std::size_t n_reference) {
  TokenRoleMap roles;
  roles.eye.assign(n_latent, 0);
  roles.mouth.assign(n_latent, 0);
  roles.key_roles.assign(n_latent, TokenRole::kLatent);
  roles.key_roles.resize(n_latent + n_reference, TokenRole::kReference);
  return roles;
}

void TokenRoleMap::validate() const {
  if (eye.size() != mouth.size()) throw ContractError("token role map: region flag lengths differ");
  if (key_roles.size() < eye.size()) throw ContractError("token role map: fewer keys than latents");
  for (std::size_t j = 0; j < key_roles.size(); ++j) {
    const TokenRole expected = j < eye.size() ? TokenRole::kLatent : TokenRole::kReference;
    if (key_roles[j] != expected) {
      throw ContractError("token role map: keys must be ordered [latent | reference]");
    }
  }
}

Tensor mhsa(const Tensor& q, const Tensor& k, const Tensor& v, const OutputProjection& out,
            const AttentionConfig& cfg) {
  cfg.validate();
  if (q.shape().back() != cfg.d_model) {
    throw ShapeError("mhsa: query width " + std::to_string(q.shape().back()) +
                     " does not match d_model " + std::to_string(cfg.d_model));
  }
  return linear(attention(q, k, v, cfg.n_heads), out.weight, out.bias);
}

Tensor region_attention_mask(const TokenRoleMap& roles, const AttentionConfig& cfg) {
  roles.validate();
  const std::size_t tq = roles.num_latent(), tk = roles.num_keys();
  std::vector<double> mask(tq * tk, 0.0);
  for (std::size_t i = 0; i < tq; ++i) {
    if (!roles.mouth[i]) continue;
    std::size_t open = tk;
    for (std::size_t j = 0; j < tq; ++j) {
      if (roles.eye[j]) {
        mask[i * tk + j] = cfg.neg_inf;
        --open;
      }
    }
    if (open == 0) {
      throw ContractError("masked attention: mouth query " + std::to_string(i) +
                          " has every key excluded");
    }
  }
  return Tensor(Shape{tq, tk}, std::move(mask));
}

Tensor masked_spatial_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                std::span<const TokenRoleMap> roles, bool mouth_driven,
                                const OutputProjection& out, const AttentionConfig& cfg) {
  if (mouth_driven) return mhsa(q, k, v, out, cfg);
  cfg.validate();
  const std::size_t batch = q.rank() == 3 ? q.dim(0) : 1;
  const std::size_t tq = q.shape()[q.rank() - 2];
  const std::size_t tk = k.shape()[k.rank() - 2];
  if (roles.empty() || (roles.size() != 1 && roles.size() != batch)) {
    throw ShapeError("masked attention: " + std::to_string(roles.size()) +
                     " role maps for batch of " + std::to_string(batch));
  }
  for (const auto& r : roles) {
    if (r.num_latent() != tq || r.num_keys() != tk) {
      throw ShapeError("masked attention: role map covers " + std::to_string(r.num_latent()) +
                       "x" + std::to_string(r.num_keys()) + " tokens, logits are " +
                       std::to_string(tq) + "x" + std::to_string(tk));
    }
  }
  Tensor mask;
  if (roles.size() == 1) {
    mask = region_attention_mask(roles[0], cfg);
  } else {
    std::vector<Tensor> parts;
    parts.reserve(batch);
    for (const auto& r : roles) parts.push_back(reshape(region_attention_mask(r, cfg), {1, tq, tk}));
    mask = concat(parts, 0);
  }
  if (q.shape().back() != cfg.d_model) {
    throw ShapeError("masked attention: query width does not match d_model");
  }
  return linear(attention(q, k, v, cfg.n_heads, mask), out.weight, out.bias);
}

Tensor audio_cross_attention(const Tensor& f, const Tensor& audio, double audio_scale,
                             const AudioAttentionWeights& w, const AttentionConfig& cfg) {
  if (!(audio_scale >= 0.0)) throw ContractError("audio_scale must be non-negative");
  if (audio.shape().back() != w.wk.dim(0) || audio.shape().back() != w.wv.dim(0)) {
    throw ShapeError("audio features of width " + std::to_string(audio.shape().back()) +
                     " do not match the audio projection " + shape_str(w.wk.shape()));
  }
  if (f.rank() != audio.rank() || (f.rank() == 3 && f.dim(0) != audio.dim(0))) {
    throw ShapeError("audio cross-attention: features " + shape_str(f.shape()) +
                     " and audio " + shape_str(audio.shape()) + " are not aligned per frame");
  }
  if (audio_scale == 0.0) return f;
  const Tensor q = linear(f, w.wq);
  const Tensor k = linear(audio, w.wk);
  const Tensor v = linear(audio, w.wv);
  return add(f, scale(mhsa(q, k, v, w.out, cfg), audio_scale));
}

}  // namespace mmdit
