#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mmdit/masks.hpp"
#include "mmdit/tensor.hpp"

namespace mmdit {

struct AttentionConfig {
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  double neg_inf = -1e9;

  std::size_t d_head() const { return d_model / n_heads; }
  // d_model divisible by n_heads and d_head >= 4.
  void validate() const;
};

// Output projection applied after the heads are concatenated.
struct OutputProjection {
  Tensor weight;  // [d, d]
  Tensor bias;    // [d], optional
};

enum class TokenRole : std::uint8_t { kLatent, kReference };

// Keys are ordered [latent tokens | reference tokens]; latent key j and
// query j refer to the same grid position.
struct TokenRoleMap {
  std::vector<TokenRole> key_roles;
  std::vector<std::uint8_t> eye;    // per latent token
  std::vector<std::uint8_t> mouth;  // per latent token

  std::size_t num_latent() const { return eye.size(); }
  std::size_t num_keys() const { return key_roles.size(); }

  static TokenRoleMap from_masks(const RegionMaskSet& masks, std::size_t n_reference);
  // No region flags: every query behaves like standard attention.
  static TokenRoleMap plain(std::size_t n_latent, std::size_t n_reference);
  void validate() const;
};

// Multi-head attention over already projected q [.., Tq, d], k/v [.., Tk, d],
// followed by the output projection.
Tensor mhsa(const Tensor& q, const Tensor& k, const Tensor& v, const OutputProjection& out,
            const AttentionConfig& cfg);

// Additive logit mask realizing the region-decoupled attention: mouth-flagged
// queries get neg_inf on eye-flagged latent keys; reference keys and all
// other queries are untouched. Returns [Tq, Tk].
Tensor region_attention_mask(const TokenRoleMap& roles, const AttentionConfig& cfg);

// With mouth_driven the result is exactly mhsa. Otherwise mouth queries
// ignore eye-region latent keys and values. `roles` holds one map per batch
// entry, or a single map shared by all of them.
Tensor masked_spatial_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                std::span<const TokenRoleMap> roles, bool mouth_driven,
                                const OutputProjection& out, const AttentionConfig& cfg);

struct AudioAttentionWeights {
  Tensor wq;  // [d, d]
  Tensor wk;  // [d_audio, d]
  Tensor wv;  // [d_audio, d]
  OutputProjection out;
};

// f + audio_scale * MHAA(f, audio). Queries come from f ([T, d] or
// [F, T, d]); keys and values from the projected audio tokens ([A, d_a] or
// [F, A, d_a]). audio_scale == 0 returns f itself.
Tensor audio_cross_attention(const Tensor& f, const Tensor& audio, double audio_scale,
                             const AudioAttentionWeights& w, const AttentionConfig& cfg);

}  // namespace mmdit
