#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmdit/attention.hpp"
#include "mmdit/random.hpp"
#include "mmdit/tensor.hpp"

namespace mmdit {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch = 2;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_blocks = 8;
  std::size_t ref_inject_last = 4;
  bool temporal_on_odd = true;
  std::size_t motion_channels = 4;
  std::size_t frames = 8;

  std::size_t image_channels = 3;  // C_base of the conv-in
  std::size_t audio_dim = 32;      // width of one audio token
  std::size_t audio_tokens = 4;    // audio window per frame
  std::size_t mlp_ratio = 4;
  std::size_t driven_hidden = 16;  // Driven Encoder width
  // Region-decoupled spatial attention; off for the "w/o MA and ML" ablation.
  bool masked_attention = true;

  std::size_t grid() const { return image_size / patch; }
  std::size_t num_tokens() const { return grid() * grid(); }
  AttentionConfig attention() const { return {d_model, n_heads, -1e9}; }
  bool injects_reference(std::size_t block) const { return block + ref_inject_last >= n_blocks; }
  bool has_temporal_slot(std::size_t block) const { return temporal_on_odd && block % 2 == 1; }

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Name -> leaf tensor. Names are dotted paths ("denoiser.blocks.3.attn.q");
// iteration order is lexicographic, which fixes checkpoint layout.
class ParameterStore {
 public:
  Tensor& add(const std::string& name, Tensor value);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }
  std::size_t num_scalars() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Tensor> params_;
};

// Everything the denoiser needs beyond the noisy latent and timestep. All
// per-frame fields have the same frame count as the latent.
struct DenoiserInputs {
  Tensor motion;                        // [F, motion_channels, grid, grid]; undefined = zeros
  Tensor audio;                         // [F, audio_tokens, audio_dim]; undefined = absent
  std::vector<Tensor> reference;        // ref_inject_last entries of [T_ref, d]
  std::vector<TokenRoleMap> roles;      // one per frame
  bool mouth_driven = true;
  double audio_scale = 1.0;
};

// Optional probe into the forward pass.
struct ForwardTrace {
  std::vector<Tensor> block_outputs;  // [F, T, d] after each block
};

// The mixed-modal diffusion transformer: Denoising Transformer, Reference
// Transformer (separate weights, no audio/temporal layers), and Driven
// Encoder, over pixel-space latents.
class MixedModalDiT {
 public:
  // Fresh model: random transformer weights, conv-in expanded with zeroed
  // motion slices. No audio or temporal layers yet.
  MixedModalDiT(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  bool has_audio() const { return has_audio_; }
  bool has_temporal() const { return has_temporal_; }
  bool has_motion_pathway() const;

  // Stage transitions: audio cross-attention in every block (random init),
  // temporal attention in odd blocks (zero output projection so insertion
  // leaves the forward pass unchanged).
  void add_audio_layers(std::uint64_t seed);
  void add_temporal_layers(std::uint64_t seed);
  // Replaces the conv-in with its base-channel slice (the unexpanded model).
  void drop_motion_pathway();

  // [3, H, W] image in [0, 1] -> [motion_channels, grid, grid]. A cell
  // depends only on its own patch and a one-pixel border around it.
  Tensor driven_encode(const Tensor& driving_frame) const;
  // Hidden states entering each of the last ref_inject_last blocks.
  std::vector<Tensor> reference_features(const Tensor& reference_image) const;
  // eps prediction with the same shape as `noisy_latent` ([F, C, H, W]).
  Tensor forward(const Tensor& noisy_latent, int timestep, const DenoiserInputs& in,
                 ForwardTrace* trace = nullptr) const;

  // Single-block probe: h is [F, T, d], temb the timestep embedding.
  Tensor run_block(std::size_t index, const Tensor& h, const Tensor& temb,
                   const DenoiserInputs& in) const;
  Tensor embed_tokens(const Tensor& noisy_latent, const Tensor& motion) const;
  Tensor timestep_embedding(int timestep) const;

  // Parameter groups used for freezing.
  static bool is_temporal_param(const std::string& name);
  static bool is_attention_param(const std::string& name);

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static MixedModalDiT load(const std::filesystem::path& path,
                            const std::optional<ModelConfig>& expected = std::nullopt);

 private:
  MixedModalDiT() = default;
  void init_transformer(const std::string& prefix, std::size_t in_channels, bool with_final, Rng& rng);
  void init_driven_encoder(Rng& rng);
  Tensor conv_in(const std::string& prefix, const Tensor& features) const;
  Tensor run_stack_block(const std::string& prefix, std::size_t index, const Tensor& h,
                         const Tensor& temb, const DenoiserInputs* in) const;
  Tensor temb_for(const std::string& prefix, int timestep) const;
  const Tensor& p(const std::string& name) const { return params_.get(name); }

  ModelConfig cfg_;
  ParameterStore params_;
  Tensor pos_embed_;  // fixed [T, d]
  bool has_audio_ = false;
  bool has_temporal_ = false;
};

// conv-in expansion: the first C_base input-channel slices are copied and the
// remaining `extra_channels` slices are zero. weight: [d, C_base, p, p].
Tensor conv_in_expand(const Tensor& pretrained_weight, std::size_t extra_channels);

// Patchify [F, C, H, W] -> [F, T, C*p*p] with features ordered (c, py, px).
Tensor patchify(const Tensor& x, std::size_t patch);
Tensor unpatchify(const Tensor& tokens, std::size_t channels, std::size_t height,
                  std::size_t width, std::size_t patch);
// Nearest-neighbour upsampling of [F, C, h, w] by an integer factor.
Tensor upsample_nearest(const Tensor& x, std::size_t factor);

Tensor sinusoidal_embedding(double t, std::size_t dim);
Tensor positional_embedding_2d(std::size_t grid, std::size_t dim);

}  // namespace mmdit
