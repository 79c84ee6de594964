#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "mmdit/face_layout.hpp"
#include "mmdit/model.hpp"
#include "mmdit/ops.hpp"
#include "support/oracles.hpp"

using namespace mmdit;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.image_size = 8;
  c.patch = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_blocks = 4;
  c.ref_inject_last = 2;
  c.motion_channels = 2;
  c.audio_dim = 4;
  c.audio_tokens = 2;
  c.driven_hidden = 4;
  return c;
}

// Role maps for an 8x8 image at patch 2 (4x4 grid): eye row 1, mouth row 3.
TokenRoleMap grid_roles() {
  TokenRoleMap r = TokenRoleMap::plain(16, 0);
  for (std::size_t x = 0; x < 4; ++x) r.eye[4 + x] = 1, r.mouth[12 + x] = 1;
  return r;
}

struct Fixture {
  ModelConfig cfg = small_config();
  MixedModalDiT model{cfg, 7};
  Rng rng{3};
  Tensor ref = Tensor::uniform({3, 8, 8}, rng, 0.0, 1.0);
  Tensor latent = Tensor::randn({2, 3, 8, 8}, rng);
  Tensor motion = Tensor::randn({2, 2, 4, 4}, rng);
  Tensor audio = Tensor::randn({2, 2, 4}, rng);

  DenoiserInputs inputs(bool with_audio = false) const {
    DenoiserInputs in;
    in.motion = motion;
    in.reference = model.reference_features(ref);
    in.roles = {grid_roles(), grid_roles()};
    in.mouth_driven = false;
    if (with_audio) in.audio = audio;
    return in;
  }
};

void perturb(MixedModalDiT& m, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& [name, p] : m.params())
    for (auto& v : p.mutable_data()) v += 0.05 * rng.normal();
}

}  // namespace

TEST_CASE("config validation and JSON round trip") {
  ModelConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  CHECK(ModelConfig::from_json(c.to_json()) == c);
  ModelConfig odd = c;
  odd.n_blocks = 3;
  odd.ref_inject_last = 1;
  CHECK_THROWS_AS(odd.validate(), ConfigError);
  ModelConfig deep = c;
  deep.ref_inject_last = 5;
  CHECK_THROWS_AS(deep.validate(), ConfigError);
  ModelConfig uneven = c;
  uneven.patch = 3;
  CHECK_THROWS_AS(uneven.validate(), ConfigError);
}

TEST_CASE("construction is deterministic in the seed") {
  const MixedModalDiT a(small_config(), 5), b(small_config(), 5), c(small_config(), 6);
  bool all_equal = true, any_diff = false;
  for (const auto& [name, p] : a.params()) {
    all_equal = all_equal && bitwise_equal(p, b.params().get(name));
    any_diff = any_diff || !bitwise_equal(p, c.params().get(name));
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("patchify and unpatchify are inverse; features ordered (c, py, px)") {
  Rng rng(1);
  const Tensor x = Tensor::randn({2, 3, 8, 8}, rng);
  const Tensor tok = patchify(x, 2);
  REQUIRE(tok.shape() == Shape{2, 16, 12});
  CHECK(bitwise_equal(unpatchify(tok, 3, 8, 8, 2), x));
  // Token (row 1, col 2) of frame 1, feature (c=2, py=1, px=0).
  CHECK(tok.at({1, 6, 2 * 4 + 1 * 2 + 0}) == x.at({1, 2, 3, 4}));
}

TEST_CASE("sinusoidal and positional embeddings") {
  const Tensor e = sinusoidal_embedding(10.0, 8);
  for (std::size_t i = 0; i < 4; ++i) {
    const double f = std::pow(10000.0, -double(i) / 4.0);
    CHECK(std::abs(e[i] - std::cos(10.0 * f)) < 1e-12);
    CHECK(std::abs(e[4 + i] - std::sin(10.0 * f)) < 1e-12);
  }
  const Tensor pe = positional_embedding_2d(4, 16);
  CHECK(pe.shape() == Shape{16, 16});
  // Distinct positions get distinct embeddings.
  for (std::size_t a = 0; a < 16; ++a)
    for (std::size_t b = a + 1; b < 16; ++b)
      CHECK(max_abs_diff(slice(pe, 0, a, a + 1), slice(pe, 0, b, b + 1)) > 1e-3);
}

TEST_CASE("conv-in expansion copies the base slices and zeros the rest") {
  Rng rng(2);
  const Tensor w = Tensor::randn({16, 3, 2, 2}, rng);
  const Tensor e = conv_in_expand(w, 4);
  REQUIRE(e.shape() == Shape{16, 7, 2, 2});
  double n0 = 0.0, n1 = 0.0;
  for (std::size_t o = 0; o < 16; ++o)
    for (std::size_t c = 0; c < 7; ++c)
      for (std::size_t k = 0; k < 4; ++k) {
        const double v = e.at({o, c, k / 2, k % 2});
        if (c < 3) CHECK(v == w.at({o, c, k / 2, k % 2}));
        else CHECK(v == 0.0);
        n1 += v * v;
      }
  for (double v : w.data()) n0 += v * v;
  CHECK(n0 == n1);
}

TEST_CASE("forward with zero motion equals the unexpanded model bitwise") {
  Fixture f;
  CHECK(f.model.has_motion_pathway());
  DenoiserInputs in = f.inputs();
  in.motion = Tensor::zeros({2, 2, 4, 4});
  const Tensor expanded = f.model.forward(f.latent, 500, in);
  MixedModalDiT base = f.model;
  base.params() = ParameterStore();
  for (const auto& [name, p] : f.model.params()) base.params().add(name, p.detach());
  base.drop_motion_pathway();
  CHECK_FALSE(base.has_motion_pathway());
  DenoiserInputs none = in;
  none.motion = Tensor{};
  CHECK(bitwise_equal(base.forward(f.latent, 500, none), expanded));
  CHECK(bitwise_equal(f.model.forward(f.latent, 500, none), expanded));
}

TEST_CASE("motion slices receive gradient after one step with nonzero motion") {
  Fixture f;
  Tensor& w = f.model.params().get("denoiser.conv_in.weight");
  w.set_requires_grad();
  sum(square(f.model.forward(f.latent, 300, f.inputs()))).backward();
  double motion_grad = 0.0;
  for (std::size_t o = 0; o < w.dim(0); ++o)
    for (std::size_t c = 3; c < w.dim(1); ++c)
      for (std::size_t k = 0; k < 4; ++k) motion_grad += std::abs(w.grad()[((o * w.dim(1)) + c) * 4 + k]);
  CHECK(motion_grad > 0.0);
}

TEST_CASE("driven encoder output matches the token grid") {
  Fixture f;
  const Tensor m = f.model.driven_encode(f.ref);
  CHECK(m.shape() == Shape{2, 4, 4});
  MixedModalDiT z = f.model;
  for (auto& [name, p] : z.params())
    if (name.find("driven.") == 0 && name.find(".bias") != std::string::npos)
      for (auto& v : p.mutable_data()) v = 0.0;
  const Tensor zero_out = z.driven_encode(Tensor::zeros({3, 8, 8}));
  for (double v : zero_out.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(f.model.driven_encode(Tensor::zeros({3, 6, 6})), ShapeError);
}

TEST_CASE("driven encoder cells see their patch and a one-pixel border") {
  Fixture f;
  const Tensor base = f.model.driven_encode(f.ref);
  // Perturb pixel (py, px); only cells whose bordered patch contains it move.
  for (std::size_t py : {0, 3, 5}) {
    for (std::size_t px : {1, 4, 6}) {
      Tensor img = f.ref.detach();
      for (std::size_t c = 0; c < 3; ++c) img.mutable_data()[(c * 8 + py) * 8 + px] += 0.5;
      const Tensor out = f.model.driven_encode(img);
      for (std::size_t gy = 0; gy < 4; ++gy)
        for (std::size_t gx = 0; gx < 4; ++gx) {
          const bool near = py + 1 >= 2 * gy && py <= 2 * gy + 2 && px + 1 >= 2 * gx && px <= 2 * gx + 2;
          bool same = true;
          for (std::size_t c = 0; c < 2; ++c) same = same && out.at({c, gy, gx}) == base.at({c, gy, gx});
          if (!near) CHECK(same);
        }
    }
  }
}

TEST_CASE("shifting the driving frame by one patch shifts the features by one cell") {
  Fixture f;
  Rng rng(14);
  Tensor img = Tensor::zeros({3, 8, 8});
  // Content away from the border so the shift does not cross the padding.
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 2; y < 4; ++y)
      for (std::size_t x = 2; x < 4; ++x) img.mutable_data()[(c * 8 + y) * 8 + x] = rng.uniform();
  Tensor shifted = Tensor::zeros({3, 8, 8});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 6; ++x) shifted.mutable_data()[(c * 8 + y + 2) * 8 + x + 2] = img[(c * 8 + y) * 8 + x];
  const Tensor a = f.model.driven_encode(img), b = f.model.driven_encode(shifted);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t gy = 0; gy < 3; ++gy)
      for (std::size_t gx = 0; gx < 3; ++gx) CHECK(b.at({c, gy + 1, gx + 1}) == doctest::Approx(a.at({c, gy, gx})).epsilon(1e-12));
}

TEST_CASE("reference features: one per injecting block, deterministic") {
  Fixture f;
  const auto a = f.model.reference_features(f.ref), b = f.model.reference_features(f.ref);
  REQUIRE(a.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(a[i].shape() == Shape{16, 16});
    CHECK(bitwise_equal(a[i], b[i]));
  }
}

TEST_CASE("reference injection only reaches the last blocks") {
  Fixture f;
  perturb(f.model, 1);
  DenoiserInputs in = f.inputs();
  DenoiserInputs zeroed = in;
  for (auto& r : zeroed.reference) r = Tensor::zeros(r.shape());
  ForwardTrace ta, tb;
  f.model.forward(f.latent, 200, in, &ta);
  f.model.forward(f.latent, 200, zeroed, &tb);
  CHECK(bitwise_equal(ta.block_outputs[0], tb.block_outputs[0]));
  CHECK(bitwise_equal(ta.block_outputs[1], tb.block_outputs[1]));
  CHECK(max_abs_diff(ta.block_outputs[2], tb.block_outputs[2]) > 1e-6);
  CHECK(max_abs_diff(ta.block_outputs[3], tb.block_outputs[3]) > 1e-6);
}

TEST_CASE("output shape, audio gating and frame independence") {
  Fixture f;
  f.model.add_audio_layers(11);
  perturb(f.model, 2);
  DenoiserInputs in = f.inputs(true);
  const Tensor y = f.model.forward(f.latent, 100, in);
  CHECK(y.shape() == f.latent.shape());
  in.audio_scale = 0.0;
  const Tensor a = f.model.forward(f.latent, 100, in);
  in.audio = scale(f.audio, -3.0);
  CHECK(bitwise_equal(a, f.model.forward(f.latent, 100, in)));

  // Without temporal layers frames do not interact.
  DenoiserInputs one = f.inputs(true);
  one.motion = slice(f.motion, 0, 1, 2);
  one.audio = slice(f.audio, 0, 1, 2);
  one.roles = {grid_roles()};
  const Tensor solo = f.model.forward(slice(f.latent, 0, 1, 2), 100, one);
  CHECK(max_abs_diff(solo, slice(y, 0, 1, 2)) < 1e-12);
  CHECK_THROWS_AS(MixedModalDiT(small_config(), 1).forward(f.latent, 100, f.inputs(true)), ConfigError);
}

TEST_CASE("temporal layers sit on odd blocks and start as an identity") {
  Fixture f;
  perturb(f.model, 3);
  const DenoiserInputs in = f.inputs();
  const Tensor before = f.model.forward(f.latent, 50, in);
  f.model.add_temporal_layers(4);
  for (std::size_t i = 0; i < 4; ++i) {
    const bool present = f.model.params().contains("denoiser.blocks." + std::to_string(i) + ".temporal.q.weight");
    CHECK(present == (i % 2 == 1));
  }
  CHECK(bitwise_equal(f.model.forward(f.latent, 50, in), before));
  for (const auto& [name, p] : f.model.params()) {
    CHECK((name.find("reference.") != 0 || name.find("temporal") == std::string::npos));
    if (MixedModalDiT::is_temporal_param(name)) CHECK_FALSE(MixedModalDiT::is_attention_param(name));
  }
  // Once trained, temporal layers mix frames.
  for (auto& [name, p] : f.model.params())
    if (name.find("temporal.o.weight") != std::string::npos) p = Tensor::randn(p.shape(), f.rng, 0.3);
  CHECK(max_abs_diff(f.model.forward(f.latent, 50, in), before) > 1e-6);
}

TEST_CASE("eye-token perturbation leaves mouth tokens unchanged at a masked block") {
  Fixture f;
  perturb(f.model, 4);
  DenoiserInputs in = f.inputs();
  in.roles = {grid_roles()};
  in.motion = Tensor{};
  Rng rng(5);
  const Tensor h = Tensor::randn({1, 16, 16}, rng);
  std::vector<double> hp(h.data().begin(), h.data().end());
  for (std::size_t t = 4; t < 8; ++t)
    for (std::size_t c = 0; c < 16; ++c) hp[t * 16 + c] += 5.0 * rng.normal();
  const Tensor temb = f.model.timestep_embedding(400);
  for (std::size_t block : {0, 3}) {
    const Tensor a = f.model.run_block(block, h, temb, in);
    const Tensor b = f.model.run_block(block, Tensor(h.shape(), hp), temb, in);
    for (std::size_t t = 12; t < 16; ++t)
      for (std::size_t c = 0; c < 16; ++c) CHECK(std::abs(a.at({0, t, c}) - b.at({0, t, c})) < 1e-5);
    // Plain tokens do see the change.
    CHECK(std::abs(a.at({0, 0, 0}) - b.at({0, 0, 0})) > 1e-9);
  }
}

TEST_CASE("end-to-end gradient check on a two-block model") {
  ModelConfig c = small_config();
  c.n_blocks = 2;
  c.ref_inject_last = 1;
  MixedModalDiT m(c, 9);
  m.add_audio_layers(10);
  perturb(m, 5);
  Rng rng(6);
  const Tensor latent = Tensor::randn({1, 3, 8, 8}, rng), ref = Tensor::uniform({3, 8, 8}, rng, 0.0, 1.0);
  const Tensor frame = Tensor::uniform({3, 8, 8}, rng, 0.0, 1.0), target = Tensor::randn({1, 3, 8, 8}, rng);
  DenoiserInputs in;
  in.audio = Tensor::randn({1, 2, 4}, rng);
  in.roles = {grid_roles()};
  in.mouth_driven = false;
  auto loss = [&] {
    DenoiserInputs full = in;
    full.motion = reshape(m.driven_encode(frame), {1, 2, 4, 4});
    full.reference = m.reference_features(ref);
    return sum(mul(m.forward(latent, 250, full), target));
  };
  for (const char* name : {"denoiser.blocks.1.attn.q.weight", "denoiser.blocks.0.audio.k.weight",
                           "reference.blocks.0.attn.v.weight", "driven.conv0.weight", "denoiser.conv_in.weight",
                           "denoiser.final.proj.weight"}) {
    CAPTURE(name);
    for (auto& [other, q] : m.params()) q.set_requires_grad(false);
    Tensor& p = m.params().get(name);
    p.set_requires_grad();
    loss().backward();
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    p.zero_grad();
    p.set_requires_grad(false);
    const Tensor saved = p.detach();
    std::vector<double> numeric(p.numel());
    for (std::size_t i = 0; i < p.numel(); ++i) {
      auto d = p.mutable_data();
      d[i] = saved[i] + 1e-6;
      const double up = loss().item();
      d[i] = saved[i] - 1e-6;
      const double down = loss().item();
      d[i] = saved[i];
      numeric[i] = (up - down) / 2e-6;
    }
    CHECK(oracle::max_rel_error(analytic, numeric) < 1e-3);
  }
}

TEST_CASE("checkpoints round-trip and validate the config") {
  Fixture f;
  f.model.add_audio_layers(1);
  const auto path = std::filesystem::temp_directory_path() / "mmdit_model_test.ckpt";
  f.model.save(path);
  const MixedModalDiT back = MixedModalDiT::load(path, f.cfg);
  CHECK(back.has_audio());
  CHECK_FALSE(back.has_temporal());
  for (const auto& [name, p] : f.model.params()) CHECK(bitwise_equal(p, back.params().get(name)));
  const DenoiserInputs in = f.inputs(true);
  CHECK(bitwise_equal(back.forward(f.latent, 10, in), f.model.forward(f.latent, 10, in)));
  ModelConfig other = f.cfg;
  other.d_model = 32;
  CHECK_THROWS_AS(MixedModalDiT::load(path, other), ConfigError);
  std::filesystem::remove(path);
}
