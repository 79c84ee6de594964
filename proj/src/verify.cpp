#include "mmdit/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>

#include "mmdit/attention.hpp"
#include "mmdit/grad_check.hpp"
#include "mmdit/masks.hpp"
#include "mmdit/model.hpp"
#include "mmdit/ops.hpp"
#include "mmdit/retarget.hpp"
#include "mmdit/synthface.hpp"

namespace mmdit {

namespace {

using Results = std::vector<PropertyResult>;

void record(Results& out, const std::string& suite, const std::string& name, double value,
            double tol, std::string detail = {}) {
  out.push_back({suite, name, std::isfinite(value) && value < tol, value, tol, std::move(detail)});
}

// ---- grad ----

void grad_suite(Results& out, std::uint64_t seed) {
  Rng rng(seed ^ 0x67726164ULL);
  const double tol = 1e-4;

  struct Case {
    std::string name;
    Shape shape;
    std::function<Tensor(const Tensor&)> op;
    double lo = -1.0, hi = 1.0;
  };
  const Tensor other = Tensor::uniform({3, 4}, rng, -1.0, 1.0);
  const Tensor weight = Tensor::uniform({4, 5}, rng, -1.0, 1.0);
  const Tensor bias = Tensor::uniform({5}, rng, -1.0, 1.0);
  const Tensor kx = Tensor::uniform({2, 5, 8}, rng, -1.0, 1.0);
  const Tensor vx = Tensor::uniform({2, 5, 8}, rng, -1.0, 1.0);
  const Tensor cw = Tensor::uniform({3, 2, 3, 3}, rng, -0.5, 0.5);
  const Tensor cb = Tensor::uniform({3}, rng, -0.5, 0.5);
  const Tensor target = Tensor::uniform({3, 4}, rng, -1.0, 1.0);
  std::vector<double> mbits(12);
  for (std::size_t i = 0; i < 12; ++i) mbits[i] = i % 3 == 0 ? 0.0 : 1.0;
  const Tensor bin_mask(Shape{3, 4}, mbits);
  std::vector<double> amask(2 * 4 * 5, 0.0);
  for (std::size_t i = 0; i < amask.size(); i += 7) amask[i] = -1e9;
  const Tensor add_mask(Shape{2, 4, 5}, amask);

  const std::vector<Case> cases = {
      {"add", {3, 4}, [&](const Tensor& x) { return add(x, other); }},
      {"sub", {3, 4}, [&](const Tensor& x) { return sub(other, x); }},
      {"mul", {3, 4}, [&](const Tensor& x) { return mul(x, other); }},
      {"scale", {3, 4}, [](const Tensor& x) { return scale(x, -1.7); }},
      {"add_scalar", {3, 4}, [](const Tensor& x) { return add_scalar(x, 0.3); }},
      {"add_rowvec", {4}, [&](const Tensor& v) { return add_rowvec(other, v); }},
      {"mul_rowvec", {4}, [&](const Tensor& v) { return mul_rowvec(other, v); }},
      {"matmul", {3, 4}, [&](const Tensor& x) { return matmul(x, weight); }},
      {"linear.input", {2, 3, 4}, [&](const Tensor& x) { return linear(x, weight, bias); }},
      {"linear.weight", {4, 5}, [&](const Tensor& w) { return linear(other, w, bias); }},
      {"linear.bias", {5}, [&](const Tensor& b) { return linear(other, weight, b); }},
      {"softmax.last", {3, 4}, [](const Tensor& x) { return softmax(x, 1); }},
      {"softmax.first", {3, 4}, [](const Tensor& x) { return softmax(x, 0); }},
      {"layer_norm", {3, 6}, [](const Tensor& x) { return layer_norm(x); }},
      {"gelu", {3, 4}, [](const Tensor& x) { return gelu(x); }, -3.0, 3.0},
      {"silu", {3, 4}, [](const Tensor& x) { return silu(x); }, -3.0, 3.0},
      {"square", {3, 4}, [](const Tensor& x) { return square(x); }},
      {"sum", {3, 4}, [](const Tensor& x) { return reshape(sum(x), {1}); }},
      {"mean", {3, 4}, [](const Tensor& x) { return reshape(mean(x), {1}); }},
      {"reshape", {3, 4}, [](const Tensor& x) { return reshape(x, {2, 6}); }},
      {"transpose", {3, 4}, [](const Tensor& x) { return transpose(x); }},
      {"permute", {2, 3, 4}, [](const Tensor& x) { return permute(x, {2, 0, 1}); }},
      {"gather", {3, 4}, [](const Tensor& x) { return gather(x, {0, 5, 5, 11, 3}, {5}); }},
      {"concat", {3, 4}, [&](const Tensor& x) { return concat({x, other, x}, 1); }},
      {"slice", {3, 4}, [](const Tensor& x) { return slice(x, 1, 1, 3); }},
      {"attention.q", {2, 4, 8}, [&](const Tensor& q) { return attention(q, kx, vx, 2); }},
      {"attention.k", {2, 5, 8}, [&](const Tensor& k) { return attention(slice(vx, 1, 0, 4), k, vx, 2); }},
      {"attention.v", {2, 5, 8}, [&](const Tensor& v) { return attention(slice(kx, 1, 0, 4), kx, v, 2); }},
      {"attention.masked", {2, 4, 8}, [&](const Tensor& q) { return attention(q, kx, vx, 2, add_mask); }},
      {"conv2d.input", {2, 5, 5}, [&](const Tensor& x) { return conv2d(x, cw, cb, 2, 1); }},
      {"conv2d.weight", {3, 2, 3, 3}, [&](const Tensor& w) { return conv2d(slice(kx, 1, 0, 4), w, cb, 1, 1); }},
      {"masked_mse", {3, 4}, [&](const Tensor& x) { return masked_mse(x, target, bin_mask); }},
  };
  for (const auto& c : cases) {
    Tensor w;
    {
      NoGradGuard g;
      w = Tensor::uniform(c.op(Tensor::zeros(c.shape)).shape(), rng, -1.0, 1.0);
    }
    const Tensor x = Tensor::uniform(c.shape, rng, c.lo, c.hi);
    const double err = grad_check([&](const Tensor& in) { return sum(mul(c.op(in), w)); }, x);
    record(out, "grad", c.name, err, tol, "max relative error");
  }

  // End-to-end: 2-block model on 8x8 frames, all pathways active.
  for (std::uint64_t s = 0; s < 3; ++s) {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_blocks = 2;
    cfg.ref_inject_last = 1;
    cfg.motion_channels = 2;
    cfg.frames = 1;
    cfg.audio_dim = 4;
    cfg.audio_tokens = 2;
    cfg.mlp_ratio = 2;
    cfg.driven_hidden = 4;
    MixedModalDiT model(cfg, seed * 31 + s);
    model.add_audio_layers(seed * 31 + s + 100);
    model.add_temporal_layers(seed * 31 + s + 200);
    Rng r(seed * 977 + s);
    // Perturb zero-initialised tensors so every path carries gradient.
    for (auto& [name, p] : model.params()) {
      auto d = p.mutable_data();
      for (auto& v : d) v += 0.05 * r.normal();
    }
    const Tensor noisy = Tensor::randn({1, 3, 8, 8}, r);
    const Tensor drive = Tensor::uniform({3, 8, 8}, r, 0.0, 1.0);
    const Tensor ref = Tensor::uniform({3, 8, 8}, r, 0.0, 1.0);
    const Tensor audio = Tensor::randn({1, 2, 4}, r);
    const Tensor target = Tensor::randn({1, 3, 8, 8}, r);
    std::vector<double> mb(3 * 64);
    for (auto& v : mb) v = r.uniform() < 0.8 ? 1.0 : 0.0;
    mb[0] = 1.0;
    const Tensor mask(Shape{1, 3, 8, 8}, mb);
    TokenRoleMap roles = TokenRoleMap::plain(16, 0);
    roles.eye[1] = roles.eye[2] = 1;
    roles.mouth[13] = roles.mouth[14] = 1;
    auto loss = [&] {
      DenoiserInputs in;
      const Tensor m = model.driven_encode(drive);
      in.motion = reshape(m, {1, m.dim(0), m.dim(1), m.dim(2)});
      in.audio = audio;
      in.reference = model.reference_features(ref);
      in.roles = {roles};
      in.mouth_driven = false;
      in.audio_scale = 0.7;
      return masked_mse(model.forward(noisy, 500, in), target, mask);
    };
    double worst = 0.0;
    std::string worst_name;
    for (auto& [name, p] : model.params()) {
      const GradCheckResult g = grad_check_param(loss, p);
      if (g.max_rel_error >= worst) worst = g.max_rel_error, worst_name = name;
    }
    record(out, "grad", "model_2block_8x8.seed" + std::to_string(s), worst, 1e-3,
           "worst parameter " + worst_name);
  }
}

// ---- attention ----

// Plain-loop multi-head attention with an allowed-key predicate, followed by
// the output projection.
Tensor oracle_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                        const OutputProjection& proj,
                        const std::function<bool(std::size_t, std::size_t)>& allowed) {
  const std::size_t tq = q.dim(0), tk = k.dim(0), d = q.dim(1), dh = d / heads;
  std::vector<double> cat(tq * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < tq; ++i) {
      std::vector<std::size_t> keys;
      for (std::size_t j = 0; j < tk; ++j)
        if (allowed(i, j)) keys.push_back(j);
      std::vector<double> logits;
      double mx = -INFINITY;
      for (std::size_t j : keys) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q.at({i, h * dh + c}) * k.at({j, h * dh + c});
        s /= std::sqrt(static_cast<double>(dh));
        logits.push_back(s);
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t n = 0; n < keys.size(); ++n)
        for (std::size_t c = 0; c < dh; ++c) cat[i * d + h * dh + c] += logits[n] / z * v.at({keys[n], h * dh + c});
    }
  std::vector<double> res(tq * d, 0.0);
  for (std::size_t i = 0; i < tq; ++i)
    for (std::size_t o = 0; o < d; ++o) {
      double s = proj.bias.defined() ? proj.bias[o] : 0.0;
      for (std::size_t c = 0; c < d; ++c) s += cat[i * d + c] * proj.weight.at({c, o});
      res[i * d + o] = s;
    }
  return Tensor(Shape{tq, d}, std::move(res));
}

void attention_suite(Results& out, std::uint64_t seed) {
  double excl = 0.0, oracle = 0.0, red_no_mouth = 0.0, red_no_eye = 0.0;
  bool driven_bitwise = true;
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng rng(seed * 1000 + s);
    const std::size_t t = static_cast<std::size_t>(rng.uniform_int(3, 12));
    const std::size_t n_ref = static_cast<std::size_t>(rng.uniform_int(0, 3));
    const AttentionConfig cfg{8, 2, -1e9};
    TokenRoleMap roles = TokenRoleMap::plain(t, n_ref);
    for (std::size_t i = 0; i < t; ++i) {
      const auto kind = rng.uniform_int(0, 2);
      roles.eye[i] = kind == 1;
      roles.mouth[i] = kind == 2;
    }
    roles.eye[0] = 1, roles.mouth[0] = 0;
    roles.mouth[t - 1] = 1, roles.eye[t - 1] = 0;
    const Tensor q = Tensor::randn({t, 8}, rng);
    Tensor k = Tensor::randn({t + n_ref, 8}, rng);
    Tensor v = Tensor::randn({t + n_ref, 8}, rng);
    const OutputProjection proj{Tensor::randn({8, 8}, rng, 0.5), Tensor::randn({8}, rng)};
    const std::vector<TokenRoleMap> one{roles};
    const Tensor base = masked_spatial_attention(q, k, v, one, false, proj, cfg);

    const Tensor want = oracle_attention(q, k, v, 2, proj, [&](std::size_t i, std::size_t j) {
      return !(roles.mouth[i] && j < t && roles.eye[j]);
    });
    oracle = std::max(oracle, max_abs_diff(base, want));

    Tensor k2 = k.clone(), v2 = v.clone();
    auto kd = k2.mutable_data(), vd = v2.mutable_data();
    for (std::size_t j = 0; j < t; ++j)
      if (roles.eye[j])
        for (std::size_t c = 0; c < 8; ++c) kd[j * 8 + c] += 50.0 * rng.normal(), vd[j * 8 + c] -= 50.0 * rng.normal();
    const Tensor pert = masked_spatial_attention(q, k2, v2, one, false, proj, cfg);
    for (std::size_t i = 0; i < t; ++i)
      if (roles.mouth[i])
        for (std::size_t c = 0; c < 8; ++c) excl = std::max(excl, std::abs(pert.at({i, c}) - base.at({i, c})));

    const Tensor plain = mhsa(q, k, v, proj, cfg);
    TokenRoleMap no_mouth = roles, no_eye = roles;
    std::fill(no_mouth.mouth.begin(), no_mouth.mouth.end(), 0);
    std::fill(no_eye.eye.begin(), no_eye.eye.end(), 0);
    red_no_mouth = std::max(red_no_mouth, max_abs_diff(masked_spatial_attention(q, k, v, std::vector{no_mouth}, false, proj, cfg), plain));
    red_no_eye = std::max(red_no_eye, max_abs_diff(masked_spatial_attention(q, k, v, std::vector{no_eye}, false, proj, cfg), plain));
    driven_bitwise = driven_bitwise && bitwise_equal(masked_spatial_attention(q, k, v, one, true, proj, cfg), plain);
  }
  record(out, "attention", "eye_rows_do_not_reach_mouth_queries", excl, 1e-5);
  record(out, "attention", "gather_oracle", oracle, 1e-6);
  record(out, "attention", "no_mouth_tokens_is_standard", red_no_mouth, 1e-12);
  record(out, "attention", "no_eye_tokens_is_standard", red_no_eye, 1e-12);
  record(out, "attention", "mouth_driven_is_standard_bitwise", driven_bitwise ? 0.0 : 1.0, 0.5);
}

// ---- retarget ----

double affine_diff(const Affine& a, const Affine& b) {
  return std::max({std::abs(a.a - b.a), std::abs(a.b - b.b), std::abs(a.tx - b.tx),
                   std::abs(a.c - b.c), std::abs(a.d - b.d), std::abs(a.ty - b.ty)});
}

void retarget_suite(Results& out, std::uint64_t seed) {
  Rng rng(seed ^ 0x72657467ULL);
  double round_trip = 0.0, alpha_one = 0.0;
  for (int i = 0; i < 50; ++i) {
    Affine m{rng.uniform(0.5, 1.5), rng.uniform(-0.5, 0.5), rng.uniform(-5, 5),
             rng.uniform(-0.5, 0.5), rng.uniform(0.5, 1.5), rng.uniform(-5, 5)};
    round_trip = std::max(round_trip, affine_diff(reconstruct(decompose(m)), m));
    for (auto mode : {RescaleMode::kLiteral, RescaleMode::kIdentityAnchored})
      alpha_one = std::max(alpha_one, affine_diff(rescale(m, 1.0, mode).m, m));
  }
  record(out, "retarget", "decompose_reconstruct", round_trip, 1e-12);
  record(out, "retarget", "alpha_one_reproduces_warp", alpha_one, 1e-12);

  double sweep = 0.0, translation = 0.0;
  for (double deg : {-30.0, -10.0, 10.0, 30.0})
    for (double alpha : {0.0, 0.25, 0.5, 1.0, 1.5}) {
      const double phi = deg * std::numbers::pi / 180.0;
      const Affine m = Affine::similarity(1.1, phi, {16, 16}, 2.0, -3.0);
      const Affine adj = rescale(m, alpha, RescaleMode::kIdentityAnchored).m;
      sweep = std::max(sweep, std::abs(rotation_angle(adj) - alpha * phi));
      translation = std::max({translation, std::abs(adj.tx - alpha * m.tx), std::abs(adj.ty - alpha * m.ty)});
    }
  record(out, "retarget", "anchored_angle_scales_with_alpha", sweep, 1e-6);
  record(out, "retarget", "translation_scales_with_alpha", translation, 1e-15);

  bool raised = false;
  try {
    rescale(Affine::identity(), 0.0, RescaleMode::kLiteral);
  } catch (const DegeneracyError&) {
    raised = true;
  }
  record(out, "retarget", "literal_alpha_zero_identity_degenerates", raised ? 0.0 : 1.0, 0.5);

  FaceParams p0, pi;
  pi.rotation_deg = 20.0;
  pi.tx = 1.5;
  pi.ty = -1.0;
  pi.scale = 1.1;
  const RenderedFace f0 = render(p0), fi = render(pi);
  const RetargetResult r = retarget_frame(fi.image, f0.landmarks, fi.landmarks, 1.0, RescaleMode::kIdentityAnchored);
  double lm = 0.0;
  for (std::size_t i = 0; i < r.landmarks.size(); ++i)
    lm = std::max({lm, std::abs(r.landmarks[i].x - fi.landmarks[i].x), std::abs(r.landmarks[i].y - fi.landmarks[i].y)});
  record(out, "retarget", "retarget_frame_alpha_one_landmarks", lm, 1e-6);
}

}  // namespace

std::vector<PropertyResult> run_verify(const std::string& suite, std::uint64_t seed) {
  if (suite != "grad" && suite != "attention" && suite != "retarget" && suite != "all") {
    throw ConfigError("unknown verify suite '" + suite + "' (grad, attention, retarget, all)");
  }
  Results out;
  if (suite == "grad" || suite == "all") grad_suite(out, seed);
  if (suite == "attention" || suite == "all") attention_suite(out, seed);
  if (suite == "retarget" || suite == "all") retarget_suite(out, seed);
  return out;
}

}  // namespace mmdit
