#include "mmdit/retarget.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "mmdit/image.hpp"

namespace mmdit {

namespace {

constexpr double kMinRowNorm = 1e-9;
constexpr double kMinDet = 1e-9;

}  // namespace

Affine estimate_affine(const PointList& from, const PointList& to) {
  if (from.size() != to.size()) {
    throw GeometryError("point lists differ in length (" + std::to_string(from.size()) + " vs " +
                        std::to_string(to.size()) + ")");
  }
  const auto n = static_cast<Eigen::Index>(from.size());
  if (n < 3) throw GeometryError("affine estimation needs at least 3 points");

  Eigen::MatrixXd centered(n, 2);
  double mx = 0.0, my = 0.0;
  for (const auto& p : from) mx += p.x, my += p.y;
  mx /= static_cast<double>(n), my /= static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    centered(i, 0) = from[static_cast<std::size_t>(i)].x - mx;
    centered(i, 1) = from[static_cast<std::size_t>(i)].y - my;
  }
  const Eigen::Vector2d sv = Eigen::JacobiSVD<Eigen::MatrixXd>(centered).singularValues();
  if (sv(1) <= 1e-9 * std::max(1.0, sv(0))) throw GeometryError("source points are collinear");

  Eigen::MatrixXd design(n, 3);
  Eigen::MatrixXd target(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& p = from[static_cast<std::size_t>(i)];
    const auto& q = to[static_cast<std::size_t>(i)];
    design.row(i) << p.x, p.y, 1.0;
    target.row(i) << q.x, q.y;
  }
  const Eigen::MatrixXd sol = design.colPivHouseholderQr().solve(target);
  return {sol(0, 0), sol(1, 0), sol(2, 0), sol(0, 1), sol(1, 1), sol(2, 1)};
}

WarpTransform decompose(const Affine& m) {
  WarpTransform w;
  w.m = m;
  w.lambda_x = std::hypot(m.a, m.b);
  w.lambda_y = std::hypot(m.c, m.d);
  if (w.lambda_x <= kMinRowNorm || w.lambda_y <= kMinRowNorm) {
    throw GeometryError("warp has a degenerate row (norm <= 1e-9)");
  }
  w.theta_x = std::atan2(m.b, m.a);
  w.theta_y = std::atan2(m.d, m.c);
  w.tx = m.tx;
  w.ty = m.ty;
  return w;
}

Affine reconstruct(const WarpTransform& w) {
  return {w.lambda_x * std::cos(w.theta_x), w.lambda_x * std::sin(w.theta_x), w.tx,
          w.lambda_y * std::cos(w.theta_y), w.lambda_y * std::sin(w.theta_y), w.ty};
}

RescaleMode parse_rescale_mode(const std::string& name) {
  if (name == "literal") return RescaleMode::kLiteral;
  if (name == "identity_anchored") return RescaleMode::kIdentityAnchored;
  throw ConfigError("unknown rescale mode '" + name + "' (expected literal or identity_anchored)");
}

std::string rescale_mode_name(RescaleMode mode) {
  return mode == RescaleMode::kLiteral ? "literal" : "identity_anchored";
}

double rotation_angle(const Affine& m) { return std::atan2(m.c - m.b, m.a + m.d); }

WarpTransform rescale(const Affine& m, double alpha, RescaleMode mode) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ContractError("alpha must be finite and >= 0");
  const WarpTransform w = decompose(m);
  Affine out;
  if (mode == RescaleMode::kLiteral) {
    WarpTransform scaled = w;
    scaled.theta_x = alpha * w.theta_x;
    scaled.theta_y = alpha * w.theta_y;
    scaled.tx = alpha * w.tx;
    scaled.ty = alpha * w.ty;
    out = reconstruct(scaled);
    if (std::abs(out.det()) < kMinDet) {
      throw DegeneracyError("literal mode: rescaled warp at alpha=" + std::to_string(alpha) +
                            " has parallel rows (|det| < 1e-9)");
    }
  } else {
    // Polar split A = R(phi) P; only the rotation is rescaled.
    const double phi = rotation_angle(m);
    const Affine back = Affine::rotation(-phi);
    const Affine p = compose(back, {m.a, m.b, 0.0, m.c, m.d, 0.0});
    out = compose(Affine::rotation(alpha * phi), p);
    out.tx = alpha * m.tx;
    out.ty = alpha * m.ty;
  }
  return decompose(out);
}

Affine invert(const Affine& m) {
  const double det = m.det();
  if (std::abs(det) < kMinDet) throw GeometryError("warp is not invertible (|det| < 1e-9)");
  Affine r{m.d / det, -m.b / det, 0.0, -m.c / det, m.a / det, 0.0};
  r.tx = -(r.a * m.tx + r.b * m.ty);
  r.ty = -(r.c * m.tx + r.d * m.ty);
  return r;
}

Tensor warp_affine(const Tensor& image, const Affine& transform) {
  require_image(image, "warp_affine");
  const Affine inv = invert(transform);
  const std::size_t h = image.dim(1), w = image.dim(2);
  Tensor out = make_image(h, w);
  auto d = out.mutable_data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const Point src = inv.apply({static_cast<double>(x), static_cast<double>(y)});
      for (std::size_t c = 0; c < kImageChannels; ++c) {
        d[(c * h + y) * w + x] = sample_bilinear(image, c, src.x, src.y);
      }
    }
  return out;
}

RetargetResult retarget_frame(const Tensor& frame, const PointList& landmarks_0,
                              const PointList& landmarks_i, double alpha, RescaleMode mode) {
  RetargetResult r;
  r.warp = estimate_affine(landmarks_0, landmarks_i);
  const Affine back = invert(r.warp);
  r.adjusted = rescale(r.warp, alpha, mode).m;
  const Tensor aligned = warp_affine(frame, back);
  r.frame = warp_affine(aligned, r.adjusted);
  r.landmarks = transform(compose(r.adjusted, back), landmarks_i);
  return r;
}

}  // namespace mmdit
