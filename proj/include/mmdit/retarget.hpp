#pragma once

#include <string>

#include "mmdit/geometry.hpp"
#include "mmdit/tensor.hpp"

namespace mmdit {

// A 2x3 warp together with its row-wise polar decomposition:
// (a, b) = lambda_x (cos theta_x, sin theta_x), (c, d) = lambda_y (cos theta_y, sin theta_y).
struct WarpTransform {
  Affine m;
  double theta_x = 0.0, theta_y = 0.0;
  double lambda_x = 1.0, lambda_y = 1.0;
  double tx = 0.0, ty = 0.0;
};

// Least-squares affine mapping `from` onto `to`. Needs at least three
// non-collinear points.
Affine estimate_affine(const PointList& from, const PointList& to);

// Row angles and norms of M. Rows with norm <= 1e-9 are a GeometryError.
WarpTransform decompose(const Affine& m);
// Inverse of decompose: rebuilds the matrix from angles, norms and translation.
Affine reconstruct(const WarpTransform& w);

enum class RescaleMode {
  kLiteral,           // scale both row angles by alpha
  kIdentityAnchored,  // scale the single rotation angle of the polar factor by alpha
};
RescaleMode parse_rescale_mode(const std::string& name);
std::string rescale_mode_name(RescaleMode mode);

// Amplitude-adjusted warp M' with translation alpha * t. Literal mode throws
// DegeneracyError when the rescaled 2x2 part is singular.
WarpTransform rescale(const Affine& m, double alpha, RescaleMode mode);

// Rotation angle of the closest rotation to the 2x2 part: atan2(c - b, a + d).
double rotation_angle(const Affine& m);

Affine invert(const Affine& m);

// out(p) = image(T^-1 p), bilinear with border replication.
Tensor warp_affine(const Tensor& image, const Affine& transform);

struct RetargetResult {
  Tensor frame;
  PointList landmarks;
  Affine warp;      // M: landmarks_0 -> landmarks_i
  Affine adjusted;  // M'
};

// Warps frame i back to the first frame's pose with M^-1 and then applies
// the amplitude-adjusted M'. Landmarks are mapped by M' M^-1.
RetargetResult retarget_frame(const Tensor& frame, const PointList& landmarks_0,
                              const PointList& landmarks_i, double alpha, RescaleMode mode);

}  // namespace mmdit
