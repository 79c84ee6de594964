#pragma once

#include <array>
#include <cmath>
#include <vector>

namespace mmdit {

// Image coordinates: x along columns, y along rows, pixel (r, c) centered at
// (x = c, y = r).
struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

using PointList = std::vector<Point>;

// 2x3 affine matrix (a b tx; c d ty) acting on column vectors [x; y; 1].
struct Affine {
  double a = 1.0, b = 0.0, tx = 0.0;
  double c = 0.0, d = 1.0, ty = 0.0;

  Point apply(const Point& p) const { return {a * p.x + b * p.y + tx, c * p.x + d * p.y + ty}; }
  double det() const { return a * d - b * c; }

  static Affine identity() { return {}; }
  static Affine rotation(double radians) {
    const double cs = std::cos(radians), sn = std::sin(radians);
    return {cs, -sn, 0.0, sn, cs, 0.0};
  }
  // s * R(phi) about `center`, then translated by (tx, ty).
  static Affine similarity(double s, double phi, Point center, double tx, double ty) {
    Affine r = rotation(phi);
    r.a *= s, r.b *= s, r.c *= s, r.d *= s;
    r.tx = center.x - (r.a * center.x + r.b * center.y) + tx;
    r.ty = center.y - (r.c * center.x + r.d * center.y) + ty;
    return r;
  }
};

// outer after inner.
inline Affine compose(const Affine& outer, const Affine& inner) {
  return {outer.a * inner.a + outer.b * inner.c,
          outer.a * inner.b + outer.b * inner.d,
          outer.a * inner.tx + outer.b * inner.ty + outer.tx,
          outer.c * inner.a + outer.d * inner.c,
          outer.c * inner.b + outer.d * inner.d,
          outer.c * inner.tx + outer.d * inner.ty + outer.ty};
}

inline PointList transform(const Affine& m, const PointList& pts) {
  PointList out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(m.apply(p));
  return out;
}

}  // namespace mmdit
