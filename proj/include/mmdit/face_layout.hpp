#pragma once

#include <array>
#include <cstddef>

#include "mmdit/geometry.hpp"

namespace mmdit::face {

// Canonical landmark index layout shared by the renderer, the region masks,
// and the dataset filter's frontal template.
//   0: left-eye outer corner    1: right-eye outer corner
//   2: left-eye top             3: right-eye bottom
//   4: mouth left corner        5: mouth right corner
//   6: mouth top                7: mouth bottom
//   8: head top                 9: chin
inline constexpr std::size_t kNumLandmarks = 10;
inline constexpr std::array<std::size_t, 4> kEyeIndices{0, 1, 2, 3};
inline constexpr std::array<std::size_t, 4> kMouthIndices{4, 5, 6, 7};
inline constexpr std::array<std::size_t, 2> kOutlineIndices{8, 9};

// Geometry on the 32-pixel reference canvas; other sizes scale linearly.
inline constexpr double kReferenceSize = 32.0;
inline constexpr double kCenterX = 16.0, kCenterY = 16.0;
inline constexpr double kHeadRx = 12.0, kHeadRy = 14.0;
inline constexpr double kEyeY = 11.0;
inline constexpr double kLeftEyeX = 11.0, kRightEyeX = 21.0;
inline constexpr double kEyeRx = 3.0, kEyeRy = 2.0;
inline constexpr double kMouthX = 16.0, kMouthY = 23.0;
inline constexpr double kMouthRx = 4.0, kMouthRy = 2.0;

// Canonical (frontal, unit scale) landmarks for an image of `size` pixels.
inline std::array<Point, kNumLandmarks> canonical_landmarks(double size) {
  const double k = size / kReferenceSize;
  auto p = [k](double x, double y) { return Point{x * k, y * k}; };
  return {p(kLeftEyeX - kEyeRx, kEyeY),  p(kRightEyeX + kEyeRx, kEyeY),
          p(kLeftEyeX, kEyeY - kEyeRy),  p(kRightEyeX, kEyeY + kEyeRy),
          p(kMouthX - kMouthRx, kMouthY), p(kMouthX + kMouthRx, kMouthY),
          p(kMouthX, kMouthY - kMouthRy), p(kMouthX, kMouthY + kMouthRy),
          p(kCenterX, kCenterY - kHeadRy), p(kCenterX, kCenterY + kHeadRy)};
}

}  // namespace mmdit::face
