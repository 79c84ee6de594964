#pragma once

#include <filesystem>

#include "mmdit/tensor.hpp"

namespace mmdit {

// Images are [3, H, W] tensors with values in [0, 1].
inline constexpr std::size_t kImageChannels = 3;

Tensor make_image(std::size_t height, std::size_t width, double fill = 0.0);
void require_image(const Tensor& img, const char* what);

// Binary PPM (P6, maxval 255). Values are clamped and rounded on write.
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);

// Bilinear resample to a new size, sampling at pixel centers with border
// replication.
Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width);

// Samples `image` at continuous (x, y) with bilinear weights; coordinates
// outside the image are clamped to the border (replication).
double sample_bilinear(const Tensor& image, std::size_t channel, double x, double y);

Tensor clamp01(const Tensor& image);

}  // namespace mmdit
