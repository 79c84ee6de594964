#include "mmdit/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

namespace mmdit {

Tensor make_image(std::size_t height, std::size_t width, double fill) {
  return Tensor(Shape{kImageChannels, height, width}, fill);
}

void require_image(const Tensor& img, const char* what) {
  if (img.rank() != 3 || img.dim(0) != kImageChannels) {
    throw ShapeError(std::string(what) + ": expected a [3xHxW] image, got " +
                     shape_str(img.shape()));
  }
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  require_image(image, "write_ppm");
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << w << ' ' << h << "\n255\n";
  auto d = image.data();
  std::string row(w * 3, '\0');
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(d[(c * h + y) * w + x], 0.0, 1.0);
        row[x * 3 + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
      }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w == 0 || h == 0 || maxval != 255) {
    throw IoError(path.string() + ": only 8-bit binary PPM (P6) is supported");
  }
  in.get();
  std::string raw(w * h * 3, '\0');
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!in) throw IoError(path.string() + ": truncated pixel data");
  std::vector<double> data(3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        data[(c * h + y) * w + x] =
            static_cast<unsigned char>(raw[(y * w + x) * 3 + c]) / 255.0;
  return Tensor(Shape{3, h, w}, std::move(data));
}

double sample_bilinear(const Tensor& image, std::size_t channel, double x, double y) {
  const std::size_t h = image.dim(1), w = image.dim(2);
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  auto d = image.data();
  const double* plane = d.data() + channel * h * w;
  const double top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
  const double bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
  return top * (1.0 - fy) + bottom * fy;
}

Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width) {
  require_image(image, "resize_bilinear");
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (h == height && w == width) return image.detach();
  const double sy = static_cast<double>(h) / static_cast<double>(height);
  const double sx = static_cast<double>(w) / static_cast<double>(width);
  Tensor out = make_image(height, width);
  auto od = out.mutable_data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double src_x = (static_cast<double>(x) + 0.5) * sx - 0.5;
        const double src_y = (static_cast<double>(y) + 0.5) * sy - 0.5;
        od[(c * height + y) * width + x] = sample_bilinear(image, c, src_x, src_y);
      }
  return out;
}

Tensor clamp01(const Tensor& image) {
  std::vector<double> d(image.data().begin(), image.data().end());
  for (auto& v : d) v = std::clamp(v, 0.0, 1.0);
  return Tensor(image.shape(), std::move(d));
}

}  // namespace mmdit
