#include "kernels.hpp"
#include "mmdit/ops.hpp"

namespace mmdit {

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0) || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t c_in = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t c_out = w.dim(0), ksz = w.dim(2);
  if (h + 2 * pad < ksz || wd + 2 * pad < ksz) throw ShapeError("conv2d: kernel larger than input");
  const std::size_t oh = (h + 2 * pad - ksz) / stride + 1;
  const std::size_t ow = (wd + 2 * pad - ksz) / stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != c_out)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(c_out) + " output channels");
  }

  // im2col: cols[(c, ky, kx) x (oy, ox)]; out-of-bounds taps stay zero.
  const std::size_t patch = c_in * ksz * ksz;
  const std::size_t npos = oh * ow;
  // Source index per column entry; SIZE_MAX marks a padding tap.
  std::vector<std::size_t> src(patch * npos, SIZE_MAX);
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t ky = 0; ky < ksz; ++ky)
      for (std::size_t kx = 0; kx < ksz; ++kx) {
        const std::size_t row = (c * ksz + ky) * ksz + kx;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
            src[row * npos + oy * ow + ox] = (c * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix);
          }
        }
      }
  auto xd = x.data();
  std::vector<double> cols(patch * npos, 0.0);
  for (std::size_t i = 0; i < cols.size(); ++i)
    if (src[i] != SIZE_MAX) cols[i] = xd[src[i]];

  std::vector<double> out(c_out * npos, 0.0);
  if (has_bias) {
    auto bd = bias.data();
    for (std::size_t o = 0; o < c_out; ++o) std::fill_n(out.begin() + o * npos, npos, bd[o]);
  }
  kernels::gemm_acc(w.data().data(), cols.data(), out.data(), c_out, patch, npos);

  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return Tensor::from_op(
      Shape{c_out, oh, ow}, std::move(out), std::move(inputs),
      [w, src = std::move(src), cols = std::move(cols), c_out, patch, npos](
          std::span<const double> g, std::span<std::vector<double>*> gin) {
        if (gin[0]) {
          // dcols = W^T g, scattered back through the im2col map.
          std::vector<double> wt(patch * c_out);
          kernels::transpose(w.data().data(), wt.data(), c_out, patch);
          std::vector<double> dcols(patch * npos, 0.0);
          kernels::gemm_acc(wt.data(), g.data(), dcols.data(), patch, c_out, npos);
          auto& gx = *gin[0];
          for (std::size_t i = 0; i < dcols.size(); ++i)
            if (src[i] != SIZE_MAX) gx[src[i]] += dcols[i];
        }
        if (gin[1]) {
          std::vector<double> ct(npos * patch);
          kernels::transpose(cols.data(), ct.data(), patch, npos);
          kernels::gemm_acc(g.data(), ct.data(), gin[1]->data(), c_out, npos, patch);
        }
        if (gin.size() > 2 && gin[2]) {
          auto& gb = *gin[2];
          for (std::size_t o = 0; o < c_out; ++o)
            for (std::size_t p = 0; p < npos; ++p) gb[o] += g[o * npos + p];
        }
      });
}

}  // namespace mmdit
