#include "mmdit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "kernels.hpp"

namespace mmdit {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

std::size_t last_dim(const Tensor& x) { return x.shape().back(); }

// v's shape must equal the trailing axes of x's shape.
void require_trailing(const Tensor& x, const Tensor& v, const char* op) {
  const Shape& xs = x.shape();
  const Shape& vs = v.shape();
  if (vs.size() > xs.size() || !std::equal(vs.begin(), vs.end(), xs.end() - static_cast<std::ptrdiff_t>(vs.size()))) {
    throw ShapeError(std::string(op) + ": " + shape_str(vs) + " does not broadcast over " +
                     shape_str(xs));
  }
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& x, Fwd fwd, Bwd dfdx) {
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  return Tensor::from_op(x.shape(), std::move(out), {x},
                         [x, dfdx](std::span<const double> g, std::span<std::vector<double>*> gin) {
                           auto xd = x.data();
                           auto& gx = *gin[0];
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xd[i]);
                         });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b},
                         [](std::span<const double> g, std::span<std::vector<double>*> gin) {
                           for (auto* slot : gin) {
                             if (!slot) continue;
                             for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
                           }
                         });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b},
                         [](std::span<const double> g, std::span<std::vector<double>*> gin) {
                           if (gin[0])
                             for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                           if (gin[1])
                             for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
                         });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b},
                         [a, b](std::span<const double> g, std::span<std::vector<double>*> gin) {
                           auto ad = a.data();
                           auto bd = b.data();
                           if (gin[0])
                             for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * bd[i];
                           if (gin[1])
                             for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * ad[i];
                         });
}

Tensor scale(const Tensor& x, double s) {
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * s;
  return Tensor::from_op(x.shape(), std::move(out), {x},
                         [s](std::span<const double> g, std::span<std::vector<double>*> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * s;
                         });
}

Tensor add_scalar(const Tensor& x, double s) {
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + s;
  return Tensor::from_op(x.shape(), std::move(out), {x},
                         [](std::span<const double> g, std::span<std::vector<double>*> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                         });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  require_trailing(x, v, "add_rowvec");
  const std::size_t n = v.numel();
  auto xd = x.data();
  auto vd = v.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < xd.size() / n; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xd[r * n + j] + vd[j];
  return Tensor::from_op(x.shape(), std::move(out), {x, v},
                         [n](std::span<const double> g, std::span<std::vector<double>*> gin) {
                           if (gin[0])
                             for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                           if (gin[1]) {
                             auto& gv = *gin[1];
                             for (std::size_t r = 0; r < g.size() / n; ++r)
                               for (std::size_t j = 0; j < n; ++j) gv[j] += g[r * n + j];
                           }
                         });
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  require_trailing(x, v, "mul_rowvec");
  const std::size_t n = v.numel();
  auto xd = x.data();
  auto vd = v.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < xd.size() / n; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xd[r * n + j] * vd[j];
  return Tensor::from_op(
      x.shape(), std::move(out), {x, v},
      [x, v, n](std::span<const double> g, std::span<std::vector<double>*> gin) {
        auto xd = x.data();
        auto vd = v.data();
        const std::size_t rows = g.size() / n;
        if (gin[0]) {
          auto& gx = *gin[0];
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[r * n + j] * vd[j];
        }
        if (gin[1]) {
          auto& gv = *gin[1];
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gv[j] += g[r * n + j] * xd[r * n + j];
        }
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                     shape_str(b.shape()));
  }
  return linear(a, b);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.rank() != 2 || last_dim(x) != w.dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  }
  const std::size_t in = w.dim(0);
  const std::size_t out_dim = w.dim(1);
  const std::size_t rows = x.numel() / in;
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  }
  std::vector<double> out(rows * out_dim, 0.0);
  if (has_bias) {
    auto bd = bias.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(bd.begin(), bd.end(), out.begin() + r * out_dim);
  }
  kernels::gemm_acc(x.data().data(), w.data().data(), out.data(), rows, in, out_dim);

  Shape shape = x.shape();
  shape.back() = out_dim;
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return Tensor::from_op(
      std::move(shape), std::move(out), std::move(inputs),
      [x, w, rows, in, out_dim](std::span<const double> g, std::span<std::vector<double>*> gin) {
        if (gin[0]) {
          std::vector<double> wt(in * out_dim);
          kernels::transpose(w.data().data(), wt.data(), in, out_dim);
          kernels::gemm_acc(g.data(), wt.data(), gin[0]->data(), rows, out_dim, in);
        }
        if (gin[1]) {
          std::vector<double> xt(rows * in);
          kernels::transpose(x.data().data(), xt.data(), rows, in);
          kernels::gemm_acc(xt.data(), g.data(), gin[1]->data(), in, rows, out_dim);
        }
        if (gin.size() > 2 && gin[2]) {
          auto& gb = *gin[2];
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
        }
      });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) throw ShapeError("softmax: axis out of range for " + shape_str(s));
  const std::size_t n = s[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double m = xd[base];
      for (std::size_t j = 1; j < n; ++j) m = std::max(m, xd[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xd[base + j * inner] - m);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  std::vector<double> y = out;
  return Tensor::from_op(
      s, std::move(out), {x},
      [y = std::move(y), outer, inner, n](std::span<const double> g,
                                          std::span<std::vector<double>*> gin) {
        auto& gx = *gin[0];
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t k = base + j * inner;
              gx[k] += y[k] * (g[k] - dot);
            }
          }
        }
      });
}

Tensor layer_norm(const Tensor& x, double eps) {
  const std::size_t n = last_dim(x);
  const std::size_t rows = x.numel() / n;
  auto xd = x.data();
  std::vector<double> out(xd.size());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (row[j] - mu) * rstd[r];
  }
  std::vector<double> y = out;
  return Tensor::from_op(
      x.shape(), std::move(out), {x},
      [y = std::move(y), rstd = std::move(rstd), n, rows](std::span<const double> g,
                                                          std::span<std::vector<double>*> gin) {
        auto& gx = *gin[0];
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          double mg = 0.0, mgy = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            mg += g[r * n + j];
            mgy += g[r * n + j] * y[r * n + j];
          }
          mg *= inv_n;
          mgy *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t k = r * n + j;
            gx[k] += rstd[r] * (g[k] - mg - y[k] * mgy);
          }
        }
      });
}

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))); },
      [](double v) {
        const double u = c * (v + 0.044715 * v * v * v);
        const double th = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * v * v);
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
      });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v) {
        const double sg = 1.0 / (1.0 + std::exp(-v));
        return sg * (1.0 + v * (1.0 - sg));
      });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return Tensor::from_op(Shape{1}, {total}, {x},
                         [](std::span<const double> g, std::span<std::vector<double>*> gin) {
                           for (auto& v : *gin[0]) v += g[0];
                         });
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto xd = x.data();
  return Tensor::from_op(std::move(shape), std::vector<double>(xd.begin(), xd.end()), {x},
                         [](std::span<const double> g, std::span<std::vector<double>*> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                         });
}

Tensor gather(const Tensor& x, std::vector<std::size_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) {
    throw ShapeError("gather: index length does not match " + shape_str(out_shape));
  }
  auto xd = x.data();
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xd.size()) throw ShapeError("gather: index out of range");
    out[i] = xd[index[i]];
  }
  return Tensor::from_op(std::move(out_shape), std::move(out), {x},
                         [index = std::move(index)](std::span<const double> g,
                                                    std::span<std::vector<double>*> gin) {
                           auto& gx = *gin[0];
                           for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += g[i];
                         });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const auto& s = x.shape();
  if (axes.size() != s.size()) throw ShapeError("permute: axis count mismatch for " + shape_str(s));
  std::vector<bool> seen(s.size(), false);
  for (auto a : axes) {
    if (a >= s.size() || seen[a]) throw ShapeError("permute: invalid axis order");
    seen[a] = true;
  }
  std::vector<std::size_t> in_stride(s.size(), 1);
  for (std::size_t i = s.size() - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * s[i];
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[axes[i]];
  const std::size_t n = x.numel();
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(s.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < s.size(); ++i) src += counter[i] * in_stride[axes[i]];
    index[flat] = src;
    for (std::size_t i = s.size(); i-- > 0;) {
      if (++counter[i] < out_shape[i]) break;
      counter[i] = 0;
    }
  }
  return gather(x, std::move(index), std::move(out_shape));
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
    if (!ok) {
      throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(ref) +
                       " along axis " + std::to_string(axis));
    }
    widths.push_back(s[axis] * inner);
    total += s[axis];
  }
  const std::size_t row = total * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto d = parts[p].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(d.begin() + o * widths[p], widths[p], out.begin() + o * row + offset);
    offset += widths[p];
  }
  Shape shape = ref;
  shape[axis] = total;
  return Tensor::from_op(std::move(shape), std::move(out), parts,
                         [widths, outer, row](std::span<const double> g,
                                              std::span<std::vector<double>*> gin) {
                           std::size_t offset = 0;
                           for (std::size_t p = 0; p < gin.size(); ++p) {
                             if (gin[p]) {
                               auto& gp = *gin[p];
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t i = 0; i < widths[p]; ++i)
                                   gp[o * widths[p] + i] += g[o * row + offset + i];
                             }
                             offset += widths[p];
                           }
                         });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError("slice: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid on axis " + std::to_string(axis) + " of " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t width = (end - begin) * inner;
  std::vector<std::size_t> index;
  index.reserve(outer * width);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < width; ++i) index.push_back(o * s[axis] * inner + begin * inner + i);
  Shape shape = s;
  shape[axis] = end - begin;
  return gather(x, std::move(index), std::move(shape));
}

}  // namespace mmdit
