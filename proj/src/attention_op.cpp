#include <algorithm>
#include <cmath>

#include "kernels.hpp"
#include "mmdit/ops.hpp"

namespace mmdit {

namespace {

struct AttnDims {
  std::size_t batch, tq, tk, d, heads, dh;
};

// Copies head h of x[T x d] into out[T x dh].
void take_head(const double* x, double* out, std::size_t t, std::size_t d, std::size_t h,
               std::size_t dh) {
  for (std::size_t i = 0; i < t; ++i) std::copy_n(x + i * d + h * dh, dh, out + i * dh);
}

void add_head(const double* src, double* x, std::size_t t, std::size_t d, std::size_t h,
              std::size_t dh) {
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < dh; ++j) x[i * d + h * dh + j] += src[i * dh + j];
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 const Tensor& additive_mask) {
  auto as3 = [](const Tensor& t) -> Shape {
    if (t.rank() == 2) return {1, t.dim(0), t.dim(1)};
    if (t.rank() == 3) return t.shape();
    throw ShapeError("attention expects rank 2 or 3 inputs, got " + shape_str(t.shape()));
  };
  const Shape qs = as3(q), ks = as3(k), vs = as3(v);
  if (ks != vs || qs[0] != ks[0] || qs[2] != ks[2]) {
    throw ShapeError("attention: incompatible q " + shape_str(q.shape()) + ", k " +
                     shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  if (n_heads == 0 || qs[2] % n_heads != 0) {
    throw ShapeError("attention: width " + std::to_string(qs[2]) + " not divisible into " +
                     std::to_string(n_heads) + " heads");
  }
  const AttnDims dm{qs[0], qs[1], ks[1], qs[2], n_heads, qs[2] / n_heads};
  bool mask_batched = false;
  if (additive_mask.defined()) {
    const Shape& ms = additive_mask.shape();
    if (ms == Shape{dm.batch, dm.tq, dm.tk}) {
      mask_batched = true;
    } else if (ms != Shape{dm.tq, dm.tk}) {
      throw ShapeError("attention: mask " + shape_str(ms) + " does not match logits [" +
                       std::to_string(dm.tq) + "x" + std::to_string(dm.tk) + "]");
    }
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dm.dh));

  auto qd = q.data(), kd = k.data(), vd = v.data();
  std::vector<double> out(dm.batch * dm.tq * dm.d, 0.0);
  // Probabilities are kept for the backward pass: [B, H, Tq, Tk].
  std::vector<double> probs(dm.batch * dm.heads * dm.tq * dm.tk);
  std::vector<double> qh(dm.tq * dm.dh), kt(dm.dh * dm.tk), vh(dm.tk * dm.dh), oh(dm.tq * dm.dh);
  std::vector<double> kh(dm.tk * dm.dh);

  for (std::size_t b = 0; b < dm.batch; ++b) {
    const double* qb = qd.data() + b * dm.tq * dm.d;
    const double* kb = kd.data() + b * dm.tk * dm.d;
    const double* vb = vd.data() + b * dm.tk * dm.d;
    const double* mb = nullptr;
    if (additive_mask.defined())
      mb = additive_mask.data().data() + (mask_batched ? b * dm.tq * dm.tk : 0);
    for (std::size_t h = 0; h < dm.heads; ++h) {
      take_head(qb, qh.data(), dm.tq, dm.d, h, dm.dh);
      take_head(kb, kh.data(), dm.tk, dm.d, h, dm.dh);
      take_head(vb, vh.data(), dm.tk, dm.d, h, dm.dh);
      kernels::transpose(kh.data(), kt.data(), dm.tk, dm.dh);
      double* p = probs.data() + (b * dm.heads + h) * dm.tq * dm.tk;
      std::fill_n(p, dm.tq * dm.tk, 0.0);
      kernels::gemm_acc(qh.data(), kt.data(), p, dm.tq, dm.dh, dm.tk);
      for (std::size_t i = 0; i < dm.tq; ++i) {
        double* row = p + i * dm.tk;
        for (std::size_t j = 0; j < dm.tk; ++j) {
          row[j] *= inv_sqrt;
          if (mb) row[j] += mb[i * dm.tk + j];
        }
        const double m = *std::max_element(row, row + dm.tk);
        double total = 0.0;
        for (std::size_t j = 0; j < dm.tk; ++j) {
          row[j] = std::exp(row[j] - m);
          total += row[j];
        }
        for (std::size_t j = 0; j < dm.tk; ++j) row[j] /= total;
      }
      std::fill(oh.begin(), oh.end(), 0.0);
      kernels::gemm_acc(p, vh.data(), oh.data(), dm.tq, dm.tk, dm.dh);
      add_head(oh.data(), out.data() + b * dm.tq * dm.d, dm.tq, dm.d, h, dm.dh);
    }
  }

  std::vector<Tensor> inputs{q, k, v};
  return Tensor::from_op(
      q.shape(), std::move(out), std::move(inputs),
      [q, k, v, dm, inv_sqrt, probs = std::move(probs)](std::span<const double> g,
                                                        std::span<std::vector<double>*> gin) {
        auto qd = q.data(), kd = k.data(), vd = v.data();
        std::vector<double> qh(dm.tq * dm.dh), kh(dm.tk * dm.dh), vt(dm.dh * dm.tk);
        std::vector<double> vh(dm.tk * dm.dh), go(dm.tq * dm.dh), dp(dm.tq * dm.tk);
        std::vector<double> pt(dm.tk * dm.tq), dst(dm.tk * dm.tq), tmp_q(dm.tq * dm.dh);
        std::vector<double> tmp_k(dm.tk * dm.dh);
        for (std::size_t b = 0; b < dm.batch; ++b) {
          const double* qb = qd.data() + b * dm.tq * dm.d;
          const double* kb = kd.data() + b * dm.tk * dm.d;
          const double* vb = vd.data() + b * dm.tk * dm.d;
          const double* gb = g.data() + b * dm.tq * dm.d;
          for (std::size_t h = 0; h < dm.heads; ++h) {
            const double* p = probs.data() + (b * dm.heads + h) * dm.tq * dm.tk;
            take_head(gb, go.data(), dm.tq, dm.d, h, dm.dh);
            take_head(vb, vh.data(), dm.tk, dm.d, h, dm.dh);
            // dV = P^T dO
            if (gin[2]) {
              kernels::transpose(p, pt.data(), dm.tq, dm.tk);
              std::fill(tmp_k.begin(), tmp_k.end(), 0.0);
              kernels::gemm_acc(pt.data(), go.data(), tmp_k.data(), dm.tk, dm.tq, dm.dh);
              add_head(tmp_k.data(), gin[2]->data() + b * dm.tk * dm.d, dm.tk, dm.d, h, dm.dh);
            }
            if (!gin[0] && !gin[1]) continue;
            // dP = dO V^T, then dS = P * (dP - rowsum(dP * P)) / sqrt(dh)
            kernels::transpose(vh.data(), vt.data(), dm.tk, dm.dh);
            std::fill(dp.begin(), dp.end(), 0.0);
            kernels::gemm_acc(go.data(), vt.data(), dp.data(), dm.tq, dm.dh, dm.tk);
            for (std::size_t i = 0; i < dm.tq; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < dm.tk; ++j) dot += dp[i * dm.tk + j] * p[i * dm.tk + j];
              for (std::size_t j = 0; j < dm.tk; ++j) {
                const std::size_t idx = i * dm.tk + j;
                dp[idx] = p[idx] * (dp[idx] - dot) * inv_sqrt;
              }
            }
            if (gin[0]) {
              take_head(kb, kh.data(), dm.tk, dm.d, h, dm.dh);
              std::fill(tmp_q.begin(), tmp_q.end(), 0.0);
              kernels::gemm_acc(dp.data(), kh.data(), tmp_q.data(), dm.tq, dm.tk, dm.dh);
              add_head(tmp_q.data(), gin[0]->data() + b * dm.tq * dm.d, dm.tq, dm.d, h, dm.dh);
            }
            if (gin[1]) {
              take_head(qb, qh.data(), dm.tq, dm.d, h, dm.dh);
              kernels::transpose(dp.data(), dst.data(), dm.tq, dm.tk);
              std::fill(tmp_k.begin(), tmp_k.end(), 0.0);
              kernels::gemm_acc(dst.data(), qh.data(), tmp_k.data(), dm.tk, dm.tq, dm.dh);
              add_head(tmp_k.data(), gin[1]->data() + b * dm.tk * dm.d, dm.tk, dm.d, h, dm.dh);
            }
          }
        }
      });
}

}  // namespace mmdit
