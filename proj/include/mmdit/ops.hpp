#pragma once

#include <cstddef>
#include <vector>

#include "mmdit/tensor.hpp"

namespace mmdit {

// Elementwise ops require identical shapes; the only broadcasting supported
// is a tensor matching the trailing axes, repeated across the leading ones.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

// x[..., j] + v[j] and x[..., j] * v[j], where v's shape is a suffix of x's.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor mul_rowvec(const Tensor& x, const Tensor& v);

// a[m x k] * b[k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] * w[in x out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

Tensor softmax(const Tensor& x, std::size_t axis);
// Normalizes over the last axis without affine parameters.
Tensor layer_norm(const Tensor& x, double eps = 1e-6);
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor square(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
// out.flat[i] = x.flat[index[i]]; gradient scatters back with accumulation.
Tensor gather(const Tensor& x, std::vector<std::size_t> index, Shape out_shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

// Fused multi-head scaled dot-product attention over a leading batch axis.
// q: [B, Tq, d], k/v: [B, Tk, d] (rank-2 inputs are treated as B = 1).
// additive_mask, when given, is [B, Tq, Tk] or [Tq, Tk] and is added to the
// scaled logits before the softmax. Heads split d evenly.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 const Tensor& additive_mask = {});

// x: [C, H, W], w: [O, C, k, k], bias: [O] (optional). Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t pad);

}  // namespace mmdit
