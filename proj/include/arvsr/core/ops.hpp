#pragma once

#include <array>
#include <span>
#include <vector>

#include "arvsr/core/tensor.hpp"

namespace arvsr {

// Elementwise binary ops broadcast numpy-style (shapes aligned from the right).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double s);
Tensor mul_scalar(const Tensor& x, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }

Tensor neg(const Tensor& x);
inline Tensor operator-(const Tensor& x) { return neg(x); }
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
// Values outside [lo, hi] are clamped and pass no gradient.
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_dim(const Tensor& x, int dim, bool keepdim = false);
Tensor mean_dim(const Tensor& x, int dim, bool keepdim = false);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& order);
Tensor transpose(const Tensor& x, int a, int b);
// Elements [start, end) along `dim`.
Tensor slice(const Tensor& x, int dim, int64_t start, int64_t end);
Tensor concat(std::span<const Tensor> parts, int dim);
inline Tensor concat(std::initializer_list<Tensor> parts, int dim) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), dim);
}
// Nearest-neighbour upsampling of the last two dimensions by `factor`.
Tensor upsample_nearest2d(const Tensor& x, int factor);

// a: [..., m, k]; b: [k, n] (shared) or [..., k, n] with the same batch dims.
Tensor matmul(const Tensor& a, const Tensor& b);
// x: [..., in]; weight: [in, out]; bias: [out] or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Over the last dimension.
Tensor softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, double eps = 1e-5);

struct Conv3dOptions {
  std::array<int, 3> stride{1, 1, 1};  // t, h, w
  int pad_t_front = 0;
  int pad_t_back = 0;
  int pad_h = 0;
  int pad_w = 0;
};

// Direct zero-padded 3-D convolution.
// x: [B, Cin, T, H, W]; weight: [Cout, Cin, KT, KH, KW]; bias: [Cout] or undefined.
Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv3dOptions& opt = {});
Shape conv3d_output_shape(const Shape& x, const Shape& weight, const Conv3dOptions& opt);

// Rotary embedding over the last dimension of x: [tokens, heads, head_dim].
// Token i is rotated by angle positions[i] * base^(-2j/head_dim) on the pair
// (j, j + head_dim/2).
Tensor rotary_embed(const Tensor& x, std::span<const int64_t> positions, double base);

Tensor mse(const Tensor& a, const Tensor& b);

}  // namespace arvsr
