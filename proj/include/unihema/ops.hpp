#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "unihema/tensor.hpp"

// Differentiable tensor operations. Binary elementwise ops require identical
// shapes; the only broadcast is add_bias (trailing-axis vector).
namespace unihema {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);

// x[..., n] + b[n]
Tensor add_bias(const Tensor& x, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor neg(const Tensor& x);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
// log(1 + e^x), computed stably.
Tensor softplus(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Weighted sum with constant weights: sum_i w[i] * x[i].
Tensor dot_const(const Tensor& x, std::span<const double> weights);

// Column mean of a 2-d tensor, [t×d] -> [1×d]. With `canonical_order` each
// column is summed in ascending value order, which makes the result exactly
// invariant to row permutations.
Tensor mean_rows(const Tensor& x, bool canonical_order = false);
// [c×h×w] -> [1×c]
Tensor spatial_mean(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// x[t×in] · W[out×in]^T + b[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Softmax along `axis`, stabilized by max subtraction.
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

// Per-row standardization over the last axis followed by gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// x[c_in×h×w], weight[c_out×c_in×kh×kw], bias[c_out] (optional).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t pad);
// x[c_in×h×w], weight[c_in×c_out×kh×kw]; output extent (h-1)·stride - 2·pad + kh.
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        std::size_t stride, std::size_t pad);

// out[q,h,w] = sum_c mask_emb[q,c] * fmap[c,h,w], c summed in ascending order.
Tensor contract(const Tensor& mask_emb, const Tensor& fmap);

// Half-pixel bilinear resize of [c×h×w] to [c×H×W].
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);

Tensor reshape(const Tensor& x, Shape shape);
// Rows [begin, end) along axis 0.
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
// Columns [begin, end) of a 2-d tensor.
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Rows of x (axis 0) at `indices`; repeated indices accumulate gradient.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);
// out[i] = x[i, indices[i]] for a 2-d x.
Tensor pick(const Tensor& x, std::span<const std::size_t> indices);

// Non-differentiable helpers.
std::vector<std::size_t> argmax_rows(const Tensor& x);
bool all_finite(const Tensor& x);

}  // namespace unihema
