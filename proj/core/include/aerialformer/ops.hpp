#pragma once

#include <span>
#include <vector>

#include "aerialformer/tensor.hpp"

/// Differentiable operators over `Tensor`. Every op validates its operands,
/// computes its result eagerly, and records a backward rule on the active
/// `GradTape` when any operand requires grad.
namespace aerialformer::ops {

// Elementwise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// Broadcast shape of two operands, or ShapeError naming both.
Shape broadcast_shape(const Shape& a, const Shape& b);

/// Batched matrix product over the last two axes; leading axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& order);
/// Swaps the last two axes.
Tensor transpose(const Tensor& x);

/// Cyclic shift along `axes`; elements leaving one end re-enter at the other.
Tensor roll(const Tensor& x, const std::vector<Index>& shifts, const std::vector<int>& axes);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, Index start, Index length);

/// Row gather: out[i, :] = table[indices[i], :] for a 2-D table.
Tensor gather_rows(const Tensor& table, std::span<const Index> indices);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);

/// Normalises over the last axis, then applies `gamma * x + beta`.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

/// Per-channel batch statistics of an (N, C, H, W) tensor (biased variance).
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> var;
};

/// Training-mode batch norm over (N, H, W) per channel. Writes the batch
/// statistics used to `stats` when non-null.
Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                        ChannelStats* stats = nullptr);

/// Inference-mode batch norm with fixed statistics.
Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       std::span<const double> running_mean, std::span<const double> running_var,
                       double eps);

/// Exact GELU: x * Phi(x) with Phi the standard normal CDF (erf form).
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);

struct ConvGeometry {
  Index stride = 1;
  Index padding = 0;
  Index dilation = 1;
};

/// Output extent of a convolution along one axis; GeometryError if < 1.
Index conv_output_size(Index input, Index kernel, const ConvGeometry& g);

/// 2-D cross-correlation. x: (N, Cin, H, W); weight: (Cout, Cin, k, k);
/// bias: (Cout) or undefined. Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g);

/// Transposed convolution (the adjoint of `conv2d` w.r.t. its input).
/// x: (N, Cin, H, W); weight: (Cin, Cout, k, k); bias: (Cout) or undefined.
/// Output extent per axis: (H - 1) * stride - 2 * padding + k.
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Index stride,
                        Index padding);

}  // namespace aerialformer::ops
