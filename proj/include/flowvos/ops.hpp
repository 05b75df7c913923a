#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "flowvos/tensor.hpp"

// Differentiable tensor operations. Every op has a reverse (adjoint) and a
// forward (tangent) rule. Only scalar-vs-tensor broadcasting exists; channel
// biases go through the explicit add_channel_bias expand.
namespace flowvos {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
// `s` must hold a single element; result is s * a.
Tensor scale_by(const Tensor& a, const Tensor& s);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor square(const Tensor& a);

// Softmax along `axis`, computed with max subtraction.
Tensor softmax(const Tensor& a, std::size_t axis);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor squared_norm(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor flatten(const Tensor& a);

// Concatenation / slicing along the leading axis.
Tensor concat(std::span<const Tensor> parts);
Tensor concat(std::initializer_list<Tensor> parts);
Tensor slice(const Tensor& a, std::size_t begin, std::size_t end);

// Cross-correlation. input C_in x H x W, kernel C_out x C_in x k x k (k odd).
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding);
// x: C x H x W, bias: C. Adds bias[c] to every pixel of channel c.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
// 2x2 average pool, stride 2. H and W must be even.
Tensor avg_pool2(const Tensor& x);
// Bilinear 2x upsampling with half-pixel centers (edges clamped).
Tensor upsample2x(const Tensor& x);

// Mean binary cross-entropy between logits and targets in [0, 1]; targets are
// constants.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

} // namespace flowvos
