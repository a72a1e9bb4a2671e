// SPDX-License-Identifier: Apache-2.0
/**
 * @file   ops.hpp
 * @brief  Differentiable primitives over mqccaf::Tensor.
 *
 * Layout conventions: sequences are channel-major [B, C, L] for the
 * convolutional stages and step-major [B, S, F] for attention/recurrence.
 */
#pragma once

#include "mqccaf/tensor.hpp"

#include <vector>

namespace mqccaf::ops {

enum class Padding { Same, Valid };

struct PadSplit {
  std::size_t left = 0;
  std::size_t right = 0;
};

/// `Same` pads K-1 in total with the extra element on the left.
PadSplit conv_padding(std::size_t kernel, Padding padding);
std::size_t conv_output_length(std::size_t length, std::size_t kernel,
                               std::size_t stride, Padding padding);

/// Cross-correlation. input [B, C_in, L] (or [C_in, L]), weights
/// [C_out, C_in, K], bias [C_out] (may be undefined).
Tensor conv1d(const Tensor &input, const Tensor &weights, const Tensor &bias,
              std::size_t stride = 1, Padding padding = Padding::Same);

/// a [M,K] x b [K,N]; a [B,M,K] x b [K,N]; a [B,M,K] x b [B,K,N].
Tensor matmul(const Tensor &a, const Tensor &b);

Tensor relu(const Tensor &x);
Tensor sigmoid(const Tensor &x);
Tensor tanh(const Tensor &x);
Tensor softmax(const Tensor &x, std::size_t axis);

/// Max pooling along the last axis.
Tensor maxpool1d(const Tensor &x, std::size_t window, std::size_t stride);

/// Mean over one axis; the axis is removed from the shape.
Tensor mean(const Tensor &x, std::size_t axis);
/// Sum of all elements, shape [1].
Tensor sum(const Tensor &x);

/// Elementwise with suffix broadcasting of `b` (b.shape is a suffix of
/// a.shape), e.g. [B, N] + [N].
Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
Tensor scale(const Tensor &x, double factor);

Tensor concat(const std::vector<Tensor> &parts, std::size_t axis);
Tensor transpose(const Tensor &x, std::size_t axis0, std::size_t axis1);
Tensor reshape(const Tensor &x, Shape shape);
Tensor slice(const Tensor &x, std::size_t axis, std::size_t start,
             std::size_t length);

} // namespace mqccaf::ops
