// SPDX-License-Identifier: Apache-2.0
/**
 * @file   quaternion.hpp
 * @brief  Quaternion algebra, quaternion convolution and quaternion batch
 *         normalization.
 *
 * A real feature map with C channels (C % 4 == 0) is read as C/4 quaternion
 * channels; channels 4q..4q+3 hold the (r, i, j, k) components of channel q.
 */
#pragma once

#include "mqccaf/module.hpp"
#include "mqccaf/ops.hpp"

#include <array>
#include <cstdint>

namespace mqccaf::quat {

struct Quaternion {
  double a = 0.0, b = 0.0, c = 0.0, d = 0.0;

  double norm_squared() const { return a * a + b * b + c * c + d * d; }
  double norm() const;
  bool operator==(const Quaternion &) const = default;
};

/// p (x) q with the left operand acting as the 4x4 real matrix
///   [a -b -c -d; b a -d c; c d a -b; d -c b a].
Quaternion hamilton_product(const Quaternion &p, const Quaternion &q);

/// Left-multiplication matrix of p, row-major.
std::array<std::array<double, 4>, 4> hamilton_matrix(const Quaternion &p);

/// Expands quaternion filters [q_out, q_in, K, 4] into the equivalent real
/// filter bank [4*q_out, 4*q_in, K] (one 4x4 Hamilton block per tap).
Tensor hamilton_expand(const Tensor &weights);

class QConvLayer {
public:
  QConvLayer(std::size_t q_in, std::size_t q_out, std::size_t kernel);

  std::size_t q_in() const { return q_in_; }
  std::size_t q_out() const { return q_out_; }
  std::size_t kernel() const { return kernel_; }

  /// [q_out, q_in, K, 4] as (w_a, w_b, w_c, w_d) per tap.
  Tensor &weights() { return weights_; }
  const Tensor &weights() const { return weights_; }
  /// [q_out, 4].
  Tensor &bias() { return bias_; }
  const Tensor &bias() const { return bias_; }

  std::size_t param_count() const { return weights_.size() + bias_.size(); }
  void collect(const std::string &prefix, Parameters &params) const;

private:
  std::size_t q_in_, q_out_, kernel_;
  Tensor weights_, bias_;
};

/// x [B, 4*q_in, L] -> [B, 4*q_out, L_out].
Tensor qconv_forward(const Tensor &x, const QConvLayer &layer,
                     std::size_t stride = 1,
                     ops::Padding padding = ops::Padding::Same);

/// Polar initialization: per tap, a Rayleigh(sigma) magnitude with
/// sigma = 1/sqrt(8 * fan_in), fan_in = q_in * K, a uniform phase in
/// [-pi, pi] and a uniform unit imaginary axis. Biases are zeroed.
void quaternion_init(QConvLayer &layer, std::uint64_t seed);

/// Whitening batch norm over the 4 components of each quaternion channel.
///
/// Train mode centres each channel with the batch mean over (batch, length),
/// multiplies by the inverse lower Cholesky factor of (cov + eps*I), then
/// applies the symmetric gain and the shift. Running statistics are blended
/// as running = momentum * running + (1 - momentum) * batch.
class QuatBNLayer {
public:
  explicit QuatBNLayer(std::size_t channels, double momentum = 0.9,
                       double epsilon = 1e-5);

  std::size_t channels() const { return channels_; }
  double momentum() const { return momentum_; }
  double epsilon() const { return epsilon_; }

  /// [Q, 10]: upper triangle (00,01,02,03,11,12,13,22,23,33) of the gain.
  Tensor &gain() { return gain_; }
  /// [Q, 4].
  Tensor &shift() { return shift_; }
  /// [Q, 4] and [Q, 16] (row-major 4x4).
  Tensor &running_mean() { return running_mean_; }
  Tensor &running_cov() { return running_cov_; }
  const Tensor &running_mean() const { return running_mean_; }
  const Tensor &running_cov() const { return running_cov_; }

  Tensor forward(const Tensor &x, Mode mode);

  std::size_t param_count() const { return gain_.size() + shift_.size(); }
  void collect(const std::string &prefix, Parameters &params,
               Buffers &buffers) const;

private:
  std::size_t channels_;
  double momentum_, epsilon_;
  Tensor gain_, shift_, running_mean_, running_cov_;
};

/// Index of gain entry (row, col) within the 10 stored upper-triangle values.
std::size_t gain_index(std::size_t row, std::size_t col);

/// maxpool(relu(quatbn(qconv(x)))) with pool window == stride.
Tensor qcnn_block(const Tensor &x, const QConvLayer &conv, QuatBNLayer &bn,
                  Mode mode, std::size_t pool_window = 2);

} // namespace mqccaf::quat
