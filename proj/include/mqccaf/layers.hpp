// SPDX-License-Identifier: Apache-2.0
/**
 * @file   layers.hpp
 * @brief  Real-valued layers of the diagnosis network: convolution, batch
 *         norm, cross-scale attention fusion, bidirectional GRU and the
 *         dense head.
 */
#pragma once

#include "mqccaf/module.hpp"
#include "mqccaf/ops.hpp"

#include <cstdint>
#include <vector>

namespace mqccaf {

class Conv1dLayer {
public:
  Conv1dLayer(std::size_t c_in, std::size_t c_out, std::size_t kernel,
              std::size_t stride = 1);

  /// He-uniform weights, zero bias.
  void init(std::uint64_t seed);
  Tensor forward(const Tensor &x,
                 ops::Padding padding = ops::Padding::Same) const;

  Tensor &weight() { return weight_; }
  Tensor &bias() { return bias_; }
  std::size_t stride() const { return stride_; }
  void collect(const std::string &prefix, Parameters &params) const;

private:
  std::size_t stride_;
  Tensor weight_, bias_;
};

/// Per-channel batch norm over (batch, length) for [B, C, L] maps.
class BatchNorm1dLayer {
public:
  explicit BatchNorm1dLayer(std::size_t channels, double momentum = 0.9,
                            double epsilon = 1e-5);

  Tensor forward(const Tensor &x, Mode mode);
  void collect(const std::string &prefix, Parameters &params,
               Buffers &buffers) const;

private:
  std::size_t channels_;
  double momentum_, epsilon_;
  Tensor gamma_, beta_, running_mean_, running_var_;
};

class DenseLayer {
public:
  DenseLayer(std::size_t in, std::size_t out);

  void init(std::uint64_t seed);
  /// [B, in] -> [B, out]
  Tensor forward(const Tensor &x) const;

  Tensor &weight() { return weight_; } // [in, out]
  Tensor &bias() { return bias_; }     // [out]
  void collect(const std::string &prefix, Parameters &params) const;

private:
  Tensor weight_, bias_;
};

/// One GRU direction. Gate order in the packed matrices is (z, r, c):
///   z = sigmoid(x Wx_z + h Wh_z + b_z)
///   r = sigmoid(x Wx_r + h Wh_r + b_r)
///   c = tanh(x Wx_c + (r * h) Uc + b_c)
///   h' = (1 - z) * h + z * c,   h_0 = 0
struct GruDirection {
  Tensor input_weight;  // [F, 3H]
  Tensor hidden_weight; // [H, 2H]  (z, r)
  Tensor candidate_weight; // [H, H]
  Tensor bias;          // [3H]
};

class BiGruLayer {
public:
  BiGruLayer(std::size_t features, std::size_t hidden);

  void init(std::uint64_t seed);
  /// [B, F, S] -> [B, 2H, S]; forward-direction states first.
  Tensor forward(const Tensor &x) const;

  std::size_t hidden() const { return hidden_; }
  GruDirection &direction(std::size_t i) { return dirs_[i]; }
  const GruDirection &direction(std::size_t i) const { return dirs_[i]; }
  void collect(const std::string &prefix, Parameters &params) const;

private:
  std::size_t features_, hidden_;
  GruDirection dirs_[2];
};

/// Runs one GRU direction over [B, S, F], returning [B, S, H] in input step
/// order.
Tensor gru_scan(const Tensor &seq, const GruDirection &dir, std::size_t hidden,
                bool reverse);

/// Cross-scale self-attention fusion. Branch maps [B, D, S] are concatenated
/// on channels into a step-major sequence X [B, S, nD]; attention
/// softmax(X Wq (X Wk)^T / sqrt(d_k)) X Wv is gated elementwise by the product
/// of all branch maps, tiled n times along channels.
class CsaffLayer {
public:
  CsaffLayer(std::size_t fused_channels, std::size_t attention_dim);

  void init(std::uint64_t seed);
  /// Returns [B, nD, S]. If `attention` is given it receives the [B, S, S]
  /// attention weights.
  Tensor forward(const std::vector<Tensor> &branches,
                 Tensor *attention = nullptr) const;

  Tensor &query() { return wq_; } // [nD, d_k]
  Tensor &key() { return wk_; }   // [nD, d_k]
  Tensor &value() { return wv_; } // [nD, nD]
  void collect(const std::string &prefix, Parameters &params) const;

private:
  std::size_t fused_, dk_;
  Tensor wq_, wk_, wv_;
};

/// Channel concatenation of equally shaped branch maps.
Tensor concat_fusion(const std::vector<Tensor> &branches);

/// [B, C, S] -> [B, C]
Tensor gap(const Tensor &x);

} // namespace mqccaf
