// SPDX-License-Identifier: Apache-2.0
/**
 * @file   model.hpp
 * @brief  The multi-scale quaternion diagnosis network and its ablation
 *         variants.
 *
 * Pipeline: wide conv -> per-scale stacks of QCNN blocks -> fusion (cross
 * self-attention or concatenation) -> BiGRU -> global average pool ->
 * dense + softmax.
 */
#pragma once

#include "mqccaf/layers.hpp"
#include "mqccaf/quaternion.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace mqccaf {

enum class ModelVariant { CNN, QCNN, MQCNN, MQCNN_CSAFF };

std::string to_string(ModelVariant v);
ModelVariant parse_variant(const std::string &s);

struct ModelConfig {
  std::size_t input_length = 2048;
  std::size_t wide_kernel = 64;
  std::size_t wide_channels = 16;
  std::size_t wide_stride = 1;
  std::vector<std::size_t> scales = {2, 3, 4};
  std::size_t qcnn_channels = 8; // quaternion units per block
  std::size_t blocks_per_branch = 3;
  std::size_t bigru_hidden = 8; // per direction
  std::size_t attention_dim = 32;
  std::size_t num_classes = 5;
  std::size_t pool_window = 2;
  ModelVariant variant = ModelVariant::MQCNN_CSAFF;

  /// Throws ShapeError on an inconsistent configuration.
  void validate() const;
  /// Branch kernels actually built: single-scale variants keep scales[0].
  std::vector<std::size_t> branch_scales() const;
  std::size_t wide_output_length() const;
  std::size_t sequence_length() const;
  std::size_t fused_channels() const;

  std::map<std::string, std::string> to_kv() const;
  /// Keys absent from `kv` keep their defaults; unknown keys are ignored
  /// here (RunConfig rejects them).
  static ModelConfig from_kv(const std::map<std::string, std::string> &kv);
};

class Model {
public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig &config() const { return config_; }

  /// [B, 1, T] or [B, T] -> [B, wide_channels, T'] (ReLU applied).
  Tensor wide_conv(const Tensor &input) const;
  /// One [B, 4*qcnn_channels, T'/pool^blocks] map per branch.
  std::vector<Tensor> multi_scale_extract(const Tensor &fw, Mode mode);
  /// CSAFF for the full variant, channel concatenation otherwise.
  Tensor fuse(const std::vector<Tensor> &branches,
              Tensor *attention = nullptr) const;
  /// [B, F, S] -> [B, 2H, S]
  Tensor bigru(const Tensor &fused) const;
  /// [B, 2H] -> class probabilities [B, C].
  Tensor classify(const Tensor &pooled) const;

  /// Full forward; returns probabilities [B, C].
  Tensor forward(const Tensor &input, Mode mode);
  std::vector<std::size_t> predict(const Tensor &input);

  Parameters parameters() const;
  Buffers buffers() const;
  std::size_t count_params() const;

  /// Copies every parameter and buffer value from `other` (same config).
  void load_state(const Parameters &params, const Buffers &buffers);

private:
  struct Branch {
    std::vector<quat::QConvLayer> qconv;
    std::vector<quat::QuatBNLayer> qbn;
    std::vector<Conv1dLayer> conv; // CNN variant
    std::vector<BatchNorm1dLayer> bn;
  };

  ModelConfig config_;
  Conv1dLayer wide_;
  std::vector<Branch> branches_;
  std::unique_ptr<CsaffLayer> csaff_;
  BiGruLayer bigru_;
  DenseLayer head_;
};

/// Snapshot of all parameter and buffer values, keyed by path.
struct ModelState {
  std::map<std::string, std::vector<double>> values;
};
ModelState capture_state(const Model &model);
void restore_state(Model &model, const ModelState &state);

/// Checkpoint container: magic, version, config as key=value text, then one
/// record per parameter/buffer (kind, path, shape, little-endian f64 data).
void save_checkpoint(const Model &model, const std::filesystem::path &path);
Model load_checkpoint(const std::filesystem::path &path);

} // namespace mqccaf
