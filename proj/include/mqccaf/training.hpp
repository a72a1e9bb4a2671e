// SPDX-License-Identifier: Apache-2.0
/**
 * @file   training.hpp
 * @brief  Cross-entropy loss, Adam, the early-stopping training loop and
 *         evaluation metrics.
 */
#pragma once

#include "mqccaf/data.hpp"
#include "mqccaf/model.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace mqccaf {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t max_epochs = 100;
  double learning_rate = 1e-3;
  std::size_t patience = 10;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Mean over rows of -sum_c y_c log(max(p_c, 1e-12)).
/// `probabilities` and `targets` are both [N, C].
Tensor cross_entropy(const Tensor &probabilities, const Tensor &targets);

/// [N, C] one-hot matrix.
Tensor one_hot(std::span<const std::uint32_t> labels, std::size_t classes);

/// Stacks the selected windows into a [B, 1, T] input.
Tensor make_batch(const data::WindowSet &ws, std::span<const std::size_t> idx);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> m, v;
};

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient. Parameters without a gradient are treated as having zero grad.
void adam_step(const Parameters &params, AdamState &state, double lr);

struct EpochLog {
  std::size_t epoch = 0; // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double seconds = 0.0;
};

/// Patience rule on validation loss: an epoch improves only if its loss is
/// strictly below the best so far.
class EarlyStopping {
public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
  /// Records an epoch; returns true when training should stop.
  bool update(std::size_t epoch, double val_loss);
  bool improved() const { return improved_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }

private:
  std::size_t patience_;
  std::size_t best_epoch_ = 0;
  std::size_t since_best_ = 0;
  double best_loss_ = 0.0;
  bool improved_ = false;
};

struct TrainResult {
  std::vector<EpochLog> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
};

using EpochCallback = std::function<void(const EpochLog &)>;

/// Trains in place and leaves the model holding the minimum-val-loss weights.
/// Throws NumericalError if the loss becomes non-finite.
TrainResult train(Model &model, const data::WindowSet &train_set,
                  const data::WindowSet &val_set, const TrainConfig &cfg,
                  const EpochCallback &on_epoch = {});

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  /// confusion[true][predicted]
  std::vector<std::vector<std::size_t>> confusion;
};

EvalResult evaluate(Model &model, const data::WindowSet &ws,
                    std::size_t batch_size = 64);

/// `epoch,train_loss,val_loss,val_acc,seconds`; the seconds column is
/// omitted when `with_seconds` is false.
void write_epoch_log(std::ostream &os, const std::vector<EpochLog> &history,
                     bool with_seconds = true);

} // namespace mqccaf
