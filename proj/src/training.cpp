// SPDX-License-Identifier: Apache-2.0
#include "mqccaf/training.hpp"

#include "mqccaf/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace mqccaf {

void TrainConfig::validate() const {
  if (batch_size == 0 || max_epochs == 0 || patience == 0)
    throw std::invalid_argument(
        "batch_size, max_epochs and patience must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("learning_rate must be positive");
  if (patience > max_epochs)
    throw std::invalid_argument("patience must not exceed max_epochs");
}

Tensor cross_entropy(const Tensor &probabilities, const Tensor &targets) {
  constexpr double kFloor = 1e-12;
  if (probabilities.rank() != 2 || probabilities.shape() != targets.shape())
    throw ShapeError("cross_entropy: probabilities " +
                     shape_str(probabilities.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  const std::size_t n = probabilities.dim(0);
  if (n == 0)
    throw ShapeError("cross_entropy: empty batch");
  const auto p = probabilities.data();
  const auto y = targets.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (y[i] != 0.0)
      loss -= y[i] * std::log(std::max(p[i], kFloor));
  loss /= static_cast<double>(n);
  return detail::make_result(
      {}, {loss}, {probabilities, targets}, "cross_entropy",
      [n](Node &self) {
        Node &np = *self.inputs[0];
        if (!np.requires_grad)
          return;
        auto &gp = np.ensure_grad();
        const double g = self.grad[0] / static_cast<double>(n);
        const auto &yv = self.inputs[1]->value;
        for (std::size_t i = 0; i < gp.size(); ++i)
          if (yv[i] != 0.0 && np.value[i] > kFloor)
            gp[i] -= g * yv[i] / np.value[i];
      });
}

Tensor one_hot(std::span<const std::uint32_t> labels, std::size_t classes) {
  Buffer v(labels.size() * classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes)
      throw ShapeError("one_hot: label " + std::to_string(labels[i]) +
                       " outside " + std::to_string(classes) + " classes");
    v[i * classes + labels[i]] = 1.0;
  }
  return Tensor::from({labels.size(), classes}, std::move(v));
}

Tensor make_batch(const data::WindowSet &ws, std::span<const std::size_t> idx) {
  const std::size_t t = ws.length;
  Buffer v(idx.size() * t);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    auto w = ws.window(idx[b]);
    std::copy(w.begin(), w.end(), v.begin() + static_cast<std::ptrdiff_t>(b * t));
  }
  return Tensor::from({idx.size(), 1, t}, std::move(v));
}

void adam_step(const Parameters &params, AdamState &state, double lr) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (const auto &[path, p] : params) {
    auto &m = state.m[path];
    auto &v = state.v[path];
    if (m.size() != p.size()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    if (!p.has_grad())
      continue; // zero gradient: moments decay but stay zero-mean
    const auto g = p.grad();
    Tensor leaf = p;
    auto w = leaf.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mh = m[i] / c1, vh = v[i] / c2;
      w[i] -= lr * mh / (std::sqrt(vh) + state.eps);
    }
  }
}

bool EarlyStopping::update(std::size_t epoch, double val_loss) {
  improved_ = best_epoch_ == 0 || val_loss < best_loss_;
  if (improved_) {
    best_loss_ = val_loss;
    best_epoch_ = epoch;
    since_best_ = 0;
    return false;
  }
  return ++since_best_ >= patience_;
}

namespace {

void check_finite(double v, const std::string &what) {
  if (!std::isfinite(v))
    throw NumericalError("training diverged: " + what + " is " +
                         std::to_string(v));
}

void zero_grads(const Parameters &params) {
  for (auto [path, p] : params)
    p.zero_grad();
}

} // namespace

TrainResult train(Model &model, const data::WindowSet &train_set,
                  const data::WindowSet &val_set, const TrainConfig &cfg,
                  const EpochCallback &on_epoch) {
  cfg.validate();
  if (train_set.size() == 0 || val_set.size() == 0)
    throw data::DataError("train: empty training or validation set");
  const std::size_t classes = model.config().num_classes;
  const Parameters params = model.parameters();
  AdamState adam;
  EarlyStopping stopper(cfg.patience);
  ModelState best = capture_state(model);
  TrainResult result;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(derive_seed(cfg.seed, "shuffle"),
                        static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);

    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + b0, b1 - b0);
      std::vector<std::uint32_t> labels;
      labels.reserve(idx.size());
      for (auto i : idx)
        labels.push_back(train_set.labels[i]);

      zero_grads(params);
      Tensor loss = cross_entropy(
          model.forward(make_batch(train_set, idx), Mode::Train),
          one_hot(labels, classes));
      check_finite(loss.item(), "loss at epoch " + std::to_string(epoch) +
                                    ", batch " +
                                    std::to_string(b0 / cfg.batch_size + 1));
      backward(loss);
      adam_step(params, adam, cfg.learning_rate);
      loss_sum += loss.item() * static_cast<double>(idx.size());
    }
    zero_grads(params);

    const EvalResult val = evaluate(model, val_set);
    check_finite(val.loss, "validation loss at epoch " + std::to_string(epoch));
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(order.size());
    log.val_loss = val.loss;
    log.val_acc = val.accuracy;
    log.seconds = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - start)
                      .count();
    result.history.push_back(log);
    if (on_epoch)
      on_epoch(log);

    const bool stop = stopper.update(epoch, val.loss);
    if (stopper.improved())
      best = capture_state(model);
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }
  restore_state(model, best);
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best_loss();
  return result;
}

EvalResult evaluate(Model &model, const data::WindowSet &ws,
                    std::size_t batch_size) {
  if (ws.size() == 0)
    throw data::DataError("evaluate: empty dataset");
  const std::size_t classes = model.config().num_classes;
  NoGradGuard no_grad;
  EvalResult r;
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t b0 = 0; b0 < ws.size(); b0 += batch_size) {
    const std::size_t b1 = std::min(ws.size(), b0 + batch_size);
    idx.resize(b1 - b0);
    std::iota(idx.begin(), idx.end(), b0);
    const std::span<const std::uint32_t> labels(ws.labels.data() + b0, b1 - b0);
    Tensor probs = model.forward(make_batch(ws, idx), Mode::Eval);
    loss_sum += cross_entropy(probs, one_hot(labels, classes)).item() *
                static_cast<double>(idx.size());
    const auto p = probs.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto row = p.subspan(i * classes, classes);
      const auto pred = static_cast<std::size_t>(
          std::max_element(row.begin(), row.end()) - row.begin());
      ++r.confusion[labels[i]][pred];
      correct += pred == labels[i];
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(ws.size());
  r.loss = loss_sum / static_cast<double>(ws.size());
  return r;
}

void write_epoch_log(std::ostream &os, const std::vector<EpochLog> &history,
                     bool with_seconds) {
  os << "epoch,train_loss,val_loss,val_acc" << (with_seconds ? ",seconds" : "")
     << '\n';
  char buf[128];
  for (const auto &e : history) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g", e.epoch,
                  e.train_loss, e.val_loss, e.val_acc);
    os << buf;
    if (with_seconds) {
      std::snprintf(buf, sizeof(buf), ",%.3f", e.seconds);
      os << buf;
    }
    os << '\n';
  }
}

} // namespace mqccaf
