// SPDX-License-Identifier: Apache-2.0
#include "mqccaf/layers.hpp"

#include "mqccaf/rng.hpp"

#include <cmath>

namespace mqccaf {

namespace {

void fill_uniform(Tensor &t, double bound, Rng &rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto &v : t.mutable_data())
    v = dist(rng);
}

} // namespace

Conv1dLayer::Conv1dLayer(std::size_t c_in, std::size_t c_out,
                         std::size_t kernel, std::size_t stride)
    : stride_(stride), weight_(Tensor::zeros({c_out, c_in, kernel}, true)),
      bias_(Tensor::zeros({c_out}, true)) {}

void Conv1dLayer::init(std::uint64_t seed) {
  Rng rng(seed);
  const double fan_in = static_cast<double>(weight_.dim(1) * weight_.dim(2));
  fill_uniform(weight_, std::sqrt(6.0 / fan_in), rng);
  auto b = bias_.mutable_data();
  std::fill(b.begin(), b.end(), 0.0);
}

Tensor Conv1dLayer::forward(const Tensor &x, ops::Padding padding) const {
  return ops::conv1d(x, weight_, bias_, stride_, padding);
}

void Conv1dLayer::collect(const std::string &prefix, Parameters &params) const {
  params[join_path(prefix, "weight")] = weight_;
  params[join_path(prefix, "bias")] = bias_;
}

BatchNorm1dLayer::BatchNorm1dLayer(std::size_t channels, double momentum,
                                   double epsilon)
    : channels_(channels), momentum_(momentum), epsilon_(epsilon),
      gamma_(Tensor::full({channels}, 1.0, true)),
      beta_(Tensor::zeros({channels}, true)),
      running_mean_(Tensor::zeros({channels})),
      running_var_(Tensor::full({channels}, 1.0)) {}

void BatchNorm1dLayer::collect(const std::string &prefix, Parameters &params,
                               Buffers &buffers) const {
  params[join_path(prefix, "gamma")] = gamma_;
  params[join_path(prefix, "beta")] = beta_;
  buffers[join_path(prefix, "running_mean")] = running_mean_;
  buffers[join_path(prefix, "running_var")] = running_var_;
}

Tensor BatchNorm1dLayer::forward(const Tensor &x, Mode mode) {
  if (x.rank() != 3 || x.dim(1) != channels_)
    throw ShapeError("batchnorm1d: expected [B, " + std::to_string(channels_) +
                     ", L], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), c = channels_, len = x.dim(2);
  const std::size_t n = batch * len;
  const bool train = mode == Mode::Train;
  if (train && n < 2)
    throw ShapeError("batchnorm1d: train mode needs batch*length >= 2");
  auto xv = x.data();
  Buffer xhat(x.size()), out(x.size()), inv_std(c);
  auto gv = gamma_.data(), bv = beta_.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu = 0.0, var = 0.0;
    if (train) {
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t l = 0; l < len; ++l)
          mu += xv[(b * c + ch) * len + l];
      mu /= static_cast<double>(n);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t l = 0; l < len; ++l) {
          const double d = xv[(b * c + ch) * len + l] - mu;
          var += d * d;
        }
      var /= static_cast<double>(n);
      auto rm = running_mean_.mutable_data();
      auto rv = running_var_.mutable_data();
      rm[ch] = momentum_ * rm[ch] + (1.0 - momentum_) * mu;
      rv[ch] = momentum_ * rv[ch] + (1.0 - momentum_) * var;
    } else {
      mu = running_mean_.data()[ch];
      var = running_var_.data()[ch];
    }
    inv_std[ch] = 1.0 / std::sqrt(var + epsilon_);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t l = 0; l < len; ++l) {
        const std::size_t i = (b * c + ch) * len + l;
        xhat[i] = (xv[i] - mu) * inv_std[ch];
        out[i] = gv[ch] * xhat[i] + bv[ch];
      }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma_, beta_}, "batchnorm1d",
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node &self) {
        Node &nx = *self.inputs[0], &ng = *self.inputs[1],
             &nb = *self.inputs[2];
        const auto &g = self.grad;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t l = 0; l < len; ++l) {
              const std::size_t i = (b * c + ch) * len + l;
              sum_g += g[i];
              sum_gx += g[i] * xhat[i];
            }
          if (ng.requires_grad)
            ng.ensure_grad()[ch] += sum_gx;
          if (nb.requires_grad)
            nb.ensure_grad()[ch] += sum_g;
          if (!nx.requires_grad)
            continue;
          auto &gx = nx.ensure_grad();
          const double gamma = ng.value[ch];
          const double dn = static_cast<double>(n);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t l = 0; l < len; ++l) {
              const std::size_t i = (b * c + ch) * len + l;
              if (train)
                gx[i] += gamma * inv_std[ch] *
                         (g[i] - sum_g / dn - xhat[i] * sum_gx / dn);
              else
                gx[i] += gamma * inv_std[ch] * g[i];
            }
        }
      });
}

DenseLayer::DenseLayer(std::size_t in, std::size_t out)
    : weight_(Tensor::zeros({in, out}, true)),
      bias_(Tensor::zeros({out}, true)) {}

void DenseLayer::init(std::uint64_t seed) {
  Rng rng(seed);
  const double bound =
      std::sqrt(6.0 / static_cast<double>(weight_.dim(0) + weight_.dim(1)));
  fill_uniform(weight_, bound, rng);
  auto b = bias_.mutable_data();
  std::fill(b.begin(), b.end(), 0.0);
}

Tensor DenseLayer::forward(const Tensor &x) const {
  return ops::add(ops::matmul(x, weight_), bias_);
}

void DenseLayer::collect(const std::string &prefix, Parameters &params) const {
  params[join_path(prefix, "weight")] = weight_;
  params[join_path(prefix, "bias")] = bias_;
}

BiGruLayer::BiGruLayer(std::size_t features, std::size_t hidden)
    : features_(features), hidden_(hidden) {
  for (auto &d : dirs_) {
    d.input_weight = Tensor::zeros({features, 3 * hidden}, true);
    d.hidden_weight = Tensor::zeros({hidden, 2 * hidden}, true);
    d.candidate_weight = Tensor::zeros({hidden, hidden}, true);
    d.bias = Tensor::zeros({3 * hidden}, true);
  }
}

void BiGruLayer::init(std::uint64_t seed) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_));
  for (std::size_t i = 0; i < 2; ++i) {
    Rng rng(derive_seed(seed, i));
    auto &d = dirs_[i];
    fill_uniform(d.input_weight, bound, rng);
    fill_uniform(d.hidden_weight, bound, rng);
    fill_uniform(d.candidate_weight, bound, rng);
    fill_uniform(d.bias, bound, rng);
  }
}

Tensor gru_scan(const Tensor &seq, const GruDirection &dir, std::size_t hidden,
                bool reverse) {
  const std::size_t batch = seq.dim(0), steps = seq.dim(1);
  const std::size_t h2 = 2 * hidden;
  Tensor projected = ops::add(ops::matmul(seq, dir.input_weight), dir.bias);
  Tensor h = Tensor::zeros({batch, hidden});
  std::vector<Tensor> states(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const std::size_t t = reverse ? steps - 1 - i : i;
    Tensor xt = ops::reshape(ops::slice(projected, 1, t, 1),
                             {batch, 3 * hidden});
    Tensor gates = ops::sigmoid(ops::add(ops::slice(xt, 1, 0, h2),
                                         ops::matmul(h, dir.hidden_weight)));
    Tensor z = ops::slice(gates, 1, 0, hidden);
    Tensor r = ops::slice(gates, 1, hidden, hidden);
    Tensor cand = ops::tanh(
        ops::add(ops::slice(xt, 1, h2, hidden),
                 ops::matmul(ops::mul(r, h), dir.candidate_weight)));
    h = ops::add(h, ops::mul(z, ops::sub(cand, h)));
    states[t] = ops::reshape(h, {batch, 1, hidden});
  }
  return ops::concat(states, 1);
}

Tensor BiGruLayer::forward(const Tensor &x) const {
  if (x.rank() != 3 || x.dim(1) != features_)
    throw ShapeError("bigru: expected [B, " + std::to_string(features_) +
                     ", S], got " + shape_str(x.shape()));
  Tensor seq = ops::transpose(x, 1, 2); // [B, S, F]
  Tensor fwd = gru_scan(seq, dirs_[0], hidden_, false);
  Tensor bwd = gru_scan(seq, dirs_[1], hidden_, true);
  return ops::transpose(ops::concat({fwd, bwd}, 2), 1, 2);
}

void BiGruLayer::collect(const std::string &prefix, Parameters &params) const {
  const char *names[2] = {"forward", "backward"};
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string p = join_path(prefix, names[i]);
    params[join_path(p, "input_weight")] = dirs_[i].input_weight;
    params[join_path(p, "hidden_weight")] = dirs_[i].hidden_weight;
    params[join_path(p, "candidate_weight")] = dirs_[i].candidate_weight;
    params[join_path(p, "bias")] = dirs_[i].bias;
  }
}

CsaffLayer::CsaffLayer(std::size_t fused_channels, std::size_t attention_dim)
    : fused_(fused_channels), dk_(attention_dim),
      wq_(Tensor::zeros({fused_channels, attention_dim}, true)),
      wk_(Tensor::zeros({fused_channels, attention_dim}, true)),
      wv_(Tensor::zeros({fused_channels, fused_channels}, true)) {}

void CsaffLayer::init(std::uint64_t seed) {
  Rng rng(seed);
  fill_uniform(wq_, std::sqrt(6.0 / static_cast<double>(fused_ + dk_)), rng);
  fill_uniform(wk_, std::sqrt(6.0 / static_cast<double>(fused_ + dk_)), rng);
  fill_uniform(wv_, std::sqrt(3.0 / static_cast<double>(fused_)), rng);
}

Tensor concat_fusion(const std::vector<Tensor> &branches) {
  if (branches.empty())
    throw ShapeError("fusion: no branches");
  for (const auto &b : branches)
    if (b.shape() != branches[0].shape())
      throw ShapeError("fusion: branch shapes differ (" +
                       shape_str(b.shape()) + " vs " +
                       shape_str(branches[0].shape()) + ")");
  return branches.size() == 1 ? branches[0] : ops::concat(branches, 1);
}

Tensor CsaffLayer::forward(const std::vector<Tensor> &branches,
                           Tensor *attention) const {
  Tensor fused = concat_fusion(branches);
  if (fused.rank() != 3 || fused.dim(1) != fused_)
    throw ShapeError("csaff: expected " + std::to_string(fused_) +
                     " fused channels, got " + shape_str(fused.shape()));
  Tensor x = ops::transpose(fused, 1, 2); // [B, S, nD]
  Tensor q = ops::matmul(x, wq_);
  Tensor k = ops::matmul(x, wk_);
  Tensor v = ops::matmul(x, wv_);
  Tensor scores =
      ops::scale(ops::matmul(q, ops::transpose(k, 1, 2)),
                 1.0 / std::sqrt(static_cast<double>(dk_)));
  Tensor weights = ops::softmax(scores, 2);
  if (attention)
    *attention = weights;
  Tensor attended = ops::transpose(ops::matmul(weights, v), 1, 2);

  Tensor product = branches[0];
  for (std::size_t i = 1; i < branches.size(); ++i)
    product = ops::mul(product, branches[i]);
  std::vector<Tensor> tiles(branches.size(), product);
  Tensor gate = tiles.size() == 1 ? product : ops::concat(tiles, 1);
  return ops::mul(attended, gate);
}

void CsaffLayer::collect(const std::string &prefix, Parameters &params) const {
  params[join_path(prefix, "query")] = wq_;
  params[join_path(prefix, "key")] = wk_;
  params[join_path(prefix, "value")] = wv_;
}

Tensor gap(const Tensor &x) {
  if (x.rank() != 3)
    throw ShapeError("gap: expected [B, C, S], got " + shape_str(x.shape()));
  return ops::mean(x, 2);
}

} // namespace mqccaf
