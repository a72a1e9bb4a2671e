// SPDX-License-Identifier: Apache-2.0
#include "mqccaf/quaternion.hpp"

#include "mqccaf/rng.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <numbers>

namespace mqccaf::quat {

namespace {

// Hamilton left-multiplication pattern: block[r][c] = sign * w[component].
constexpr std::size_t kComponent[4][4] = {
    {0, 1, 2, 3}, {1, 0, 3, 2}, {2, 3, 0, 1}, {3, 2, 1, 0}};
constexpr double kSign[4][4] = {
    {1, -1, -1, -1}, {1, 1, -1, 1}, {1, 1, 1, -1}, {1, -1, 1, 1}};

using Mat4 = Eigen::Matrix4d;

Mat4 gain_matrix(const double *g) {
  Mat4 m;
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          g[gain_index(r, c)];
  return m;
}

Mat4 lower(const Mat4 &m) { return m.triangularView<Eigen::Lower>(); }

} // namespace

double Quaternion::norm() const { return std::sqrt(norm_squared()); }

std::array<std::array<double, 4>, 4> hamilton_matrix(const Quaternion &p) {
  const double w[4] = {p.a, p.b, p.c, p.d};
  std::array<std::array<double, 4>, 4> m{};
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      m[r][c] = kSign[r][c] * w[kComponent[r][c]];
  return m;
}

Quaternion hamilton_product(const Quaternion &p, const Quaternion &q) {
  return {p.a * q.a - p.b * q.b - p.c * q.c - p.d * q.d,
          p.b * q.a + p.a * q.b - p.d * q.c + p.c * q.d,
          p.c * q.a + p.d * q.b + p.a * q.c - p.b * q.d,
          p.d * q.a - p.c * q.b + p.b * q.c + p.a * q.d};
}

Tensor hamilton_expand(const Tensor &weights) {
  if (weights.rank() != 4 || weights.dim(3) != 4)
    throw ShapeError("hamilton_expand: weights must be [q_out, q_in, K, 4], "
                     "got " + shape_str(weights.shape()));
  const std::size_t qo = weights.dim(0), qi = weights.dim(1),
                    k = weights.dim(2);
  const std::size_t ci = 4 * qi;
  Buffer out(16 * qo * qi * k);
  auto w = weights.data();
  auto out_index = [=](std::size_t p, std::size_t r, std::size_t q,
                       std::size_t c, std::size_t t) {
    return ((4 * p + r) * ci + (4 * q + c)) * k + t;
  };
  for (std::size_t p = 0; p < qo; ++p)
    for (std::size_t q = 0; q < qi; ++q)
      for (std::size_t t = 0; t < k; ++t) {
        const double *tap = w.data() + ((p * qi + q) * k + t) * 4;
        for (std::size_t r = 0; r < 4; ++r)
          for (std::size_t c = 0; c < 4; ++c)
            out[out_index(p, r, q, c, t)] = kSign[r][c] * tap[kComponent[r][c]];
      }
  return detail::make_result(
      {4 * qo, ci, k}, std::move(out), {weights}, "hamilton_expand",
      [=](Node &self) {
        auto &gw = self.inputs[0]->ensure_grad();
        for (std::size_t p = 0; p < qo; ++p)
          for (std::size_t q = 0; q < qi; ++q)
            for (std::size_t t = 0; t < k; ++t) {
              double *tap = gw.data() + ((p * qi + q) * k + t) * 4;
              for (std::size_t r = 0; r < 4; ++r)
                for (std::size_t c = 0; c < 4; ++c)
                  tap[kComponent[r][c]] +=
                      kSign[r][c] * self.grad[out_index(p, r, q, c, t)];
            }
      });
}

QConvLayer::QConvLayer(std::size_t q_in, std::size_t q_out,
                       std::size_t kernel)
    : q_in_(q_in), q_out_(q_out), kernel_(kernel),
      weights_(Tensor::zeros({q_out, q_in, kernel, 4}, true)),
      bias_(Tensor::zeros({q_out, 4}, true)) {}

void QConvLayer::collect(const std::string &prefix, Parameters &params) const {
  params[join_path(prefix, "weight")] = weights_;
  params[join_path(prefix, "bias")] = bias_;
}

Tensor qconv_forward(const Tensor &x, const QConvLayer &layer,
                     std::size_t stride, ops::Padding padding) {
  const std::size_t channels = x.rank() >= 2 ? x.dim(x.rank() - 2) : 0;
  if (channels % 4 != 0)
    throw ShapeError("qconv: channel count " + std::to_string(channels) +
                     " is not divisible into quaternion groups of 4");
  if (channels != 4 * layer.q_in())
    throw ShapeError("qconv: layer expects " + std::to_string(layer.q_in()) +
                     " quaternion channels, input has " +
                     std::to_string(channels / 4));
  Tensor bank = hamilton_expand(layer.weights());
  Tensor bias = ops::reshape(layer.bias(), {4 * layer.q_out()});
  return ops::conv1d(x, bank, bias, stride, padding);
}

void quaternion_init(QConvLayer &layer, std::uint64_t seed) {
  Rng rng(seed);
  const double fan_in = static_cast<double>(layer.q_in() * layer.kernel());
  const double sigma = 1.0 / std::sqrt(2.0 * fan_in * 4.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> phase(-std::numbers::pi,
                                               std::numbers::pi);
  auto w = layer.weights().mutable_data();
  for (std::size_t i = 0; i < w.size(); i += 4) {
    const double n1 = normal(rng), n2 = normal(rng);
    const double magnitude = sigma * std::sqrt(n1 * n1 + n2 * n2);
    double u[3];
    double len = 0.0;
    do {
      for (auto &v : u)
        v = normal(rng);
      len = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
    } while (len < 1e-12);
    const double theta = phase(rng);
    w[i] = magnitude * std::cos(theta);
    const double s = magnitude * std::sin(theta) / len;
    w[i + 1] = s * u[0];
    w[i + 2] = s * u[1];
    w[i + 3] = s * u[2];
  }
  auto b = layer.bias().mutable_data();
  std::fill(b.begin(), b.end(), 0.0);
}

std::size_t gain_index(std::size_t row, std::size_t col) {
  if (row > col)
    std::swap(row, col);
  // Row offsets of the packed upper triangle: 0, 4, 7, 9.
  constexpr std::size_t kRowStart[4] = {0, 4, 7, 9};
  return kRowStart[row] + (col - row);
}

QuatBNLayer::QuatBNLayer(std::size_t channels, double momentum,
                         double epsilon)
    : channels_(channels), momentum_(momentum), epsilon_(epsilon),
      gain_(Tensor::zeros({channels, 10}, true)),
      shift_(Tensor::zeros({channels, 4}, true)),
      running_mean_(Tensor::zeros({channels, 4})),
      running_cov_(Tensor::zeros({channels, 16})) {
  auto g = gain_.mutable_data();
  auto cov = running_cov_.mutable_data();
  for (std::size_t q = 0; q < channels; ++q)
    for (std::size_t r = 0; r < 4; ++r) {
      g[q * 10 + gain_index(r, r)] = 1.0;
      cov[q * 16 + r * 5] = 1.0;
    }
}

void QuatBNLayer::collect(const std::string &prefix, Parameters &params,
                          Buffers &buffers) const {
  params[join_path(prefix, "gain")] = gain_;
  params[join_path(prefix, "shift")] = shift_;
  buffers[join_path(prefix, "running_mean")] = running_mean_;
  buffers[join_path(prefix, "running_cov")] = running_cov_;
}

Tensor QuatBNLayer::forward(const Tensor &x, Mode mode) {
  if (x.rank() != 3)
    throw ShapeError("quatbn: input must be [B, 4Q, L], got " +
                     shape_str(x.shape()));
  const std::size_t batch = x.dim(0), c = x.dim(1), len = x.dim(2);
  if (c != 4 * channels_)
    throw ShapeError("quatbn: expected " + std::to_string(4 * channels_) +
                     " channels, got " + std::to_string(c));
  const std::size_t n = batch * len;
  const bool train = mode == Mode::Train;
  if (train && n < 2)
    throw ShapeError("quatbn: train mode needs batch*length >= 2");

  using Block = Eigen::Map<const Eigen::Matrix<double, 4, Eigen::Dynamic,
                                              Eigen::RowMajor>>;
  using MutBlock =
      Eigen::Map<Eigen::Matrix<double, 4, Eigen::Dynamic, Eigen::RowMajor>>;
  const auto ln = static_cast<Eigen::Index>(len);
  // Channel q of batch item b is a contiguous row-major 4 x len block.
  auto offset = [=](std::size_t b, std::size_t q) {
    return (b * c + 4 * q) * len;
  };

  const double *xv = x.data().data();
  Buffer out(x.size());
  Buffer whitened(x.size()); // y = W (x - mu)
  std::vector<Mat4> whiteners(channels_), factors(channels_);
  std::vector<Eigen::Vector4d> means(channels_);
  auto gv = gain_.data();
  auto sv = shift_.data();
  Eigen::Matrix<double, 4, Eigen::Dynamic, Eigen::RowMajor> xc(4, ln);

  for (std::size_t q = 0; q < channels_; ++q) {
    Eigen::Vector4d mu;
    Mat4 cov;
    if (train) {
      mu.setZero();
      for (std::size_t b = 0; b < batch; ++b)
        mu += Block(xv + offset(b, q), 4, ln).rowwise().sum();
      mu /= static_cast<double>(n);
      cov.setZero();
      for (std::size_t b = 0; b < batch; ++b) {
        xc = Block(xv + offset(b, q), 4, ln).colwise() - mu;
        cov.noalias() += xc * xc.transpose();
      }
      cov /= static_cast<double>(n);
      auto rm = running_mean_.mutable_data();
      auto rc = running_cov_.mutable_data();
      Eigen::Map<Eigen::Vector4d>(rm.data() + q * 4) =
          momentum_ * Eigen::Map<Eigen::Vector4d>(rm.data() + q * 4) +
          (1.0 - momentum_) * mu;
      Eigen::Map<Mat4>(rc.data() + q * 16) =
          momentum_ * Eigen::Map<Mat4>(rc.data() + q * 16) +
          (1.0 - momentum_) * cov;
    } else {
      mu = Eigen::Map<const Eigen::Vector4d>(running_mean_.data().data() + q * 4);
      cov = Eigen::Map<const Mat4>(running_cov_.data().data() + q * 16);
    }
    Mat4 reg = cov + epsilon_ * Mat4::Identity();
    Eigen::LLT<Mat4> llt(reg);
    if (llt.info() != Eigen::Success)
      throw NumericalError("quatbn: covariance is not positive definite");
    Mat4 chol = llt.matrixL();
    Mat4 w = chol.triangularView<Eigen::Lower>().solve(Mat4::Identity());
    w = lower(w);
    const Mat4 gain = gain_matrix(gv.data() + q * 10);
    const Mat4 gw = gain * w;
    const Eigen::Vector4d eta(sv[q * 4], sv[q * 4 + 1], sv[q * 4 + 2],
                              sv[q * 4 + 3]);
    for (std::size_t b = 0; b < batch; ++b) {
      xc = Block(xv + offset(b, q), 4, ln).colwise() - mu;
      MutBlock(whitened.data() + offset(b, q), 4, ln).noalias() = w * xc;
      MutBlock o(out.data() + offset(b, q), 4, ln);
      o.noalias() = gw * xc;
      o.colwise() += eta;
    }
    whiteners[q] = w;
    factors[q] = chol;
    means[q] = mu;
  }

  const std::size_t channels = channels_;
  return detail::make_result(
      x.shape(), std::move(out), {x, gain_, shift_}, "quatbn",
      [=, whitened = std::move(whitened), whiteners = std::move(whiteners),
       factors = std::move(factors), means = std::move(means)](Node &self) {
        Node &nx = *self.inputs[0], &ng = *self.inputs[1],
             &ns = *self.inputs[2];
        const double *gp = self.grad.data();
        const double *xp = nx.value.data();
        Eigen::Matrix<double, 4, Eigen::Dynamic, Eigen::RowMajor> xc(4, ln),
            dy(4, ln);
        for (std::size_t q = 0; q < channels; ++q) {
          const Mat4 gain = gain_matrix(ng.value.data() + q * 10);
          const Mat4 &w = whiteners[q];
          const Eigen::Vector4d &mu = means[q];
          Mat4 d_gain = Mat4::Zero();
          Eigen::Vector4d d_eta = Eigen::Vector4d::Zero();
          Mat4 d_w = Mat4::Zero();
          for (std::size_t b = 0; b < batch; ++b) {
            Block go(gp + offset(b, q), 4, ln);
            d_eta += go.rowwise().sum();
            d_gain.noalias() +=
                go * Block(whitened.data() + offset(b, q), 4, ln).transpose();
            if (train && nx.requires_grad) {
              xc = Block(xp + offset(b, q), 4, ln).colwise() - mu;
              dy.noalias() = gain.transpose() * go;
              d_w.noalias() += dy * xc.transpose();
            }
          }
          if (ng.requires_grad) {
            auto &gg = ng.ensure_grad();
            for (std::size_t r = 0; r < 4; ++r)
              for (std::size_t s = r; s < 4; ++s) {
                const auto ri = static_cast<Eigen::Index>(r),
                           si = static_cast<Eigen::Index>(s);
                gg[q * 10 + gain_index(r, s)] +=
                    r == s ? d_gain(ri, ri) : d_gain(ri, si) + d_gain(si, ri);
              }
          }
          if (ns.requires_grad) {
            auto &gs = ns.ensure_grad();
            for (std::size_t r = 0; r < 4; ++r)
              gs[q * 4 + r] += d_eta(static_cast<Eigen::Index>(r));
          }
          if (!nx.requires_grad)
            continue;
          // dx = M1 go + M2 xc - mean over positions; xc has zero mean.
          const Mat4 m1 = w.transpose() * gain.transpose();
          Mat4 m2 = Mat4::Zero();
          Eigen::Vector4d mean_dx = Eigen::Vector4d::Zero();
          if (train) {
            const Mat4 &chol = factors[q];
            Mat4 d_l = lower(-w.transpose() * lower(d_w) * w.transpose());
            Mat4 phi = lower(chol.transpose() * d_l);
            phi.diagonal() *= 0.5;
            Mat4 s = w.transpose() * phi * w;
            m2 = (1.0 / static_cast<double>(n)) * (s + s.transpose());
            mean_dx = m1 * d_eta / static_cast<double>(n);
          }
          auto &gx = nx.ensure_grad();
          for (std::size_t b = 0; b < batch; ++b) {
            MutBlock dx(gx.data() + offset(b, q), 4, ln);
            Block go(gp + offset(b, q), 4, ln);
            if (train) {
              xc = Block(xp + offset(b, q), 4, ln).colwise() - mu;
              dy.noalias() = m1 * go;
              dy.noalias() += m2 * xc;
              dy.colwise() -= mean_dx;
              dx += dy;
            } else {
              dx.noalias() += m1 * go;
            }
          }
        }
      });
}

Tensor qcnn_block(const Tensor &x, const QConvLayer &conv, QuatBNLayer &bn,
                  Mode mode, std::size_t pool_window) {
  Tensor h = qconv_forward(x, conv, 1, ops::Padding::Same);
  h = bn.forward(h, mode);
  // relu and max commute; pooling first halves the relu work.
  return ops::relu(ops::maxpool1d(h, pool_window, pool_window));
}

} // namespace mqccaf::quat
