// SPDX-License-Identifier: Apache-2.0
// Independent reference implementations used by unit and acceptance tests.
#pragma once

#include "mqccaf/quaternion.hpp"

#include <array>
#include <vector>

namespace mqccaf::oracle {

/// Hamilton product written out component by component.
inline std::array<double, 4> hamilton(const std::array<double, 4> &p,
                                      const std::array<double, 4> &q) {
  const auto [a1, b1, c1, d1] = p;
  const auto [a2, b2, c2, d2] = q;
  return {a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
          a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
          a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
          a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2};
}

/// Quaternion convolution as a sum of Hamilton products W (x) x over input
/// channels and taps, "same" padding with the extra zero on the left.
inline std::vector<double> qconv_direct(const Tensor &x,
                                        const quat::QConvLayer &layer,
                                        std::size_t stride, bool same) {
  const std::size_t batch = x.dim(0), length = x.dim(2);
  const std::size_t qi = layer.q_in(), qo = layer.q_out(), k = layer.kernel();
  const std::size_t pad_left = same ? (k - 1) - (k - 1) / 2 : 0;
  const std::size_t padded = same ? length + k - 1 : length;
  const std::size_t lo = (padded - k) / stride + 1;
  const auto w = layer.weights().data();
  const auto b = layer.bias().data();
  std::vector<double> out(batch * 4 * qo * lo, 0.0);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t o = 0; o < qo; ++o)
      for (std::size_t l = 0; l < lo; ++l) {
        std::array<double, 4> acc = {b[o * 4], b[o * 4 + 1], b[o * 4 + 2],
                                     b[o * 4 + 3]};
        for (std::size_t i = 0; i < qi; ++i)
          for (std::size_t t = 0; t < k; ++t) {
            const long pos = static_cast<long>(l * stride + t) -
                             static_cast<long>(pad_left);
            if (pos < 0 || pos >= static_cast<long>(length))
              continue;
            std::array<double, 4> xq, wq;
            for (std::size_t c = 0; c < 4; ++c) {
              xq[c] = x.at({n, 4 * i + c, static_cast<std::size_t>(pos)});
              wq[c] = w[((o * qi + i) * k + t) * 4 + c];
            }
            const auto p = hamilton(wq, xq);
            for (std::size_t c = 0; c < 4; ++c)
              acc[c] += p[c];
          }
        for (std::size_t c = 0; c < 4; ++c)
          out[(n * 4 * qo + 4 * o + c) * lo + l] = acc[c];
      }
  return out;
}

/// Biased 4x4 covariance of quaternion channel q of y [B, 4Q, L].
inline std::array<std::array<double, 4>, 4>
channel_covariance(const Tensor &y, std::size_t q) {
  const std::size_t batch = y.dim(0), length = y.dim(2);
  const double n = static_cast<double>(batch * length);
  std::array<double, 4> mean{};
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t l = 0; l < length; ++l)
        mean[c] += y.at({b, 4 * q + c, l}) / n;
  std::array<std::array<double, 4>, 4> cov{};
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t l = 0; l < length; ++l)
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c)
          cov[r][c] += (y.at({b, 4 * q + r, l}) - mean[r]) *
                       (y.at({b, 4 * q + c, l}) - mean[c]) / n;
  return cov;
}

} // namespace mqccaf::oracle
