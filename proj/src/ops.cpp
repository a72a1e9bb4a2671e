// SPDX-License-Identifier: Apache-2.0
#include "mqccaf/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

namespace mqccaf::ops {

using detail::make_result;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                             Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

Node &in(Node &self, std::size_t i) { return *self.inputs[i]; }

std::size_t prod(const Shape &s, std::size_t begin, std::size_t end) {
  std::size_t n = 1;
  for (std::size_t i = begin; i < end; ++i)
    n *= s[i];
  return n;
}

void check_axis(const Tensor &x, std::size_t axis, const char *op) {
  if (axis >= x.rank())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for " + shape_str(x.shape()));
}

bool is_suffix(const Shape &big, const Shape &small) {
  if (small.size() > big.size())
    return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Broadcast elementwise kernel: b repeats over the leading axes of a.
template <class Fwd, class Da, class Db>
Tensor binary(const Tensor &a, const Tensor &b, const char *op, Fwd fwd,
              Da da, Db db) {
  if (!is_suffix(a.shape(), b.shape()))
    throw ShapeError(std::string(op) + ": cannot broadcast " +
                     shape_str(b.shape()) + " onto " + shape_str(a.shape()));
  const std::size_t n = a.size(), inner = b.size();
  Buffer out(n);
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < n; ++i)
    out[i] = fwd(av[i], bv[i % inner]);
  return make_result(
      a.shape(), std::move(out), {a, b}, op,
      [n, inner, da, db](Node &self) {
        Node &na = in(self, 0), &nb = in(self, 1);
        const auto &g = self.grad;
        if (na.requires_grad) {
          auto &ga = na.ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            ga[i] += da(g[i], na.value[i], nb.value[i % inner]);
        }
        if (nb.requires_grad) {
          auto &gb = nb.ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            gb[i % inner] += db(g[i], na.value[i], nb.value[i % inner]);
        }
      });
}

template <class Fwd, class Dfn>
Tensor unary(const Tensor &x, const char *op, Fwd fwd, Dfn dfn) {
  const std::size_t n = x.size();
  Buffer out(n);
  auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i)
    out[i] = fwd(xv[i]);
  // dfn(input, output) -> local derivative
  return make_result(x.shape(), std::move(out), {x}, op,
                     [n, dfn](Node &self) {
                       Node &nx = in(self, 0);
                       auto &gx = nx.ensure_grad();
                       for (std::size_t i = 0; i < n; ++i)
                         gx[i] += self.grad[i] * dfn(nx.value[i], self.value[i]);
                     });
}

struct ConvGeom {
  std::size_t batch, c_in, length, c_out, kernel, stride, l_out;
  PadSplit pad;
};

void im2col(const double *x, const ConvGeom &g, double *cols) {
  const auto ck = static_cast<std::ptrdiff_t>(g.length);
  for (std::size_t c = 0; c < g.c_in; ++c) {
    const double *xc = x + c * g.length;
    for (std::size_t k = 0; k < g.kernel; ++k) {
      double *row = cols + (c * g.kernel + k) * g.l_out;
      const auto offset = static_cast<std::ptrdiff_t>(k) -
                          static_cast<std::ptrdiff_t>(g.pad.left);
      for (std::size_t l = 0; l < g.l_out; ++l) {
        const auto pos = static_cast<std::ptrdiff_t>(l * g.stride) + offset;
        row[l] = (pos >= 0 && pos < ck) ? xc[pos] : 0.0;
      }
    }
  }
}

void col2im_add(const double *cols, const ConvGeom &g, double *dx) {
  const auto ck = static_cast<std::ptrdiff_t>(g.length);
  for (std::size_t c = 0; c < g.c_in; ++c) {
    double *dc = dx + c * g.length;
    for (std::size_t k = 0; k < g.kernel; ++k) {
      const double *row = cols + (c * g.kernel + k) * g.l_out;
      const auto offset = static_cast<std::ptrdiff_t>(k) -
                          static_cast<std::ptrdiff_t>(g.pad.left);
      for (std::size_t l = 0; l < g.l_out; ++l) {
        const auto pos = static_cast<std::ptrdiff_t>(l * g.stride) + offset;
        if (pos >= 0 && pos < ck)
          dc[pos] += row[l];
      }
    }
  }
}

} // namespace

PadSplit conv_padding(std::size_t kernel, Padding padding) {
  if (padding == Padding::Valid || kernel == 0)
    return {};
  const std::size_t total = kernel - 1;
  return {total - total / 2, total / 2};
}

std::size_t conv_output_length(std::size_t length, std::size_t kernel,
                               std::size_t stride, Padding padding) {
  const auto pad = conv_padding(kernel, padding);
  const std::size_t padded = length + pad.left + pad.right;
  if (stride == 0)
    throw ShapeError("conv1d: stride must be >= 1");
  if (kernel == 0 || kernel > padded)
    throw ShapeError("conv1d: kernel " + std::to_string(kernel) +
                     " exceeds padded length " + std::to_string(padded));
  return (padded - kernel) / stride + 1;
}

Tensor conv1d(const Tensor &input, const Tensor &weights, const Tensor &bias,
              std::size_t stride, Padding padding) {
  if (input.rank() != 2 && input.rank() != 3)
    throw ShapeError("conv1d: input must be [C, L] or [B, C, L], got " +
                     shape_str(input.shape()));
  if (weights.rank() != 3)
    throw ShapeError("conv1d: weights must be [C_out, C_in, K]");
  const bool batched = input.rank() == 3;
  ConvGeom g{};
  g.batch = batched ? input.dim(0) : 1;
  g.c_in = input.dim(input.rank() - 2);
  g.length = input.dim(input.rank() - 1);
  g.c_out = weights.dim(0);
  g.kernel = weights.dim(2);
  g.stride = stride;
  if (weights.dim(1) != g.c_in)
    throw ShapeError("conv1d: weights expect " +
                     std::to_string(weights.dim(1)) +
                     " input channels, input has " + std::to_string(g.c_in));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.c_out))
    throw ShapeError("conv1d: bias must be [C_out]");
  g.pad = conv_padding(g.kernel, padding);
  g.l_out = conv_output_length(g.length, g.kernel, stride, padding);

  const std::size_t ck = g.c_in * g.kernel;
  Buffer out(g.batch * g.c_out * g.l_out);
  Buffer cols(ck * g.l_out);
  CMapMat w(weights.data().data(), g.c_out, ck);
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(input.data().data() + b * g.c_in * g.length, g, cols.data());
    MapMat o(out.data() + b * g.c_out * g.l_out, g.c_out, g.l_out);
    o.noalias() = w * CMapMat(cols.data(), ck, g.l_out);
    if (bias.defined())
      for (std::size_t c = 0; c < g.c_out; ++c)
        o.row(c).array() += bias.data()[c];
  }

  Shape shape = batched ? Shape{g.batch, g.c_out, g.l_out}
                        : Shape{g.c_out, g.l_out};
  std::vector<Tensor> inputs{input, weights};
  if (bias.defined())
    inputs.push_back(bias);
  return make_result(
      std::move(shape), std::move(out), std::move(inputs), "conv1d",
      [g](Node &self) {
        Node &nx = in(self, 0), &nw = in(self, 1);
        Node *nb = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
        const std::size_t ck = g.c_in * g.kernel;
        Buffer cols(ck * g.l_out);
        CMapMat w(nw.value.data(), g.c_out, ck);
        for (std::size_t b = 0; b < g.batch; ++b) {
          CMapMat dout(self.grad.data() + b * g.c_out * g.l_out, g.c_out,
                       g.l_out);
          if (nw.requires_grad) {
            im2col(nx.value.data() + b * g.c_in * g.length, g, cols.data());
            MapMat dw(nw.ensure_grad().data(), g.c_out, ck);
            dw.noalias() += dout * CMapMat(cols.data(), ck, g.l_out).transpose();
          }
          if (nx.requires_grad) {
            MapMat dcols(cols.data(), ck, g.l_out);
            dcols.noalias() = w.transpose() * dout;
            col2im_add(cols.data(), g,
                       nx.ensure_grad().data() + b * g.c_in * g.length);
          }
          if (nb && nb->requires_grad) {
            auto &db = nb->ensure_grad();
            for (std::size_t c = 0; c < g.c_out; ++c)
              db[c] += dout.row(c).sum();
          }
        }
      });
}

Tensor matmul(const Tensor &a, const Tensor &b) {
  const bool ok_rank = (a.rank() == 2 && b.rank() == 2) ||
                       (a.rank() == 3 && (b.rank() == 2 || b.rank() == 3));
  if (!ok_rank)
    throw ShapeError("matmul: unsupported ranks " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  const bool batched_b = b.rank() == 3;
  const std::size_t batch = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != kb || (batched_b && b.dim(0) != batch))
    throw ShapeError("matmul: incompatible " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));

  Buffer out(batch * m * n);
  if (!batched_b) {
    // Fold the batch into the row dimension.
    MapMat(out.data(), batch * m, n).noalias() =
        CMapMat(a.data().data(), batch * m, k) * CMapMat(b.data().data(), k, n);
  } else {
    for (std::size_t i = 0; i < batch; ++i)
      MapMat(out.data() + i * m * n, m, n).noalias() =
          CMapMat(a.data().data() + i * m * k, m, k) *
          CMapMat(b.data().data() + i * k * n, k, n);
  }
  Shape shape = a.rank() == 3 ? Shape{batch, m, n} : Shape{m, n};
  return make_result(
      std::move(shape), std::move(out), {a, b}, "matmul",
      [batch, m, k, n, batched_b](Node &self) {
        Node &na = in(self, 0), &nb = in(self, 1);
        if (!batched_b) {
          CMapMat g(self.grad.data(), batch * m, n);
          if (na.requires_grad)
            MapMat(na.ensure_grad().data(), batch * m, k).noalias() +=
                g * CMapMat(nb.value.data(), k, n).transpose();
          if (nb.requires_grad)
            MapMat(nb.ensure_grad().data(), k, n).noalias() +=
                CMapMat(na.value.data(), batch * m, k).transpose() * g;
          return;
        }
        for (std::size_t i = 0; i < batch; ++i) {
          CMapMat g(self.grad.data() + i * m * n, m, n);
          if (na.requires_grad)
            MapMat(na.ensure_grad().data() + i * m * k, m, k).noalias() +=
                g * CMapMat(nb.value.data() + i * k * n, k, n).transpose();
          if (nb.requires_grad)
            MapMat(nb.ensure_grad().data() + i * k * n, k, n).noalias() +=
                CMapMat(na.value.data() + i * m * k, m, k).transpose() * g;
        }
      });
}

Tensor relu(const Tensor &x) {
  return unary(
      x, "relu", [](double v) { return v <= 0.0 ? 0.0 : v; }, // NaN passes
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor &x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0)
          return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor &x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor softmax(const Tensor &x, std::size_t axis) {
  check_axis(x, axis, "softmax");
  const auto &s = x.shape();
  const std::size_t outer = prod(s, 0, axis), n = s[axis],
                    inner = prod(s, axis + 1, s.size());
  Buffer out(x.size());
  auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double mx = xv[base];
      for (std::size_t j = 1; j < n; ++j)
        mx = std::max(mx, xv[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j)
        out[base + j * inner] /= total;
    }
  return make_result(
      s, std::move(out), {x}, "softmax", [outer, n, inner](Node &self) {
        auto &gx = in(self, 0).ensure_grad();
        const auto &y = self.value;
        const auto &g = self.grad;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j)
              dot += g[base + j * inner] * y[base + j * inner];
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t p = base + j * inner;
              gx[p] += y[p] * (g[p] - dot);
            }
          }
      });
}

Tensor maxpool1d(const Tensor &x, std::size_t window, std::size_t stride) {
  if (x.rank() == 0 || window == 0 || stride == 0)
    throw ShapeError("maxpool1d: window and stride must be >= 1");
  const std::size_t len = x.shape().back();
  if (window > len)
    throw ShapeError("maxpool1d: window " + std::to_string(window) +
                     " exceeds length " + std::to_string(len));
  const std::size_t l_out = (len - window) / stride + 1;
  const std::size_t rows = x.size() / len;
  Buffer out(rows * l_out);
  std::vector<std::uint32_t> argmax(rows * l_out);
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t l = 0; l < l_out; ++l) {
      const std::size_t start = r * len + l * stride;
      std::size_t best = start;
      for (std::size_t w = 1; w < window && !std::isnan(xv[best]); ++w)
        if (!(xv[start + w] <= xv[best]))
          best = start + w;
      out[r * l_out + l] = xv[best];
      argmax[r * l_out + l] = static_cast<std::uint32_t>(best);
    }
  Shape shape = x.shape();
  shape.back() = l_out;
  return make_result(std::move(shape), std::move(out), {x}, "maxpool1d",
                     [argmax = std::move(argmax)](Node &self) {
                       auto &gx = in(self, 0).ensure_grad();
                       for (std::size_t i = 0; i < argmax.size(); ++i)
                         gx[argmax[i]] += self.grad[i];
                     });
}

Tensor mean(const Tensor &x, std::size_t axis) {
  check_axis(x, axis, "mean");
  const auto &s = x.shape();
  const std::size_t outer = prod(s, 0, axis), n = s[axis],
                    inner = prod(s, axis + 1, s.size());
  Buffer out(outer * inner, 0.0);
  auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += xv[(o * n + j) * inner + i];
  for (auto &v : out)
    v /= static_cast<double>(n);
  Shape shape = s;
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty())
    shape = {1};
  return make_result(std::move(shape), std::move(out), {x}, "mean",
                     [outer, n, inner](Node &self) {
                       auto &gx = in(self, 0).ensure_grad();
                       const double w = 1.0 / static_cast<double>(n);
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t j = 0; j < n; ++j)
                           for (std::size_t i = 0; i < inner; ++i)
                             gx[(o * n + j) * inner + i] +=
                                 w * self.grad[o * inner + i];
                     });
}

Tensor sum(const Tensor &x) {
  auto xv = x.data();
  const double total = std::accumulate(xv.begin(), xv.end(), 0.0);
  return make_result({1}, {total}, {x}, "sum", [](Node &self) {
    auto &gx = in(self, 0).ensure_grad();
    for (auto &g : gx)
      g += self.grad[0];
  });
}

Tensor add(const Tensor &a, const Tensor &b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Tensor sub(const Tensor &a, const Tensor &b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor &a, const Tensor &b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor scale(const Tensor &x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor concat(const std::vector<Tensor> &parts, std::size_t axis) {
  if (parts.empty())
    throw ShapeError("concat: no inputs");
  check_axis(parts[0], axis, "concat");
  const Shape &s0 = parts[0].shape();
  std::size_t total_axis = 0;
  std::vector<std::size_t> extents;
  for (const auto &p : parts) {
    const Shape &s = p.shape();
    if (s.size() != s0.size())
      throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != s0[d])
        throw ShapeError("concat: shape " + shape_str(s) +
                         " incompatible with " + shape_str(s0));
    extents.push_back(s[axis]);
    total_axis += s[axis];
  }
  const std::size_t outer = prod(s0, 0, axis),
                    inner = prod(s0, axis + 1, s0.size());
  Buffer out(outer * total_axis * inner);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const std::size_t block = extents[p] * inner;
    auto pv = parts[p].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>(
                                    o * total_axis * inner + offset * inner));
    offset += extents[p];
  }
  Shape shape = s0;
  shape[axis] = total_axis;
  return make_result(
      std::move(shape), std::move(out), parts, "concat",
      [extents, outer, inner, total_axis](Node &self) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < extents.size(); ++p) {
          Node &np = in(self, p);
          const std::size_t block = extents[p] * inner;
          if (np.requires_grad) {
            auto &gp = np.ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
              const double *src =
                  self.grad.data() + o * total_axis * inner + offset * inner;
              double *dst = gp.data() + o * block;
              for (std::size_t i = 0; i < block; ++i)
                dst[i] += src[i];
            }
          }
          offset += extents[p];
        }
      });
}

Tensor transpose(const Tensor &x, std::size_t axis0, std::size_t axis1) {
  check_axis(x, axis0, "transpose");
  check_axis(x, axis1, "transpose");
  const Shape &s = x.shape();
  Shape out_shape = s;
  std::swap(out_shape[axis0], out_shape[axis1]);
  const std::size_t rank = s.size();
  // Input strides, permuted into output axis order.
  std::vector<std::size_t> in_stride(rank);
  std::size_t st = 1;
  for (std::size_t d = rank; d-- > 0;) {
    in_stride[d] = st;
    st *= s[d];
  }
  std::swap(in_stride[axis0], in_stride[axis1]);
  std::vector<std::size_t> src(x.size());
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < rank; ++d)
      off += idx[d] * in_stride[d];
    src[flat] = off;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d])
        break;
      idx[d] = 0;
    }
  }
  Buffer out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = xv[src[i]];
  return make_result(std::move(out_shape), std::move(out), {x}, "transpose",
                     [src = std::move(src)](Node &self) {
                       auto &gx = in(self, 0).ensure_grad();
                       for (std::size_t i = 0; i < src.size(); ++i)
                         gx[src[i]] += self.grad[i];
                     });
}

Tensor reshape(const Tensor &x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " +
                     shape_str(shape));
  Buffer out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, "reshape",
                     [](Node &self) {
                       auto &gx = in(self, 0).ensure_grad();
                       for (std::size_t i = 0; i < gx.size(); ++i)
                         gx[i] += self.grad[i];
                     });
}

Tensor slice(const Tensor &x, std::size_t axis, std::size_t start,
             std::size_t length) {
  check_axis(x, axis, "slice");
  const Shape &s = x.shape();
  if (length == 0 || start + length > s[axis])
    throw ShapeError("slice: [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") out of range for " +
                     shape_str(s));
  const std::size_t outer = prod(s, 0, axis), n = s[axis],
                    inner = prod(s, axis + 1, s.size());
  const std::size_t block = length * inner;
  Buffer out(outer * block);
  auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * n + start) * inner),
                block, out.begin() + static_cast<std::ptrdiff_t>(o * block));
  Shape shape = s;
  shape[axis] = length;
  return make_result(std::move(shape), std::move(out), {x}, "slice",
                     [outer, n, inner, start, block](Node &self) {
                       auto &gx = in(self, 0).ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o) {
                         double *dst = gx.data() + (o * n + start) * inner;
                         const double *src = self.grad.data() + o * block;
                         for (std::size_t i = 0; i < block; ++i)
                           dst[i] += src[i];
                       }
                     });
}

} // namespace mqccaf::ops
