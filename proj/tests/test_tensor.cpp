// SPDX-License-Identifier: Apache-2.0
#include "mqccaf/ops.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace mqccaf;
using mqccaf::testing::max_abs_diff;
using mqccaf::testing::randn;

TEST(Tensor, FactoriesAndShape) {
  Tensor z = Tensor::zeros({2, 3});
  EXPECT_EQ(z.size(), 6u);
  EXPECT_EQ(z.rank(), 2u);
  EXPECT_EQ(shape_str(z.shape()), "[2x3]");
  Tensor f = Tensor::full({4}, 2.5);
  EXPECT_DOUBLE_EQ(f.at({3}), 2.5);
  EXPECT_THROW(Tensor::from({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  EXPECT_DOUBLE_EQ(Tensor::scalar(7.0).item(), 7.0);
}

TEST(Conv1d, HandComputedValid) {
  Tensor x = Tensor::from({1, 1, 4}, {1, 2, 3, 4});
  Tensor w = Tensor::from({1, 1, 2}, {1, 1});
  Tensor y = ops::conv1d(x, w, Tensor(), 1, ops::Padding::Valid);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3}));
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()),
            (std::vector<double>{3, 5, 7}));
}

TEST(Conv1d, SamePaddingPutsExtraOnTheLeft) {
  const auto p = ops::conv_padding(4, ops::Padding::Same);
  EXPECT_EQ(p.left, 2u);
  EXPECT_EQ(p.right, 1u);
  Tensor x = Tensor::from({1, 1, 4}, {1, 2, 3, 4});
  Tensor w = Tensor::from({1, 1, 2}, {1, 1});
  Tensor y = ops::conv1d(x, w, Tensor(), 1, ops::Padding::Same);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()),
            (std::vector<double>{1, 3, 5, 7}));
}

TEST(Conv1d, OutputLengthArithmetic) {
  EXPECT_EQ(ops::conv_output_length(2048, 64, 1, ops::Padding::Same), 2048u);
  EXPECT_EQ(ops::conv_output_length(2048, 64, 2, ops::Padding::Same), 1024u);
  EXPECT_EQ(ops::conv_output_length(10, 3, 1, ops::Padding::Valid), 8u);
  EXPECT_EQ(ops::conv_output_length(13, 4, 2, ops::Padding::Valid), 5u);
}

TEST(Conv1d, MatchesDirectLoop) {
  Rng rng(3);
  for (std::size_t stride : {1u, 2u, 3u}) {
    Tensor x = randn({2, 3, 17}, rng), w = randn({4, 3, 5}, rng),
           b = randn({4}, rng);
    for (auto pad : {ops::Padding::Same, ops::Padding::Valid}) {
      Tensor y = ops::conv1d(x, w, b, stride, pad);
      const auto ps = ops::conv_padding(5, pad);
      const std::size_t lo = ops::conv_output_length(17, 5, stride, pad);
      ASSERT_EQ(y.shape(), (Shape{2, 4, lo}));
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t o = 0; o < 4; ++o)
          for (std::size_t l = 0; l < lo; ++l) {
            double acc = b.at({o});
            for (std::size_t c = 0; c < 3; ++c)
              for (std::size_t k = 0; k < 5; ++k) {
                const long pos = static_cast<long>(l * stride + k) -
                                 static_cast<long>(ps.left);
                if (pos >= 0 && pos < 17)
                  acc += w.at({o, c, k}) *
                         x.at({n, c, static_cast<std::size_t>(pos)});
              }
            EXPECT_NEAR(y.at({n, o, l}), acc, 1e-12);
          }
    }
  }
}

TEST(Conv1d, RejectsChannelMismatch) {
  Tensor x = Tensor::zeros({1, 2, 8});
  Tensor w = Tensor::zeros({1, 3, 2});
  EXPECT_THROW(ops::conv1d(x, w, Tensor()), ShapeError);
}

TEST(Softmax, ClosedForm) {
  Tensor z = Tensor::from({1, 2}, {0.0, std::log(3.0)});
  Tensor p = ops::softmax(z, 1);
  EXPECT_NEAR(p.at({0, 0}), 0.25, 1e-15);
  EXPECT_NEAR(p.at({0, 1}), 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(5);
  Tensor z = randn({6, 7}, rng, 30.0);
  Tensor p = ops::softmax(z, 1);
  Tensor q = ops::softmax(ops::add(z, Tensor::full({7}, 123.0)), 1);
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j)
      s += p.at({i, j});
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_LT(max_abs_diff(p.data(), q.data()), 1e-12);
}

TEST(Ops, MatmulVariants) {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = ops::matmul(a, b);
  EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()),
            (std::vector<double>{58, 64, 139, 154}));
  Tensor ab = ops::reshape(ops::concat({a, a}, 0), {2, 2, 3});
  Tensor cb = ops::matmul(ab, b);
  EXPECT_DOUBLE_EQ(cb.at({1, 1, 1}), 154.0);
  Tensor bb = ops::reshape(ops::concat({b, b}, 0), {2, 3, 2});
  EXPECT_DOUBLE_EQ(ops::matmul(ab, bb).at({1, 0, 0}), 58.0);
  EXPECT_THROW(ops::matmul(a, a), ShapeError);
}

TEST(Ops, BroadcastAndReductions) {
  Tensor a = Tensor::from({2, 2}, {1, 3, 2, 6});
  Tensor m = ops::mean(a, 1);
  EXPECT_DOUBLE_EQ(m.at({0}), 2.0);
  EXPECT_DOUBLE_EQ(m.at({1}), 4.0);
  EXPECT_DOUBLE_EQ(ops::sum(a).item(), 12.0);
  Tensor s = ops::add(a, Tensor::from({2}, {10, 20}));
  EXPECT_DOUBLE_EQ(s.at({1, 1}), 26.0);
  EXPECT_THROW(ops::add(a, Tensor::zeros({3})), ShapeError);
}

TEST(Ops, TransposeConcatSliceRoundTrip) {
  Rng rng(9);
  Tensor x = randn({2, 3, 4}, rng);
  Tensor t = ops::transpose(ops::transpose(x, 1, 2), 1, 2);
  EXPECT_EQ(max_abs_diff(x.data(), t.data()), 0.0);
  EXPECT_DOUBLE_EQ(ops::transpose(x, 0, 2).at({3, 1, 0}), x.at({0, 1, 3}));
  Tensor c = ops::concat({ops::slice(x, 1, 0, 1), ops::slice(x, 1, 1, 2)}, 1);
  EXPECT_EQ(max_abs_diff(x.data(), c.data()), 0.0);
}

TEST(Ops, MaxPool) {
  Tensor x = Tensor::from({1, 1, 5}, {1, 4, 2, 2, 9});
  Tensor y = ops::maxpool1d(x, 2, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2}));
  EXPECT_DOUBLE_EQ(y.at({0, 0, 0}), 4.0);
  EXPECT_DOUBLE_EQ(y.at({0, 0, 1}), 2.0);
}

TEST(Autograd, ChainRuleAndAccumulation) {
  Tensor x = Tensor::from({2}, {1.5, -2.0}, true);
  // y = sum(x*x + 3x) -> dy/dx = 2x + 3; x used twice accumulates.
  Tensor y = ops::sum(ops::add(ops::mul(x, x), ops::scale(x, 3.0)));
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -1.0);
}

TEST(Autograd, TapeIsTopological) {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  Tensor a = ops::relu(x);
  Tensor b = ops::mul(a, x);
  Tensor y = ops::sum(ops::add(a, b));
  Tape tape = Tape::record(y);
  const auto &nodes = tape.nodes();
  ASSERT_EQ(nodes.back(), y.node());
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (const auto &in : nodes[i]->inputs) {
      const auto pos = std::find(nodes.begin(), nodes.end(), in.get());
      ASSERT_NE(pos, nodes.end());
      EXPECT_LT(static_cast<std::size_t>(pos - nodes.begin()), i);
    }
}

TEST(Autograd, NoGradGuardSkipsRecording) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    Tensor y = ops::mul(x, x);
    EXPECT_TRUE(y.node()->inputs.empty());
  }
  EXPECT_TRUE(grad_enabled());
}

TEST(Autograd, DeepChainDoesNotOverflowStack) {
  Tensor x = Tensor::from({1}, {0.5}, true);
  Tensor y = x;
  for (int i = 0; i < 20000; ++i)
    y = ops::scale(y, 1.0);
  backward(ops::sum(y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(GradCheck, OpsPassAtTightTolerance) {
  Rng rng(11);
  Tensor x = randn({2, 3, 6}, rng);
  Tensor w = randn({4, 3, 3}, rng);
  Tensor r = randn({2, 4, 6}, rng);
  EXPECT_LT(grad_check(
                [&](const Tensor &in) {
                  return ops::sum(ops::mul(ops::conv1d(in, w, Tensor()), r));
                },
                x),
            1e-7);
  Tensor a = randn({2, 3, 4}, rng), b = randn({2, 4, 5}, rng);
  Tensor q = randn({2, 3, 5}, rng);
  EXPECT_LT(grad_check(
                [&](const Tensor &in) {
                  return ops::sum(ops::mul(ops::matmul(in, b), q));
                },
                a),
            1e-7);
  Tensor t = randn({2, 3, 4}, rng);
  Tensor tw = randn({4, 3, 2}, rng);
  EXPECT_LT(grad_check(
                [&](const Tensor &in) {
                  return ops::sum(ops::mul(ops::transpose(in, 0, 2), tw));
                },
                t),
            1e-7);
  Tensor s = randn({3, 5}, rng);
  Tensor sw = randn({3, 2}, rng);
  EXPECT_LT(grad_check(
                [&](const Tensor &in) {
                  return ops::sum(ops::mul(ops::slice(ops::sigmoid(in), 1, 2, 2), sw));
                },
                s),
            1e-7);
}

TEST(GradCheck, CatchesBrokenBackward) {
  // Square with a deliberately wrong derivative (x instead of 2x).
  auto broken_square = [](const Tensor &x) {
    Buffer v(x.data().begin(), x.data().end());
    for (auto &e : v)
      e *= e;
    return detail::make_result(x.shape(), std::move(v), {x}, "broken",
                               [](Node &self) {
                                 Node &in = *self.inputs[0];
                                 auto &g = in.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += self.grad[i] * in.value[i];
                               });
  };
  Tensor x = Tensor::from({3}, {0.7, -1.2, 2.0});
  EXPECT_GT(grad_check([&](const Tensor &in) { return ops::sum(broken_square(in)); },
                       x),
            0.1);
}

TEST(GradCheck, NonFiniteIsInfinite) {
  Tensor x = Tensor::from({1}, {0.0});
  auto f = [](const Tensor &in) {
    return ops::sum(ops::scale(in, std::numeric_limits<double>::infinity()));
  };
  EXPECT_TRUE(std::isinf(grad_check(f, x)));
}
