// SPDX-License-Identifier: Apache-2.0
#include "mqccaf/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace mqccaf;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.input_length = 256;
  c.wide_kernel = 16;
  c.wide_channels = 8;
  c.qcnn_channels = 2;
  c.attention_dim = 8;
  c.bigru_hidden = 4;
  return c;
}

data::Split tiny_split(std::uint64_t seed = 1) {
  data::SynthConfig s;
  s.recording_length = 1600;
  s.domains = {data::Domain::D1};
  return data::split(data::overlap_window(data::synth_generate(s), 256, 64),
                     seed);
}

// Zero weights everywhere in the head, one large bias: always predicts `cls`.
void make_constant(Model &m, std::size_t cls) {
  for (auto [path, t] : m.parameters()) {
    if (path.rfind("head.", 0) != 0)
      continue;
    auto v = t.mutable_data();
    std::fill(v.begin(), v.end(), 0.0);
    if (path == "head.bias")
      v[cls] = 10.0;
  }
}

data::WindowSet labelled(const data::WindowSet &src,
                         std::uint32_t forced_label) {
  data::WindowSet ws = src;
  std::fill(ws.labels.begin(), ws.labels.end(), forced_label);
  return ws;
}

} // namespace

TEST(CrossEntropy, ClosedForms) {
  Tensor uniform = Tensor::from({1, 4}, {0.25, 0.25, 0.25, 0.25});
  Tensor y = Tensor::from({1, 4}, {0, 0, 1, 0});
  EXPECT_NEAR(cross_entropy(uniform, y).item(), std::log(4.0), 1e-15);

  Tensor perfect = Tensor::from({1, 4}, {0, 0, 1, 0});
  EXPECT_EQ(cross_entropy(perfect, y).item(), 0.0);

  Tensor two = Tensor::from({2, 2}, {0.5, 0.5, 0.9, 0.1});
  Tensor y2 = Tensor::from({2, 2}, {1, 0, 1, 0});
  EXPECT_NEAR(cross_entropy(two, y2).item(),
              0.5 * (std::log(2.0) - std::log(0.9)), 1e-15);
}

TEST(CrossEntropy, ClampsZeroProbability) {
  Tensor p = Tensor::from({1, 2}, {1.0, 0.0});
  Tensor y = Tensor::from({1, 2}, {0, 1});
  EXPECT_NEAR(cross_entropy(p, y).item(), -std::log(1e-12), 1e-9);
}

TEST(CrossEntropy, GradientMatchesFiniteDifference) {
  Tensor p = Tensor::from({2, 3}, {0.2, 0.5, 0.3, 0.6, 0.1, 0.3});
  Tensor y = Tensor::from({2, 3}, {0, 1, 0, 0, 0, 1});
  EXPECT_LT(grad_check([&](const Tensor &x) { return cross_entropy(x, y); }, p),
            1e-7);
}

TEST(CrossEntropy, ShapeMismatchThrows) {
  EXPECT_THROW(cross_entropy(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})),
               ShapeError);
  EXPECT_THROW(cross_entropy(Tensor::zeros({6}), Tensor::zeros({6})),
               ShapeError);
}

TEST(OneHot, RowsAndRange) {
  const std::uint32_t labels[] = {2, 0};
  Tensor t = one_hot(labels, 3);
  EXPECT_EQ(t.shape(), (Shape{2, 3}));
  const std::vector<double> want = {0, 0, 1, 1, 0, 0};
  EXPECT_TRUE(std::equal(want.begin(), want.end(), t.data().begin()));
  const std::uint32_t bad[] = {3};
  EXPECT_THROW(one_hot(bad, 3), ShapeError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor w = Tensor::from({4}, {1, -2, 3, 0.5}, true);
  Parameters params{{"w", w}};
  Tensor loss = ops::sum(w); // gradient 1 everywhere
  backward(loss);
  AdamState st;
  adam_step(params, st, 1e-3);
  const std::vector<double> before = {1, -2, 3, 0.5};
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_NEAR(w.data()[i] - before[i], -1e-3, 1e-10);
  EXPECT_EQ(st.step, 1u);
  EXPECT_EQ(st.m.at("w").size(), 4u);
}

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
  Tensor w = Tensor::from({3}, {1, 2, 3}, true);
  Parameters params{{"w", w}};
  AdamState st;
  for (int i = 0; i < 20; ++i) {
    w.zero_grad();
    backward(ops::scale(ops::sum(w), 0.0));
    adam_step(params, st, 1e-2);
  }
  EXPECT_EQ(w.data()[0], 1.0);
  EXPECT_EQ(w.data()[1], 2.0);
  EXPECT_EQ(w.data()[2], 3.0);
  EXPECT_EQ(st.step, 20u);
}

TEST(Adam, MatchesHandComputedSecondStep) {
  Tensor w = Tensor::from({1}, {0.0}, true);
  Parameters params{{"w", w}};
  AdamState st;
  const double g[2] = {2.0, -1.0};
  double m = 0, v = 0, x = 0;
  for (int t = 1; t <= 2; ++t) {
    w.zero_grad();
    backward(ops::scale(ops::sum(w), g[t - 1]));
    adam_step(params, st, 0.1);
    m = 0.9 * m + 0.1 * g[t - 1];
    v = 0.999 * v + 0.001 * g[t - 1] * g[t - 1];
    x -= 0.1 * (m / (1 - std::pow(0.9, t))) /
         (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  EXPECT_NEAR(w.data()[0], x, 1e-15);
}

TEST(EarlyStoppingRule, PatienceTrace) {
  EarlyStopping es(10);
  std::vector<double> losses = {1.0, 0.9};
  for (int i = 0; i < 10; ++i)
    losses.push_back(0.9 + 0.01 * (i % 3));
  std::size_t stopped = 0;
  for (std::size_t e = 1; e <= losses.size(); ++e)
    if (es.update(e, losses[e - 1])) {
      stopped = e;
      break;
    }
  EXPECT_EQ(stopped, 12u);
  EXPECT_EQ(es.best_epoch(), 2u);
  EXPECT_EQ(es.best_loss(), 0.9);
}

TEST(EarlyStoppingRule, KeepsGoingWhileImproving) {
  EarlyStopping es(2);
  for (std::size_t e = 1; e <= 50; ++e)
    ASSERT_FALSE(es.update(e, 1.0 / static_cast<double>(e)));
  EXPECT_EQ(es.best_epoch(), 50u);
}

TEST(TrainConfigCheck, RejectsBadValues) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.patience = 200;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.learning_rate = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Evaluate, PerfectAndConstantClassifiers) {
  const auto s = tiny_split();
  Model m(tiny_model(), 3);
  make_constant(m, 2);

  const auto perfect = evaluate(m, labelled(s.test, 2));
  EXPECT_EQ(perfect.accuracy, 1.0);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      if (i != j)
        EXPECT_EQ(perfect.confusion[i][j], 0u);
  EXPECT_EQ(perfect.confusion[2][2], s.test.size());

  // Balanced five-class set: 8 windows of each label.
  data::WindowSet balanced;
  balanced.length = s.train.length;
  for (std::uint32_t c = 0; c < 5; ++c)
    for (std::size_t i = 0; i < 8; ++i)
      balanced.append(s.train.window(c * 8 + i), c, data::Domain::D1);
  const auto constant = evaluate(m, balanced, 7);
  EXPECT_DOUBLE_EQ(constant.accuracy, 0.2);
  for (std::size_t c = 0; c < 5; ++c) {
    std::size_t row = 0;
    for (auto v : constant.confusion[c])
      row += v;
    EXPECT_EQ(row, 8u);
    EXPECT_EQ(constant.confusion[c][2], 8u);
  }
}

TEST(Evaluate, RowSumsAreClassCounts) {
  const auto s = tiny_split();
  Model m(tiny_model(), 4);
  const auto r = evaluate(m, s.test, 5);
  std::vector<std::size_t> counts(5, 0);
  for (auto l : s.test.labels)
    ++counts[l];
  std::size_t trace = 0;
  for (std::size_t c = 0; c < 5; ++c) {
    std::size_t row = 0;
    for (auto v : r.confusion[c])
      row += v;
    EXPECT_EQ(row, counts[c]);
    trace += r.confusion[c][c];
  }
  EXPECT_DOUBLE_EQ(r.accuracy, static_cast<double>(trace) /
                                   static_cast<double>(s.test.size()));
  EXPECT_THROW(evaluate(m, data::WindowSet{}), data::DataError);
}

TEST(Train, LossDecreasesOverFirstFiveEpochs) {
  const auto s = tiny_split();
  Model m(tiny_model(), 5);
  TrainConfig tc;
  tc.max_epochs = 5;
  tc.patience = 5;
  tc.batch_size = 16;
  const auto r = train(m, s.train, s.val, tc);
  ASSERT_EQ(r.history.size(), 5u);
  int violations = 0;
  for (std::size_t i = 1; i < r.history.size(); ++i)
    violations += r.history[i].train_loss >= r.history[i - 1].train_loss;
  EXPECT_LE(violations, 1);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
}

TEST(Train, ReproducibleToTheLastBit) {
  const auto s = tiny_split();
  TrainConfig tc;
  tc.max_epochs = 3;
  tc.patience = 3;
  tc.batch_size = 16;
  tc.seed = 77;
  Model a(tiny_model(), 6), b(tiny_model(), 6);
  const auto ra = train(a, s.train, s.val, tc);
  const auto rb = train(b, s.train, s.val, tc);
  std::ostringstream la, lb;
  write_epoch_log(la, ra.history, false);
  write_epoch_log(lb, rb.history, false);
  EXPECT_EQ(la.str(), lb.str());
  EXPECT_EQ(capture_state(a).values, capture_state(b).values);
}

TEST(Train, ReturnsBestEpochWeights) {
  const auto s = tiny_split();
  Model m(tiny_model(), 7);
  TrainConfig tc;
  tc.max_epochs = 6;
  tc.patience = 2;
  tc.batch_size = 16;
  tc.learning_rate = 0.02; // noisy enough that val loss is not monotone
  std::vector<ModelState> snapshots;
  const auto r = train(m, s.train, s.val, tc, [&](const EpochLog &) {
    snapshots.push_back(capture_state(m));
  });
  ASSERT_GE(r.best_epoch, 1u);
  ASSERT_LE(r.best_epoch, r.history.size());
  double best = INFINITY;
  for (const auto &e : r.history)
    best = std::min(best, e.val_loss);
  EXPECT_EQ(r.best_val_loss, best);
  EXPECT_EQ(r.history[r.best_epoch - 1].val_loss, best);
  EXPECT_EQ(capture_state(m).values, snapshots[r.best_epoch - 1].values);
}

TEST(Train, MaxEpochCapHonored) {
  const auto s = tiny_split();
  Model m(tiny_model(), 8);
  TrainConfig tc;
  tc.max_epochs = 2;
  tc.patience = 2;
  const auto r = train(m, s.train, s.val, tc);
  EXPECT_EQ(r.history.size(), 2u);
  EXPECT_FALSE(r.stopped_early);
}

TEST(Train, NonFiniteInputAborts) {
  auto s = tiny_split();
  s.train.samples[5] = NAN;
  Model m(tiny_model(), 9);
  TrainConfig tc;
  tc.max_epochs = 1;
  tc.patience = 1;
  EXPECT_THROW(train(m, s.train, s.val, tc), NumericalError);
}

TEST(EpochLogCsv, HeaderAndColumns) {
  std::vector<EpochLog> h = {{1, 0.5, 0.25, 0.75, 1.5}};
  std::ostringstream with, without;
  write_epoch_log(with, h);
  write_epoch_log(without, h, false);
  EXPECT_EQ(with.str(),
            "epoch,train_loss,val_loss,val_acc,seconds\n1,0.5,0.25,0.75,1.500\n");
  EXPECT_EQ(without.str(), "epoch,train_loss,val_loss,val_acc\n1,0.5,0.25,0.75\n");
}
