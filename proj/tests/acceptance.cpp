// SPDX-License-Identifier: Apache-2.0
// Acceptance runner: one PASS/FAIL line per criterion.
//
//   acceptance                 all criteria
//   acceptance --criterion 3   a single criterion (repeatable)

#include "mqccaf/data.hpp"
#include "mqccaf/experiments.hpp"
#include "mqccaf/ops.hpp"
#include "mqccaf/quaternion.hpp"
#include "mqccaf/rng.hpp"
#include "mqccaf/runtime.hpp"
#include "oracles.hpp"

#include "CLI11.hpp"
#include <Eigen/SVD>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

using namespace mqccaf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char *f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path scratch(const std::string &name) {
  const auto p = fs::temp_directory_path() / ("mqccaf_accept_" + name);
  fs::remove_all(p);
  return p;
}

exp::RunConfig config(const std::string &text, const fs::path &out) {
  exp::RunConfig c;
  c.load_text(text, "acceptance");
  c.set("out_dir", out.string());
  c.validate();
  return c;
}

Tensor random_tensor(Shape shape, Rng &rng) {
  std::normal_distribution<double> n;
  Buffer v(numel(shape));
  for (auto &x : v)
    x = n(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// ---- 1: quaternion algebra --------------------------------------------------

Outcome hamilton_algebra() {
  Rng rng(101);
  std::normal_distribution<double> n;
  double prod_err = 0.0, matrix_err = 0.0, norm_err = 0.0;
  for (int t = 0; t < 10000; ++t) {
    const quat::Quaternion p{n(rng), n(rng), n(rng), n(rng)};
    const quat::Quaternion q{n(rng), n(rng), n(rng), n(rng)};
    const double m[4][4] = {{p.a, -p.b, -p.c, -p.d},
                            {p.b, p.a, -p.d, p.c},
                            {p.c, p.d, p.a, -p.b},
                            {p.d, -p.c, p.b, p.a}};
    const double qv[4] = {q.a, q.b, q.c, q.d};
    const auto pq = quat::hamilton_product(p, q);
    const double got[4] = {pq.a, pq.b, pq.c, pq.d};
    const auto hm = quat::hamilton_matrix(p);
    for (int r = 0; r < 4; ++r) {
      double ref = 0.0;
      for (int c = 0; c < 4; ++c) {
        ref += m[r][c] * qv[c];
        matrix_err = std::max(matrix_err, std::abs(hm[r][c] - m[r][c]));
      }
      prod_err = std::max(prod_err, std::abs(got[r] - ref));
    }
    const double expect = p.norm() * q.norm();
    norm_err = std::max(norm_err, std::abs(pq.norm() - expect) / expect);
  }
  return {prod_err <= 1e-12 && matrix_err <= 1e-12 && norm_err <= 1e-9,
          fmt("product err %.2e, matrix err %.2e, norm rel err %.2e",
              prod_err, matrix_err, norm_err)};
}

// ---- 2: quaternion convolution ----------------------------------------------

Outcome qconv_equivalence() {
  Rng rng(202);
  std::uniform_int_distribution<std::size_t> q_dist(1, 4), k_dist(1, 9),
      l_dist(12, 64), b_dist(1, 3), s_dist(1, 3), pad_dist(0, 1);
  double real_err = 0.0, direct_err = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t qi = q_dist(rng), qo = q_dist(rng), k = k_dist(rng);
    const std::size_t len = l_dist(rng), batch = b_dist(rng),
                      stride = s_dist(rng);
    const bool same = pad_dist(rng) == 1;
    const auto padding = same ? ops::Padding::Same : ops::Padding::Valid;

    quat::QConvLayer layer(qi, qo, k);
    quat::quaternion_init(layer, 1000 + t);
    std::normal_distribution<double> n;
    for (auto &b : layer.bias().mutable_data())
      b = n(rng);
    const Tensor x = random_tensor({batch, 4 * qi, len}, rng);

    // Real filter bank assembled block by block from the left-multiplication
    // matrix of each tap.
    Buffer big(16 * qo * qi * k);
    const auto w = layer.weights().data();
    for (std::size_t o = 0; o < qo; ++o)
      for (std::size_t i = 0; i < qi; ++i)
        for (std::size_t tap = 0; tap < k; ++tap) {
          const double *v = &w[((o * qi + i) * k + tap) * 4];
          const double m[4][4] = {{v[0], -v[1], -v[2], -v[3]},
                                  {v[1], v[0], -v[3], v[2]},
                                  {v[2], v[3], v[0], -v[1]},
                                  {v[3], -v[2], v[1], v[0]}};
          for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < 4; ++c)
              big[((4 * o + r) * 4 * qi + 4 * i + c) * k + tap] = m[r][c];
        }
    const Tensor wr = Tensor::from(Shape{4 * qo, 4 * qi, k}, std::move(big));
    const Tensor br = Tensor::from(Shape{4 * qo}, layer.bias().data());

    const Tensor y = quat::qconv_forward(x, layer, stride, padding);
    const Tensor ref = ops::conv1d(x, wr, br, stride, padding);
    const auto direct = oracle::qconv_direct(x, layer, stride, same);
    if (y.shape() != ref.shape() || y.size() != direct.size())
      return {false, fmt("shape mismatch on combo %d", t)};
    for (std::size_t i = 0; i < y.size(); ++i) {
      real_err = std::max(real_err, std::abs(y.data()[i] - ref.data()[i]));
      direct_err = std::max(direct_err, std::abs(y.data()[i] - direct[i]));
    }
  }
  return {real_err <= 1e-12 && direct_err <= 1e-12,
          fmt("vs real conv %.2e, vs direct Hamilton sum %.2e", real_err,
              direct_err)};
}

// ---- 3: whitening ----------------------------------------------------------

Outcome quatbn_whitening() {
  const std::size_t channels = 3, batch = 4, length = 2048;
  Rng rng(303);
  std::normal_distribution<double> n;
  Buffer v(batch * 4 * channels * length);
  // Correlated, shifted components per channel.
  for (std::size_t q = 0; q < channels; ++q) {
    // Random rotations around singular values in [0.5, 2].
    Eigen::Matrix4d a;
    for (auto &e : a.reshaped())
      e = n(rng);
    const Eigen::JacobiSVD<Eigen::Matrix4d> svd(
        a, Eigen::ComputeFullU | Eigen::ComputeFullV);
    std::uniform_real_distribution<double> sv(0.5, 2.0);
    const Eigen::Vector4d sigma{sv(rng), sv(rng), sv(rng), sv(rng)};
    const Eigen::Matrix4d mix =
        svd.matrixU() * sigma.asDiagonal() * svd.matrixV().transpose();
    double offset[4];
    for (auto &o : offset)
      o = 3.0 * n(rng);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t l = 0; l < length; ++l) {
        const double z[4] = {n(rng), n(rng), n(rng), n(rng)};
        for (std::size_t r = 0; r < 4; ++r) {
          double s = offset[r];
          for (std::size_t c = 0; c < 4; ++c)
            s += mix(r, c) * z[c];
          v[(b * 4 * channels + 4 * q + r) * length + l] = s;
        }
      }
  }
  const Tensor x = Tensor::from(Shape{batch, 4 * channels, length}, std::move(v));
  quat::QuatBNLayer bn(channels);
  const Tensor y = bn.forward(x, Mode::Train);
  double err = 0.0, mean_err = 0.0;
  for (std::size_t q = 0; q < channels; ++q) {
    for (std::size_t r = 0; r < 4; ++r) {
      double m = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t l = 0; l < length; ++l)
          m += y.at({b, 4 * q + r, l});
      mean_err = std::max(mean_err, std::abs(m) / (batch * length));
    }
    const auto cov = oracle::channel_covariance(y, q);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c)
        err = std::max(err, std::abs(cov[r][c] - (r == c ? 1.0 : 0.0)));
  }
  return {err <= 1e-3 && mean_err < 1e-6,
          fmt("max |cov - I| %.2e, max |mean| %.2e over %zu channels, "
              "B*L = %zu",
              err, mean_err, channels, batch * length)};
}

// ---- 4: gradients ----------------------------------------------------------

Outcome gradient_suite() {
  exp::RunConfig c;
  const auto rows = exp::run_gradchecks(c);
  double worst = 0.0;
  std::string worst_layer;
  bool all = !rows.empty();
  for (const auto &r : rows) {
    all = all && r.passed && r.max_error < 1e-4;
    if (!(r.max_error <= worst)) {
      worst = r.max_error;
      worst_layer = r.layer;
    }
  }
  return {all, fmt("%zu checks, worst %.2e (%s)", rows.size(), worst,
                   worst_layer.c_str())};
}

// ---- 5: end-to-end learning ------------------------------------------------

Outcome learning() {
  const auto c = config("runs = 10\nmax_epochs = 2\npatience = 2\n",
                        scratch("learning"));
  const auto rep = exp::cmd_train(c, &std::cout);
  return {rep.accuracy.mean >= 0.99,
          fmt("10-seed mean test accuracy %.4f (std %.4f)", rep.accuracy.mean,
              rep.accuracy.std)};
}

// ---- 6: noise robustness ---------------------------------------------------

Outcome noise_trend() {
  const auto c = config("runs = 10\ndomains = D1\nmax_epochs = 20\n"
                        "patience = 5\nsnr_list = -6,-3,0,3,6\n",
                        scratch("noise"));
  auto rows = exp::cmd_noise_sweep(c, &std::cout);
  std::sort(rows.begin(), rows.end(),
            [](const auto &a, const auto &b) { return a.value > b.value; });
  bool monotone = true;
  std::string trend;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i > 0 && rows[i].accuracy.mean > rows[i - 1].accuracy.mean)
      monotone = false;
    trend += fmt("%s%+.0f dB %.4f", i ? ", " : "", rows[i].value,
                 rows[i].accuracy.mean);
  }
  const double low = rows.empty() ? 0.0 : rows.back().accuracy.mean;
  return {rows.size() == 5 && monotone && low >= 0.90,
          trend + (monotone ? " (non-increasing)" : " (not monotone)")};
}

// ---- 7: parameter count ----------------------------------------------------

Outcome parameter_count() {
  const std::size_t params = Model(ModelConfig{}, 0).count_params();
  auto c = config("sweep_train = false\n", scratch("params"));
  const auto rows = exp::cmd_scale_sweep(c);
  bool increasing = rows.size() == 5;
  std::string counts;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i > 0 && rows[i].params <= rows[i - 1].params)
      increasing = false;
    counts += fmt("%s%zu", i ? " < " : "", rows[i].params);
  }
  const bool in_band = params >= 10275 && params <= 30825;
  return {in_band && increasing,
          fmt("default %zu params; scales 1..5: ", params) + counts};
}

// ---- 8: SNR round trip -----------------------------------------------------

Outcome snr_round_trip() {
  data::SynthConfig sc;
  const auto ws = data::overlap_window(data::synth_generate(sc), 2048, 64);
  double worst = 0.0;
  for (const double snr : {-6.0, -3.0, 0.0, 3.0, 6.0})
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto w = ws.window((seed * 97) % ws.size());
      const auto noisy = data::add_gaussian_noise(w, {snr, seed});
      worst = std::max(worst, std::abs(data::measure_snr(w, noisy) - snr));
    }
  return {worst <= 0.5, fmt("worst deviation %.3f dB over 5 x 100 seeds",
                            worst)};
}

// ---- 9: determinism --------------------------------------------------------

std::string slurp(const fs::path &p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Drops any column headed "seconds" (wall-clock timings).
std::string without_timings(const std::string &csv) {
  std::istringstream is(csv);
  std::string line, out;
  std::optional<std::size_t> drop;
  bool header = true;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');)
      cells.push_back(cell);
    if (header) {
      const auto it = std::find(cells.begin(), cells.end(), "seconds");
      if (it != cells.end())
        drop = static_cast<std::size_t>(it - cells.begin());
      header = false;
    }
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (!drop || i != *drop)
        out += cells[i] + ',';
    out += '\n';
  }
  return out;
}

std::vector<fs::path> csv_files(const fs::path &root) {
  std::vector<fs::path> files;
  for (const auto &e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().extension() == ".csv")
      files.push_back(fs::relative(e.path(), root));
  std::sort(files.begin(), files.end());
  return files;
}

Outcome determinism() {
  const std::string tiny = "input_length = 256\nwide_kernel = 16\n"
                           "wide_channels = 8\nqcnn_channels = 2\n"
                           "attention_dim = 8\nbigru_hidden = 4\n"
                           "synth_recording_length = 1600\ndomains = D1,D2\n"
                           "runs = 2\nmax_epochs = 2\npatience = 2\n"
                           "batch_size = 16\nsnr_list = -3,3\n"
                           "scale_counts = 1,2\nsweep_values = 16,32\n"
                           "gradcheck_length = 64\n";
  std::size_t compared = 0;
  std::string failures;
  const auto train_dir = scratch("det_train");
  for (const auto &command : exp::command_names()) {
    const auto dir = scratch("det_" + command);
    auto c = config(tiny, command == "train" ? train_dir : dir);
    if (command == "eval")
      c.set("checkpoint", (train_dir / "checkpoints" / "run0.ckpt").string());
    const auto first = command == "train" ? train_dir : dir;
    if (exp::run_command(command, c) != 0) {
      failures += " " + command + "(exit)";
      continue;
    }
    const auto again = scratch("det_" + command + "_replay");
    if (exp::replay(first / "manifest.json", again) != 0) {
      failures += " " + command + "(replay)";
      continue;
    }
    const auto files = csv_files(first);
    if (files.empty() || files != csv_files(again)) {
      failures += " " + command + "(files)";
      continue;
    }
    for (const auto &f : files) {
      ++compared;
      if (without_timings(slurp(first / f)) !=
          without_timings(slurp(again / f)))
        failures += " " + command + ":" + f.string();
    }
  }
  return {failures.empty(),
          fmt("%zu commands, %zu CSV files compared", exp::command_names().size(),
              compared) +
              (failures.empty() ? "" : "; differing:" + failures)};
}

// ---- 10: transfer ----------------------------------------------------------

Outcome transfer() {
  const auto c = config("runs = 3\nmax_epochs = 4\npatience = 4\n",
                        scratch("transfer"));
  const auto cells = exp::cmd_transfer(c, &std::cout);
  std::vector<double> same, cross;
  for (const auto &cell : cells)
    (cell.source == cell.target ? same : cross).push_back(cell.accuracy.mean);
  const auto mean = [](const std::vector<double> &v) {
    return v.empty() ? 0.0
                     : std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  };
  const double ms = mean(same), mc = mean(cross);
  return {cross.size() == 12 && same.size() == 4 && ms > mc,
          fmt("%zu cross-domain cells, same-domain mean %.4f, cross-domain "
              "mean %.4f",
              cross.size(), ms, mc)};
}

} // namespace

int main(int argc, char **argv) {
  tune_allocator();
  CLI::App app{"MQCCAF acceptance criteria"};
  std::vector<int> selected;
  app.add_option("-c,--criterion", selected, "criterion number (1-10)")
      ->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> all = {
      {"quaternion algebra", hamilton_algebra},
      {"qconv equivalence", qconv_equivalence},
      {"quatbn whitening", quatbn_whitening},
      {"gradient suite", gradient_suite},
      {"end-to-end learning", learning},
      {"noise robustness", noise_trend},
      {"parameter count", parameter_count},
      {"snr round trip", snr_round_trip},
      {"determinism", determinism},
      {"transfer grid", transfer}};
  if (selected.empty()) {
    selected.resize(all.size());
    std::iota(selected.begin(), selected.end(), 1);
  }

  bool ok = true;
  std::vector<std::string> lines;
  for (const int id : selected) {
    const auto &[name, fn] = all[id - 1];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome r;
    try {
      r = fn();
    } catch (const std::exception &e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(
                            std::chrono::steady_clock::now() - t0)
                            .count();
    ok = ok && r.pass;
    lines.push_back(fmt("criterion %2d %s  %-20s %8.1f s  ", id,
                        r.pass ? "PASS" : "FAIL", name.c_str(), secs) +
                    r.detail);
    std::cout << lines.back() << std::endl;
  }
  if (lines.size() > 1) {
    std::cout << "\n";
    for (const auto &l : lines)
      std::cout << l << "\n";
  }
  return ok ? 0 : 1;
}
