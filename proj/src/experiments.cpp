// SPDX-License-Identifier: Apache-2.0
#include "mqccaf/experiments.hpp"

#include "mqccaf/ops.hpp"
#include "mqccaf/quaternion.hpp"
#include "mqccaf/rng.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace mqccaf::exp {

namespace fs = std::filesystem;

namespace {

constexpr const char *kVersion = "0.1.0";

std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos)
    return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::vector<std::string> split_list(const std::string &s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (auto t = trim(item); !t.empty())
      out.push_back(t);
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_fixed(double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

} // namespace

const std::vector<KeySpec> &config_keys() {
  static const std::vector<KeySpec> keys = {
      {"seed", "1", "base seed; run r uses seeds derived from (seed, r)"},
      {"runs", "10", "independent seeds averaged per reported cell"},
      {"out_dir", "mqccaf_out", "directory for config, reports and manifest"},
      // model
      {"input_length", "2048", "window length T"},
      {"wide_kernel", "64", "wide convolution kernel"},
      {"wide_channels", "16", "wide convolution channels (multiple of 4)"},
      {"wide_stride", "1", "wide convolution stride"},
      {"scales", "2,3,4", "branch kernel sizes"},
      {"qcnn_channels", "8", "quaternion channels per QCNN block"},
      {"blocks_per_branch", "3", "QCNN blocks per branch"},
      {"bigru_hidden", "8", "GRU hidden units per direction"},
      {"attention_dim", "32", "query/key width of the fusion attention"},
      {"num_classes", "5", "number of classes"},
      {"pool_window", "2", "max-pool window and stride"},
      {"variant", "MQCNN_CSAFF", "CNN | QCNN | MQCNN | MQCNN_CSAFF"},
      // training
      {"batch_size", "32", "minibatch size"},
      {"max_epochs", "100", "epoch cap"},
      {"learning_rate", "0.001", "Adam learning rate"},
      {"patience", "10", "early-stopping patience on validation loss"},
      // data
      {"data_dir", "", "directory of recording CSVs; empty = synthetic"},
      {"window_stride", "64", "overlap stride between windows"},
      {"domains", "D1,D2,D3,D4", "domains used for training/evaluation"},
      {"snr_db", "none", "Gaussian noise SNR for train/eval, or none"},
      {"synth_recordings_per_class", "1", "synthetic recordings per class and domain"},
      {"synth_recording_length", "8384", "samples per synthetic recording"},
      {"synth_sample_rate", "12000", "synthetic sample rate (Hz)"},
      {"synth_shaft_hz", "25", "synthetic shaft rotation frequency (Hz)"},
      {"synth_shaft_amplitude", "0.2", "synthetic shaft tone amplitude"},
      {"synth_fault_spacing_hz", "40", "fault frequency step between classes (Hz)"},
      {"synth_impulse_amplitude", "4", "synthetic fault burst amplitude"},
      {"synth_jitter", "0.01", "impulse timing jitter (fraction of period)"},
      {"synth_noise_floor", "0.08", "synthetic background noise level"},
      {"synth_seed", "1", "synthetic generator seed"},
      // experiments
      {"snr_list", "-6,-3,0,3,6", "noise-sweep SNR values (dB)"},
      {"scale_counts", "1,2,3,4,5", "scale-sweep branch counts"},
      {"sweep_axis", "wide_kernel", "hparam-sweep axis: wide_kernel | qcnn_channels"},
      {"sweep_values", "", "hparam-sweep values; empty = documented set"},
      {"allow_any", "false", "accept hparam-sweep values outside the documented set", true},
      {"sweep_train", "true", "train each sweep row (false = parameter counts only)"},
      {"checkpoint", "", "checkpoint to evaluate"},
      {"eval_run", "0", "run index whose split eval reproduces"},
      {"gradcheck_length", "128", "window length of the full-model gradient check"},
      {"gradcheck_batch", "2", "batch size of the full-model gradient check"},
      {"gradcheck_tolerance", "1e-4", "maximum relative gradient error"},
      {"gradcheck_step", "1e-5", "central-difference step"},
  };
  return keys;
}

// ---- RunConfig -----------------------------------------------------------

RunConfig::RunConfig() {
  for (const auto &k : config_keys())
    values_[k.key] = k.default_value;
}

void RunConfig::set(const std::string &key, const std::string &value) {
  auto it = values_.find(key);
  if (it == values_.end())
    throw ConfigError("unknown config key '" + key + "'");
  it->second = trim(value);
}

void RunConfig::load_text(const std::string &text, const std::string &origin) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos)
      line.erase(hash);
    line = trim(line);
    if (line.empty())
      continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected 'key = value'");
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError &e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " +
                        e.what());
    }
  }
}

void RunConfig::load_file(const fs::path &path) {
  std::ifstream is(path);
  if (!is)
    throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  load_text(ss.str(), path.string());
}

const std::string &RunConfig::get(const std::string &key) const {
  auto it = values_.find(key);
  if (it == values_.end())
    throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::uint64_t RunConfig::get_u64(const std::string &key) const {
  const std::string &v = get(key);
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-')
      throw std::invalid_argument("negative");
    const auto r = std::stoull(v, &pos);
    if (pos != v.size())
      throw std::invalid_argument("trailing characters");
    return r;
  } catch (const std::exception &) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v +
                      "'");
  }
}

std::size_t RunConfig::get_size(const std::string &key) const {
  return static_cast<std::size_t>(get_u64(key));
}

double RunConfig::get_double(const std::string &key) const {
  const std::string &v = get(key);
  try {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(r))
      throw std::invalid_argument("bad number");
    return r;
  } catch (const std::exception &) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool RunConfig::get_bool(const std::string &key) const {
  const std::string &v = get(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on")
    return true;
  if (v == "false" || v == "0" || v == "no" || v == "off")
    return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<double> RunConfig::get_doubles(const std::string &key) const {
  std::vector<double> out;
  for (const auto &item : split_list(get(key))) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stod(item, &pos));
      if (pos != item.size() || !std::isfinite(out.back()))
        throw std::invalid_argument("bad number");
    } catch (const std::exception &) {
      throw ConfigError(key + ": '" + item + "' is not a number");
    }
  }
  return out;
}

std::vector<std::size_t> RunConfig::get_sizes(const std::string &key) const {
  std::vector<std::size_t> out;
  for (double d : get_doubles(key)) {
    if (d < 0 || d != std::floor(d))
      throw ConfigError(key + ": expected non-negative integers");
    out.push_back(static_cast<std::size_t>(d));
  }
  return out;
}

ModelConfig RunConfig::model() const {
  ModelConfig c;
  c.input_length = get_size("input_length");
  c.wide_kernel = get_size("wide_kernel");
  c.wide_channels = get_size("wide_channels");
  c.wide_stride = get_size("wide_stride");
  c.scales = get_sizes("scales");
  c.qcnn_channels = get_size("qcnn_channels");
  c.blocks_per_branch = get_size("blocks_per_branch");
  c.bigru_hidden = get_size("bigru_hidden");
  c.attention_dim = get_size("attention_dim");
  c.num_classes = get_size("num_classes");
  c.pool_window = get_size("pool_window");
  try {
    c.variant = parse_variant(get("variant"));
    c.validate();
  } catch (const std::exception &e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return c;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  t.batch_size = get_size("batch_size");
  t.max_epochs = get_size("max_epochs");
  t.learning_rate = get_double("learning_rate");
  t.patience = get_size("patience");
  t.seed = get_u64("seed");
  try {
    t.validate();
  } catch (const std::exception &e) {
    throw ConfigError(std::string("training: ") + e.what());
  }
  return t;
}

std::vector<data::Domain> RunConfig::domains() const {
  std::vector<data::Domain> out;
  for (const auto &tag : split_list(get("domains"))) {
    try {
      out.push_back(data::parse_domain(tag));
    } catch (const data::DataError &e) {
      throw ConfigError(std::string("domains: ") + e.what());
    }
  }
  if (out.empty())
    throw ConfigError("domains: at least one domain required");
  return out;
}

data::SynthConfig RunConfig::synth() const {
  data::SynthConfig s;
  s.num_classes = get_size("num_classes");
  s.recordings_per_class = get_size("synth_recordings_per_class");
  s.recording_length = get_size("synth_recording_length");
  s.sample_rate = get_double("synth_sample_rate");
  s.domains = domains();
  s.shaft_hz = get_double("synth_shaft_hz");
  s.shaft_amplitude = get_double("synth_shaft_amplitude");
  s.fault_spacing_hz = get_double("synth_fault_spacing_hz");
  s.impulse_amplitude = get_double("synth_impulse_amplitude");
  s.timing_jitter = get_double("synth_jitter");
  s.noise_floor = get_double("synth_noise_floor");
  s.seed = get_u64("synth_seed");
  if (s.recordings_per_class == 0)
    throw ConfigError("synth_recordings_per_class must be positive");
  if (s.sample_rate <= 0.0)
    throw ConfigError("synth_sample_rate must be positive");
  return s;
}

namespace {

std::optional<double> noise_level(const RunConfig &cfg) {
  if (cfg.get("snr_db") == "none" || cfg.get("snr_db").empty())
    return std::nullopt;
  return cfg.get_double("snr_db");
}

} // namespace

void RunConfig::validate() const {
  model();
  train();
  synth();
  get_u64("runs");
  if (get_size("runs") == 0)
    throw ConfigError("runs must be positive");
  if (get_size("window_stride") == 0)
    throw ConfigError("window_stride must be positive");
  get_doubles("snr_list");
  get_sizes("scale_counts");
  get_sizes("sweep_values");
  get_bool("allow_any");
  get_bool("sweep_train");
  get_size("eval_run");
  get_size("gradcheck_length");
  get_size("gradcheck_batch");
  get_double("gradcheck_tolerance");
  get_double("gradcheck_step");
  noise_level(*this);
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto &[k, v] : values_)
    out += k + " = " + v + "\n";
  return out;
}

// ---- shared helpers ------------------------------------------------------

Summary summarize(const std::vector<double> &values) {
  Summary s;
  s.runs = values.size();
  if (values.empty())
    return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) /
           static_cast<double>(values.size());
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values)
      ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

RunSeeds run_seeds(std::uint64_t base, std::size_t run) {
  const std::uint64_t r = derive_seed(base, static_cast<std::uint64_t>(run));
  return {derive_seed(r, "split"), derive_seed(r, "model"),
          derive_seed(r, "train"), derive_seed(r, "noise")};
}

data::WindowSet load_windows(const RunConfig &cfg) {
  const std::size_t length = cfg.get_size("input_length");
  const std::size_t stride = cfg.get_size("window_stride");
  const auto wanted = cfg.domains();
  std::vector<data::RawRecording> recs;
  const std::string dir = cfg.get("data_dir");
  if (dir.empty()) {
    recs = data::synth_generate(cfg.synth());
  } else {
    if (!fs::is_directory(dir))
      throw data::DataError("data_dir '" + dir + "' is not a directory");
    std::vector<fs::path> files;
    for (const auto &e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".csv")
        files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto &f : files) {
      auto rec = data::load_csv(f);
      if (std::find(wanted.begin(), wanted.end(), rec.domain) != wanted.end())
        recs.push_back(std::move(rec));
    }
    if (recs.empty())
      throw data::DataError("no recordings for the selected domains in " +
                            dir);
  }
  auto ws = data::overlap_window(recs, length, stride);
  if (ws.num_classes() > cfg.get_size("num_classes"))
    throw data::DataError("data has label " +
                          std::to_string(ws.num_classes() - 1) +
                          " but num_classes = " + cfg.get("num_classes"));
  return ws;
}

RunOutcome train_and_test(Model &model, const data::Split &split,
                          const TrainConfig &tc, std::optional<double> snr_db,
                          std::uint64_t noise_seed, std::ostream *log) {
  const data::WindowSet *tr = &split.train, *va = &split.val,
                        *te = &split.test;
  data::Split noisy;
  if (snr_db) {
    noisy = split;
    data::add_gaussian_noise(noisy.train, *snr_db,
                             derive_seed(noise_seed, "train"));
    data::add_gaussian_noise(noisy.val, *snr_db, derive_seed(noise_seed, "val"));
    data::add_gaussian_noise(noisy.test, *snr_db,
                             derive_seed(noise_seed, "test"));
    tr = &noisy.train;
    va = &noisy.val;
    te = &noisy.test;
  }
  RunOutcome out;
  out.training = train(model, *tr, *va, tc, [&](const EpochLog &e) {
    if (log)
      *log << "  epoch " << e.epoch << "  train_loss " << fmt_fixed(e.train_loss, 4)
           << "  val_loss " << fmt_fixed(e.val_loss, 4) << "  val_acc "
           << fmt_fixed(e.val_acc, 4) << "  (" << fmt_fixed(e.seconds, 1)
           << " s)" << std::endl;
  });
  const EvalResult ev = evaluate(model, *te);
  out.accuracy = ev.accuracy;
  out.loss = ev.loss;
  out.confusion = ev.confusion;
  return out;
}

namespace {

fs::path out_dir(const RunConfig &cfg) {
  fs::path p = cfg.get("out_dir");
  fs::create_directories(p);
  return p;
}

std::ofstream open_out(const fs::path &p) {
  std::ofstream os(p);
  if (!os)
    throw data::DataError("cannot write " + p.string());
  return os;
}

void write_confusion(const fs::path &p,
                     const std::vector<std::vector<std::size_t>> &m) {
  auto os = open_out(p);
  os << "true";
  for (std::size_t c = 0; c < m.size(); ++c)
    os << ",pred_" << c;
  os << '\n';
  for (std::size_t r = 0; r < m.size(); ++r) {
    os << r;
    for (auto v : m[r])
      os << ',' << v;
    os << '\n';
  }
}

void add_confusion(std::vector<std::vector<std::size_t>> &acc,
                   const std::vector<std::vector<std::size_t>> &m) {
  if (acc.empty()) {
    acc = m;
    return;
  }
  for (std::size_t r = 0; r < m.size(); ++r)
    for (std::size_t c = 0; c < m[r].size(); ++c)
      acc[r][c] += m[r][c];
}

void say(std::ostream *log, const std::string &msg) {
  if (log)
    *log << msg << std::endl;
}

/// Trains `runs` seeds of one model configuration on shared splits.
Summary run_cell(const RunConfig &cfg, const ModelConfig &mc,
                 const data::WindowSet &ws, std::optional<double> snr,
                 const std::string &tag, std::ostream *log,
                 std::vector<double> *per_run = nullptr) {
  const std::size_t runs = cfg.get_size("runs");
  const std::uint64_t base = cfg.get_u64("seed");
  TrainConfig tc = cfg.train();
  std::vector<double> acc;
  for (std::size_t r = 0; r < runs; ++r) {
    const RunSeeds s = run_seeds(base, r);
    say(log, "[" + tag + "] run " + std::to_string(r + 1) + "/" +
                 std::to_string(runs));
    const auto sp = data::split(ws, s.split);
    Model model(mc, s.model);
    tc.seed = s.train;
    acc.push_back(train_and_test(model, sp, tc, snr, s.noise, log).accuracy);
    say(log, "  test accuracy " + fmt_fixed(acc.back(), 4));
  }
  if (per_run)
    *per_run = acc;
  return summarize(acc);
}

void write_sweep(const fs::path &p, const std::string &first_column,
                 const std::vector<SweepRow> &rows,
                 const std::string &preamble = {}) {
  auto os = open_out(p);
  os << preamble;
  os << first_column
     << ",value,params,accuracy_mean,accuracy_std,runs,single_run\n";
  for (const auto &r : rows) {
    os << r.label << ',' << fmt(r.value) << ',' << r.params << ',';
    if (r.accuracy.runs > 0)
      os << fmt(r.accuracy.mean) << ',' << fmt(r.accuracy.std) << ','
         << r.accuracy.runs << ',' << (r.accuracy.single_run() ? 1 : 0);
    else
      os << ",,0,0";
    os << '\n';
  }
}

std::size_t param_count(const ModelConfig &mc) {
  return Model(mc, 0).count_params();
}

} // namespace

// ---- commands ------------------------------------------------------------

TrainReport cmd_train(const RunConfig &cfg, std::ostream *log) {
  const fs::path dir = out_dir(cfg);
  const ModelConfig mc = cfg.model();
  TrainConfig tc = cfg.train();
  const auto snr = noise_level(cfg);
  const auto ws = load_windows(cfg);
  const std::size_t runs = cfg.get_size("runs");
  const std::uint64_t base = cfg.get_u64("seed");
  fs::create_directories(dir / "checkpoints");

  TrainReport rep;
  rep.params = param_count(mc);
  auto report = open_out(dir / "report.csv");
  report << "run,test_accuracy,test_loss,best_epoch,epochs,params\n";
  for (std::size_t r = 0; r < runs; ++r) {
    const RunSeeds s = run_seeds(base, r);
    say(log, "[train] run " + std::to_string(r + 1) + "/" +
                 std::to_string(runs));
    const auto sp = data::split(ws, s.split);
    Model model(mc, s.model);
    tc.seed = s.train;
    const RunOutcome o = train_and_test(model, sp, tc, snr, s.noise, log);
    say(log, "  test accuracy " + fmt_fixed(o.accuracy, 4));
    rep.accuracies.push_back(o.accuracy);
    add_confusion(rep.confusion, o.confusion);
    report << r << ',' << fmt(o.accuracy) << ',' << fmt(o.loss) << ','
           << o.training.best_epoch << ',' << o.training.history.size() << ','
           << rep.params << '\n';
    auto elog = open_out(dir / ("epochs_run" + std::to_string(r) + ".csv"));
    write_epoch_log(elog, o.training.history);
    save_checkpoint(model, dir / "checkpoints" /
                               ("run" + std::to_string(r) + ".ckpt"));
  }
  rep.accuracy = summarize(rep.accuracies);
  auto summary = open_out(dir / "summary.csv");
  summary << "accuracy_mean,accuracy_std,runs,single_run,params\n"
          << fmt(rep.accuracy.mean) << ',' << fmt(rep.accuracy.std) << ','
          << rep.accuracy.runs << ',' << (rep.accuracy.single_run() ? 1 : 0)
          << ',' << rep.params << '\n';
  write_confusion(dir / "confusion.csv", rep.confusion);
  say(log, "[train] accuracy " + fmt_fixed(rep.accuracy.mean, 4) + " +- " +
               fmt_fixed(rep.accuracy.std, 4) + " over " +
               std::to_string(rep.accuracy.runs) + " run(s), " +
               std::to_string(rep.params) + " parameters");
  return rep;
}

EvalReport cmd_eval(const RunConfig &cfg, std::ostream *log) {
  const std::string ckpt = cfg.get("checkpoint");
  if (ckpt.empty())
    throw ConfigError("eval requires --checkpoint");
  if (!fs::exists(ckpt))
    throw data::DataError("checkpoint '" + ckpt + "' does not exist");
  const fs::path dir = out_dir(cfg);
  Model model = load_checkpoint(ckpt);
  const auto ws = load_windows(cfg);
  const RunSeeds s = run_seeds(cfg.get_u64("seed"), cfg.get_size("eval_run"));
  auto sp = data::split(ws, s.split);
  if (const auto snr = noise_level(cfg))
    data::add_gaussian_noise(sp.test, *snr, derive_seed(s.noise, "test"));
  const EvalResult ev = evaluate(model, sp.test);
  EvalReport rep{ev.accuracy, model.count_params(), ev.confusion};
  auto os = open_out(dir / "report.csv");
  os << "test_accuracy,test_loss,test_windows,params\n"
     << fmt(ev.accuracy) << ',' << fmt(ev.loss) << ',' << sp.test.size() << ','
     << rep.params << '\n';
  write_confusion(dir / "confusion.csv", ev.confusion);
  say(log, "[eval] accuracy " + fmt_fixed(ev.accuracy, 4) + " on " +
               std::to_string(sp.test.size()) + " windows");
  return rep;
}

std::vector<SweepRow> cmd_noise_sweep(const RunConfig &cfg, std::ostream *log) {
  const fs::path dir = out_dir(cfg);
  const ModelConfig mc = cfg.model();
  const auto ws = load_windows(cfg);
  const auto snrs = cfg.get_doubles("snr_list");
  if (snrs.empty())
    throw ConfigError("snr_list is empty");
  const std::size_t params = param_count(mc);
  std::vector<SweepRow> rows;
  auto per_run = open_out(dir / "runs.csv");
  per_run << "snr_db,run,test_accuracy\n";
  for (double snr : snrs) {
    std::vector<double> acc;
    const std::string label = fmt(snr) + "dB";
    rows.push_back({label, snr, params,
                    run_cell(cfg, mc, ws, snr, "noise " + label, log, &acc)});
    for (std::size_t r = 0; r < acc.size(); ++r)
      per_run << fmt(snr) << ',' << r << ',' << fmt(acc[r]) << '\n';
  }
  write_sweep(dir / "report.csv", "snr", rows,
              "# noise protocol: symmetric (train, validation and test "
              "windows corrupted at the same SNR)\n");
  // Wide table: one row per method, one column per SNR (percent).
  auto table = open_out(dir / "table.csv");
  table << "method,params";
  for (const auto &r : rows)
    table << ',' << r.label;
  table << '\n' << to_string(mc.variant) << ',' << params;
  for (const auto &r : rows)
    table << ',' << fmt_fixed(100.0 * r.accuracy.mean, 2);
  table << '\n';
  return rows;
}

std::vector<TransferCell> cmd_transfer(const RunConfig &cfg,
                                       std::ostream *log) {
  const fs::path dir = out_dir(cfg);
  const ModelConfig mc = cfg.model();
  const auto domains = cfg.domains();
  if (domains.size() < 2)
    throw ConfigError("transfer needs at least two domains");
  const auto all = load_windows(cfg);
  std::map<data::Domain, data::WindowSet> per_domain;
  for (auto d : domains) {
    per_domain[d] = all.filter(d);
    if (per_domain[d].size() == 0)
      throw data::DataError("no windows for domain " + data::to_string(d));
  }
  const std::size_t runs = cfg.get_size("runs");
  const std::uint64_t base = cfg.get_u64("seed");
  TrainConfig tc = cfg.train();
  std::map<std::pair<data::Domain, data::Domain>, std::vector<double>> acc;
  for (std::size_t r = 0; r < runs; ++r) {
    const RunSeeds s = run_seeds(base, r);
    std::map<data::Domain, data::Split> splits;
    for (auto d : domains)
      splits[d] = data::split(per_domain[d], s.split);
    for (auto src : domains) {
      say(log, "[transfer] run " + std::to_string(r + 1) + "/" +
                   std::to_string(runs) + " source " + data::to_string(src));
      Model model(mc, s.model);
      tc.seed = s.train;
      train(model, splits[src].train, splits[src].val, tc,
            [&](const EpochLog &e) {
              if (log)
                *log << "  epoch " << e.epoch << "  val_loss "
                     << fmt_fixed(e.val_loss, 4) << "  val_acc "
                     << fmt_fixed(e.val_acc, 4) << std::endl;
            });
      for (auto dst : domains)
        acc[{src, dst}].push_back(evaluate(model, splits[dst].test).accuracy);
    }
  }
  const std::size_t params = param_count(mc);
  std::vector<TransferCell> cells;
  auto os = open_out(dir / "report.csv");
  os << "task,source,target,same_domain,accuracy_mean,accuracy_std,runs,"
        "params\n";
  for (auto src : domains)
    for (auto dst : domains) {
      TransferCell c{src, dst, summarize(acc[{src, dst}])};
      cells.push_back(c);
      os << data::to_string(src) << "->" << data::to_string(dst) << ','
         << data::to_string(src) << ',' << data::to_string(dst) << ','
         << (src == dst ? 1 : 0) << ',' << fmt(c.accuracy.mean) << ','
         << fmt(c.accuracy.std) << ',' << c.accuracy.runs << ',' << params
         << '\n';
    }
  auto grid = open_out(dir / "grid.csv");
  grid << "source";
  for (auto d : domains)
    grid << ',' << data::to_string(d);
  grid << '\n';
  for (auto src : domains) {
    grid << data::to_string(src);
    for (auto dst : domains)
      grid << ',' << fmt_fixed(100.0 * summarize(acc[{src, dst}]).mean, 2);
    grid << '\n';
  }
  return cells;
}

std::vector<SweepRow> cmd_scale_sweep(const RunConfig &cfg, std::ostream *log) {
  static const std::vector<std::size_t> kKernels = {2, 3, 4, 5, 6};
  const fs::path dir = out_dir(cfg);
  const bool do_train = cfg.get_bool("sweep_train");
  const auto counts = cfg.get_sizes("scale_counts");
  if (counts.empty())
    throw ConfigError("scale_counts is empty");
  std::optional<data::WindowSet> ws;
  if (do_train)
    ws = load_windows(cfg);
  std::vector<SweepRow> rows;
  for (auto n : counts) {
    if (n < 1 || n > kKernels.size())
      throw ConfigError("scale_counts entries must be in 1..5");
    ModelConfig mc = cfg.model();
    mc.scales.assign(kKernels.begin(), kKernels.begin() +
                                           static_cast<std::ptrdiff_t>(n));
    std::string label;
    for (std::size_t i = 0; i < n; ++i)
      label += (i ? "+1x" : "1x") + std::to_string(mc.scales[i]);
    SweepRow row{label, static_cast<double>(n), param_count(mc), {}};
    if (do_train)
      row.accuracy = run_cell(cfg, mc, *ws, noise_level(cfg),
                              "scales " + label, log);
    say(log, "[scale-sweep] " + label + " params " + std::to_string(row.params));
    rows.push_back(row);
  }
  write_sweep(dir / "report.csv", "scales", rows);
  return rows;
}

std::vector<SweepRow> cmd_hparam_sweep(const RunConfig &cfg,
                                       std::ostream *log) {
  const fs::path dir = out_dir(cfg);
  const std::string axis = cfg.get("sweep_axis");
  std::vector<std::size_t> documented;
  if (axis == "wide_kernel")
    documented = {16, 32, 64, 128, 256};
  else if (axis == "qcnn_channels")
    documented = {4, 8, 16, 32, 64};
  else
    throw ConfigError("sweep_axis must be wide_kernel or qcnn_channels, got '" +
                      axis + "'");
  auto values = cfg.get_sizes("sweep_values");
  if (values.empty())
    values = documented;
  if (!cfg.get_bool("allow_any"))
    for (auto v : values)
      if (std::find(documented.begin(), documented.end(), v) ==
          documented.end())
        throw ConfigError(axis + " value " + std::to_string(v) +
                          " is outside the documented set (use --allow-any)");
  const bool do_train = cfg.get_bool("sweep_train");
  std::optional<data::WindowSet> ws;
  if (do_train)
    ws = load_windows(cfg);
  std::vector<SweepRow> rows;
  for (auto v : values) {
    RunConfig c = cfg;
    c.set(axis, std::to_string(v));
    const ModelConfig mc = c.model();
    SweepRow row{axis + "=" + std::to_string(v), static_cast<double>(v),
                 param_count(mc), {}};
    if (do_train)
      row.accuracy = run_cell(c, mc, *ws, noise_level(cfg), row.label, log);
    say(log, "[hparam-sweep] " + row.label + " params " +
                 std::to_string(row.params));
    rows.push_back(row);
  }
  write_sweep(dir / "report.csv", axis, rows);
  return rows;
}

std::vector<SweepRow> cmd_ablate(const RunConfig &cfg, std::ostream *log) {
  const fs::path dir = out_dir(cfg);
  const auto ws = load_windows(cfg);
  std::vector<SweepRow> rows;
  for (auto v : {ModelVariant::CNN, ModelVariant::QCNN, ModelVariant::MQCNN,
                 ModelVariant::MQCNN_CSAFF}) {
    ModelConfig mc = cfg.model();
    mc.variant = v;
    mc.validate();
    SweepRow row{to_string(v), static_cast<double>(rows.size()),
                 param_count(mc), {}};
    row.accuracy = run_cell(cfg, mc, ws, noise_level(cfg), to_string(v), log);
    rows.push_back(row);
  }
  write_sweep(dir / "report.csv", "variant", rows);
  if (rows.back().accuracy.mean < rows.front().accuracy.mean)
    say(log, "[ablate] note: full model below the CNN baseline on this data");
  return rows;
}

// ---- gradient checks -----------------------------------------------------

namespace {

Tensor random_tensor(Shape shape, Rng &rng, double scale = 1.0,
                     bool requires_grad = true) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(numel(shape));
  for (auto &x : v)
    x = n(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// sum(f(...) * R) for a fixed random R, so that every output entry
/// contributes a distinct weight to the scalar.
Tensor probe(const Tensor &y, const Tensor &weights) {
  return ops::sum(ops::mul(y, weights));
}

std::vector<Tensor> leaves_of(const Parameters &params,
                              std::initializer_list<Tensor> extra = {}) {
  std::vector<Tensor> out(extra);
  for (const auto &[path, t] : params)
    out.push_back(t);
  return out;
}

} // namespace

std::vector<GradcheckRow> run_gradchecks(const RunConfig &cfg,
                                         std::ostream *log) {
  const double tol = cfg.get_double("gradcheck_tolerance");
  const double h = cfg.get_double("gradcheck_step");
  Rng rng(derive_seed(cfg.get_u64("seed"), "gradcheck"));
  std::vector<GradcheckRow> rows;
  auto check = [&](const std::string &name, const std::function<Tensor()> &f,
                   std::vector<Tensor> leaves) {
    const auto res = grad_check(f, leaves, h);
    rows.push_back({name, res.max_error, res.coordinates, res.max_error < tol});
    say(log, "[gradcheck] " + name + " max_rel_error " +
                 fmt(res.max_error) + (rows.back().passed ? " ok" : " FAIL"));
  };

  {
    Conv1dLayer conv(3, 4, 5, 1);
    conv.init(rng());
    Tensor x = random_tensor({2, 3, 11}, rng);
    Tensor w = random_tensor({2, 4, 11}, rng, 1.0, false);
    Parameters p;
    conv.collect("", p);
    check("conv1d", [&] { return probe(conv.forward(x), w); },
          leaves_of(p, {x}));
    Conv1dLayer strided(2, 3, 4, 2);
    strided.init(rng());
    Tensor xs = random_tensor({2, 2, 13}, rng);
    Tensor ws = random_tensor({2, 3, 5}, rng, 1.0, false);
    Parameters ps;
    strided.collect("", ps);
    check("conv1d_strided_valid",
          [&] { return probe(strided.forward(xs, ops::Padding::Valid), ws); },
          leaves_of(ps, {xs}));
  }
  {
    Tensor x = random_tensor({2, 3, 8}, rng);
    Tensor w = random_tensor({2, 3, 8}, rng, 1.0, false);
    Tensor wp = random_tensor({2, 3, 4}, rng, 1.0, false);
    check("relu", [&] { return probe(ops::relu(x), w); }, {x});
    check("sigmoid", [&] { return probe(ops::sigmoid(x), w); }, {x});
    check("tanh", [&] { return probe(ops::tanh(x), w); }, {x});
    check("softmax", [&] { return probe(ops::softmax(x, 1), w); }, {x});
    check("maxpool1d", [&] { return probe(ops::maxpool1d(x, 2, 2), wp); },
          {x});
  }
  {
    quat::QConvLayer qc(2, 3, 3);
    quat::quaternion_init(qc, rng());
    for (auto &b : qc.bias().mutable_data())
      b = std::normal_distribution<double>(0.0, 0.1)(rng);
    Tensor x = random_tensor({2, 8, 9}, rng);
    Tensor w = random_tensor({2, 12, 9}, rng, 1.0, false);
    Parameters p;
    qc.collect("", p);
    check("qconv",
          [&] { return probe(quat::qconv_forward(x, qc, 1, ops::Padding::Same), w); },
          leaves_of(p, {x}));
  }
  for (Mode mode : {Mode::Train, Mode::Eval}) {
    quat::QuatBNLayer bn(2);
    Rng r2(rng());
    for (auto &g : bn.gain().mutable_data())
      g += std::normal_distribution<double>(0.0, 0.3)(r2);
    for (auto &s : bn.shift().mutable_data())
      s = std::normal_distribution<double>(0.0, 0.3)(r2);
    Tensor x = random_tensor({3, 8, 12}, rng);
    if (mode == Mode::Eval) { // non-trivial running statistics
      NoGradGuard ng;
      bn.forward(random_tensor({4, 8, 16}, rng, 1.5, false), Mode::Train);
    }
    Tensor w = random_tensor({3, 8, 12}, rng, 1.0, false);
    Parameters p;
    Buffers b;
    bn.collect("", p, b);
    check(mode == Mode::Train ? "quatbn_train" : "quatbn_eval",
          [&] { return probe(bn.forward(x, mode), w); }, leaves_of(p, {x}));
  }
  {
    BatchNorm1dLayer bn(3);
    Tensor x = random_tensor({4, 3, 6}, rng);
    Tensor w = random_tensor({4, 3, 6}, rng, 1.0, false);
    Parameters p;
    Buffers b;
    bn.collect("", p, b);
    for (auto &[k, t] : p)
      for (auto &v : t.mutable_data())
        v += std::normal_distribution<double>(0.0, 0.3)(rng);
    check("batchnorm1d", [&] { return probe(bn.forward(x, Mode::Train), w); },
          leaves_of(p, {x}));
  }
  {
    quat::QConvLayer qc(2, 2, 3);
    quat::quaternion_init(qc, rng());
    quat::QuatBNLayer bn(2);
    Tensor x = random_tensor({2, 8, 16}, rng);
    Tensor w = random_tensor({2, 8, 8}, rng, 1.0, false);
    Parameters p;
    Buffers b;
    qc.collect("qconv", p);
    bn.collect("qbn", p, b);
    check("qcnn_block",
          [&] { return probe(quat::qcnn_block(x, qc, bn, Mode::Train, 2), w); },
          leaves_of(p, {x}));
  }
  {
    CsaffLayer att(16, 4);
    att.init(rng());
    Tensor a = random_tensor({2, 8, 5}, rng), b = random_tensor({2, 8, 5}, rng);
    Tensor w = random_tensor({2, 16, 5}, rng, 1.0, false);
    Parameters p;
    att.collect("", p);
    check("csaff", [&] { return probe(att.forward({a, b}), w); },
          leaves_of(p, {a, b}));
    check("concat_fusion", [&] { return probe(concat_fusion({a, b}), w); },
          {a, b});
  }
  {
    BiGruLayer gru(6, 3);
    gru.init(rng());
    Tensor x = random_tensor({2, 6, 5}, rng);
    Tensor w = random_tensor({2, 6, 5}, rng, 1.0, false);
    Parameters p;
    gru.collect("", p);
    check("bigru", [&] { return probe(gru.forward(x), w); }, leaves_of(p, {x}));
  }
  {
    Tensor x = random_tensor({2, 4, 7}, rng);
    Tensor w = random_tensor({2, 4}, rng, 1.0, false);
    check("gap", [&] { return probe(gap(x), w); }, {x});
  }
  {
    DenseLayer dense(6, 4);
    dense.init(rng());
    Tensor x = random_tensor({3, 6}, rng);
    const std::vector<std::uint32_t> labels = {0, 3, 1};
    Tensor y = one_hot(labels, 4);
    Parameters p;
    dense.collect("", p);
    check("dense_softmax_cross_entropy",
          [&] { return cross_entropy(ops::softmax(dense.forward(x), 1), y); },
          leaves_of(p, {x}));
  }
  {
    ModelConfig mc = cfg.model();
    mc.input_length = cfg.get_size("gradcheck_length");
    mc.validate();
    Model model(mc, derive_seed(cfg.get_u64("seed"), "gradcheck-model"));
    const std::size_t batch = cfg.get_size("gradcheck_batch");
    Tensor x = random_tensor({batch, 1, mc.input_length}, rng);
    std::vector<std::uint32_t> labels(batch);
    for (std::size_t i = 0; i < batch; ++i)
      labels[i] = static_cast<std::uint32_t>(i % mc.num_classes);
    Tensor y = one_hot(labels, mc.num_classes);
    check("model_" + to_string(mc.variant),
          [&] { return cross_entropy(model.forward(x, Mode::Train), y); },
          leaves_of(model.parameters(), {x}));
  }
  return rows;
}

std::vector<GradcheckRow> cmd_gradcheck(const RunConfig &cfg,
                                        std::ostream *log) {
  const fs::path dir = out_dir(cfg);
  auto rows = run_gradchecks(cfg, log);
  auto os = open_out(dir / "report.csv");
  os << "layer,max_rel_error,tolerance,coordinates,passed\n";
  for (const auto &r : rows)
    os << r.layer << ',' << fmt(r.max_error) << ','
       << cfg.get("gradcheck_tolerance") << ',' << r.coordinates << ','
       << (r.passed ? 1 : 0) << '\n';
  const bool ok = std::all_of(rows.begin(), rows.end(),
                              [](const GradcheckRow &r) { return r.passed; });
  if (!ok)
    throw NumericalError("gradient check failed for at least one layer");
  return rows;
}

std::vector<fs::path> cmd_gen_synth(const RunConfig &cfg, std::ostream *log) {
  const fs::path dir = out_dir(cfg);
  const auto recs = data::synth_generate(cfg.synth());
  fs::create_directories(dir / "recordings");
  std::vector<fs::path> files;
  std::map<std::string, std::size_t> seen;
  auto index = open_out(dir / "report.csv");
  index << "file,label,domain,samples,sample_rate\n";
  for (const auto &r : recs) {
    const std::string stem = data::to_string(r.domain) + "_c" +
                             std::to_string(r.label);
    const std::string name =
        stem + "_r" + std::to_string(seen[stem]++) + ".csv";
    data::save_csv(r, dir / "recordings" / name);
    files.push_back(dir / "recordings" / name);
    index << "recordings/" << name << ',' << r.label << ','
          << data::to_string(r.domain) << ',' << r.samples.size() << ','
          << fmt(r.sample_rate) << '\n';
  }
  data::save_window_cache(data::overlap_window(recs, cfg.get_size("input_length"),
                                               cfg.get_size("window_stride")),
                          dir / "windows.bin");
  say(log, "[gen-synth] wrote " + std::to_string(files.size()) +
               " recordings to " + (dir / "recordings").string());
  return files;
}

// ---- dispatch ------------------------------------------------------------

const std::vector<std::string> &command_names() {
  static const std::vector<std::string> names = {
      "train",    "eval",   "noise-sweep", "transfer", "scale-sweep",
      "hparam-sweep", "ablate", "gradcheck", "gen-synth"};
  return names;
}

int run_command(const std::string &command, const RunConfig &cfg,
                std::ostream *log) {
  cfg.validate();
  const fs::path dir = out_dir(cfg);
  {
    auto os = open_out(dir / "config.txt");
    os << "# resolved configuration for '" << command << "'\n"
       << cfg.to_text();
  }
  const auto start = std::chrono::steady_clock::now();
  if (command == "train")
    cmd_train(cfg, log);
  else if (command == "eval")
    cmd_eval(cfg, log);
  else if (command == "noise-sweep")
    cmd_noise_sweep(cfg, log);
  else if (command == "transfer")
    cmd_transfer(cfg, log);
  else if (command == "scale-sweep")
    cmd_scale_sweep(cfg, log);
  else if (command == "hparam-sweep")
    cmd_hparam_sweep(cfg, log);
  else if (command == "ablate")
    cmd_ablate(cfg, log);
  else if (command == "gradcheck")
    cmd_gradcheck(cfg, log);
  else if (command == "gen-synth")
    cmd_gen_synth(cfg, log);
  else
    throw ConfigError("unknown command '" + command + "'");
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();

  nlohmann::ordered_json m;
  m["command"] = command;
  m["seed"] = cfg.get_u64("seed");
  m["config"] = cfg.values();
  m["versions"] = {{"mqccaf", kVersion},
                   {"compiler", __VERSION__},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                 std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"cxx_standard", __cplusplus}};
  m["wall_time_seconds"] = wall;
  std::vector<std::string> outputs;
  for (const auto &e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "manifest.json")
      outputs.push_back(fs::relative(e.path(), dir).generic_string());
  std::sort(outputs.begin(), outputs.end());
  m["outputs"] = outputs;
  auto os = open_out(dir / "manifest.json");
  os << m.dump(2) << '\n';
  return 0;
}

int replay(const fs::path &manifest, const std::optional<fs::path> &dir,
           std::ostream *log) {
  std::ifstream is(manifest);
  if (!is)
    throw data::DataError("cannot read manifest " + manifest.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception &e) {
    throw data::DataError("malformed manifest " + manifest.string() + ": " +
                          e.what());
  }
  if (!m.contains("command") || !m.contains("config"))
    throw data::DataError("manifest lacks command or config");
  RunConfig cfg;
  for (const auto &[k, v] : m["config"].items())
    cfg.set(k, v.get<std::string>());
  if (dir)
    cfg.set("out_dir", dir->string());
  return run_command(m["command"].get<std::string>(), cfg, log);
}

} // namespace mqccaf::exp
