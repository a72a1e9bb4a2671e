// SPDX-License-Identifier: Apache-2.0
/**
 * @file   experiments.hpp
 * @brief  Run configuration and the experiment commands behind the CLI.
 *
 * Every command reads a resolved RunConfig, writes its outputs into
 * `out_dir` (resolved config, CSV reports, manifest.json) and returns the
 * headline numbers so callers can inspect them without re-parsing files.
 */
#pragma once

#include "mqccaf/data.hpp"
#include "mqccaf/model.hpp"
#include "mqccaf/training.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mqccaf::exp {

/// Unknown key, malformed value or inconsistent settings.
class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct KeySpec {
  std::string key;
  std::string default_value;
  std::string help;
  bool flag = false; // boolean switch, `--key` alone means true
};

/// Every accepted key with its default, in documentation order.
const std::vector<KeySpec> &config_keys();

class RunConfig {
public:
  /// All keys at their defaults.
  RunConfig();

  /// Throws ConfigError for unknown keys.
  void set(const std::string &key, const std::string &value);
  /// `key = value` lines; `#` starts a comment.
  void load_file(const std::filesystem::path &path);
  void load_text(const std::string &text, const std::string &origin);

  const std::string &get(const std::string &key) const;
  std::size_t get_size(const std::string &key) const;
  double get_double(const std::string &key) const;
  std::uint64_t get_u64(const std::string &key) const;
  bool get_bool(const std::string &key) const;
  std::vector<double> get_doubles(const std::string &key) const;
  std::vector<std::size_t> get_sizes(const std::string &key) const;

  ModelConfig model() const;
  TrainConfig train() const;
  data::SynthConfig synth() const;
  std::vector<data::Domain> domains() const;

  /// Parses every typed view; throws ConfigError on the first problem.
  void validate() const;

  /// Sorted `key = value` lines.
  std::string to_text() const;
  const std::map<std::string, std::string> &values() const { return values_; }

private:
  std::map<std::string, std::string> values_;
};

struct Summary {
  double mean = 0.0;
  double std = 0.0; // sample standard deviation; 0 when runs == 1
  std::size_t runs = 0;
  bool single_run() const { return runs == 1; }
};
Summary summarize(const std::vector<double> &values);

/// Seeds of run r, all derived from the base seed so that different
/// experiments (and different variants within one) share splits and data.
struct RunSeeds {
  std::uint64_t split, model, train, noise;
};
RunSeeds run_seeds(std::uint64_t base, std::size_t run);

/// Windows from `data_dir` CSVs or, when it is empty, the synthetic
/// generator; restricted to the configured domains.
data::WindowSet load_windows(const RunConfig &cfg);

/// One train/evaluate cycle. When `snr_db` is set, train, val and test
/// windows are all corrupted at that SNR.
struct RunOutcome {
  double accuracy = 0.0;
  double loss = 0.0;
  std::vector<std::vector<std::size_t>> confusion;
  TrainResult training;
};
RunOutcome train_and_test(Model &model, const data::Split &split,
                          const TrainConfig &tc, std::optional<double> snr_db,
                          std::uint64_t noise_seed, std::ostream *log);

// ---- commands ------------------------------------------------------------

struct TrainReport {
  std::vector<double> accuracies;
  Summary accuracy;
  std::size_t params = 0;
  std::vector<std::vector<std::size_t>> confusion; // summed over runs
};
TrainReport cmd_train(const RunConfig &cfg, std::ostream *log = nullptr);

struct EvalReport {
  double accuracy = 0.0;
  std::size_t params = 0;
  std::vector<std::vector<std::size_t>> confusion;
};
EvalReport cmd_eval(const RunConfig &cfg, std::ostream *log = nullptr);

struct SweepRow {
  std::string label;
  double value = 0.0; // SNR, scale count, kernel size, ...
  std::size_t params = 0;
  Summary accuracy; // runs == 0 when training is disabled
};
std::vector<SweepRow> cmd_noise_sweep(const RunConfig &cfg,
                                      std::ostream *log = nullptr);
std::vector<SweepRow> cmd_scale_sweep(const RunConfig &cfg,
                                      std::ostream *log = nullptr);
std::vector<SweepRow> cmd_hparam_sweep(const RunConfig &cfg,
                                       std::ostream *log = nullptr);
std::vector<SweepRow> cmd_ablate(const RunConfig &cfg,
                                 std::ostream *log = nullptr);

struct TransferCell {
  data::Domain source, target;
  Summary accuracy;
};
std::vector<TransferCell> cmd_transfer(const RunConfig &cfg,
                                       std::ostream *log = nullptr);

struct GradcheckRow {
  std::string layer;
  double max_error = 0.0;
  std::size_t coordinates = 0;
  bool passed = false;
};
std::vector<GradcheckRow> run_gradchecks(const RunConfig &cfg,
                                         std::ostream *log = nullptr);
std::vector<GradcheckRow> cmd_gradcheck(const RunConfig &cfg,
                                        std::ostream *log = nullptr);

/// Writes one CSV per synthetic recording into out_dir/recordings.
std::vector<std::filesystem::path> cmd_gen_synth(const RunConfig &cfg,
                                                 std::ostream *log = nullptr);

const std::vector<std::string> &command_names();

/// Runs a command by name: writes config.txt before and manifest.json after.
/// Returns the process exit code for a successful run (0).
int run_command(const std::string &command, const RunConfig &cfg,
                std::ostream *log = nullptr);

/// Re-runs the command recorded in a manifest, optionally into a new
/// output directory.
int replay(const std::filesystem::path &manifest,
           const std::optional<std::filesystem::path> &out_dir,
           std::ostream *log = nullptr);

} // namespace mqccaf::exp
