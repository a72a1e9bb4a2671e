// SPDX-License-Identifier: Apache-2.0
// mqccaf: command-line entry point for training, evaluation and the
// experiment sweeps.

#include "mqccaf/experiments.hpp"
#include "mqccaf/runtime.hpp"

#include "CLI11.hpp"

#include <iostream>
#include <map>
#include <optional>
#include <string>

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

std::string option_names(const std::string &key) {
  std::string names = "--" + key;
  std::string dashed = key;
  for (auto &c : dashed)
    if (c == '_')
      c = '-';
  if (dashed != key)
    names += ",--" + dashed;
  return names;
}

const std::map<std::string, std::string> &command_help() {
  static const std::map<std::string, std::string> help = {
      {"train", "train and test the model over `runs` seeds"},
      {"eval", "evaluate a checkpoint on the test split of `eval_run`"},
      {"noise-sweep", "accuracy versus SNR (symmetric noise)"},
      {"transfer", "train on one domain, test on every domain"},
      {"scale-sweep", "1 to 5 branch scales"},
      {"hparam-sweep", "wide kernel size or QCNN channel sweep"},
      {"ablate", "CNN, QCNN, MQCNN and MQCNN_CSAFF on shared seeds"},
      {"gradcheck", "finite-difference check of every layer"},
      {"gen-synth", "write synthetic recordings as CSV"},
  };
  return help;
}

} // namespace

int main(int argc, char **argv) {
  using namespace mqccaf;
  tune_allocator();
  CLI::App app{"Multi-scale quaternion CNN with cross self-attention fusion "
               "for bearing fault diagnosis"};
  app.require_subcommand(1);

  struct Sub {
    CLI::App *app;
    std::string config_file;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option *> options;
  };
  std::map<std::string, Sub> subs;
  for (const auto &name : exp::command_names()) {
    Sub &s = subs[name];
    s.app = app.add_subcommand(name, command_help().at(name));
    s.app->add_option("--config", s.config_file,
                      "key = value configuration file")
        ->check(CLI::ExistingFile);
    for (const auto &k : exp::config_keys()) {
      const std::string help =
          k.help + (k.default_value.empty() ? "" : " [" + k.default_value + "]");
      if (k.flag)
        s.options[k.key] = s.app->add_flag(option_names(k.key), help);
      else
        s.options[k.key] =
            s.app->add_option(option_names(k.key), s.values[k.key], help);
    }
  }

  std::string manifest;
  std::string replay_out;
  CLI::App *rep = app.add_subcommand(
      "replay", "re-run the command recorded in a manifest.json");
  rep->add_option("manifest", manifest, "manifest.json of an earlier run")
      ->required();
  rep->add_option("--out_dir,--out-dir", replay_out,
                  "write outputs here instead of the recorded directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (rep->parsed()) {
      std::optional<std::filesystem::path> out;
      if (!replay_out.empty())
        out = replay_out;
      return exp::replay(manifest, out, &std::cerr);
    }
    for (auto &[name, s] : subs) {
      if (!s.app->parsed())
        continue;
      exp::RunConfig cfg;
      if (!s.config_file.empty())
        cfg.load_file(s.config_file);
      for (const auto &k : exp::config_keys()) {
        CLI::Option *opt = s.options.at(k.key);
        if (opt->count() == 0)
          continue;
        cfg.set(k.key, k.flag ? "true" : s.values.at(k.key));
      }
      return exp::run_command(name, cfg, &std::cerr);
    }
  } catch (const exp::ConfigError &e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericalError &e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const data::DataError &e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
