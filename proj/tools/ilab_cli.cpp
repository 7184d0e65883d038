// SPDX-License-Identifier: Apache-2.0
// ilab: run, probe, analyze, pre-train and report incremental-learning
// experiments from JSON configs.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ilab/runner.hpp"

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> preset;
  bool force = false;
  bool quiet = false;
};

ilab::RunConfig load(const Common& o) {
  ilab::RunConfig c = ilab::load_run_config(o.config);
  if (o.seed) {
    c.seed = *o.seed;
    c.seeds.clear();
  }
  if (o.preset) {
    ilab::preset(*o.preset);  // validates the name
    c.presets = {*o.preset};
  }
  return c;
}

std::filesystem::path output_dir(const Common& o, const ilab::RunConfig& c) {
  if (!o.out.empty()) return o.out;
  if (!c.output_dir.empty()) return c.output_dir;
  throw ilab::ValidationError("no output directory: pass --out or set output_dir in the config");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incremental-learning lab: sequential fine-tuning, probing and classifier geometry"};
  app.require_subcommand(1);
  Common o;
  std::vector<std::string> report_dirs;
  std::string report_out;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", o.config, "JSON run config");
    if (needs_config) opt->required()->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "output directory (overrides output_dir)");
    sub->add_flag("--quiet", o.quiet, "log to the run directory only");
  };

  auto* run = app.add_subcommand("run", "pre-train (optional), learn the task sequence, probe and analyze");
  add_common(run, true);
  run->add_option("--seed", o.seed, "master seed (overrides seed/seeds)");
  run->add_option("--preset", o.preset, "strategy preset, e.g. \"SEQ*(P+W+FixBC+Cos)\"");
  run->add_flag("--force", o.force, "overwrite a completed run directory");

  auto* pretrain = app.add_subcommand("pretrain", "causal-LM pre-training with linear probing per checkpoint");
  add_common(pretrain, true);
  pretrain->add_option("--seed", o.seed, "master seed");
  pretrain->add_flag("--force", o.force, "overwrite an existing study");

  auto* probe = app.add_subcommand("probe", "re-run probing over the snapshots of a run directory");
  probe->add_option("--out", o.out, "run directory")->required()->check(CLI::ExistingDirectory);
  probe->add_flag("--quiet", o.quiet, "log to the run directory only");

  auto* analyze = app.add_subcommand("analyze", "re-run geometry analysis over the snapshots of a run directory");
  analyze->add_option("--out", o.out, "run directory")->required()->check(CLI::ExistingDirectory);
  analyze->add_flag("--quiet", o.quiet, "log to the run directory only");

  auto* report = app.add_subcommand("report", "aggregate run directories into one CSV");
  report->add_option("dirs", report_dirs, "run or sweep directories")->required();
  report->add_option("--out", report_out, "write the report here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      const ilab::RunConfig c = load(o);
      const auto dir = output_dir(o, c);
      const auto plans = ilab::run_config(c, dir, o.force, !o.quiet);
      std::cout << "wrote " << plans.size() << " run(s) under " << dir.string() << "\n";
    } else if (pretrain->parsed()) {
      const ilab::RunConfig c = load(o);
      const auto dir = output_dir(o, c);
      ilab::run_pretrain_study(c, c.seed, dir, o.force, !o.quiet);
      std::cout << "wrote " << ilab::OutputLayout{dir}.pretrain_probing().string() << "\n";
    } else if (probe->parsed()) {
      for (const auto& d : ilab::expand_run_dirs({o.out})) ilab::reprobe(d, !o.quiet);
    } else if (analyze->parsed()) {
      for (const auto& d : ilab::expand_run_dirs({o.out})) ilab::reanalyze(d, !o.quiet);
    } else if (report->parsed()) {
      std::vector<std::filesystem::path> dirs(report_dirs.begin(), report_dirs.end());
      const std::string text = ilab::emit_report(dirs);
      if (report_out.empty()) std::cout << text;
      else ilab::write_file(report_out, text);
    }
  } catch (const ilab::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const ilab::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const ilab::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
