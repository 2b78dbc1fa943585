// nrlab: power-flow Newton-Raphson diagnostics and warm-start training.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <thread>

#include "figures.hpp"
#include "nrlab/grid_model.hpp"
#include "nrlab/io.hpp"
#include "nrlab/nr_solver.hpp"
#include "nrlab/parallel.hpp"
#include "nrlab/warm_start.hpp"
#include "pipeline.hpp"

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct ConfigSource {
  nrlab::Config cfg;
  std::string dir;
};

ConfigSource load_config(const std::string& path) {
  if (path.empty()) return {};
  const auto abs = std::filesystem::absolute(path);
  return {nrlab::Config::load(abs.string()), abs.parent_path().string()};
}

std::string case_from(const ConfigSource& src, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (!src.cfg.has("run.case")) throw nrlab::Error(nrlab::Error::Kind::kConfig, "no case given (--case or run.case)");
  const std::filesystem::path p(src.cfg.get_string("run.case", ""));
  return p.is_absolute() ? p.string() : (std::filesystem::path(src.dir) / p).lexically_normal().string();
}

int cmd_solve(const std::string& case_path, double lambda, const std::string& start, const std::string& checkpoint,
              double tau, int cap, const std::string& trace) {
  using namespace nrlab;
  const auto grid = make_grid(load_matpower_file(case_path));
  const Snapshot s = make_snapshot(grid, lambda);
  FullState x0;
  if (start == "flat") {
    x0 = flat_start(s);
  } else if (start == "dc") {
    x0 = dc_start(s);
  } else {
    if (checkpoint.empty()) throw Error(Error::Kind::kConfig, "--start checkpoint needs --checkpoint");
    x0 = predict_warmstart(warm_start_deserialize(read_text(checkpoint)), s);
  }
  NRConfig cfg;
  cfg.tau = tau;
  cfg.cap = cap;
  cfg.validate();
  const NRResult r = newton_solve(s, x0, cfg);
  std::printf("case %s  lambda %.6g  start %s\n", grid->net.name.c_str(), lambda, start.c_str());
  std::printf("converged %s  iterations %d  residual %.3e\n", r.converged ? "yes" : "no", r.iterations,
              r.residual_norm);
  if (!r.converged) std::printf("failure: %s\n", to_string(r.failure));
  if (!trace.empty()) {
    CsvTable t({"iteration", "step_norm"});
    for (std::size_t k = 0; k < r.step_norms.size(); ++k) t.add_row({std::to_string(k + 1), fmt(r.step_norms[k])});
    Manifest m{"nrlab.nr-trace/1", fnv1a64(case_path + fmt(lambda) + start + fmt(tau) + std::to_string(cap)), {}};
    m.add("case", grid->net.name).add("lambda", fmt(lambda)).add("start", start);
    write_text(trace, t.render(m));
  }
  return r.converged ? 0 : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Newton-Raphson power flow laboratory"};
  app.require_subcommand(1);
  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
  app.add_option("--threads", threads, "Worker threads for parallel loops")->check(CLI::PositiveNumber);

  std::string case_path, start = "flat", checkpoint, trace, config_path, out_dir = "out";
  double lambda = 1.0, tau = 1e-6;
  int cap = 1000;
  bool force = false;
  std::string stage = "all";

  auto* solve = app.add_subcommand("solve", "Run Newton-Raphson on one snapshot");
  solve->add_option("--case", case_path, "MATPOWER case file")->required()->check(CLI::ExistingFile);
  solve->add_option("--lambda", lambda, "Load factor");
  solve->add_option("--start", start, "Initial point")->check(CLI::IsMember({"flat", "dc", "checkpoint"}));
  solve->add_option("--checkpoint", checkpoint, "Warm-start model for --start checkpoint");
  solve->add_option("--tau", tau, "Step-norm tolerance");
  solve->add_option("--cap", cap, "Iteration cap");
  solve->add_option("--trace", trace, "Write the step-norm trace to this CSV");

  auto* fig1 = app.add_subcommand("fig1", "Continuation indicators and the critical-bus basin map");
  auto* fig2 = app.add_subcommand("fig2", "Directional bound diagnostics");
  for (auto* sub : {fig1, fig2}) {
    sub->add_option("--config", config_path, "Config file")->check(CLI::ExistingFile);
    sub->add_option("--case", case_path, "MATPOWER case file (overrides run.case)");
    sub->add_option("--out", out_dir, "Output directory");
  }

  auto* pipe = app.add_subcommand("pipeline", "Warm-start training and evaluation stages");
  pipe->add_option("stage", stage, "Stage to run")
      ->check(CLI::IsMember({"all", "gen-pools", "pretrain", "sft", "gen-reward-data", "train-reward", "ppo-vstar",
                             "lantern", "eval"}));
  pipe->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  pipe->add_option("--out", out_dir, "Run directory");
  pipe->add_flag("--force", force, "Rerun the stage even when its marker matches");

  CLI11_PARSE(app, argc, argv);
  nrlab::set_num_threads(threads);

  try {
    if (solve->parsed()) return cmd_solve(case_path, lambda, start, checkpoint, tau, cap, trace);
    if (fig1->parsed() || fig2->parsed()) {
      const ConfigSource src = load_config(config_path);
      const std::string cp = case_from(src, case_path);
      const auto res = fig1->parsed() ? nrlab::tools::run_fig1(src.cfg, cp, out_dir)
                                      : nrlab::tools::run_fig2(src.cfg, cp, out_dir);
      for (const auto& n : res.notes) std::cout << n << "\n";
      for (const auto& f : res.files) std::cout << "wrote " << f << "\n";
      return 0;
    }
    const ConfigSource src = load_config(config_path);
    nrlab::tools::Pipeline p(src.cfg, src.dir, out_dir);
    p.run(stage, force, [](const nrlab::tools::StageOutcome& o) {
      if (o.skipped) {
        std::printf("%-16s up to date\n", o.stage.c_str());
      } else {
        std::printf("%-16s %7.1fs  %s\n", o.stage.c_str(), o.seconds, o.summary.c_str());
      }
      std::fflush(stdout);
    });
    return 0;
  } catch (const nrlab::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.kind()) {
      case nrlab::Error::Kind::kConfig:
      case nrlab::Error::Kind::kParse:
      case nrlab::Error::Kind::kInvalidNetwork:
      case nrlab::Error::Kind::kIo:
        return kExitConfig;
      case nrlab::Error::Kind::kNumerical:
      case nrlab::Error::Kind::kSingular:
      case nrlab::Error::Kind::kDegenerateDirection:
        return kExitNumerical;
      default:
        return kExitOther;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
}
