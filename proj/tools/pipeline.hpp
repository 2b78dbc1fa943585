#pragma once

// Staged training and evaluation pipeline. Every stage reads its inputs from
// the run directory, writes its artifacts plus a done marker holding the
// stage hash, and is skipped when the marker already matches.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nrlab/io.hpp"

namespace nrlab::tools {

inline const std::vector<std::string> kStages{"gen-pools",       "pretrain",     "sft",       "gen-reward-data",
                                              "train-reward",    "ppo-vstar",    "lantern",   "eval"};

struct StageOutcome {
  std::string stage;
  bool skipped = false;
  double seconds = 0.0;
  std::string summary;
};

class Pipeline {
 public:
  // `config_dir` anchors relative paths inside the config.
  Pipeline(Config cfg, std::string config_dir, std::string out_dir);

  // Runs one stage, or all of them for "all". Missing upstream artifacts are
  // built first.
  using Progress = std::function<void(const StageOutcome&)>;
  std::vector<StageOutcome> run(const std::string& stage, bool force = false, const Progress& progress = {});

  std::uint64_t stage_hash(const std::string& stage) const;
  const std::string& out_dir() const { return out_; }

 private:
  StageOutcome run_one(const std::string& stage, bool force, const Progress& progress);
  std::string resolve(const std::string& path) const;

  Config cfg_;
  std::string config_dir_;
  std::string out_;
};

}  // namespace nrlab::tools
