#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nrlab/nr_solver.hpp"

namespace nrlab {

// A snapshot together with its solved state.
struct LabeledSnapshot {
  std::string id;
  Snapshot snapshot;
  FullState solution;
  double sigma_min = 0.0;
};

struct PathPoint {
  double lambda = 0.0;
  FullState state;
  double sigma_min = 0.0;
  double v_min = 0.0;
};

struct ContinuationPath {
  std::shared_ptr<const Grid> grid;
  Vec perturb;  // load direction shared by every point
  std::vector<PathPoint> points;
  double lambda_end = 0.0;

  Snapshot snapshot_at(std::size_t i) const;
  LabeledSnapshot labeled(std::size_t i) const;
};

struct ContinuationConfig {
  double lambda0 = 1.0;
  double lambda_step = 0.1;
  double min_step = 1e-5;
  double lambda_cap = 20.0;
  NRConfig nr;
};

// Natural-parameter continuation in the loading factor with step halving.
// Throws when NR fails at lambda0 from flat start.
ContinuationPath trace_lambda(std::shared_ptr<const Grid> grid, const ContinuationConfig& cfg,
                              const std::optional<Vec>& perturb = std::nullopt);

// sigma_min(J(x*)) for a solved snapshot.
double jacobian_sigma_min(const Snapshot& s, const FullState& x);

struct SnapshotPool {
  std::string grid_name;
  std::vector<LabeledSnapshot> stable;
  std::vector<LabeledSnapshot> collapse;
  // Split indices: stable -> (train, val); collapse -> (train, val, test).
  std::vector<std::size_t> stable_train, stable_val;
  std::vector<std::size_t> holdout_train, holdout_val, holdout_test;
  std::uint64_t pool_seed = 0;
  std::uint64_t split_seed = 42;
  std::uint64_t test_seed = 42;
};

struct StableSampling {
  std::size_t count = 0;
  double spread = 0.1;
  double lambda = 1.0;
  double lambda_hi = 0.0;  // when above lambda, each sample draws lambda uniformly from [lambda, lambda_hi]
  std::uint64_t seed = 0;
  std::size_t max_attempts_factor = 10;
  NRConfig nr;
};

std::vector<LabeledSnapshot> sample_stable(std::shared_ptr<const Grid> grid, const StableSampling& cfg);

struct CollapseSampling {
  std::size_t count = 0;
  double spread = 0.1;
  double sigma_lo = 0.0;
  double sigma_hi = 0.0;
  std::uint64_t seed = 0;
  std::size_t max_attempts_factor = 10;
  ContinuationConfig continuation;
};

struct CollapseReport {
  std::size_t attempts = 0;
  std::size_t skipped = 0;  // directions whose path never entered the band
};

std::vector<LabeledSnapshot> sample_collapse(std::shared_ptr<const Grid> grid, const CollapseSampling& cfg,
                                             CollapseReport* report = nullptr);

// Seeded splits. Stable pool -> train/val by val_fraction. Collapse pool ->
// test (test_count, drawn with test_seed) then train/val by val_fraction.
void assign_splits(SnapshotPool& pool, double stable_val_fraction, double holdout_val_fraction,
                   std::size_t test_count);

// Line-oriented persistence: one file per sample plus manifest.txt.
void save_pool(const SnapshotPool& pool, const std::string& dir, const std::string& manifest_header);
SnapshotPool load_pool(std::shared_ptr<const Grid> grid, const std::string& dir);

}  // namespace nrlab
