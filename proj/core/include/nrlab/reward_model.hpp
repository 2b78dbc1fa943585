#pragma once

// Iteration-count regressor trained on perturbations of a warm-start
// model's predictions.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nrlab/warm_start.hpp"

namespace nrlab {

inline constexpr int kSnapshotFeatures = 6;

// [sum p_load, sum q_load, max p_load, max q_load, PBL at flat start, lambda].
Vec snapshot_features(const Snapshot& s);

// Model input before normalization: snapshot features, then V then theta of
// the warm start over all N buses.
Vec reward_input(const Vec& snap_features, const FullState& a);

struct RewardSample {
  std::size_t snapshot = 0;  // index into the snapshot list the set was built from
  std::string snapshot_id;
  double magnitude = 0.0;    // f, before the reference-radius scaling
  int direction = 0;
  double radius = 0.0;
  Vec input;                 // raw reward_input
  double target = 0.0;       // NR iterations; cap when NR failed
};

struct PerturbationConfig {
  std::vector<double> magnitudes{0.0, 1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2};
  int directions = 5;
  NRConfig nr;
  std::uint64_t seed = 42;
};

// |pack(x_hat) - pack(flat_start)|.
double reference_radius(const Snapshot& s, const FullState& x_hat);

std::vector<RewardSample> gen_perturbation_dataset(const WarmStartModel& base,
                                                   const std::vector<const LabeledSnapshot*>& snaps,
                                                   const PerturbationConfig& cfg);

struct RewardModel {
  Mlp mlp;
  FeatureNorm norm;
  double target_mean = 0.0;
  double target_std = 1.0;
};

struct RewardTrainConfig {
  std::vector<int> hidden{512, 512, 256};
  std::vector<double> dropout{0.1, 0.1, 0.0, 0.0};
  double lr = 1e-3;
  double weight_decay = 1e-5;
  std::size_t batch = 256;
  int epochs = 50;
  double val_fraction = 0.2;
  std::uint64_t seed = 42;
};

struct RewardEpoch {
  int epoch = 0;
  double train_mse = 0.0;
  double val_spearman = 0.0;
};

struct RewardTrainResult {
  RewardModel model;
  std::vector<RewardEpoch> history;
  int best_epoch = 0;
  double best_spearman = 0.0;
  std::vector<std::size_t> train_snapshots;
  std::vector<std::size_t> val_snapshots;
};

// Snapshot-level 80/20 split, MSE on z-scored targets, AdamW, best epoch by
// mean per-snapshot Spearman on the validation snapshots.
RewardTrainResult train_reward(const std::vector<RewardSample>& samples, const RewardTrainConfig& cfg);

// Mean squared error on z-scored targets for a normalized input batch and
// its flat-parameter gradient.
struct RewardLoss {
  double loss = 0.0;
  Vec grad;
};
RewardLoss reward_loss_and_grad(const RewardModel& r, const Mat& x_norm, const Vec& z_target, bool train,
                                Rng* rng);

double predict_iters(const RewardModel& r, const Snapshot& s, const FullState& a);
double predict_iters(const RewardModel& r, const Vec& raw_input);
Vec predict_iters(const RewardModel& r, const std::vector<Vec>& raw_inputs);

// Average ranks (ties share the mean rank).
std::vector<double> average_ranks(const std::vector<double>& x);
// Empty when either side is constant.
std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b);

struct SpearmanSummary {
  double mean = 0.0;
  std::size_t groups = 0;
  std::size_t excluded = 0;  // groups with undefined rho
};

// Rank correlation per snapshot group, averaged over groups.
SpearmanSummary spearman_per_snapshot(const std::vector<std::size_t>& group, const std::vector<double>& pred,
                                      const std::vector<double>& target);
SpearmanSummary spearman_per_snapshot(const RewardModel& r, const std::vector<RewardSample>& samples);

std::string reward_serialize(const RewardModel& r);
RewardModel reward_deserialize(const std::string& text);

}  // namespace nrlab
