#pragma once

// Warm-start model: per-bus features in, per-bus (theta, V) out, trained on
// the power-balance loss.

#include <cstdint>
#include <string>
#include <vector>

#include "nrlab/continuation.hpp"
#include "nrlab/neural.hpp"

namespace nrlab {

// Per-bus raw features, bus-major: p_spec, q_spec, g_shunt, b_shunt, then a
// PQ/PV/slack one-hot. 7 values per bus.
inline constexpr int kFeaturesPerBus = 7;
Vec warm_start_features(const Snapshot& s);

// Frozen per-feature affine map (x - mean) / scale.
struct FeatureNorm {
  Vec mean;
  Vec scale;

  Vec apply(const Vec& x) const;
  static FeatureNorm fit(const std::vector<Vec>& rows);
  static FeatureNorm identity(Eigen::Index n);
};

struct WarmStartModel {
  Mlp mlp;
  FeatureNorm norm;
};

// widths excludes input and output; those follow from the grid size.
WarmStartModel make_warm_start_model(const Grid& grid, const std::vector<int>& hidden, std::uint64_t seed,
                                     const std::vector<const Snapshot*>& fit_on);

// Raw head layout: per bus (theta_raw, v_raw). theta = theta_raw,
// V = 1 + 0.5 tanh(v_raw); pinned coordinates overwritten by setpoints.
FullState decode_prediction(const Snapshot& s, const Vec& raw);
Mat feature_batch(const WarmStartModel& m, const std::vector<const Snapshot*>& batch);

FullState predict_warmstart(const WarmStartModel& m, const Snapshot& s);
std::vector<FullState> predict_warmstart(const WarmStartModel& m, const std::vector<const Snapshot*>& batch);

// Chains d(stacked full state) into d(raw head).
Vec raw_head_grad(const Snapshot& s, const Vec& raw, const Vec& d_state);

struct LossGrad {
  double loss = 0.0;
  Vec grad;  // flat MLP parameters
};

// Mean PBL over the batch and its gradient.
LossGrad loss_and_grad_pbl(const WarmStartModel& m, const std::vector<const Snapshot*>& batch, double zeta);

double mean_pbl(const WarmStartModel& m, const std::vector<const Snapshot*>& snaps, double zeta);

struct TrainConfig {
  double lr = 3e-4;
  std::size_t batch = 16;
  int epochs = 10;
  int patience = 8;
  std::uint64_t seed = 42;
  double zeta = kDefaultZeta;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double best_val = 0.0;
};

// Minibatch Adam on mean PBL with early stopping on validation PBL. The
// model is left at the best-validation parameters.
std::vector<EpochRecord> train_supervised(WarmStartModel& m, const std::vector<const Snapshot*>& train,
                                          const std::vector<const Snapshot*>& val, const TrainConfig& cfg);

std::string warm_start_serialize(const WarmStartModel& m);
WarmStartModel warm_start_deserialize(const std::string& text);

}  // namespace nrlab
