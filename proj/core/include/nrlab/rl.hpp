#pragma once

// Single-step RL over warm starts: a Gaussian policy around the warm-start
// model, iteration-count rewards, PPO-clip updates, the oracle-baseline PPO
// run and the GRPO run with a learned reward and validation snapshots.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nrlab/reward_model.hpp"

namespace nrlab {

struct PolicyParams {
  WarmStartModel mean;
  double log_sigma_v = 0.0;
  double log_sigma_theta = 0.0;

  // [mlp parameters; log_sigma_v; log_sigma_theta]
  Vec flat() const;
  void set_flat(const Vec& theta);
};

PolicyParams make_policy(WarmStartModel base, double sigma_v = 1e-3, double sigma_theta = 5e-3);

// Per-free-coordinate standard deviations in pack order.
Vec policy_sigma(const PolicyParams& p, const Snapshot& s);

struct Action {
  FullState state;
  Vec free;  // pack(state)
  double log_prob = 0.0;
};

Action policy_sample(const PolicyParams& p, const Snapshot& s, Rng& rng);

// Diagonal Gaussian log density of a free-coordinate action.
double log_prob(const PolicyParams& p, const Snapshot& s, const Vec& a_free);

struct LogProbGrad {
  double value = 0.0;
  Vec grad;  // flat policy layout
};
LogProbGrad log_prob_grad(const PolicyParams& p, const Snapshot& s, const Vec& a_free);

// Saturating reward: r_plus - (k-1)/(k-1+c) when converged, -r_minus otherwise.
double reward_sat(std::optional<int> k, double c, double r_plus, double r_minus);
// -pred + bonus * [pred < k_max].
double reward_lin(double pred, double k_max, double bonus);

// (r - mean) / (population std + eps_g).
Vec grpo_advantages(const Vec& rewards, double eps_g = 1e-8);

int oracle_baseline(const Snapshot& s, const FullState& x_star, const NRConfig& cfg);

struct Rollout {
  const Snapshot* snapshot = nullptr;
  std::string snapshot_id;
  Vec action;  // free coordinates
  double log_prob_old = 0.0;
  double reward = 0.0;
  double advantage = 0.0;
  bool flagged = false;  // non-finite reward replaced by the group minimum
};

struct PpoConfig {
  double clip = 0.1;
  int epochs = 4;
  double lr = 1e-5;
  double max_grad_norm = 5e-3;
  double target_kl = 0.0;  // <= 0 disables the early stop
};

struct SurrogateResult {
  double value = 0.0;       // mean clipped surrogate
  Vec grad;                 // ascent direction, flat policy layout
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;   // mean(log_prob_old - log_prob_new)
};

SurrogateResult ppo_surrogate(const PolicyParams& p, const std::vector<Rollout>& rollouts, double clip);

struct PpoDiagnostics {
  int epochs_run = 0;
  double mean_ratio = 1.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
  bool kl_stop = false;
  bool aborted = false;
};

// K passes of ascent on the clipped surrogate. Adam state persists across
// calls through `opt`.
PpoDiagnostics ppo_update(PolicyParams& p, Adam& opt, const std::vector<Rollout>& rollouts, const PpoConfig& cfg);

Adam make_policy_optimizer(const PolicyParams& p, const PpoConfig& cfg);

struct RlIterRecord {
  int iteration = 0;
  double mean_reward = 0.0;
  double mean_ratio = 1.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
  int ppo_epochs = 0;
  std::uint64_t inner_nr_calls = 0;     // NR calls during rollouts and update
  std::optional<double> val_mean;       // mean Iters(all) on the validation slice
};

struct RlResult {
  PolicyParams policy;
  std::vector<RlIterRecord> history;
  int best_iteration = 0;
  double best_val = 0.0;
};

struct PpoVstarConfig {
  int iterations = 30;
  std::size_t states_per_iter = 16;
  PpoConfig ppo{0.1, 4, 1e-5, 5e-3, 0.02};
  double r_plus = 2.0;
  double r_minus = 2.0;
  NRConfig nr;
  std::uint64_t seed = 42;
};

RlResult run_ppo_vstar(const std::vector<const LabeledSnapshot*>& holdout, PolicyParams policy,
                       const PpoVstarConfig& cfg);

struct LanternConfig {
  int iterations = 20;
  std::size_t batch_states = 2;
  int group_size = 4;
  PpoConfig ppo{0.1, 2, 1e-5, 5e-3, 0.0};
  int val_interval = 2;
  double k_max = 30.0;
  double bonus = 10.0;
  double eps_g = 1e-8;
  NRConfig nr;
  std::uint64_t seed = 42;
};

// Mean Iters(all) of the policy mean on `val` with real NR.
double validation_mean_iters(const PolicyParams& p, const std::vector<const LabeledSnapshot*>& val,
                             const NRConfig& cfg);

RlResult run_newtons_lantern(const std::vector<const LabeledSnapshot*>& train,
                             const std::vector<const LabeledSnapshot*>& val, PolicyParams policy,
                             const RewardModel& reward, const LanternConfig& cfg);

struct EvalRow {
  std::string id;
  bool solved = false;
  int iters = 0;  // cap when unsolved
  double distance = 0.0;
  double pbl0 = 0.0;
};

using StartProvider = std::function<FullState(const Snapshot&)>;

std::vector<EvalRow> evaluate(const StartProvider& start, const std::vector<const LabeledSnapshot*>& snaps,
                              const NRConfig& cfg);

struct EvalSummary {
  std::size_t solved = 0;
  std::size_t total = 0;
  double iters_solved = 0.0;  // mean over solved samples
  double iters_all = 0.0;     // mean with cap for failures
  double distance = 0.0;
  double pbl0 = 0.0;
};

EvalSummary summarize(const std::vector<EvalRow>& rows);

std::string policy_serialize(const PolicyParams& p);
PolicyParams policy_deserialize(const std::string& text);

}  // namespace nrlab
