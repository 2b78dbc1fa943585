#include "nrlab/rl.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "nrlab/io.hpp"
#include "nrlab/parallel.hpp"

namespace nrlab {
namespace {

// Forward the mean model on a batch of snapshots, keeping the cache.
Mat forward_means(const PolicyParams& p, const std::vector<const Snapshot*>& snaps, ForwardCache* cache) {
  return mlp_forward(p.mean.mlp, feature_batch(p.mean, snaps), false, nullptr, cache);
}

// log density and its derivatives with respect to the raw head column and
// the two log-sigmas.
struct ColumnGrad {
  double value = 0.0;
  Vec d_raw;
  double d_log_sigma_v = 0.0;
  double d_log_sigma_theta = 0.0;
};

ColumnGrad column_log_prob(const PolicyParams& p, const Snapshot& s, const Vec& raw, const Vec& a_free) {
  const IndexMap& m = s.free_map;
  if (static_cast<std::size_t>(a_free.size()) != m.n_free) {
    throw Error(Error::Kind::kDimension, "action length does not match free dimension");
  }
  const Vec mu = pack(s, decode_prediction(s, raw));
  const Eigen::Index n = static_cast<Eigen::Index>(s.n());
  const double st = std::exp(p.log_sigma_theta), sv = std::exp(p.log_sigma_v);
  ColumnGrad out;
  Vec d_state = Vec::Zero(2 * n);
  std::size_t k = 0;
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  for (int i : m.free_theta) {
    const double z = (a_free[k] - mu[k]) / st;
    out.value += -0.5 * z * z - p.log_sigma_theta - half_log_2pi;
    d_state[i] = z / st;
    out.d_log_sigma_theta += z * z - 1.0;
    ++k;
  }
  for (int i : m.free_v) {
    const double z = (a_free[k] - mu[k]) / sv;
    out.value += -0.5 * z * z - p.log_sigma_v - half_log_2pi;
    d_state[n + i] = z / sv;
    out.d_log_sigma_v += z * z - 1.0;
    ++k;
  }
  out.d_raw = raw_head_grad(s, raw, d_state);
  return out;
}

}  // namespace

Vec PolicyParams::flat() const {
  const Vec m = mean.mlp.flat();
  Vec out(m.size() + 2);
  out << m, log_sigma_v, log_sigma_theta;
  return out;
}

void PolicyParams::set_flat(const Vec& theta) {
  const Eigen::Index n = static_cast<Eigen::Index>(mean.mlp.param_count());
  if (theta.size() != n + 2) throw Error(Error::Kind::kDimension, "policy parameter length mismatch");
  mean.mlp.set_flat(theta.head(n));
  log_sigma_v = theta[n];
  log_sigma_theta = theta[n + 1];
}

PolicyParams make_policy(WarmStartModel base, double sigma_v, double sigma_theta) {
  return {std::move(base), std::log(sigma_v), std::log(sigma_theta)};
}

Vec policy_sigma(const PolicyParams& p, const Snapshot& s) {
  const IndexMap& m = s.free_map;
  Vec sd(static_cast<Eigen::Index>(m.n_free));
  const Eigen::Index nt = static_cast<Eigen::Index>(m.free_theta.size());
  sd.head(nt).setConstant(std::exp(p.log_sigma_theta));
  sd.tail(sd.size() - nt).setConstant(std::exp(p.log_sigma_v));
  return sd;
}

Action policy_sample(const PolicyParams& p, const Snapshot& s, Rng& rng) {
  const Vec mu = pack(s, predict_warmstart(p.mean, s));
  const Vec sd = policy_sigma(p, s);
  Action a;
  a.free = mu + sd.cwiseProduct(rng.normal_vec(mu.size()));
  a.state = unpack(s, a.free);
  a.log_prob = log_prob(p, s, a.free);
  return a;
}

double log_prob(const PolicyParams& p, const Snapshot& s, const Vec& a_free) {
  const Vec raw = mlp_forward(p.mean.mlp, p.mean.norm.apply(warm_start_features(s)));
  return column_log_prob(p, s, raw, a_free).value;
}

LogProbGrad log_prob_grad(const PolicyParams& p, const Snapshot& s, const Vec& a_free) {
  ForwardCache cache;
  const Mat raw = forward_means(p, {&s}, &cache);
  const ColumnGrad cg = column_log_prob(p, s, raw.col(0), a_free);
  const Eigen::Index n = static_cast<Eigen::Index>(p.mean.mlp.param_count());
  LogProbGrad out;
  out.value = cg.value;
  Vec g = Vec::Zero(n);
  mlp_backward(p.mean.mlp, cache, Mat(cg.d_raw), g);
  out.grad.resize(n + 2);
  out.grad << g, cg.d_log_sigma_v, cg.d_log_sigma_theta;
  return out;
}

double reward_sat(std::optional<int> k, double c, double r_plus, double r_minus) {
  if (!(c > 0.0)) throw Error(Error::Kind::kConfig, "saturation constant c must be positive");
  if (!k) return -r_minus;
  const double e = static_cast<double>(*k) - 1.0;
  return r_plus - e / (e + c);
}

double reward_lin(double pred, double k_max, double bonus) { return -pred + (pred < k_max ? bonus : 0.0); }

Vec grpo_advantages(const Vec& rewards, double eps_g) {
  if (rewards.size() < 2) throw Error(Error::Kind::kConfig, "group advantages need at least two rollouts");
  const double mean = rewards.mean();
  const Vec centered = rewards.array() - mean;
  const double sd = std::sqrt(centered.squaredNorm() / static_cast<double>(rewards.size()));
  return centered / (sd + eps_g);
}

int oracle_baseline(const Snapshot& s, const FullState& x_star, const NRConfig& cfg) {
  const NRResult r = newton_solve(s, x_star, cfg);
  return r.converged ? r.iterations : cfg.cap;
}

SurrogateResult ppo_surrogate(const PolicyParams& p, const std::vector<Rollout>& rollouts, double clip) {
  if (rollouts.empty()) throw Error(Error::Kind::kConfig, "no rollouts");
  std::vector<const Snapshot*> snaps;
  for (const auto& r : rollouts) snaps.push_back(r.snapshot);
  ForwardCache cache;
  const Mat raw = forward_means(p, snaps, &cache);
  const double inv = 1.0 / static_cast<double>(rollouts.size());
  Mat d_raw = Mat::Zero(raw.rows(), raw.cols());
  SurrogateResult out;
  double d_lsv = 0.0, d_lst = 0.0;
  for (std::size_t t = 0; t < rollouts.size(); ++t) {
    const Rollout& r = rollouts[t];
    const Eigen::Index ci = static_cast<Eigen::Index>(t);
    const ColumnGrad cg = column_log_prob(p, *r.snapshot, raw.col(ci), r.action);
    const double ratio = std::exp(cg.value - r.log_prob_old);
    const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
    const double unclipped_obj = ratio * r.advantage;
    const double clipped_obj = clipped * r.advantage;
    out.value += inv * std::min(unclipped_obj, clipped_obj);
    out.mean_ratio += inv * ratio;
    out.approx_kl += inv * (r.log_prob_old - cg.value);
    if (std::abs(ratio - 1.0) > clip) out.clip_fraction += inv;
    // The clipped branch is constant in the parameters. NaN falls through to
    // the gradient so ppo_update sees it.
    if (!(unclipped_obj > clipped_obj)) {
      const double coeff = inv * r.advantage * ratio;
      d_raw.col(ci) = coeff * cg.d_raw;
      d_lsv += coeff * cg.d_log_sigma_v;
      d_lst += coeff * cg.d_log_sigma_theta;
    }
  }
  const Eigen::Index n = static_cast<Eigen::Index>(p.mean.mlp.param_count());
  Vec g = Vec::Zero(n);
  mlp_backward(p.mean.mlp, cache, d_raw, g);
  out.grad.resize(n + 2);
  out.grad << g, d_lsv, d_lst;
  return out;
}

Adam make_policy_optimizer(const PolicyParams& p, const PpoConfig& cfg) {
  return Adam(p.mean.mlp.param_count() + 2, AdamConfig{cfg.lr});
}

PpoDiagnostics ppo_update(PolicyParams& p, Adam& opt, const std::vector<Rollout>& rollouts, const PpoConfig& cfg) {
  if (!(cfg.clip > 0.0 && cfg.clip < 1.0)) throw Error(Error::Kind::kConfig, "PPO clip must lie in (0, 1)");
  const Vec start = p.flat();
  Vec theta = start;
  PpoDiagnostics diag;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    SurrogateResult sr = ppo_surrogate(p, rollouts, cfg.clip);
    diag.mean_ratio = sr.mean_ratio;
    diag.clip_fraction = sr.clip_fraction;
    diag.approx_kl = sr.approx_kl;
    if (cfg.target_kl > 0.0 && sr.approx_kl > cfg.target_kl) {
      diag.kl_stop = true;
      break;
    }
    if (!sr.grad.allFinite()) {
      p.set_flat(start);
      diag.aborted = true;
      break;
    }
    clip_grad_norm(sr.grad, cfg.max_grad_norm);
    Vec descent = -sr.grad;
    opt.step(theta, descent);
    p.set_flat(theta);
    ++diag.epochs_run;
  }
  return diag;
}

RlResult run_ppo_vstar(const std::vector<const LabeledSnapshot*>& holdout, PolicyParams policy,
                       const PpoVstarConfig& cfg) {
  if (holdout.empty()) throw Error(Error::Kind::kConfig, "PPO needs a nonempty holdout");
  cfg.nr.validate();
  std::vector<int> vstar(holdout.size());
  parallel_for(holdout.size(), [&](std::size_t i) {
    vstar[i] = oracle_baseline(holdout[i]->snapshot, holdout[i]->solution, cfg.nr);
  });
  double c = 0.0;
  for (int v : vstar) c += v;
  c /= static_cast<double>(vstar.size());

  RlResult res;
  Adam opt = make_policy_optimizer(policy, cfg.ppo);
  const Rng root(cfg.seed);
  const std::size_t batch = std::min(cfg.states_per_iter, holdout.size());
  for (int it = 1; it <= cfg.iterations; ++it) {
    Rng rng = root.split(static_cast<std::uint64_t>(it));
    std::vector<std::size_t> idx(holdout.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < batch; ++i) std::swap(idx[i], idx[i + rng.index(idx.size() - i)]);
    std::vector<Rollout> rollouts(batch);
    const std::uint64_t calls0 = nr_call_count();
    parallel_for(batch, [&](std::size_t b) {
      const LabeledSnapshot& ls = *holdout[idx[b]];
      Rng r = rng.split(b);
      const Action a = policy_sample(policy, ls.snapshot, r);
      const NRResult nr = newton_solve(ls.snapshot, a.state, cfg.nr);
      Rollout& ro = rollouts[b];
      ro.snapshot = &ls.snapshot;
      ro.snapshot_id = ls.id;
      ro.action = a.free;
      ro.log_prob_old = a.log_prob;
      ro.reward = reward_sat(nr.converged ? std::optional<int>(nr.iterations) : std::nullopt, c, cfg.r_plus,
                             cfg.r_minus);
      ro.advantage = ro.reward - reward_sat(vstar[idx[b]], c, cfg.r_plus, cfg.r_minus);
    });
    RlIterRecord rec;
    rec.iteration = it;
    for (const auto& ro : rollouts) rec.mean_reward += ro.reward / static_cast<double>(batch);
    const PpoDiagnostics d = ppo_update(policy, opt, rollouts, cfg.ppo);
    rec.mean_ratio = d.mean_ratio;
    rec.clip_fraction = d.clip_fraction;
    rec.approx_kl = d.approx_kl;
    rec.ppo_epochs = d.epochs_run;
    rec.inner_nr_calls = nr_call_count() - calls0;
    res.history.push_back(rec);
  }
  res.policy = std::move(policy);
  res.best_iteration = cfg.iterations;
  return res;
}

double validation_mean_iters(const PolicyParams& p, const std::vector<const LabeledSnapshot*>& val,
                             const NRConfig& cfg) {
  if (val.empty()) throw Error(Error::Kind::kConfig, "validation slice is empty");
  const auto rows = evaluate([&](const Snapshot& s) { return predict_warmstart(p.mean, s); }, val, cfg);
  return summarize(rows).iters_all;
}

RlResult run_newtons_lantern(const std::vector<const LabeledSnapshot*>& train,
                             const std::vector<const LabeledSnapshot*>& val, PolicyParams policy,
                             const RewardModel& reward, const LanternConfig& cfg) {
  if (train.empty()) throw Error(Error::Kind::kConfig, "GRPO needs a nonempty training slice");
  if (cfg.group_size < 2) throw Error(Error::Kind::kConfig, "GRPO group size must be at least 2");
  if (cfg.val_interval < 1) throw Error(Error::Kind::kConfig, "validation interval must be at least 1");
  cfg.nr.validate();

  RlResult res;
  res.best_val = validation_mean_iters(policy, val, cfg.nr);
  res.best_iteration = 0;
  res.policy = policy;
  {
    RlIterRecord rec;
    rec.val_mean = res.best_val;
    res.history.push_back(rec);
  }
  Adam opt = make_policy_optimizer(policy, cfg.ppo);
  const Rng root(cfg.seed);
  const std::size_t b_count = std::min(cfg.batch_states, train.size());
  const std::size_t k_count = static_cast<std::size_t>(cfg.group_size);
  for (int it = 1; it <= cfg.iterations; ++it) {
    const std::uint64_t calls_before = nr_call_count();
    Rng rng = root.split(static_cast<std::uint64_t>(it));
    std::vector<std::size_t> idx(train.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < b_count; ++i) std::swap(idx[i], idx[i + rng.index(idx.size() - i)]);

    std::vector<Rollout> rollouts(b_count * k_count);
    parallel_for(rollouts.size(), [&](std::size_t t) {
      const LabeledSnapshot& ls = *train[idx[t / k_count]];
      Rng r = rng.split(t);
      const Action a = policy_sample(policy, ls.snapshot, r);
      Rollout& ro = rollouts[t];
      ro.snapshot = &ls.snapshot;
      ro.snapshot_id = ls.id;
      ro.action = a.free;
      ro.log_prob_old = a.log_prob;
      ro.reward = reward_lin(predict_iters(reward, ls.snapshot, a.state), cfg.k_max, cfg.bonus);
    });
    for (std::size_t b = 0; b < b_count; ++b) {
      double group_min = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < k_count; ++k) {
        const double r = rollouts[b * k_count + k].reward;
        if (std::isfinite(r)) group_min = std::min(group_min, r);
      }
      if (!std::isfinite(group_min)) group_min = 0.0;
      Vec rewards(static_cast<Eigen::Index>(k_count));
      for (std::size_t k = 0; k < k_count; ++k) {
        Rollout& ro = rollouts[b * k_count + k];
        if (!std::isfinite(ro.reward)) {
          ro.reward = group_min;
          ro.flagged = true;
        }
        rewards[static_cast<Eigen::Index>(k)] = ro.reward;
      }
      const Vec adv = grpo_advantages(rewards, cfg.eps_g);
      for (std::size_t k = 0; k < k_count; ++k) rollouts[b * k_count + k].advantage = adv[static_cast<Eigen::Index>(k)];
    }
    RlIterRecord rec;
    rec.iteration = it;
    for (const auto& ro : rollouts) rec.mean_reward += ro.reward / static_cast<double>(rollouts.size());
    const PpoDiagnostics d = ppo_update(policy, opt, rollouts, cfg.ppo);
    rec.mean_ratio = d.mean_ratio;
    rec.clip_fraction = d.clip_fraction;
    rec.approx_kl = d.approx_kl;
    rec.ppo_epochs = d.epochs_run;
    rec.inner_nr_calls = nr_call_count() - calls_before;
    if (it % cfg.val_interval == 0) {
      try {
        const double v = validation_mean_iters(policy, val, cfg.nr);
        rec.val_mean = v;
        if (v < res.best_val) {
          res.best_val = v;
          res.best_iteration = it;
          res.policy = policy;
        }
      } catch (const Error&) {
        res.history.push_back(rec);
        return res;
      }
    }
    res.history.push_back(rec);
  }
  return res;
}

std::vector<EvalRow> evaluate(const StartProvider& start, const std::vector<const LabeledSnapshot*>& snaps,
                              const NRConfig& cfg) {
  std::vector<EvalRow> rows(snaps.size());
  parallel_for(snaps.size(), [&](std::size_t i) {
    const LabeledSnapshot& ls = *snaps[i];
    const Snapshot& s = ls.snapshot;
    const FullState x0 = clamp_pinned(s, start(s));
    const NRResult nr = newton_solve(s, x0, cfg);
    EvalRow& row = rows[i];
    row.id = ls.id;
    row.solved = nr.converged;
    row.iters = nr.converged ? nr.iterations : cfg.cap;
    row.distance = (pack(s, x0) - pack(s, ls.solution)).norm();
    row.pbl0 = pbl(s, x0, 0.0);
  });
  return rows;
}

EvalSummary summarize(const std::vector<EvalRow>& rows) {
  EvalSummary sum;
  sum.total = rows.size();
  if (rows.empty()) return sum;
  double solved_iters = 0.0;
  for (const auto& r : rows) {
    if (r.solved) {
      ++sum.solved;
      solved_iters += r.iters;
    }
    sum.iters_all += r.iters;
    sum.distance += r.distance;
    sum.pbl0 += r.pbl0;
  }
  const double n = static_cast<double>(rows.size());
  sum.iters_solved = sum.solved ? solved_iters / static_cast<double>(sum.solved) : 0.0;
  sum.iters_all /= n;
  sum.distance /= n;
  sum.pbl0 /= n;
  return sum;
}

std::string policy_serialize(const PolicyParams& p) {
  return "log-sigma-v " + fmt(p.log_sigma_v) + "\nlog-sigma-theta " + fmt(p.log_sigma_theta) + "\n" +
         warm_start_serialize(p.mean);
}

PolicyParams policy_deserialize(const std::string& text) {
  PolicyParams p;
  std::istringstream in(text);
  std::string line;
  bool have_v = false, have_t = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key, tok;
    ls >> key;
    if (key == "log-sigma-v" && ls >> tok) p.log_sigma_v = parse_double(tok), have_v = true;
    if (key == "log-sigma-theta" && ls >> tok) p.log_sigma_theta = parse_double(tok), have_t = true;
    if (key == "mlp-widths") break;
  }
  if (!have_v || !have_t) throw Error(Error::Kind::kParse, "policy checkpoint lacks log-sigmas");
  p.mean = warm_start_deserialize(text);
  return p;
}

}  // namespace nrlab
