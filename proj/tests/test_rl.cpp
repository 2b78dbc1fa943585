#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>

#include "nrlab/continuation.hpp"
#include "nrlab/rl.hpp"
#include "support.hpp"

using namespace nrlab;
using namespace nrlab::test;

namespace {

struct RlFixture {
  std::shared_ptr<const Grid> g = grid("case14");
  std::vector<LabeledSnapshot> snaps;
  WarmStartModel base;

  RlFixture() {
    CollapseSampling c;
    c.count = 8;
    c.sigma_lo = 0.015;
    c.sigma_hi = 0.06;
    c.seed = 5;
    snaps = sample_collapse(g, c);
    std::vector<const Snapshot*> fit;
    for (const auto& ls : snaps) fit.push_back(&ls.snapshot);
    base = make_warm_start_model(*g, {16, 16}, 9, fit);
  }

  std::vector<const LabeledSnapshot*> pointers(std::size_t from = 0, std::size_t to = 8) const {
    std::vector<const LabeledSnapshot*> out;
    for (std::size_t i = from; i < to; ++i) out.push_back(&snaps[i]);
    return out;
  }
};

const RlFixture& fixture() {
  static const RlFixture f;
  return f;
}

// Rollouts around the current policy with log_prob_old offsets, so ratios
// land both inside and outside the clip interval.
std::vector<Rollout> synthetic_rollouts(const PolicyParams& p, const RlFixture& f, double spread, Rng& rng) {
  std::vector<Rollout> out;
  for (std::size_t i = 0; i < 6; ++i) {
    const Snapshot& s = f.snaps[i].snapshot;
    const Action a = policy_sample(p, s, rng);
    Rollout r;
    r.snapshot = &s;
    r.action = a.free;
    r.log_prob_old = a.log_prob + rng.uniform(-spread, spread);
    r.advantage = rng.normal();
    out.push_back(r);
  }
  return out;
}

RewardModel random_reward(const Grid& g) {
  RewardModel r;
  const int n = static_cast<int>(g.net.n());
  r.mlp = mlp_init({kSnapshotFeatures + 2 * n, 16, 1}, 3);
  r.norm = FeatureNorm::identity(kSnapshotFeatures + 2 * n);
  r.target_mean = 10.0;
  r.target_std = 3.0;
  return r;
}

}  // namespace

TEST_CASE("reward_sat") {
  CHECK(reward_sat(1, 3.0, 2.0, 2.0) == 2.0);
  CHECK(reward_sat(4, 3.0, 2.0, 2.0) == doctest::Approx(1.5));
  CHECK(reward_sat(std::nullopt, 3.0, 2.0, 2.0) == -2.0);
  CHECK(reward_sat(11, 3.0, 2.0, 2.0) == doctest::Approx(2.0 - 10.0 / 13.0));
  CHECK_THROWS_AS(reward_sat(2, 0.0, 2.0, 2.0), Error);
}

TEST_CASE("reward_lin") {
  CHECK(reward_lin(10.0, 30.0, 10.0) == 0.0);
  CHECK(reward_lin(30.0, 30.0, 10.0) == -30.0);
  CHECK(reward_lin(29.5, 30.0, 10.0) == -19.5);
}

TEST_CASE("grpo advantages") {
  CHECK(grpo_advantages(Vec::Constant(4, 3.0)).norm() == 0.0);
  Vec pair(2);
  pair << 0.0, 2.0;
  const Vec a = grpo_advantages(pair);
  CHECK(a[0] == doctest::Approx(-1.0).epsilon(1e-7));
  CHECK(a[1] == doctest::Approx(1.0).epsilon(1e-7));
  Rng rng(3);
  const Vec r = rng.normal_vec(8);
  const Vec adv = grpo_advantages(r);
  CHECK(std::abs(adv.mean()) < 1e-12);
  CHECK(std::sqrt(adv.squaredNorm() / 8.0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK((grpo_advantages((r.array() + 5.0).matrix()) - adv).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((grpo_advantages(3.0 * r) - adv).cwiseAbs().maxCoeff() < 1e-7);
  CHECK_THROWS_AS(grpo_advantages(Vec::Zero(1)), Error);
}

TEST_CASE("policy initialization and sigma layout") {
  const RlFixture& f = fixture();
  const PolicyParams p = make_policy(f.base);
  CHECK(p.log_sigma_v == doctest::Approx(std::log(1e-3)));
  CHECK(p.log_sigma_theta == doctest::Approx(std::log(5e-3)));
  const Snapshot& s = f.snaps[0].snapshot;
  const Vec sd = policy_sigma(p, s);
  const std::size_t nt = s.free_map.free_theta.size();
  REQUIRE(sd.size() == static_cast<Eigen::Index>(s.free_map.n_free));
  for (Eigen::Index i = 0; i < sd.size(); ++i) {
    CHECK(sd[i] == doctest::Approx(static_cast<std::size_t>(i) < nt ? 5e-3 : 1e-3));
  }
  PolicyParams q = p;
  q.set_flat(p.flat());
  CHECK((q.flat() - p.flat()).norm() == 0.0);
}

TEST_CASE("policy sampling statistics and consistency") {
  const RlFixture& f = fixture();
  const PolicyParams p = make_policy(f.base);
  const Snapshot& s = f.snaps[0].snapshot;
  const Vec mean = pack(s, predict_warmstart(p.mean, s));
  const std::size_t nt = s.free_map.free_theta.size();
  Rng rng(17);
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  while (count < 10000) {
    const Action a = policy_sample(p, s, rng);
    CHECK_MESSAGE(std::abs(a.log_prob - log_prob(p, s, a.free)) < 1e-9, "sample and density disagree");
    CHECK((clamp_pinned(s, a.state).stacked() - a.state.stacked()).norm() == 0.0);
    for (std::size_t k = 0; k < nt; ++k) {
      const double d = a.free[static_cast<Eigen::Index>(k)] - mean[static_cast<Eigen::Index>(k)];
      sum += d;
      sq += d * d;
      ++count;
    }
  }
  const double sd = std::sqrt(sq / count - std::pow(sum / count, 2));
  CHECK(std::abs(sd / 5e-3 - 1.0) < 0.05);

  // Vanishing noise returns the deterministic prediction.
  PolicyParams tiny = p;
  tiny.log_sigma_v = tiny.log_sigma_theta = std::log(1e-14);
  const Action a = policy_sample(tiny, s, rng);
  CHECK((a.free - mean).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("log density at the mean") {
  const RlFixture& f = fixture();
  const PolicyParams p = make_policy(f.base);
  const Snapshot& s = f.snaps[1].snapshot;
  const Vec mean = pack(s, predict_warmstart(p.mean, s));
  const Vec sd = policy_sigma(p, s);
  double expected = 0.0;
  for (Eigen::Index i = 0; i < sd.size(); ++i) expected -= 0.5 * std::log(2.0 * std::numbers::pi * sd[i] * sd[i]);
  CHECK(log_prob(p, s, mean) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("log-prob gradient matches finite differences") {
  const RlFixture& f = fixture();
  PolicyParams p = make_policy(f.base, 0.05, 0.08);
  const Snapshot& s = f.snaps[2].snapshot;
  Rng rng(23);
  const Action a = policy_sample(p, s, rng);
  const LogProbGrad lg = log_prob_grad(p, s, a.free);
  CHECK(lg.value == doctest::Approx(a.log_prob).epsilon(1e-12));
  const Vec theta = p.flat();
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(theta.size() - 2));
  for (Eigen::Index i = 0; i < theta.size() - 2; ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  idx.resize(48);
  idx.push_back(theta.size() - 2);
  idx.push_back(theta.size() - 1);
  const double h = 1e-6;
  for (Eigen::Index i : idx) {
    PolicyParams pp = p, pm = p;
    Vec tp = theta, tm = theta;
    tp[i] += h;
    tm[i] -= h;
    pp.set_flat(tp);
    pm.set_flat(tm);
    const double fd = (log_prob(pp, s, a.free) - log_prob(pm, s, a.free)) / (2 * h);
    CHECK(rel_err(lg.grad[i], fd, 1e-6) < 1e-5);
  }
}

TEST_CASE("surrogate gradient matches finite differences") {
  const RlFixture& f = fixture();
  PolicyParams p = make_policy(f.base, 0.05, 0.08);
  Rng rng(29);
  const auto rollouts = synthetic_rollouts(p, f, 0.3, rng);
  const SurrogateResult sr = ppo_surrogate(p, rollouts, 0.1);
  CHECK(sr.clip_fraction > 0.0);
  CHECK(sr.clip_fraction < 1.0);
  const Vec theta = p.flat();
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(theta.size()));
  for (Eigen::Index i = 0; i < theta.size(); ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  idx.resize(48);
  idx.push_back(theta.size() - 2);
  idx.push_back(theta.size() - 1);
  const double h = 1e-6;
  for (Eigen::Index i : idx) {
    PolicyParams pp = p, pm = p;
    Vec tp = theta, tm = theta;
    tp[i] += h;
    tm[i] -= h;
    pp.set_flat(tp);
    pm.set_flat(tm);
    const double fd = (ppo_surrogate(pp, rollouts, 0.1).value - ppo_surrogate(pm, rollouts, 0.1).value) / (2 * h);
    CHECK(rel_err(sr.grad[i], fd, 1e-7) < 1e-5);
  }
}

TEST_CASE("clipped rollouts contribute no gradient") {
  const RlFixture& f = fixture();
  PolicyParams p = make_policy(f.base, 0.05, 0.08);
  Rng rng(31);
  auto rollouts = synthetic_rollouts(p, f, 0.0, rng);
  for (auto& r : rollouts) {
    // Ratio e^{0.5} > 1 + clip with positive advantage, or e^{-0.5} < 1 - clip with negative.
    const bool up = rng.uniform() < 0.5;
    r.log_prob_old = log_prob(p, *r.snapshot, r.action) + (up ? -0.5 : 0.5);
    r.advantage = up ? 1.0 + rng.uniform() : -1.0 - rng.uniform();
  }
  const SurrogateResult sr = ppo_surrogate(p, rollouts, 0.1);
  CHECK(sr.grad.norm() == 0.0);
  CHECK(sr.clip_fraction == doctest::Approx(1.0));
}

TEST_CASE("ppo_update mechanics") {
  const RlFixture& f = fixture();
  PolicyParams p = make_policy(f.base);
  Rng rng(37);
  auto rollouts = synthetic_rollouts(p, f, 0.0, rng);
  for (auto& r : rollouts) r.log_prob_old = log_prob(p, *r.snapshot, r.action);

  // First inner epoch sees ratio 1 and the mean advantage.
  const SurrogateResult first = ppo_surrogate(p, rollouts, 0.1);
  double mean_adv = 0.0;
  for (const auto& r : rollouts) mean_adv += r.advantage / static_cast<double>(rollouts.size());
  CHECK(first.mean_ratio == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(first.value == doctest::Approx(mean_adv).epsilon(1e-12));
  CHECK(std::abs(first.approx_kl) < 1e-12);

  // Zero advantages leave the parameters unchanged.
  auto zero = rollouts;
  for (auto& r : zero) r.advantage = 0.0;
  PolicyParams q = p;
  Adam opt = make_policy_optimizer(q, PpoConfig{});
  const PpoDiagnostics d0 = ppo_update(q, opt, zero, PpoConfig{});
  CHECK(d0.epochs_run == 4);
  CHECK((q.flat() - p.flat()).norm() == 0.0);

  // Nonzero advantages move the parameters and respect the update size.
  PpoConfig cfg;
  cfg.lr = 1e-3;
  Adam opt2 = make_policy_optimizer(q, cfg);
  const PpoDiagnostics d1 = ppo_update(q, opt2, rollouts, cfg);
  CHECK(d1.epochs_run == 4);
  CHECK_FALSE(d1.aborted);
  CHECK((q.flat() - p.flat()).cwiseAbs().maxCoeff() <= 4 * cfg.lr * 1.0001);
  CHECK((q.flat() - p.flat()).norm() > 0.0);

  // A tight KL target stops the inner loop.
  cfg.lr = 0.05;
  cfg.target_kl = 1e-9;
  PolicyParams r = p;
  Adam opt3 = make_policy_optimizer(r, cfg);
  const PpoDiagnostics d2 = ppo_update(r, opt3, rollouts, cfg);
  CHECK(d2.kl_stop);
  CHECK(d2.epochs_run < 4);

  // Non-finite gradients restore the starting parameters.
  auto bad = rollouts;
  bad[0].advantage = std::numeric_limits<double>::quiet_NaN();
  PolicyParams b = p;
  Adam opt4 = make_policy_optimizer(b, PpoConfig{});
  const PpoDiagnostics d3 = ppo_update(b, opt4, bad, PpoConfig{});
  CHECK(d3.aborted);
  CHECK((b.flat() - p.flat()).norm() == 0.0);

  PpoConfig wrong;
  wrong.clip = 1.0;
  CHECK_THROWS_AS(ppo_update(b, opt4, rollouts, wrong), Error);
}

TEST_CASE("oracle baseline") {
  const RlFixture& f = fixture();
  for (const auto& ls : f.snaps) {
    const int k = oracle_baseline(ls.snapshot, ls.solution, NRConfig{});
    CHECK(k == 1);
    CHECK(reward_sat(k, 1.0, 2.0, 2.0) - reward_sat(k, 1.0, 2.0, 2.0) == 0.0);
  }
}

TEST_CASE("evaluate and summarize") {
  const RlFixture& f = fixture();
  const auto snaps = f.pointers();
  std::map<const Snapshot*, FullState> labels;
  for (const auto* ls : snaps) labels[&ls->snapshot] = ls->solution;
  const auto rows = evaluate([&](const Snapshot& s) { return labels.at(&s); }, snaps, NRConfig{});
  REQUIRE(rows.size() == snaps.size());
  for (const auto& r : rows) {
    CHECK(r.solved);
    CHECK(r.iters == 1);
    CHECK(r.distance < 1e-12);
  }
  NRConfig short_cap;
  short_cap.cap = 2;
  const auto flat = evaluate([](const Snapshot& s) { return flat_start(s); }, snaps, short_cap);
  const EvalSummary sum = summarize(flat);
  double all = 0.0, solved_iters = 0.0;
  std::size_t solved = 0;
  for (const auto& r : flat) {
    all += r.iters;
    if (r.solved) {
      ++solved;
      solved_iters += r.iters;
    } else {
      CHECK(r.iters == 2);
    }
  }
  CHECK(sum.total == flat.size());
  CHECK(sum.solved == solved);
  CHECK(sum.iters_all == doctest::Approx(all / flat.size()));
  if (solved > 0) CHECK(sum.iters_solved == doctest::Approx(solved_iters / solved));
  CHECK(flat[0].pbl0 == doctest::Approx(pbl(snaps[0]->snapshot, flat_start(snaps[0]->snapshot), 0.0)));
}

TEST_CASE("PPO with the oracle baseline") {
  const RlFixture& f = fixture();
  PpoVstarConfig cfg;
  cfg.iterations = 3;
  cfg.states_per_iter = 4;
  const std::uint64_t calls_before = nr_call_count();
  const RlResult a = run_ppo_vstar(f.pointers(), make_policy(f.base), cfg);
  CHECK(nr_call_count() > calls_before);
  const RlResult b = run_ppo_vstar(f.pointers(), make_policy(f.base), cfg);
  REQUIRE(a.history.size() == 3u);
  CHECK(a.best_iteration == 3);
  CHECK((a.policy.flat() - b.policy.flat()).norm() == 0.0);
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].iteration == static_cast<int>(i) + 1);
    CHECK(a.history[i].mean_reward == b.history[i].mean_reward);
    CHECK(a.history[i].inner_nr_calls >= cfg.states_per_iter);
    CHECK(a.history[i].mean_reward <= cfg.r_plus);
  }
}

TEST_CASE("lantern returns the best validation snapshot without NR in the inner loop") {
  const RlFixture& f = fixture();
  const RewardModel reward = random_reward(*f.g);
  LanternConfig cfg;
  cfg.iterations = 6;
  cfg.ppo.lr = 5e-3;
  const auto train = f.pointers(0, 5), val = f.pointers(5, 8);
  const RlResult res = run_newtons_lantern(train, val, make_policy(f.base), reward, cfg);
  REQUIRE_FALSE(res.history.empty());
  CHECK(res.history.front().iteration == 0);
  CHECK(res.history.front().val_mean.has_value());
  std::size_t validations = 0;
  for (const auto& h : res.history) {
    if (h.iteration > 0) CHECK(h.inner_nr_calls == 0u);
    if (h.val_mean) {
      ++validations;
      CHECK(res.best_val <= *h.val_mean);
      CHECK(h.iteration % cfg.val_interval == 0);
    }
  }
  CHECK(validations == 4u);
  CHECK(validation_mean_iters(res.policy, val, cfg.nr) == doctest::Approx(res.best_val).epsilon(1e-12));
  const RlResult again = run_newtons_lantern(train, val, make_policy(f.base), reward, cfg);
  CHECK((again.policy.flat() - res.policy.flat()).norm() == 0.0);
  CHECK(again.best_iteration == res.best_iteration);
}

TEST_CASE("policy serialization round trip") {
  const RlFixture& f = fixture();
  PolicyParams p = make_policy(f.base, 2e-3, 7e-3);
  const PolicyParams back = policy_deserialize(policy_serialize(p));
  CHECK((back.flat() - p.flat()).norm() == 0.0);
  CHECK((back.mean.norm.scale - p.mean.norm.scale).norm() == 0.0);
}
