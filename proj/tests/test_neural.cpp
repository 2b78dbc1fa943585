#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "nrlab/continuation.hpp"
#include "nrlab/neural.hpp"
#include "nrlab/warm_start.hpp"
#include "support.hpp"

using namespace nrlab;
using namespace nrlab::test;

namespace {

// Indices of n distinct random coordinates of a vector of size dim.
std::vector<Eigen::Index> pick(Eigen::Index dim, int n, Rng& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(dim));
  for (Eigen::Index i = 0; i < dim; ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  idx.resize(static_cast<std::size_t>(std::min<Eigen::Index>(n, dim)));
  return idx;
}

std::vector<Snapshot> perturbed_snapshots(const std::shared_ptr<const Grid>& g, int n, std::uint64_t seed) {
  std::vector<Snapshot> out;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    out.push_back(make_snapshot(g, rng.uniform(0.8, 1.2), draw_perturbation(g->net.n(), 0.1, rng.next_u64())));
  }
  return out;
}

std::vector<const Snapshot*> ptrs(const std::vector<Snapshot>& v) {
  std::vector<const Snapshot*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

}  // namespace

TEST_CASE("mlp_init is deterministic and validates widths") {
  const Mlp a = mlp_init({5, 8, 3}, 11);
  const Mlp b = mlp_init({5, 8, 3}, 11);
  const Mlp c = mlp_init({5, 8, 3}, 12);
  CHECK((a.flat() - b.flat()).norm() == 0.0);
  CHECK((a.flat() - c.flat()).norm() > 0.0);
  CHECK(a.param_count() == static_cast<std::size_t>(5 * 8 + 8 + 8 * 3 + 3));
  CHECK(a.activation.back() == Activation::kLinear);
  const double bound = std::sqrt(3.0 / 5.0);
  CHECK(a.w[0].cwiseAbs().maxCoeff() <= bound);
  CHECK(a.b[0].norm() == 0.0);
  CHECK_THROWS_AS(mlp_init({5, 0, 3}, 1), Error);
  CHECK_THROWS_AS(mlp_init({5}, 1), Error);
}

TEST_CASE("118-bus model widths") {
  const auto g = grid("case118");
  const Snapshot s = make_snapshot(g, 1.0);
  const WarmStartModel m = make_warm_start_model(*g, {512, 512, 512, 512}, 1, {&s});
  CHECK(m.mlp.widths == std::vector<int>{118 * kFeaturesPerBus, 512, 512, 512, 512, 2 * 118});
}

TEST_CASE("identity linear layer and flat round trip") {
  Mlp m = mlp_init({4, 4}, 1);
  m.w[0] = Mat::Identity(4, 4);
  const Vec x = Vec::LinSpaced(4, -1.0, 2.0);
  CHECK((mlp_forward(m, x) - x).norm() == 0.0);
  Mlp m2 = mlp_init({4, 4}, 9);
  m2.set_flat(m.flat());
  CHECK((mlp_forward(m2, x) - x).norm() == 0.0);
  CHECK_THROWS_AS(mlp_forward(m, Vec(Vec::Zero(3))), Error);
}

TEST_CASE("dropout only in train mode") {
  const Mlp m = mlp_init({6, 32, 32, 2}, 5, Activation::kGelu, {0.5, 0.5, 0.0});
  Rng rng(1);
  const Mat x = rng.normal_vec(6 * 4).reshaped(6, 4);
  CHECK((mlp_forward(m, x) - mlp_forward(m, x)).norm() == 0.0);
  Rng r1(2), r2(2);
  const Mat t1 = mlp_forward(m, x, true, &r1);
  const Mat t2 = mlp_forward(m, x, true, &r2);
  CHECK((t1 - t2).norm() == 0.0);
  CHECK((t1 - mlp_forward(m, x)).norm() > 0.0);
}

TEST_CASE("mlp backward matches finite differences") {
  for (Activation act : {Activation::kGelu, Activation::kRelu}) {
    Mlp m = mlp_init({5, 7, 6, 3}, 21, act);
    Rng rng(22);
    for (auto& b : m.b) b = 0.1 * rng.normal_vec(b.size());
    const Mat x = rng.normal_vec(5 * 3).reshaped(5, 3);
    const Mat wout = rng.normal_vec(3 * 3).reshaped(3, 3);
    auto loss = [&](const Mlp& mm) { return (mlp_forward(mm, x).array() * wout.array()).sum(); };
    ForwardCache cache;
    mlp_forward(m, x, false, nullptr, &cache);
    Vec grad = Vec::Zero(static_cast<Eigen::Index>(m.param_count()));
    const Mat dx = mlp_backward(m, cache, wout, grad);
    const Vec theta = m.flat();
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      Vec tp = theta, tm = theta;
      tp[i] += h;
      tm[i] -= h;
      Mlp mp = m, mm = m;
      mp.set_flat(tp);
      mm.set_flat(tm);
      const double fd = (loss(mp) - loss(mm)) / (2 * h);
      CHECK(rel_err(grad[i], fd, 1e-6) < 1e-5);
    }
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      Mat xp = x, xm = x;
      xp.data()[i] += h;
      xm.data()[i] -= h;
      const double fd = ((mlp_forward(m, xp).array() - mlp_forward(m, xm).array()) * wout.array()).sum() / (2 * h);
      CHECK(rel_err(dx.data()[i], fd, 1e-6) < 1e-5);
    }
  }
}

TEST_CASE("adam and gradient clipping") {
  Vec g(2);
  g << 3.0, 4.0;
  CHECK(clip_grad_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g.norm() == doctest::Approx(1.0));
  Vec small(2);
  small << 0.1, 0.0;
  clip_grad_norm(small, 1.0);
  CHECK(small[0] == 0.1);
  // First Adam step moves every coordinate by lr against the gradient sign.
  Adam opt(2, AdamConfig{0.01});
  Vec p = Vec::Zero(2);
  Vec grad(2);
  grad << 2.0, -0.5;
  opt.step(p, grad);
  CHECK(p[0] == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(0.01).epsilon(1e-6));
  CHECK(opt.steps() == 1);
}

TEST_CASE("mlp serialization round trip") {
  const Mlp m = mlp_init({3, 5, 2}, 4, Activation::kRelu, {0.1, 0.0});
  const Mlp back = mlp_deserialize(mlp_serialize(m));
  CHECK(back.widths == m.widths);
  CHECK((back.flat() - m.flat()).norm() == 0.0);
  CHECK(back.activation == m.activation);
  CHECK(back.dropout == m.dropout);
  CHECK_THROWS_AS(mlp_deserialize("garbage"), Error);
}

TEST_CASE("decode bounds and pinned coordinates") {
  const auto g = grid("case14");
  const Snapshot s = make_snapshot(g, 1.0);
  Rng rng(8);
  const Vec raw = 3.0 * rng.normal_vec(2 * 14);
  const FullState x = decode_prediction(s, raw);
  for (std::size_t i = 0; i < 14; ++i) {
    CHECK(x.v[i] > 0.5);
    CHECK(x.v[i] < 1.5);
  }
  const FullState pinned = clamp_pinned(s, x);
  CHECK((pinned.stacked() - x.stacked()).norm() == 0.0);

  const WarmStartModel m = make_warm_start_model(*g, {16, 16}, 3, {&s});
  const FullState p = predict_warmstart(m, s);
  CHECK(p.stacked().allFinite());
  CHECK((clamp_pinned(s, p).stacked() - p.stacked()).norm() == 0.0);
}

TEST_CASE("raw head gradient matches finite differences") {
  const auto g = grid("case14");
  const Snapshot s = make_snapshot(g, 1.0);
  Rng rng(13);
  const Vec raw = 0.3 * rng.normal_vec(28);
  const Vec w = rng.normal_vec(28);
  const Vec d_raw = raw_head_grad(s, raw, w);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < 28; ++i) {
    Vec rp = raw, rm = raw;
    rp[i] += h;
    rm[i] -= h;
    const double fd = (w.dot(decode_prediction(s, rp).stacked()) - w.dot(decode_prediction(s, rm).stacked())) / (2 * h);
    CHECK(std::abs(d_raw[i] - fd) < 1e-7 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("PBL loss gradient matches finite differences on 50 parameters") {
  const auto g = grid("case14");
  const auto snaps = perturbed_snapshots(g, 3, 17);
  const auto batch = ptrs(snaps);
  WarmStartModel m = make_warm_start_model(*g, {24, 24}, 5, batch);
  const LossGrad lg = loss_and_grad_pbl(m, batch, kDefaultZeta);
  CHECK(lg.loss == doctest::Approx(mean_pbl(m, batch, kDefaultZeta)).epsilon(1e-12));
  Rng rng(18);
  const Vec theta = m.mlp.flat();
  const double h = 1e-6;
  int checked = 0;
  for (Eigen::Index i : pick(theta.size(), 50, rng)) {
    Vec tp = theta, tm = theta;
    tp[i] += h;
    tm[i] -= h;
    WarmStartModel mp = m, mm = m;
    mp.mlp.set_flat(tp);
    mm.mlp.set_flat(tm);
    const double fd = (mean_pbl(mp, batch, kDefaultZeta) - mean_pbl(mm, batch, kDefaultZeta)) / (2 * h);
    CHECK(rel_err(lg.grad[i], fd, 1e-7) < 1e-5);
    ++checked;
  }
  CHECK(checked == 50);
}

TEST_CASE("features follow the per-bus layout") {
  const auto g = grid("case14");
  const Snapshot s = make_snapshot(g, 1.3);
  const Vec f = warm_start_features(s);
  REQUIRE(f.size() == 14 * kFeaturesPerBus);
  for (std::size_t i = 0; i < 14; ++i) {
    const Eigen::Index o = static_cast<Eigen::Index>(i) * kFeaturesPerBus;
    CHECK(f[o] == s.p_spec[i]);
    CHECK(f[o + 1] == s.q_spec[i]);
    CHECK(f[o + 4] + f[o + 5] + f[o + 6] == 1.0);
  }
  const FeatureNorm id = FeatureNorm::identity(f.size());
  CHECK((id.apply(f) - f).norm() == 0.0);
  const FeatureNorm fit = FeatureNorm::fit({f, 2.0 * f, 3.0 * f});
  CHECK(fit.apply(2.0 * f).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("supervised training bookkeeping, determinism and improvement") {
  const auto g = grid("case14");
  const auto train_s = perturbed_snapshots(g, 64, 31);
  const auto val_s = perturbed_snapshots(g, 9, 32);
  const auto train = ptrs(train_s), val = ptrs(val_s);
  TrainConfig cfg;
  cfg.epochs = 25;
  cfg.batch = 8;
  cfg.lr = 1e-3;
  cfg.patience = 8;
  WarmStartModel a = make_warm_start_model(*g, {32, 32}, 7, train);
  WarmStartModel b = a;
  const double before = mean_pbl(a, val, kDefaultZeta);
  const auto ha = train_supervised(a, train, val, cfg);
  const auto hb = train_supervised(b, train, val, cfg);
  CHECK((a.mlp.flat() - b.mlp.flat()).norm() == 0.0);
  REQUIRE(ha.size() == hb.size());
  REQUIRE_FALSE(ha.empty());
  for (std::size_t i = 0; i < ha.size(); ++i) {
    CHECK(ha[i].epoch == static_cast<int>(i) + 1);
    if (i > 0) CHECK(ha[i].best_val <= ha[i - 1].best_val);
    CHECK(ha[i].best_val <= ha[i].val_loss);
  }
  const double after = mean_pbl(a, val, kDefaultZeta);
  CHECK(after == doctest::Approx(ha.back().best_val).epsilon(1e-12));
  CHECK(after < before);

  // Trained model beats flat start on PBL in the median.
  std::vector<double> model_pbl, flat_pbl;
  for (const auto* s : val) {
    model_pbl.push_back(pbl(*s, predict_warmstart(a, *s), kDefaultZeta));
    flat_pbl.push_back(pbl(*s, flat_start(*s), kDefaultZeta));
  }
  std::sort(model_pbl.begin(), model_pbl.end());
  std::sort(flat_pbl.begin(), flat_pbl.end());
  CHECK(model_pbl[model_pbl.size() / 2] < flat_pbl[flat_pbl.size() / 2]);

  const WarmStartModel back = warm_start_deserialize(warm_start_serialize(a));
  CHECK((back.mlp.flat() - a.mlp.flat()).norm() == 0.0);
  CHECK((back.norm.mean - a.norm.mean).norm() == 0.0);
}

TEST_CASE("early stopping honours patience") {
  const auto g = grid("case14");
  const auto train_s = perturbed_snapshots(g, 8, 41);
  const auto train = ptrs(train_s);
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.patience = 1;
  cfg.lr = 0.5;  // far too large: validation stops improving quickly
  WarmStartModel m = make_warm_start_model(*g, {8}, 2, train);
  const auto h = train_supervised(m, train, train, cfg);
  CHECK(h.size() < 40u);
}
