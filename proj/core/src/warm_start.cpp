#include "nrlab/warm_start.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "nrlab/io.hpp"
#include "nrlab/parallel.hpp"

namespace nrlab {
namespace {

constexpr std::size_t kEvalChunk = 256;

std::vector<bool> free_theta_mask(const Snapshot& s) {
  std::vector<bool> mask(s.n(), false);
  for (int i : s.free_map.free_theta) mask[i] = true;
  return mask;
}

std::vector<bool> free_v_mask(const Snapshot& s) {
  std::vector<bool> mask(s.n(), false);
  for (int i : s.free_map.free_v) mask[i] = true;
  return mask;
}

std::string join(const Vec& v) {
  std::string out;
  for (Eigen::Index i = 0; i < v.size(); ++i) out += " " + fmt(v[i]);
  return out;
}

}  // namespace

Vec warm_start_features(const Snapshot& s) {
  const Network& net = s.net();
  const std::size_t n = net.n();
  Vec f = Vec::Zero(static_cast<Eigen::Index>(n * kFeaturesPerBus));
  for (std::size_t i = 0; i < n; ++i) {
    const Bus& b = net.buses[i];
    const Eigen::Index o = static_cast<Eigen::Index>(i * kFeaturesPerBus);
    f[o] = s.p_spec[i];
    f[o + 1] = s.q_spec[i];
    f[o + 2] = b.g_shunt;
    f[o + 3] = b.b_shunt;
    f[o + 4 + static_cast<int>(b.kind)] = 1.0;
  }
  return f;
}

Vec FeatureNorm::apply(const Vec& x) const {
  if (x.size() != mean.size()) throw Error(Error::Kind::kDimension, "feature length does not match normalization");
  return (x - mean).cwiseQuotient(scale);
}

FeatureNorm FeatureNorm::fit(const std::vector<Vec>& rows) {
  if (rows.empty()) throw Error(Error::Kind::kConfig, "cannot fit feature normalization on an empty set");
  const Eigen::Index d = rows.front().size();
  FeatureNorm norm{Vec::Zero(d), Vec::Zero(d)};
  for (const Vec& r : rows) norm.mean += r;
  norm.mean /= static_cast<double>(rows.size());
  for (const Vec& r : rows) norm.scale += (r - norm.mean).cwiseAbs2();
  norm.scale = (norm.scale / static_cast<double>(rows.size())).cwiseSqrt();
  // Constant features pass through centered.
  for (Eigen::Index i = 0; i < d; ++i) {
    if (!(norm.scale[i] > 1e-12)) norm.scale[i] = 1.0;
  }
  return norm;
}

FeatureNorm FeatureNorm::identity(Eigen::Index n) { return {Vec::Zero(n), Vec::Ones(n)}; }

WarmStartModel make_warm_start_model(const Grid& grid, const std::vector<int>& hidden, std::uint64_t seed,
                                     const std::vector<const Snapshot*>& fit_on) {
  const int n = static_cast<int>(grid.net.n());
  std::vector<int> widths{n * kFeaturesPerBus};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(2 * n);
  WarmStartModel m{mlp_init(widths, seed), FeatureNorm::identity(n * kFeaturesPerBus)};
  if (!fit_on.empty()) {
    std::vector<Vec> rows;
    rows.reserve(fit_on.size());
    for (const Snapshot* s : fit_on) rows.push_back(warm_start_features(*s));
    m.norm = FeatureNorm::fit(rows);
  }
  return m;
}

FullState decode_prediction(const Snapshot& s, const Vec& raw) {
  const Eigen::Index n = static_cast<Eigen::Index>(s.n());
  if (raw.size() != 2 * n) throw Error(Error::Kind::kDimension, "raw head length must be 2N");
  FullState x{Vec(n), Vec(n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    x.theta[i] = raw[2 * i];
    x.v[i] = 1.0 + 0.5 * std::tanh(raw[2 * i + 1]);
  }
  return clamp_pinned(s, std::move(x));
}

Vec raw_head_grad(const Snapshot& s, const Vec& raw, const Vec& d_state) {
  const Eigen::Index n = static_cast<Eigen::Index>(s.n());
  const auto th = free_theta_mask(s);
  const auto vm = free_v_mask(s);
  Vec g = Vec::Zero(2 * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (th[i]) g[2 * i] = d_state[i];
    if (vm[i]) {
      const double t = std::tanh(raw[2 * i + 1]);
      g[2 * i + 1] = d_state[n + i] * 0.5 * (1.0 - t * t);
    }
  }
  return g;
}

Mat feature_batch(const WarmStartModel& m, const std::vector<const Snapshot*>& batch) {
  Mat x(m.mlp.input_dim(), static_cast<Eigen::Index>(batch.size()));
  for (std::size_t c = 0; c < batch.size(); ++c) {
    x.col(static_cast<Eigen::Index>(c)) = m.norm.apply(warm_start_features(*batch[c]));
  }
  return x;
}

FullState predict_warmstart(const WarmStartModel& m, const Snapshot& s) {
  return decode_prediction(s, mlp_forward(m.mlp, m.norm.apply(warm_start_features(s))));
}

std::vector<FullState> predict_warmstart(const WarmStartModel& m, const std::vector<const Snapshot*>& batch) {
  std::vector<FullState> out(batch.size());
  const std::size_t chunks = (batch.size() + kEvalChunk - 1) / kEvalChunk;
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t lo = c * kEvalChunk, hi = std::min(batch.size(), lo + kEvalChunk);
    const std::vector<const Snapshot*> part(batch.begin() + lo, batch.begin() + hi);
    const Mat raw = mlp_forward(m.mlp, feature_batch(m, part));
    for (std::size_t k = lo; k < hi; ++k) out[k] = decode_prediction(*batch[k], raw.col(static_cast<Eigen::Index>(k - lo)));
  });
  return out;
}

LossGrad loss_and_grad_pbl(const WarmStartModel& m, const std::vector<const Snapshot*>& batch, double zeta) {
  if (batch.empty()) throw Error(Error::Kind::kConfig, "empty batch");
  ForwardCache cache;
  const Mat raw = mlp_forward(m.mlp, feature_batch(m, batch), false, nullptr, &cache);
  const double inv = 1.0 / static_cast<double>(batch.size());
  Mat d_raw(raw.rows(), raw.cols());
  LossGrad out;
  for (std::size_t c = 0; c < batch.size(); ++c) {
    const Eigen::Index ci = static_cast<Eigen::Index>(c);
    const Snapshot& s = *batch[c];
    const FullState x = decode_prediction(s, raw.col(ci));
    out.loss += inv * pbl(s, x, zeta);
    d_raw.col(ci) = inv * raw_head_grad(s, raw.col(ci), pbl_grad(s, x, zeta));
  }
  if (!std::isfinite(out.loss)) throw Error(Error::Kind::kNumerical, "non-finite power-balance loss");
  out.grad = Vec::Zero(static_cast<Eigen::Index>(m.mlp.param_count()));
  mlp_backward(m.mlp, cache, d_raw, out.grad);
  return out;
}

double mean_pbl(const WarmStartModel& m, const std::vector<const Snapshot*>& snaps, double zeta) {
  if (snaps.empty()) return 0.0;
  const std::vector<FullState> pred = predict_warmstart(m, snaps);
  std::vector<double> vals(snaps.size());
  parallel_for(snaps.size(), [&](std::size_t i) { vals[i] = pbl(*snaps[i], pred[i], zeta); });
  double sum = 0.0;
  for (double v : vals) sum += v;
  return sum / static_cast<double>(vals.size());
}

std::vector<EpochRecord> train_supervised(WarmStartModel& m, const std::vector<const Snapshot*>& train,
                                          const std::vector<const Snapshot*>& val, const TrainConfig& cfg) {
  if (train.empty()) throw Error(Error::Kind::kConfig, "training slice is empty");
  if (!(cfg.lr > 0.0) || cfg.batch == 0 || cfg.epochs < 1) {
    throw Error(Error::Kind::kConfig, "training needs positive lr, batch and epochs");
  }
  const std::vector<const Snapshot*>& monitor = val.empty() ? train : val;
  Vec theta = m.mlp.flat();
  Adam adam(static_cast<std::size_t>(theta.size()), AdamConfig{cfg.lr});
  Vec best = theta;
  double best_val = mean_pbl(m, monitor, cfg.zeta);
  int since_best = 0;
  std::vector<EpochRecord> history;
  const Rng root(cfg.seed);
  std::vector<std::size_t> order(train.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = root.split(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch) {
      std::vector<const Snapshot*> batch;
      for (std::size_t k = lo; k < std::min(order.size(), lo + cfg.batch); ++k) batch.push_back(train[order[k]]);
      const LossGrad lg = loss_and_grad_pbl(m, batch, cfg.zeta);
      adam.step(theta, lg.grad);
      m.mlp.set_flat(theta);
      loss_sum += lg.loss;
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    rec.val_loss = mean_pbl(m, monitor, cfg.zeta);
    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      best = theta;
      since_best = 0;
    } else {
      ++since_best;
    }
    rec.best_val = best_val;
    history.push_back(rec);
    if (since_best >= cfg.patience) break;
  }
  m.mlp.set_flat(best);
  return history;
}

std::string warm_start_serialize(const WarmStartModel& m) {
  return "norm-mean" + join(m.norm.mean) + "\nnorm-scale" + join(m.norm.scale) + "\n" + mlp_serialize(m.mlp);
}

WarmStartModel warm_start_deserialize(const std::string& text) {
  WarmStartModel m;
  std::istringstream in(text);
  std::string line;
  auto read_vec = [](std::istringstream& ls) {
    std::vector<double> vals;
    std::string tok;
    while (ls >> tok) vals.push_back(parse_double(tok));
    return Vec(Eigen::Map<const Vec>(vals.data(), static_cast<Eigen::Index>(vals.size())));
  };
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "norm-mean") m.norm.mean = read_vec(ls);
    if (key == "norm-scale") m.norm.scale = read_vec(ls);
    if (key == "mlp-widths") break;
  }
  m.mlp = mlp_deserialize(text);
  if (m.norm.mean.size() != m.mlp.input_dim() || m.norm.scale.size() != m.mlp.input_dim()) {
    throw Error(Error::Kind::kParse, "warm-start checkpoint normalization does not match the network");
  }
  return m;
}

}  // namespace nrlab
