#include "nrlab/reward_model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "nrlab/io.hpp"
#include "nrlab/parallel.hpp"

namespace nrlab {
namespace {

Mat normalized_batch(const RewardModel& r, const std::vector<Vec>& rows, const std::vector<std::size_t>& idx) {
  Mat x(r.mlp.input_dim(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t c = 0; c < idx.size(); ++c) x.col(static_cast<Eigen::Index>(c)) = r.norm.apply(rows[idx[c]]);
  return x;
}

std::string join(const Vec& v) {
  std::string out;
  for (Eigen::Index i = 0; i < v.size(); ++i) out += " " + fmt(v[i]);
  return out;
}

}  // namespace

Vec snapshot_features(const Snapshot& s) {
  Vec f(kSnapshotFeatures);
  f[0] = s.p_load.sum();
  f[1] = s.q_load.sum();
  f[2] = s.p_load.maxCoeff();
  f[3] = s.q_load.maxCoeff();
  f[4] = pbl(s, flat_start(s), kDefaultZeta);
  f[5] = s.lambda;
  return f;
}

Vec reward_input(const Vec& snap_features, const FullState& a) {
  const Eigen::Index n = a.v.size();
  Vec x(kSnapshotFeatures + 2 * n);
  x << snap_features, a.v, a.theta;
  return x;
}

double reference_radius(const Snapshot& s, const FullState& x_hat) {
  return (pack(s, x_hat) - pack(s, flat_start(s))).norm();
}

std::vector<RewardSample> gen_perturbation_dataset(const WarmStartModel& base,
                                                   const std::vector<const LabeledSnapshot*>& snaps,
                                                   const PerturbationConfig& cfg) {
  cfg.nr.validate();
  if (cfg.magnitudes.empty() || cfg.directions < 1) {
    throw Error(Error::Kind::kConfig, "perturbation dataset needs magnitudes and at least one direction");
  }
  // Sample layout per snapshot: one row per zero magnitude, `directions`
  // rows per nonzero magnitude.
  struct Slot {
    std::size_t mag;
    int dir;
  };
  std::vector<Slot> layout;
  for (std::size_t m = 0; m < cfg.magnitudes.size(); ++m) {
    const int reps = cfg.magnitudes[m] == 0.0 ? 1 : cfg.directions;
    for (int d = 0; d < reps; ++d) layout.push_back({m, d});
  }
  std::vector<const Snapshot*> plain;
  for (const auto* ls : snaps) plain.push_back(&ls->snapshot);
  const std::vector<FullState> x_hat = predict_warmstart(base, plain);

  const Rng root(cfg.seed);
  std::vector<RewardSample> out(snaps.size() * layout.size());
  parallel_for(out.size(), [&](std::size_t k) {
    const std::size_t si = k / layout.size();
    const Slot slot = layout[k % layout.size()];
    const Snapshot& s = snaps[si]->snapshot;
    RewardSample& rec = out[k];
    rec.snapshot = si;
    rec.snapshot_id = snaps[si]->id;
    rec.magnitude = cfg.magnitudes[slot.mag];
    rec.direction = slot.dir;
    rec.radius = reference_radius(s, x_hat[si]);
    FullState a = x_hat[si];
    if (rec.magnitude != 0.0) {
      Rng rng = root.split(si).split(slot.mag * 1000 + static_cast<std::size_t>(slot.dir));
      const Vec u = rng.unit_vector(static_cast<Eigen::Index>(s.free_map.n_free));
      a = unpack(s, pack(s, x_hat[si]) + rec.magnitude * rec.radius * u);
    }
    rec.input = reward_input(snapshot_features(s), a);
    const NRResult nr = newton_solve(s, a, cfg.nr);
    rec.target = nr.converged ? nr.iterations : cfg.nr.cap;
  });
  return out;
}

RewardLoss reward_loss_and_grad(const RewardModel& r, const Mat& x_norm, const Vec& z_target, bool train,
                                Rng* rng) {
  ForwardCache cache;
  const Mat out = mlp_forward(r.mlp, x_norm, train, rng, &cache);
  const double inv = 1.0 / static_cast<double>(x_norm.cols());
  const Eigen::RowVectorXd err = out.row(0) - z_target.transpose();
  RewardLoss res;
  res.loss = inv * err.squaredNorm();
  res.grad = Vec::Zero(static_cast<Eigen::Index>(r.mlp.param_count()));
  mlp_backward(r.mlp, cache, 2.0 * inv * Mat(err), res.grad);
  return res;
}

double predict_iters(const RewardModel& r, const Vec& raw_input) {
  return mlp_forward(r.mlp, r.norm.apply(raw_input))[0] * r.target_std + r.target_mean;
}

double predict_iters(const RewardModel& r, const Snapshot& s, const FullState& a) {
  return predict_iters(r, reward_input(snapshot_features(s), a));
}

Vec predict_iters(const RewardModel& r, const std::vector<Vec>& raw_inputs) {
  std::vector<std::size_t> idx(raw_inputs.size());
  std::iota(idx.begin(), idx.end(), 0);
  Vec out(static_cast<Eigen::Index>(raw_inputs.size()));
  constexpr std::size_t chunk = 1024;
  for (std::size_t lo = 0; lo < idx.size(); lo += chunk) {
    const std::vector<std::size_t> part(idx.begin() + lo, idx.begin() + std::min(idx.size(), lo + chunk));
    const Mat y = mlp_forward(r.mlp, normalized_batch(r, raw_inputs, part));
    for (std::size_t c = 0; c < part.size(); ++c) {
      out[static_cast<Eigen::Index>(lo + c)] = y(0, static_cast<Eigen::Index>(c)) * r.target_std + r.target_mean;
    }
  }
  return out;
}

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error(Error::Kind::kDimension, "spearman inputs differ in length");
  if (a.size() < 2) return std::nullopt;
  const std::vector<double> ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

SpearmanSummary spearman_per_snapshot(const std::vector<std::size_t>& group, const std::vector<double>& pred,
                                      const std::vector<double>& target) {
  if (group.size() != pred.size() || group.size() != target.size()) {
    throw Error(Error::Kind::kDimension, "spearman grouping inputs differ in length");
  }
  std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (std::size_t i = 0; i < group.size(); ++i) {
    groups[group[i]].first.push_back(pred[i]);
    groups[group[i]].second.push_back(target[i]);
  }
  SpearmanSummary sum;
  double total = 0.0;
  for (const auto& [g, pt] : groups) {
    const auto rho = spearman(pt.first, pt.second);
    if (!rho) {
      ++sum.excluded;
      continue;
    }
    total += *rho;
    ++sum.groups;
  }
  sum.mean = sum.groups ? total / static_cast<double>(sum.groups) : 0.0;
  return sum;
}

SpearmanSummary spearman_per_snapshot(const RewardModel& r, const std::vector<RewardSample>& samples) {
  std::vector<Vec> inputs;
  std::vector<std::size_t> group;
  std::vector<double> target;
  for (const auto& s : samples) {
    inputs.push_back(s.input);
    group.push_back(s.snapshot);
    target.push_back(s.target);
  }
  const Vec pred = predict_iters(r, inputs);
  return spearman_per_snapshot(group, std::vector<double>(pred.data(), pred.data() + pred.size()), target);
}

RewardTrainResult train_reward(const std::vector<RewardSample>& samples, const RewardTrainConfig& cfg) {
  if (samples.empty()) throw Error(Error::Kind::kConfig, "reward dataset is empty");
  if (cfg.dropout.size() != cfg.hidden.size() + 1) {
    throw Error(Error::Kind::kConfig, "reward dropout list needs one rate per layer");
  }
  RewardTrainResult res;
  std::vector<std::size_t> snaps;
  for (const auto& s : samples) snaps.push_back(s.snapshot);
  std::sort(snaps.begin(), snaps.end());
  snaps.erase(std::unique(snaps.begin(), snaps.end()), snaps.end());
  Rng split_rng(cfg.seed);
  for (std::size_t i = snaps.size(); i > 1; --i) std::swap(snaps[i - 1], snaps[split_rng.index(i)]);
  const std::size_t n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(snaps.size())));
  res.val_snapshots.assign(snaps.begin(), snaps.begin() + static_cast<std::ptrdiff_t>(n_val));
  res.train_snapshots.assign(snaps.begin() + static_cast<std::ptrdiff_t>(n_val), snaps.end());
  std::sort(res.val_snapshots.begin(), res.val_snapshots.end());
  std::sort(res.train_snapshots.begin(), res.train_snapshots.end());
  if (res.val_snapshots.empty() || res.train_snapshots.empty()) {
    throw Error(Error::Kind::kConfig, "reward split leaves one side empty");
  }

  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const bool is_val = std::binary_search(res.val_snapshots.begin(), res.val_snapshots.end(), samples[i].snapshot);
    (is_val ? val_idx : train_idx).push_back(i);
  }
  std::vector<Vec> rows;
  rows.reserve(samples.size());
  for (const auto& s : samples) rows.push_back(s.input);

  RewardModel& model = res.model;
  {
    std::vector<Vec> train_rows;
    double mean = 0.0;
    for (std::size_t i : train_idx) {
      train_rows.push_back(rows[i]);
      mean += samples[i].target;
    }
    mean /= static_cast<double>(train_idx.size());
    double var = 0.0;
    for (std::size_t i : train_idx) var += (samples[i].target - mean) * (samples[i].target - mean);
    const double sd = std::sqrt(var / static_cast<double>(train_idx.size()));
    if (!(sd > 0.0)) throw Error(Error::Kind::kNumerical, "reward targets are constant; z-score undefined");
    model.target_mean = mean;
    model.target_std = sd;
    model.norm = FeatureNorm::fit(train_rows);
  }
  std::vector<int> widths{static_cast<int>(rows.front().size())};
  widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  widths.push_back(1);
  model.mlp = mlp_init(widths, Rng(cfg.seed).split(1).next_u64(), Activation::kGelu, cfg.dropout);

  std::vector<RewardSample> val_samples;
  for (std::size_t i : val_idx) val_samples.push_back(samples[i]);

  Vec theta = model.mlp.flat();
  Adam adam(static_cast<std::size_t>(theta.size()), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  Vec best = theta;
  res.best_spearman = -2.0;
  const Rng root(cfg.seed);
  std::vector<std::size_t> order = train_idx;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng = root.split(100 + static_cast<std::uint64_t>(epoch));
    order = train_idx;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch) {
      const std::vector<std::size_t> idx(order.begin() + lo, order.begin() + std::min(order.size(), lo + cfg.batch));
      Vec z(static_cast<Eigen::Index>(idx.size()));
      for (std::size_t c = 0; c < idx.size(); ++c) {
        z[static_cast<Eigen::Index>(c)] = (samples[idx[c]].target - model.target_mean) / model.target_std;
      }
      const RewardLoss lg = reward_loss_and_grad(model, normalized_batch(model, rows, idx), z, true, &rng);
      adam.step(theta, lg.grad);
      model.mlp.set_flat(theta);
      loss_sum += lg.loss;
      ++batches;
    }
    RewardEpoch rec;
    rec.epoch = epoch;
    rec.train_mse = loss_sum / static_cast<double>(batches);
    rec.val_spearman = spearman_per_snapshot(model, val_samples).mean;
    res.history.push_back(rec);
    if (rec.val_spearman > res.best_spearman) {
      res.best_spearman = rec.val_spearman;
      res.best_epoch = epoch;
      best = theta;
    }
  }
  model.mlp.set_flat(best);
  return res;
}

std::string reward_serialize(const RewardModel& r) {
  std::string out;
  out += "target-mean " + fmt(r.target_mean) + "\n";
  out += "target-std " + fmt(r.target_std) + "\n";
  out += "norm-mean" + join(r.norm.mean) + "\n";
  out += "norm-scale" + join(r.norm.scale) + "\n";
  return out + mlp_serialize(r.mlp);
}

RewardModel reward_deserialize(const std::string& text) {
  RewardModel r;
  std::istringstream in(text);
  std::string line;
  auto read_vec = [](std::istringstream& ls) {
    std::vector<double> vals;
    std::string tok;
    while (ls >> tok) vals.push_back(parse_double(tok));
    return Vec(Eigen::Map<const Vec>(vals.data(), static_cast<Eigen::Index>(vals.size())));
  };
  bool have_mean = false, have_std = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key, tok;
    ls >> key;
    if (key == "target-mean" && ls >> tok) r.target_mean = parse_double(tok), have_mean = true;
    if (key == "target-std" && ls >> tok) r.target_std = parse_double(tok), have_std = true;
    if (key == "norm-mean") r.norm.mean = read_vec(ls);
    if (key == "norm-scale") r.norm.scale = read_vec(ls);
    if (key == "mlp-widths") break;
  }
  if (!have_mean || !have_std) throw Error(Error::Kind::kParse, "reward checkpoint lacks target constants");
  r.mlp = mlp_deserialize(text);
  if (r.norm.mean.size() != r.mlp.input_dim()) throw Error(Error::Kind::kParse, "reward checkpoint normalization mismatch");
  return r;
}

}  // namespace nrlab
