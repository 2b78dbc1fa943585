#include "nrlab/continuation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "nrlab/io.hpp"
#include "nrlab/parallel.hpp"
#include "nrlab/random.hpp"

namespace nrlab {
namespace {

constexpr double kLabelResidual = 1e-8;

// Solve from x0 and polish; empty when NR fails or the label is inaccurate.
std::optional<FullState> solve_label(const Snapshot& s, const FullState& x0, const NRConfig& cfg) {
  const NRResult r = newton_solve(s, x0, cfg);
  if (!r.converged) return std::nullopt;
  FullState x = polish_solution(s, r.final_state);
  if (!(residual(s, x).norm() < kLabelResidual)) return std::nullopt;
  return x;
}

void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);
}

std::string sample_id(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%05zu", prefix, i);
  return buf;
}

std::string join_vec(const Vec& v) {
  std::string out;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) out += ' ';
    out += fmt(v[i]);
  }
  return out;
}

Vec parse_vec(const std::string& text) {
  std::istringstream in(text);
  std::vector<double> vals;
  std::string tok;
  while (in >> tok) vals.push_back(parse_double(tok));
  return Eigen::Map<const Vec>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

std::string join_idx(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + std::to_string(v[i]);
  return out;
}

std::vector<std::size_t> parse_idx(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::size_t> out;
  std::size_t v;
  while (in >> v) out.push_back(v);
  return out;
}

std::string render_sample(const LabeledSnapshot& ls) {
  std::string out;
  out += "id " + ls.id + "\n";
  out += "lambda " + fmt(ls.snapshot.lambda) + "\n";
  out += "sigma_min " + fmt(ls.sigma_min) + "\n";
  out += "perturb " + join_vec(ls.snapshot.perturb) + "\n";
  out += "theta " + join_vec(ls.solution.theta) + "\n";
  out += "v " + join_vec(ls.solution.v) + "\n";
  return out;
}

LabeledSnapshot parse_sample(std::shared_ptr<const Grid> grid, const std::string& text) {
  std::map<std::string, std::string> fields;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    const auto sp = line.find(' ');
    fields[line.substr(0, sp)] = sp == std::string::npos ? "" : line.substr(sp + 1);
  }
  for (const char* key : {"id", "lambda", "sigma_min", "perturb", "theta", "v"}) {
    if (!fields.count(key)) throw Error(Error::Kind::kParse, std::string("pool sample missing field ") + key);
  }
  LabeledSnapshot ls;
  ls.id = fields["id"];
  ls.snapshot = make_snapshot(grid, parse_double(fields["lambda"]), parse_vec(fields["perturb"]));
  ls.sigma_min = parse_double(fields["sigma_min"]);
  ls.solution = {parse_vec(fields["theta"]), parse_vec(fields["v"])};
  if (static_cast<std::size_t>(ls.solution.theta.size()) != ls.snapshot.n() ||
      static_cast<std::size_t>(ls.solution.v.size()) != ls.snapshot.n()) {
    throw Error(Error::Kind::kParse, "pool sample " + ls.id + " has the wrong state length");
  }
  return ls;
}

}  // namespace

double jacobian_sigma_min(const Snapshot& s, const FullState& x) {
  const Mat j = jacobian(s, x);
  Eigen::BDCSVD<Mat> svd(j);
  return svd.singularValues()[j.cols() - 1];
}

Snapshot ContinuationPath::snapshot_at(std::size_t i) const { return make_snapshot(grid, points.at(i).lambda, perturb); }

LabeledSnapshot ContinuationPath::labeled(std::size_t i) const {
  return {"path-" + std::to_string(i), snapshot_at(i), points.at(i).state, points.at(i).sigma_min};
}

ContinuationPath trace_lambda(std::shared_ptr<const Grid> grid, const ContinuationConfig& cfg,
                              const std::optional<Vec>& perturb) {
  if (!(cfg.lambda0 > 0.0 && cfg.lambda_step > 0.0 && cfg.min_step > 0.0)) {
    throw Error(Error::Kind::kConfig, "continuation needs positive lambda0, step and min_step");
  }
  ContinuationPath path;
  path.grid = grid;
  path.perturb = perturb ? *perturb : Vec::Ones(grid->net.n());

  auto accept = [&](double lambda, const FullState& x) {
    const Snapshot s = make_snapshot(grid, lambda, path.perturb);
    path.points.push_back({lambda, x, jacobian_sigma_min(s, x), x.v.minCoeff()});
    path.lambda_end = lambda;
  };

  const Snapshot s0 = make_snapshot(grid, cfg.lambda0, path.perturb);
  const auto x0 = solve_label(s0, flat_start(s0), cfg.nr);
  if (!x0) throw Error(Error::Kind::kNumerical, "NR does not converge at the initial loading factor");
  accept(cfg.lambda0, *x0);

  double step = cfg.lambda_step;
  while (step >= cfg.min_step) {
    const double lambda = path.lambda_end + step;
    if (lambda > cfg.lambda_cap) break;
    const Snapshot s = make_snapshot(grid, lambda, path.perturb);
    const auto x = solve_label(s, path.points.back().state, cfg.nr);
    if (x) {
      accept(lambda, *x);
    } else {
      step *= 0.5;
    }
  }
  return path;
}

std::vector<LabeledSnapshot> sample_stable(std::shared_ptr<const Grid> grid, const StableSampling& cfg) {
  const std::size_t n = grid->net.n();
  const std::size_t budget = std::max<std::size_t>(cfg.count * cfg.max_attempts_factor, cfg.count);
  const Rng root(cfg.seed);
  std::vector<LabeledSnapshot> out;
  std::size_t next = 0;
  while (out.size() < cfg.count) {
    if (next >= budget) throw Error(Error::Kind::kNumerical, "stable sampling exhausted its rejection budget");
    const std::size_t batch = std::min(budget - next, cfg.count - out.size());
    std::vector<std::optional<LabeledSnapshot>> slots(batch);
    parallel_for(batch, [&](std::size_t b) {
      Rng rng = root.split(next + b);
      const std::uint64_t pseed = rng.next_u64();
      const double lam = cfg.lambda_hi > cfg.lambda ? rng.uniform(cfg.lambda, cfg.lambda_hi) : cfg.lambda;
      const Snapshot s = make_snapshot(grid, lam, draw_perturbation(n, cfg.spread, pseed));
      if (auto x = solve_label(s, flat_start(s), cfg.nr)) {
        slots[b] = LabeledSnapshot{"", s, *x, jacobian_sigma_min(s, *x)};
      }
    });
    next += batch;
    for (auto& slot : slots) {
      if (slot && out.size() < cfg.count) {
        slot->id = sample_id("stable", out.size());
        out.push_back(std::move(*slot));
      }
    }
  }
  return out;
}

std::vector<LabeledSnapshot> sample_collapse(std::shared_ptr<const Grid> grid, const CollapseSampling& cfg,
                                             CollapseReport* report) {
  if (!(cfg.sigma_lo > 0.0 && cfg.sigma_lo < cfg.sigma_hi)) {
    throw Error(Error::Kind::kConfig, "collapse band needs 0 < sigma_lo < sigma_hi");
  }
  const std::size_t n = grid->net.n();
  const std::size_t budget = std::max<std::size_t>(cfg.count * cfg.max_attempts_factor, cfg.count);
  const Rng root(cfg.seed);
  std::vector<LabeledSnapshot> out;
  CollapseReport rep;
  std::size_t next = 0;
  while (out.size() < cfg.count) {
    if (next >= budget) {
      if (report) *report = rep;
      throw Error(Error::Kind::kNumerical, "collapse sampling exhausted its direction budget");
    }
    const std::size_t batch = std::min(budget - next, cfg.count - out.size());
    std::vector<std::optional<LabeledSnapshot>> slots(batch);
    parallel_for(batch, [&](std::size_t b) {
      Rng rng = root.split(next + b);
      const Vec perturb = draw_perturbation(n, cfg.spread, rng.next_u64());
      ContinuationPath path;
      try {
        path = trace_lambda(grid, cfg.continuation, perturb);
      } catch (const Error& e) {
        if (e.kind() != Error::Kind::kNumerical) throw;
        return;
      }
      std::vector<std::size_t> in_band;
      for (std::size_t i = 0; i < path.points.size(); ++i) {
        const double sg = path.points[i].sigma_min;
        if (sg >= cfg.sigma_lo && sg <= cfg.sigma_hi) in_band.push_back(i);
      }
      if (in_band.empty()) return;
      slots[b] = path.labeled(in_band[rng.index(in_band.size())]);
    });
    rep.attempts += batch;
    next += batch;
    for (auto& slot : slots) {
      if (!slot) {
        ++rep.skipped;
      } else if (out.size() < cfg.count) {
        slot->id = sample_id("collapse", out.size());
        out.push_back(std::move(*slot));
      }
    }
  }
  if (report) *report = rep;
  return out;
}

void assign_splits(SnapshotPool& pool, double stable_val_fraction, double holdout_val_fraction,
                   std::size_t test_count) {
  if (test_count > pool.collapse.size()) throw Error(Error::Kind::kConfig, "test split larger than collapse pool");
  auto take_val = [](std::vector<std::size_t> idx, double frac, std::vector<std::size_t>& train,
                     std::vector<std::size_t>& val) {
    const std::size_t nv = static_cast<std::size_t>(std::llround(frac * static_cast<double>(idx.size())));
    val.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(nv, idx.size())));
    train.assign(idx.begin() + static_cast<std::ptrdiff_t>(val.size()), idx.end());
    std::sort(val.begin(), val.end());
    std::sort(train.begin(), train.end());
  };

  std::vector<std::size_t> stable(pool.stable.size());
  for (std::size_t i = 0; i < stable.size(); ++i) stable[i] = i;
  Rng split_rng(pool.split_seed);
  shuffle_indices(stable, split_rng);
  take_val(stable, stable_val_fraction, pool.stable_train, pool.stable_val);

  std::vector<std::size_t> collapse(pool.collapse.size());
  for (std::size_t i = 0; i < collapse.size(); ++i) collapse[i] = i;
  Rng test_rng(pool.test_seed);
  shuffle_indices(collapse, test_rng);
  pool.holdout_test.assign(collapse.begin(), collapse.begin() + static_cast<std::ptrdiff_t>(test_count));
  std::sort(pool.holdout_test.begin(), pool.holdout_test.end());
  std::vector<std::size_t> rest(collapse.begin() + static_cast<std::ptrdiff_t>(test_count), collapse.end());
  Rng rest_rng = split_rng.split(1);
  shuffle_indices(rest, rest_rng);
  take_val(rest, holdout_val_fraction, pool.holdout_train, pool.holdout_val);
}

void save_pool(const SnapshotPool& pool, const std::string& dir, const std::string& manifest_header) {
  ensure_dir(dir);
  std::string manifest = manifest_header;
  manifest += "grid " + pool.grid_name + "\n";
  manifest += "pool_seed " + std::to_string(pool.pool_seed) + "\n";
  manifest += "split_seed " + std::to_string(pool.split_seed) + "\n";
  manifest += "test_seed " + std::to_string(pool.test_seed) + "\n";
  manifest += "stable_count " + std::to_string(pool.stable.size()) + "\n";
  manifest += "collapse_count " + std::to_string(pool.collapse.size()) + "\n";
  manifest += "stable_train " + join_idx(pool.stable_train) + "\n";
  manifest += "stable_val " + join_idx(pool.stable_val) + "\n";
  manifest += "holdout_train " + join_idx(pool.holdout_train) + "\n";
  manifest += "holdout_val " + join_idx(pool.holdout_val) + "\n";
  manifest += "holdout_test " + join_idx(pool.holdout_test) + "\n";
  for (const auto* list : {&pool.stable, &pool.collapse}) {
    for (const auto& ls : *list) write_text(dir + "/" + ls.id + ".txt", manifest_header + render_sample(ls));
  }
  write_text(dir + "/manifest.txt", manifest);
}

SnapshotPool load_pool(std::shared_ptr<const Grid> grid, const std::string& dir) {
  const std::string path = dir + "/manifest.txt";
  if (!file_exists(path)) throw Error(Error::Kind::kIo, "pool manifest not found in " + dir);
  std::map<std::string, std::string> fields;
  std::istringstream in(read_text(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    const auto sp = line.find(' ');
    fields[line.substr(0, sp)] = sp == std::string::npos ? "" : line.substr(sp + 1);
  }
  SnapshotPool pool;
  pool.grid_name = fields["grid"];
  pool.pool_seed = std::stoull(fields.at("pool_seed"));
  pool.split_seed = std::stoull(fields.at("split_seed"));
  pool.test_seed = std::stoull(fields.at("test_seed"));
  const std::size_t ns = std::stoull(fields.at("stable_count"));
  const std::size_t nc = std::stoull(fields.at("collapse_count"));
  for (std::size_t i = 0; i < ns; ++i) {
    pool.stable.push_back(parse_sample(grid, read_text(dir + "/" + sample_id("stable", i) + ".txt")));
  }
  for (std::size_t i = 0; i < nc; ++i) {
    pool.collapse.push_back(parse_sample(grid, read_text(dir + "/" + sample_id("collapse", i) + ".txt")));
  }
  pool.stable_train = parse_idx(fields["stable_train"]);
  pool.stable_val = parse_idx(fields["stable_val"]);
  pool.holdout_train = parse_idx(fields["holdout_train"]);
  pool.holdout_val = parse_idx(fields["holdout_val"]);
  pool.holdout_test = parse_idx(fields["holdout_test"]);
  return pool;
}

}  // namespace nrlab
