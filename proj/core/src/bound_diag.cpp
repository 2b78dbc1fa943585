#include "nrlab/bound_diag.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "nrlab/parallel.hpp"
#include "nrlab/random.hpp"

namespace nrlab {
namespace {

// Fix the sign so the largest-magnitude entry is positive.
Vec canonical_sign(Vec v) {
  Eigen::Index arg = 0;
  v.cwiseAbs().maxCoeff(&arg);
  if (v[arg] < 0.0) v = -v;
  return v;
}

}  // namespace

SvdInfo svd_min(const Mat& j) {
  if (j.rows() != j.cols()) throw Error(Error::Kind::kDimension, "svd_min expects a square matrix");
  Eigen::BDCSVD<Mat> svd(j, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Index last = j.cols() - 1;
  SvdInfo info;
  info.sigma_min = svd.singularValues()[last];
  info.w_right = canonical_sign(svd.matrixV().col(last));
  // Keep the pair consistent: J w_right = sigma w_left.
  Vec left = svd.matrixU().col(last);
  if ((j * info.w_right).dot(left) < 0.0) left = -left;
  info.w_left = left;
  return info;
}

Mat smallest_right_singular_vectors(const Mat& j, int k) {
  Eigen::BDCSVD<Mat> svd(j, Eigen::ComputeFullV);
  const Eigen::Index n = j.cols();
  Mat out(n, k);
  for (int c = 0; c < k; ++c) out.col(c) = canonical_sign(svd.matrixV().col(n - 1 - c));
  return out;
}

Vec phi_map(const Snapshot& s, const FactoredJacobian& fj, const Vec& v) {
  const Vec q = q_of_v(s, fj, v);
  const double norm = q.norm();
  if (!(norm >= kDegenerateQ)) {
    throw Error(Error::Kind::kDegenerateDirection, "degenerate direction: |Q(v)| below 1e-14");
  }
  return -q / norm;
}

LambdaResult lambda_from_terms(std::vector<double> terms) {
  LambdaResult res;
  const int count = static_cast<int>(terms.size());
  double weight = 0.5;
  double max_abs = 0.0;
  for (double t : terms) {
    res.value += weight * t;
    weight *= 0.5;
    max_abs = std::max(max_abs, std::abs(t));
  }
  const double tail_weight = std::ldexp(1.0, -count);
  if (count > 0) res.value += tail_weight * terms.back();
  res.truncation_j = count;
  res.tail_bound = tail_weight * max_abs;
  res.terms = std::move(terms);
  return res;
}

LambdaResult lambda_functional(const Snapshot& s, const FactoredJacobian& fj, const Vec& v, int j_max) {
  if (j_max < 1) throw Error(Error::Kind::kConfig, "lambda truncation must be at least 1");
  std::vector<double> terms;
  terms.reserve(j_max);
  Vec dir = v / v.norm();
  for (int j = 0; j < j_max; ++j) {
    const Vec q = q_of_v(s, fj, dir);
    const double norm = q.norm();
    if (!(norm >= kDegenerateQ)) {
      throw Error(Error::Kind::kDegenerateDirection,
                  "degenerate direction at orbit step " + std::to_string(j));
    }
    terms.push_back(std::log(norm));
    dir = -q / norm;
  }
  return lambda_from_terms(std::move(terms));
}

BoundResult nr_lower_bound(double rho, double tau, double lam) {
  if (!(tau > 0.0 && tau < rho && rho < 1.0)) {
    throw Error(Error::Kind::kConfig, "lower bound requires 0 < tau < rho < 1");
  }
  BoundResult res;
  res.denominator = std::log(1.0 / rho) - lam;
  if (res.denominator > 0.0) {
    res.bound = std::log2(std::log(1.0 / tau) / res.denominator) - 1.0;
  }
  return res;
}

double alpha_coeff(const Snapshot& s, const FullState& x_star, const Vec& w, const Vec& v) {
  return w.dot(hessian_contract(s, x_star, v));
}

std::vector<GreatCircleRow> great_circle_sweep(const LabeledSnapshot& ls, int n_theta, double rho,
                                               const NRConfig& cfg, int j_max) {
  const Snapshot& s = ls.snapshot;
  const FactoredJacobian fj(s, ls.solution);
  const Mat basis = smallest_right_singular_vectors(fj.matrix(), 2);
  const Vec u_star = pack(s, ls.solution);
  std::vector<GreatCircleRow> rows(n_theta);
  parallel_for(static_cast<std::size_t>(n_theta), [&](std::size_t i) {
    GreatCircleRow& row = rows[i];
    row.theta = 2.0 * std::numbers::pi * static_cast<double>(i) / n_theta;
    const Vec v = std::cos(row.theta) * basis.col(0) + std::sin(row.theta) * basis.col(1);
    try {
      row.lambda = lambda_functional(s, fj, v, j_max).value;
      row.bound = nr_lower_bound(rho, cfg.tau, *row.lambda).bound;
    } catch (const Error& e) {
      if (e.kind() != Error::Kind::kDegenerateDirection) throw;
    }
    const NRResult nr = newton_solve(s, unpack(s, u_star + rho * v), cfg);
    row.converged = nr.converged;
    row.actual_k = nr.converged ? nr.iterations : cfg.cap;
  });
  return rows;
}

std::vector<BoundSample> bound_validation_sweep(const std::vector<LabeledSnapshot>& snapshots,
                                                std::size_t n_samples, double rho_lo, double rho_hi,
                                                const NRConfig& cfg, std::uint64_t seed, int j_max) {
  if (snapshots.empty()) throw Error(Error::Kind::kConfig, "bound sweep needs at least one snapshot");
  std::vector<std::unique_ptr<FactoredJacobian>> factors(snapshots.size());
  parallel_for(snapshots.size(), [&](std::size_t i) {
    factors[i] = std::make_unique<FactoredJacobian>(snapshots[i].snapshot, snapshots[i].solution);
  });
  const Rng root(seed);
  std::vector<BoundSample> out(n_samples);
  parallel_for(n_samples, [&](std::size_t i) {
    Rng rng = root.split(i);
    BoundSample& rec = out[i];
    rec.index = i;
    rec.snapshot = rng.index(snapshots.size());
    const LabeledSnapshot& ls = snapshots[rec.snapshot];
    const Snapshot& s = ls.snapshot;
    rec.lambda = s.lambda;
    rec.sigma_min = ls.sigma_min;
    rec.v = rng.unit_vector(static_cast<Eigen::Index>(s.free_map.n_free));
    rec.rho = std::exp(rng.uniform(std::log(rho_lo), std::log(rho_hi)));
    try {
      rec.lambda_value = lambda_functional(s, *factors[rec.snapshot], rec.v, j_max).value;
      rec.bound = nr_lower_bound(rec.rho, cfg.tau, *rec.lambda_value).bound;
    } catch (const Error& e) {
      if (e.kind() != Error::Kind::kDegenerateDirection) throw;
    }
    rec.vacuous = !rec.bound.has_value();
    const NRResult nr = newton_solve(s, unpack(s, pack(s, ls.solution) + rec.rho * rec.v), cfg);
    rec.converged = nr.converged;
    rec.actual_k = nr.converged ? nr.iterations : cfg.cap;
  });
  return out;
}

std::vector<CorollaryRecord> corollary_sweep(const ContinuationPath& path, const std::vector<Vec>& directions,
                                             int j_max) {
  std::vector<CorollaryRecord> out(path.points.size());
  parallel_for(path.points.size(), [&](std::size_t i) {
    const PathPoint& pt = path.points[i];
    const Snapshot s = path.snapshot_at(i);
    const FactoredJacobian fj(s, pt.state);
    CorollaryRecord& rec = out[i];
    rec.lambda = pt.lambda;
    rec.sigma_min = pt.sigma_min;
    rec.log_inv_sigma = std::log(1.0 / pt.sigma_min);
    for (const Vec& d : directions) {
      try {
        rec.lambda_per_direction.push_back(lambda_functional(s, fj, d, j_max).value);
      } catch (const Error& e) {
        if (e.kind() != Error::Kind::kDegenerateDirection) throw;
        rec.lambda_per_direction.push_back(std::nullopt);
      }
    }
  });
  return out;
}

CorollaryFit fit_corollary_tail(const std::vector<CorollaryRecord>& records, double decades) {
  CorollaryFit fit;
  if (records.empty()) return fit;
  const double sigma_end = records.back().sigma_min;
  const double limit = sigma_end * std::pow(10.0, decades);
  std::vector<const CorollaryRecord*> tail;
  for (const auto& r : records) {
    if (r.sigma_min <= limit) tail.push_back(&r);
  }
  fit.points = tail.size();
  if (tail.size() < 2) return fit;
  double lo = tail.front()->log_inv_sigma, hi = lo;
  for (auto* r : tail) lo = std::min(lo, r->log_inv_sigma), hi = std::max(hi, r->log_inv_sigma);
  fit.log_sigma_span = hi - lo;

  const std::size_t nd = records.front().lambda_per_direction.size();
  for (std::size_t d = 0; d < nd; ++d) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0, cnt = 0;
    for (auto* r : tail) {
      if (!r->lambda_per_direction[d]) continue;
      const double x = r->log_inv_sigma, y = *r->lambda_per_direction[d];
      sx += x, sy += y, sxx += x * x, sxy += x * y, cnt += 1;
    }
    const double denom = cnt * sxx - sx * sx;
    const double slope = denom != 0.0 ? (cnt * sxy - sx * sy) / denom : std::nan("");
    fit.slopes.push_back(slope);
    fit.intercepts.push_back(cnt > 0 ? (sy - slope * sx) / cnt : std::nan(""));
  }
  for (std::size_t a = 0; a < nd; ++a) {
    for (std::size_t b = a + 1; b < nd; ++b) {
      double mn = INFINITY, mx = -INFINITY;
      for (auto* r : tail) {
        if (!r->lambda_per_direction[a] || !r->lambda_per_direction[b]) continue;
        const double off = *r->lambda_per_direction[a] - *r->lambda_per_direction[b];
        mn = std::min(mn, off), mx = std::max(mx, off);
      }
      if (mx >= mn) fit.max_pair_offset_variation = std::max(fit.max_pair_offset_variation, mx - mn);
    }
  }
  return fit;
}

}  // namespace nrlab
