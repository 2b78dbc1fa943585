#include "nrlab/nr_solver.hpp"

#include <atomic>
#include <cmath>
#include <limits>

namespace nrlab {
namespace {

std::atomic<std::uint64_t> g_nr_calls{0};

// Dense 2N x 2N Jacobian of the injections with respect to [theta; v].
Mat injection_jacobian_full(const Snapshot& s, const FullState& x) {
  const Grid& grid = *s.grid;
  const Mat& G = grid.y.g;
  const Mat& B = grid.y.b;
  const Eigen::Index n = static_cast<Eigen::Index>(s.n());
  Mat jac = Mat::Zero(2 * n, 2 * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double vi = x.v[i];
    double dp_dti = 0.0, dq_dti = 0.0, dp_dvi = 2.0 * G(i, i) * vi, dq_dvi = -2.0 * B(i, i) * vi;
    for (int jj : grid.neighbors[i]) {
      const Eigen::Index j = jj;
      if (j == i) continue;
      const double vj = x.v[j];
      const double th = x.theta[i] - x.theta[j];
      const double c = std::cos(th), sn = std::sin(th);
      const double f = G(i, j) * c + B(i, j) * sn;   // P coupling
      const double h = G(i, j) * sn - B(i, j) * c;   // Q coupling
      jac(i, j) = vi * vj * h;
      jac(i, n + j) = vi * f;
      jac(n + i, j) = -vi * vj * f;
      jac(n + i, n + j) = vi * h;
      dp_dti += -vi * vj * h;
      dq_dti += vi * vj * f;
      dp_dvi += vj * f;
      dq_dvi += vj * h;
    }
    jac(i, i) = dp_dti;
    jac(i, n + i) = dp_dvi;
    jac(n + i, i) = dq_dti;
    jac(n + i, n + i) = dq_dvi;
  }
  return jac;
}

bool all_finite(const FullState& x) { return x.theta.allFinite() && x.v.allFinite(); }

}  // namespace

void NRConfig::validate() const {
  if (!(tau > 0.0)) throw Error(Error::Kind::kConfig, "NR tolerance tau must be positive");
  if (cap < 1) throw Error(Error::Kind::kConfig, "NR iteration cap must be at least 1");
}

const char* to_string(NRFailure f) {
  switch (f) {
    case NRFailure::kNone: return "none";
    case NRFailure::kCapExceeded: return "cap_exceeded";
    case NRFailure::kSingularJacobian: return "singular_jacobian";
    case NRFailure::kNonFinite: return "non_finite";
  }
  return "unknown";
}

Injections injections(const Snapshot& s, const FullState& x) {
  const Grid& grid = *s.grid;
  const Mat& G = grid.y.g;
  const Mat& B = grid.y.b;
  const Eigen::Index n = static_cast<Eigen::Index>(s.n());
  Injections out{Vec::Zero(n), Vec::Zero(n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    double p = 0.0, q = 0.0;
    for (int jj : grid.neighbors[i]) {
      const Eigen::Index j = jj;
      const double th = x.theta[i] - x.theta[j];
      const double c = std::cos(th), sn = std::sin(th);
      p += x.v[j] * (G(i, j) * c + B(i, j) * sn);
      q += x.v[j] * (G(i, j) * sn - B(i, j) * c);
    }
    out.p[i] = x.v[i] * p;
    out.q[i] = x.v[i] * q;
  }
  return out;
}

Injections bus_mismatch(const Snapshot& s, const FullState& x) {
  Injections inj = injections(s, x);
  const Network& net = s.net();
  Injections d{s.p_spec - inj.p, s.q_spec - inj.q};
  for (std::size_t i = 0; i < net.n(); ++i) {
    const BusKind k = net.buses[i].kind;
    if (k == BusKind::kSlack) {
      d.p[i] = 0.0;
      d.q[i] = 0.0;
    } else if (k == BusKind::kPV) {
      d.q[i] = 0.0;
    }
  }
  return d;
}

Vec residual(const Snapshot& s, const FullState& x) {
  const Injections inj = injections(s, x);
  const IndexMap& m = s.free_map;
  Vec g(m.n_free);
  std::size_t k = 0;
  for (int i : m.free_theta) g[k++] = s.p_spec[i] - inj.p[i];
  for (int i : m.free_v) g[k++] = s.q_spec[i] - inj.q[i];
  return g;
}

Mat jacobian(const Snapshot& s, const FullState& x) {
  const Mat full = injection_jacobian_full(s, x);
  const IndexMap& m = s.free_map;
  const Eigen::Index n = static_cast<Eigen::Index>(s.n());
  std::vector<Eigen::Index> rows, cols;
  for (int i : m.free_theta) rows.push_back(i), cols.push_back(i);
  for (int i : m.free_v) rows.push_back(n + i), cols.push_back(n + i);
  const Eigen::Index d = static_cast<Eigen::Index>(m.n_free);
  Mat j(d, d);
  for (Eigen::Index r = 0; r < d; ++r) {
    for (Eigen::Index c = 0; c < d; ++c) j(r, c) = -full(rows[r], cols[c]);
  }
  return j;
}

Vec injection_vjp(const Snapshot& s, const FullState& x, const Vec& wp, const Vec& wq) {
  const Grid& grid = *s.grid;
  const Mat& G = grid.y.g;
  const Mat& B = grid.y.b;
  const Eigen::Index n = static_cast<Eigen::Index>(s.n());
  Vec grad = Vec::Zero(2 * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double a = wp[i], b = wq[i];
    if (a == 0.0 && b == 0.0) continue;
    const double vi = x.v[i];
    grad[n + i] += a * 2.0 * G(i, i) * vi - b * 2.0 * B(i, i) * vi;
    for (int jj : grid.neighbors[i]) {
      const Eigen::Index j = jj;
      if (j == i) continue;
      const double vj = x.v[j];
      const double th = x.theta[i] - x.theta[j];
      const double c = std::cos(th), sn = std::sin(th);
      const double f = G(i, j) * c + B(i, j) * sn;
      const double h = G(i, j) * sn - B(i, j) * c;
      // dP_i/dtheta_i = -vi vj h, dP_i/dtheta_j = vi vj h; dQ_i: -/+ vi vj f.
      const double dth = a * vi * vj * h - b * vi * vj * f;
      grad[j] += dth;
      grad[i] -= dth;
      grad[n + j] += a * vi * f + b * vi * h;
      grad[n + i] += a * vj * f + b * vj * h;
    }
  }
  return grad;
}

LuSolver::LuSolver(const Mat& a) : a_(a), lu_(a) {
  const Vec pivots = lu_.matrixLU().diagonal().cwiseAbs();
  const double largest = pivots.size() ? pivots.maxCoeff() : 0.0;
  singular_ = !(largest > 0.0) || !(pivots.minCoeff() >= 1e-12 * largest) || !a.allFinite();
}

Vec LuSolver::solve(const Vec& b) const {
  if (singular_) throw Error(Error::Kind::kSingular, "singular matrix in LU solve");
  return lu_.solve(b);
}

NRResult newton_solve(const Snapshot& s, const FullState& x0, const NRConfig& cfg) {
  cfg.validate();
  g_nr_calls.fetch_add(1, std::memory_order_relaxed);
  NRResult res;
  FullState x = clamp_pinned(s, x0);
  Vec u = pack(s, x);
  res.failure = NRFailure::kCapExceeded;
  for (int k = 1; k <= cfg.cap; ++k) {
    const Vec g = residual(s, x);
    LuSolver lu(jacobian(s, x));
    if (lu.singular() || !g.allFinite()) {
      res.failure = lu.singular() ? NRFailure::kSingularJacobian : NRFailure::kNonFinite;
      break;
    }
    const Vec step = -lu.solve(g);
    u += step;
    x = unpack(s, u);
    const double norm = step.norm();
    res.step_norms.push_back(norm);
    if (!std::isfinite(norm) || !all_finite(x)) {
      res.failure = NRFailure::kNonFinite;
      break;
    }
    if (norm < cfg.tau && (cfg.residual_tol <= 0.0 || residual(s, x).norm() < cfg.residual_tol)) {
      res.failure = NRFailure::kNone;
      break;
    }
  }
  res.converged = res.failure == NRFailure::kNone;
  res.iterations = static_cast<int>(res.step_norms.size());
  res.final_state = x;
  res.residual_norm = all_finite(x) ? residual(s, x).norm() : std::numeric_limits<double>::infinity();
  return res;
}

FullState polish_solution(const Snapshot& s, const FullState& x_in, int max_steps) {
  FullState x = clamp_pinned(s, x_in);
  double best = residual(s, x).norm();
  for (int k = 0; k < max_steps && best > 0.0; ++k) {
    LuSolver lu(jacobian(s, x));
    if (lu.singular()) break;
    Vec u = pack(s, x) - lu.solve(residual(s, x));
    FullState next = unpack(s, u);
    const double r = residual(s, next).norm();
    if (!(r < best)) break;
    best = r;
    x = std::move(next);
  }
  return x;
}

FullState flat_start(const Snapshot& s) {
  FullState x{Vec::Zero(s.n()), Vec::Ones(s.n())};
  return clamp_pinned(s, std::move(x));
}

FullState dc_start(const Snapshot& s) {
  const Network& net = s.net();
  const std::size_t n = net.n();
  const std::size_t slack = net.slack_index();
  Mat bp = Mat::Zero(n, n);
  for (const Branch& br : net.branches) {
    if (!br.in_service || br.x == 0.0) continue;
    const std::size_t f = net.index_of(br.from), t = net.index_of(br.to);
    const double b = 1.0 / br.x;
    bp(f, f) += b;
    bp(t, t) += b;
    bp(f, t) -= b;
    bp(t, f) -= b;
  }
  std::vector<Eigen::Index> keep;
  for (std::size_t i = 0; i < n; ++i) {
    if (i != slack) keep.push_back(static_cast<Eigen::Index>(i));
  }
  const Eigen::Index m = static_cast<Eigen::Index>(keep.size());
  Mat reduced(m, m);
  Vec rhs(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    rhs[r] = s.p_spec[keep[r]];
    for (Eigen::Index c = 0; c < m; ++c) reduced(r, c) = bp(keep[r], keep[c]);
  }
  FullState x{Vec::Zero(n), Vec::Ones(n)};
  const double theta_ref = net.buses[slack].theta_set;
  if (m > 0) {
    LuSolver lu(reduced);
    if (lu.singular()) throw Error(Error::Kind::kSingular, "DC susceptance matrix is singular (disconnected network)");
    const Vec theta = lu.solve(rhs);
    for (Eigen::Index r = 0; r < m; ++r) x.theta[keep[r]] = theta_ref + theta[r];
  }
  return clamp_pinned(s, std::move(x));
}

double pbl(const Snapshot& s, const FullState& x, double zeta) {
  const Injections d = bus_mismatch(s, x);
  return (d.p.array().square() + d.q.array().square() + zeta).sqrt().mean();
}

Vec pbl_grad(const Snapshot& s, const FullState& x, double zeta) {
  const Injections d = bus_mismatch(s, x);
  const double n = static_cast<double>(s.n());
  const Eigen::ArrayXd root = (d.p.array().square() + d.q.array().square() + zeta).sqrt();
  // dP = spec - P, so the injection weights carry a minus sign.
  const Vec wp = -(d.p.array() / (n * root)).matrix();
  const Vec wq = -(d.q.array() / (n * root)).matrix();
  return injection_vjp(s, x, wp, wq);
}

std::uint64_t nr_call_count() { return g_nr_calls.load(std::memory_order_relaxed); }

}  // namespace nrlab
