#include "nrlab/hessian_ops.hpp"

#include <cmath>

namespace nrlab {

Vec hessian_contract(const Snapshot& s, const FullState& x, const Vec& v) {
  const IndexMap& m = s.free_map;
  if (static_cast<std::size_t>(v.size()) != m.n_free) {
    throw Error(Error::Kind::kDimension, "direction length does not match free dimension");
  }
  const Grid& grid = *s.grid;
  const Mat& G = grid.y.g;
  const Mat& B = grid.y.b;
  const Eigen::Index n = static_cast<Eigen::Index>(s.n());

  // Direction in full coordinates; pinned entries stay zero.
  Vec dth = Vec::Zero(n), dv = Vec::Zero(n);
  std::size_t k = 0;
  for (int i : m.free_theta) dth[i] = v[k++];
  for (int i : m.free_v) dv[i] = v[k++];

  auto second = [&](Eigen::Index i, double& d2p, double& d2q) {
    const double vi = x.v[i], dvi = dv[i];
    d2p = 2.0 * dvi * dvi * G(i, i);
    d2q = -2.0 * dvi * dvi * B(i, i);
    for (int jj : grid.neighbors[i]) {
      const Eigen::Index j = jj;
      if (j == i) continue;
      const double vj = x.v[j], dvj = dv[j];
      const double th = x.theta[i] - x.theta[j];
      const double dt = dth[i] - dth[j];
      const double c = std::cos(th), sn = std::sin(th);
      const double f = G(i, j) * c + B(i, j) * sn;
      const double h = G(i, j) * sn - B(i, j) * c;
      const double cross = 2.0 * (dvi * vj + vi * dvj) * dt;
      const double vv = 2.0 * dvi * dvj;
      const double tt = vi * vj * dt * dt;
      // f' = -h, f'' = -f; h' = f, h'' = -h.
      d2p += vv * f - cross * h - tt * f;
      d2q += vv * h + cross * f - tt * h;
    }
  };

  Vec out(m.n_free);
  k = 0;
  double d2p = 0.0, d2q = 0.0;
  for (int i : m.free_theta) {
    second(i, d2p, d2q);
    out[k++] = -d2p;
  }
  for (int i : m.free_v) {
    second(i, d2p, d2q);
    out[k++] = -d2q;
  }
  return out;
}

Vec hessian_bilinear(const Snapshot& s, const FullState& x, const Vec& u, const Vec& v) {
  return 0.25 * (hessian_contract(s, x, u + v) - hessian_contract(s, x, u - v));
}

FactoredJacobian::FactoredJacobian(const Snapshot& s, const FullState& x_star)
    : x_star_(x_star), lu_(jacobian(s, x_star)) {}

Vec FactoredJacobian::solve(const Vec& b) const { return lu_.solve(b); }

Vec q_of_v(const Snapshot& s, const FactoredJacobian& fj, const Vec& v) {
  if (std::abs(v.norm() - 1.0) > 1e-10) {
    throw Error(Error::Kind::kDimension, "q_of_v expects a unit direction");
  }
  return 0.5 * fj.solve(hessian_contract(s, fj.x_star(), v));
}

}  // namespace nrlab
