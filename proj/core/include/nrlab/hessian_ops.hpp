#pragma once

#include <optional>

#include "nrlab/nr_solver.hpp"

namespace nrlab {

// Second directional derivative H[v, v] of the reduced residual at x along a
// reduced direction v. Matrix-free: loops over buses and their neighbors.
Vec hessian_contract(const Snapshot& s, const FullState& x, const Vec& v);

// Symmetric bilinear form H[u, v] recovered by polarization.
Vec hessian_bilinear(const Snapshot& s, const FullState& x, const Vec& u, const Vec& v);

// LU factors of J(x*) reused across many solves.
class FactoredJacobian {
 public:
  FactoredJacobian(const Snapshot& s, const FullState& x_star);

  const FullState& x_star() const { return x_star_; }
  const Mat& matrix() const { return lu_.matrix(); }
  Vec solve(const Vec& b) const;
  bool singular() const { return lu_.singular(); }

  std::optional<double> sigma_min_cache;

 private:
  FullState x_star_;
  LuSolver lu_;
};

// Q(v) = 1/2 J(x*)^{-1} H[v, v]; v must be a unit vector.
Vec q_of_v(const Snapshot& s, const FactoredJacobian& fj, const Vec& v);

}  // namespace nrlab
