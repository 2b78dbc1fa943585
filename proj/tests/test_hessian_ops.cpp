#include <doctest.h>

#include "nrlab/hessian_ops.hpp"
#include "support.hpp"

using namespace nrlab;
using namespace nrlab::test;

TEST_CASE("hessian_contract basic algebra") {
  const auto g = grid("case14");
  const Snapshot s = make_snapshot(g, 1.0);
  Rng rng(21);
  const FullState x = jitter(s, solve_nominal(s), 0.05, rng);
  const Eigen::Index n = static_cast<Eigen::Index>(s.free_map.n_free);
  CHECK(hessian_contract(s, x, Vec::Zero(n)).norm() == 0.0);
  const Vec v = rng.normal_vec(n);
  const Vec h1 = hessian_contract(s, x, v);
  CHECK((hessian_contract(s, x, 2.0 * v) - 4.0 * h1).norm() <= 1e-12 * h1.norm());
  CHECK((hessian_contract(s, x, -v) - h1).norm() <= 1e-12 * h1.norm());

  // Polarization: H[u+v,u+v] - H[u,u] - H[v,v] = 2 H[u,v].
  const Vec u = rng.normal_vec(n);
  const Vec lhs = hessian_contract(s, x, u + v) - hessian_contract(s, x, u) - h1;
  CHECK((lhs - 2.0 * hessian_bilinear(s, x, u, v)).norm() <= 1e-10 * lhs.norm());
}

TEST_CASE("hessian_contract matches second-order finite differences") {
  for (const char* name : {"case3", "case14", "case118"}) {
    const auto g = grid(name);
    const Snapshot s = make_snapshot(g, 1.0);
    const FullState xs = solve_nominal(s);
    Rng rng(23);
    for (int t = 0; t < 5; ++t) {
      const FullState x = jitter(s, xs, 0.05, rng);
      const Vec v = rng.unit_vector(static_cast<Eigen::Index>(s.free_map.n_free));
      const double h = 1e-4;
      const Vec u = pack(s, x);
      const Vec fd = (residual(s, unpack(s, u + h * v)) - 2.0 * residual(s, x) + residual(s, unpack(s, u - h * v))) /
                     (h * h);
      const Vec an = hessian_contract(s, x, v);
      CHECK((an - fd).norm() / an.norm() < 1e-4);
    }
  }
}

TEST_CASE("q_of_v is even and bounded away from zero on a stable snapshot") {
  const auto g = grid("case14");
  const Snapshot s = make_snapshot(g, 1.0);
  const FactoredJacobian fj(s, solve_nominal(s));
  Rng rng(29);
  const Eigen::Index n = static_cast<Eigen::Index>(s.free_map.n_free);
  double q_min = 1e300;
  for (int t = 0; t < 1000; ++t) {
    const Vec v = rng.unit_vector(n);
    const Vec q = q_of_v(s, fj, v);
    q_min = std::min(q_min, q.norm());
    if (t < 10) CHECK((q_of_v(s, fj, -v) - q).norm() <= 1e-12 * q.norm());
  }
  CHECK(q_min > 0.0);
  CHECK_THROWS_AS(q_of_v(s, fj, 2.0 * rng.unit_vector(n)), Error);
}

TEST_CASE("one Newton step from x* + rho v follows the quadratic expansion") {
  // Ratio of the remainder after the quadratic term to rho^3 stays bounded.
  const auto g = grid("case14");
  const Snapshot s = make_snapshot(g, 1.0);
  const FullState xs = polish_solution(s, solve_nominal(s));
  const FactoredJacobian fj(s, xs);
  Rng rng(31);
  const Vec us = pack(s, xs);
  for (int t = 0; t < 5; ++t) {
    const Vec v = rng.unit_vector(static_cast<Eigen::Index>(s.free_map.n_free));
    const Vec q = q_of_v(s, fj, v);
    std::vector<double> ratios;
    for (double rho : {1e-3, 5e-4, 2.5e-4}) {
      const FullState x0 = unpack(s, us + rho * v);
      const Vec step = LuSolver(jacobian(s, x0)).solve(residual(s, x0));
      const Vec e1 = pack(s, x0) - step - us;
      ratios.push_back((e1 - q * rho * rho).norm() / (rho * rho * rho));
    }
    CHECK(ratios[1] / ratios[0] < 2.0);
    CHECK(ratios[0] / ratios[1] < 2.0);
    CHECK(ratios[2] / ratios[1] < 2.0);
    CHECK(ratios[1] / ratios[2] < 2.0);
  }
}
