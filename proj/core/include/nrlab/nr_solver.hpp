#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "nrlab/grid_model.hpp"

namespace nrlab {

struct NRConfig {
  double tau = 1e-6;  // step-norm tolerance
  int cap = 1000;
  // When positive, termination additionally requires the reduced residual
  // norm to fall below this value. Disabled by default.
  double residual_tol = 0.0;

  void validate() const;
};

enum class NRFailure { kNone, kCapExceeded, kSingularJacobian, kNonFinite };

const char* to_string(NRFailure f);

struct NRResult {
  bool converged = false;
  int iterations = 0;
  FullState final_state;
  std::vector<double> step_norms;
  double residual_norm = 0.0;
  NRFailure failure = NRFailure::kNone;
};

// Injections P_i(x), Q_i(x) at every bus.
struct Injections {
  Vec p;
  Vec q;
};
Injections injections(const Snapshot& s, const FullState& x);

// Per-bus mismatches over all N buses. Entries whose injection is not
// specified by the bus kind (slack P and Q, PV Q) are zero.
Injections bus_mismatch(const Snapshot& s, const FullState& x);

// Reduced mismatch: dP at free-angle buses then dQ at free-magnitude buses.
Vec residual(const Snapshot& s, const FullState& x);

// d residual / d (free angles, free magnitudes).
Mat jacobian(const Snapshot& s, const FullState& x);

// Full-space vector-Jacobian product of the injections:
//   sum_i wp_i dP_i/dx + wq_i dQ_i/dx, as a stacked [theta; v] gradient.
Vec injection_vjp(const Snapshot& s, const FullState& x, const Vec& wp, const Vec& wq);

// Dense LU with partial pivoting; singular when a pivot falls below
// 1e-12 of the largest pivot magnitude.
class LuSolver {
 public:
  explicit LuSolver(const Mat& a);
  bool singular() const { return singular_; }
  Vec solve(const Vec& b) const;
  const Mat& matrix() const { return a_; }

 private:
  Mat a_;
  Eigen::PartialPivLU<Mat> lu_;
  bool singular_ = false;
};

NRResult newton_solve(const Snapshot& s, const FullState& x0, const NRConfig& cfg);

// Runs extra Newton steps from a converged state until the residual stops
// decreasing; used to produce labels accurate to machine precision.
FullState polish_solution(const Snapshot& s, const FullState& x, int max_steps = 8);

FullState flat_start(const Snapshot& s);
FullState dc_start(const Snapshot& s);

// Mean over all buses of sqrt(dP_i^2 + dQ_i^2 + zeta).
double pbl(const Snapshot& s, const FullState& x, double zeta);
// Gradient of pbl with respect to the stacked full state.
Vec pbl_grad(const Snapshot& s, const FullState& x, double zeta);

inline constexpr double kDefaultZeta = 1e-12;

// Process-wide count of newton_solve invocations.
std::uint64_t nr_call_count();

}  // namespace nrlab
