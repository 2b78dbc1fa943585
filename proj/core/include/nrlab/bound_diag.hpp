#pragma once

// Directional diagnostics for Newton-Raphson near a root: the collapse mode,
// the Newton-direction map on the unit sphere, the discounted orbit
// functional Lambda, and the iteration-count lower bound built from it.

#include <cstdint>
#include <optional>
#include <vector>

#include "nrlab/continuation.hpp"
#include "nrlab/hessian_ops.hpp"

namespace nrlab {

struct SvdInfo {
  double sigma_min = 0.0;
  Vec w_right;  // J w_right = sigma_min w_left
  Vec w_left;
};

SvdInfo svd_min(const Mat& j);

// Right-singular vectors for the k smallest singular values, smallest first.
Mat smallest_right_singular_vectors(const Mat& j, int k);

// Phi(v) = -Q(v) / |Q(v)|. Throws kDegenerateDirection when |Q(v)| < 1e-14.
Vec phi_map(const Snapshot& s, const FactoredJacobian& fj, const Vec& v);

inline constexpr double kDegenerateQ = 1e-14;
inline constexpr int kDefaultLambdaTruncation = 30;

struct LambdaResult {
  double value = 0.0;
  std::vector<double> terms;  // log|Q(Phi^j v)|, j = 0 .. truncation_j - 1
  int truncation_j = 0;
  double tail_bound = 0.0;
};

// Truncated discounted series; the tail beyond truncation_j is extrapolated
// with the last term, which stays within tail_bound of the partial sum.
LambdaResult lambda_functional(const Snapshot& s, const FactoredJacobian& fj, const Vec& v,
                               int j_max = kDefaultLambdaTruncation);

// Same series from precomputed terms (exposed for synthetic checks).
LambdaResult lambda_from_terms(std::vector<double> terms);

struct BoundResult {
  std::optional<double> bound;  // empty when vacuous
  double denominator = 0.0;     // log(1/rho) - Lambda

  bool vacuous() const { return !bound.has_value(); }
};

// k(x0, tau) >= log2(log(1/tau) / (log(1/rho) - Lambda)) - 1.
BoundResult nr_lower_bound(double rho, double tau, double lam);

// <w, H[v, v]> at x*. w should be the left-singular collapse mode so that
// |Q(v)| ~ |alpha(v)| / (2 sigma) near collapse.
double alpha_coeff(const Snapshot& s, const FullState& x_star, const Vec& w, const Vec& v);

// ---------------------------------------------------------------------------
// Sweeps

struct GreatCircleRow {
  double theta = 0.0;
  std::optional<double> lambda;
  std::optional<double> bound;
  int actual_k = 0;
  bool converged = false;
};

// v(theta) = cos(theta) w + sin(theta) v_perp with (w, v_perp) the two
// smallest right-singular vectors of J(x*); theta on a uniform grid over
// [0, 2 pi). NR is started from x* + rho v(theta).
std::vector<GreatCircleRow> great_circle_sweep(const LabeledSnapshot& ls, int n_theta, double rho,
                                               const NRConfig& cfg, int j_max = kDefaultLambdaTruncation);

struct BoundSample {
  std::size_t index = 0;
  std::size_t snapshot = 0;
  double lambda = 0.0;
  double sigma_min = 0.0;
  Vec v;
  double rho = 0.0;
  std::optional<double> lambda_value;  // empty when the orbit is degenerate
  std::optional<double> bound;
  int actual_k = 0;
  bool converged = false;
  bool vacuous = true;
};

// Random (snapshot, direction, magnitude) triples with rho log-uniform in
// [rho_lo, rho_hi]. Failed NR runs record actual_k = cap.
std::vector<BoundSample> bound_validation_sweep(const std::vector<LabeledSnapshot>& snapshots,
                                                std::size_t n_samples, double rho_lo, double rho_hi,
                                                const NRConfig& cfg, std::uint64_t seed,
                                                int j_max = kDefaultLambdaTruncation);

struct CorollaryRecord {
  double lambda = 0.0;
  double sigma_min = 0.0;
  double log_inv_sigma = 0.0;
  std::vector<std::optional<double>> lambda_per_direction;
};

std::vector<CorollaryRecord> corollary_sweep(const ContinuationPath& path, const std::vector<Vec>& directions,
                                             int j_max = kDefaultLambdaTruncation);

struct CorollaryFit {
  std::size_t points = 0;              // path points in the fitted tail
  double log_sigma_span = 0.0;         // change of log(1/sigma) over the tail
  std::vector<double> slopes;          // per direction
  std::vector<double> intercepts;      // per direction
  double max_pair_offset_variation = 0.0;  // max over pairs of (max - min) of Lambda_a - Lambda_b
};

// Least-squares fit of Lambda against log(1/sigma) over the tail of the path
// where sigma <= 10^decades * sigma_end.
CorollaryFit fit_corollary_tail(const std::vector<CorollaryRecord>& records, double decades = 1.0);

}  // namespace nrlab
