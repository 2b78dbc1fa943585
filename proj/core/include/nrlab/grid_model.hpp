#pragma once

// Network data, admittance assembly, and the over-parameterized state.
//
// A full state stores all N angles followed by all N magnitudes. The reduced
// (free) vector stores free angles (PV and PQ buses) followed by free
// magnitudes (PQ buses), in IndexMap order.

#include <cstdint>
#include <istream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nrlab/common.hpp"

namespace nrlab {

enum class BusKind { kPQ, kPV, kSlack };

struct Bus {
  int id = 0;
  BusKind kind = BusKind::kPQ;
  double p_load = 0.0;  // per-unit
  double q_load = 0.0;
  double g_shunt = 0.0;
  double b_shunt = 0.0;
  double v_set = 1.0;
  double theta_set = 0.0;  // radians, slack only
  double p_gen = 0.0;      // aggregated in-service generation
  double q_gen = 0.0;
};

struct Branch {
  int from = 0;
  int to = 0;
  double r = 0.0;
  double x = 0.0;
  double b_charging = 0.0;
  double tap_ratio = 1.0;
  double phase_shift = 0.0;  // radians
  bool in_service = true;
};

struct Gen {
  int bus = 0;
  double p = 0.0;  // per-unit
  double q = 0.0;
  double v_set = 1.0;
  bool in_service = true;
};

struct Network {
  std::string name;
  double base_mva = 100.0;
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<Gen> gens;

  std::size_t n() const { return buses.size(); }
  // Position of a bus id in `buses`; throws for unknown ids.
  std::size_t index_of(int bus_id) const;
  std::size_t slack_index() const;
};

struct AdmittanceMatrix {
  Mat g;
  Mat b;
};

// Parses the MATPOWER case subset (baseMVA, bus, gen, branch). Other
// matrices such as gencost are skipped.
Network parse_matpower(std::istream& text, std::string name = "");
Network load_matpower_file(const std::string& path);

AdmittanceMatrix build_ybus(const Network& net);

// Immutable network plus derived data shared by every snapshot of a grid.
struct Grid {
  Network net;
  AdmittanceMatrix y;
  // neighbors[i] lists every j with a nonzero Y_ij, including i itself.
  std::vector<std::vector<int>> neighbors;
};

std::shared_ptr<const Grid> make_grid(Network net);

struct IndexMap {
  std::vector<int> free_theta;  // bus indices (PV then PQ, in bus order)
  std::vector<int> free_v;      // bus indices (PQ)
  std::size_t n_free = 0;
};

IndexMap build_index_map(const Network& net);

struct FullState {
  Vec theta;
  Vec v;

  static FullState zeros(std::size_t n) { return {Vec::Zero(n), Vec::Zero(n)}; }
  Vec stacked() const;  // [theta; v]
  static FullState from_stacked(const Vec& x);
};

struct Snapshot {
  std::shared_ptr<const Grid> grid;
  Vec p_spec;
  Vec q_spec;
  Vec p_load;  // scaled loads, kept for features
  Vec q_load;
  double lambda = 1.0;
  Vec perturb;  // per-bus multipliers (ones when unperturbed)
  IndexMap free_map;

  std::size_t n() const { return grid->net.n(); }
  const Network& net() const { return grid->net; }
};

// p_spec_i = lambda * perturb_i * (Pg_i - Pd_i), likewise for q_spec.
Snapshot make_snapshot(std::shared_ptr<const Grid> grid, double lambda,
                       const std::optional<Vec>& perturb = std::nullopt);

// Uniform per-bus load multipliers in [1 - spread, 1 + spread].
Vec draw_perturbation(std::size_t n, double spread, std::uint64_t seed);
Snapshot make_perturbed_snapshot(std::shared_ptr<const Grid> grid, double lambda, double spread,
                                 std::uint64_t seed);

FullState clamp_pinned(const Snapshot& s, FullState x);
Vec pack(const Snapshot& s, const FullState& x);
FullState unpack(const Snapshot& s, const Vec& u);

// Reduced-space mask helpers: true for angle coordinates.
inline bool is_theta_coord(const IndexMap& m, std::size_t k) { return k < m.free_theta.size(); }

}  // namespace nrlab
