#pragma once

#include <functional>
#include <memory>
#include <sstream>
#include <string>

#include "nrlab/grid_model.hpp"
#include "nrlab/nr_solver.hpp"
#include "nrlab/random.hpp"

namespace nrlab::test {

inline std::string data_path(const std::string& name) { return std::string(NRLAB_DATA_DIR) + "/" + name; }

inline std::shared_ptr<const Grid> grid(const std::string& name) {
  return make_grid(load_matpower_file(data_path(name + ".m")));
}

inline std::shared_ptr<const Grid> grid_from_text(const std::string& text) {
  std::istringstream in(text);
  return make_grid(parse_matpower(in, "inline"));
}

// Relative error with an absolute floor, so exact zeros compare sanely.
inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// A solved state displaced randomly in the free coordinates.
inline FullState jitter(const Snapshot& s, const FullState& x, double scale, Rng& rng) {
  return unpack(s, pack(s, x) + scale * rng.normal_vec(static_cast<Eigen::Index>(s.free_map.n_free)));
}

inline FullState solve_nominal(const Snapshot& s) {
  return newton_solve(s, flat_start(s), NRConfig{}).final_state;
}

// Matpower text for a minimal network: slack bus 1 and one PQ bus 2 joined by
// a reactance-only branch.
inline std::string two_bus_case(double x, double p_load_mw, double q_load_mvar = 0.0) {
  std::ostringstream out;
  out << "mpc.baseMVA = 100;\n"
      << "mpc.bus = [\n 1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;\n 2 1 " << p_load_mw << " " << q_load_mvar
      << " 0 0 1 1 0 230 1 1.1 0.9;\n];\n"
      << "mpc.gen = [\n 1 0 0 300 -300 1 100 1 250 0;\n];\n"
      << "mpc.branch = [\n 1 2 0 " << x << " 0 250 250 250 0 0 1 -360 360;\n];\n";
  return out.str();
}

}  // namespace nrlab::test
