#include <doctest.h>

#include <complex>

#include "nrlab/io.hpp"
#include "support.hpp"

using namespace nrlab;
using namespace nrlab::test;

namespace {

// Brute-force pi-model assembly, one branch at a time in complex arithmetic.
AdmittanceMatrix brute_force_ybus(const Network& net) {
  using C = std::complex<double>;
  const std::size_t n = net.n();
  std::vector<std::vector<C>> y(n, std::vector<C>(n, C(0.0, 0.0)));
  for (std::size_t i = 0; i < n; ++i) y[i][i] += C(net.buses[i].g_shunt, net.buses[i].b_shunt);
  for (const Branch& br : net.branches) {
    if (!br.in_service) continue;
    const std::size_t f = net.index_of(br.from), t = net.index_of(br.to);
    const C ys = 1.0 / C(br.r, br.x);
    const C tap = std::polar(br.tap_ratio, br.phase_shift);
    const C bc(0.0, br.b_charging / 2.0);
    y[f][f] += (ys + bc) / (tap * std::conj(tap));
    y[t][t] += ys + bc;
    y[f][t] += -ys / std::conj(tap);
    y[t][f] += -ys / tap;
  }
  AdmittanceMatrix out{Mat::Zero(n, n), Mat::Zero(n, n)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out.g(i, j) = y[i][j].real();
      out.b(i, j) = y[i][j].imag();
    }
  }
  return out;
}

}  // namespace

TEST_CASE("parse_matpower reads the bundled cases") {
  const Network n14 = load_matpower_file(data_path("case14.m"));
  CHECK(n14.n() == 14);
  CHECK(n14.buses[n14.slack_index()].kind == BusKind::kSlack);
  CHECK(n14.base_mva == 100.0);
  const Network n118 = load_matpower_file(data_path("case118.m"));
  CHECK(n118.n() == 118);
  const Network n3 = load_matpower_file(data_path("case3.m"));
  CHECK(n3.n() == 3);
  // Loads convert to per-unit on the system base.
  CHECK(n3.buses[2].p_load == doctest::Approx(0.9));
  CHECK(n3.buses[2].b_shunt == doctest::Approx(0.05));
  CHECK(n3.buses[1].kind == BusKind::kPV);
  CHECK(n3.buses[1].v_set == doctest::Approx(1.01));
}

TEST_CASE("parse_matpower rejects invalid networks") {
  std::string two_slack = two_bus_case(0.5, 10.0);
  two_slack.replace(two_slack.find(" 2 1 "), 5, " 2 3 ");
  try {
    grid_from_text(two_slack);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == Error::Kind::kInvalidNetwork);
    CHECK(std::string(e.what()).find("multiple slack") != std::string::npos);
  }
  std::string bad_ref = two_bus_case(0.5, 10.0);
  bad_ref.replace(bad_ref.find(" 1 2 0 "), 7, " 1 7 0 ");
  CHECK_THROWS_AS(grid_from_text(bad_ref), Error);
  std::string bad_row = two_bus_case(0.5, 10.0);
  bad_row.replace(bad_row.find("230 1 1.1 0.9;\n];"), 4, "2x0 ");
  CHECK_THROWS_AS(grid_from_text(bad_row), Error);
}

TEST_CASE("parsing is deterministic") {
  const std::string text = read_text(data_path("case118.m"));
  std::istringstream a(text), b(text);
  const Network x = parse_matpower(a), y = parse_matpower(b);
  REQUIRE(x.n() == y.n());
  for (std::size_t i = 0; i < x.n(); ++i) {
    CHECK(x.buses[i].p_load == y.buses[i].p_load);
    CHECK(x.buses[i].v_set == y.buses[i].v_set);
  }
  CHECK(x.branches.size() == y.branches.size());
}

TEST_CASE("build_ybus on a single pure reactance") {
  const auto g = grid_from_text(two_bus_case(1.0, 0.0));
  CHECK(g->y.b(0, 1) == doctest::Approx(1.0));
  CHECK(g->y.b(1, 0) == doctest::Approx(1.0));
  CHECK(g->y.b(0, 0) == doctest::Approx(-1.0));
  CHECK(g->y.b(1, 1) == doctest::Approx(-1.0));
  CHECK(g->y.g.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("build_ybus matches brute-force assembly on every bundled case") {
  for (const char* name : {"case3", "case14", "case118"}) {
    const Network net = load_matpower_file(data_path(std::string(name) + ".m"));
    const AdmittanceMatrix y = build_ybus(net);
    const AdmittanceMatrix ref = brute_force_ybus(net);
    CHECK((y.g - ref.g).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((y.b - ref.b).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("build_ybus rows 1-2 of case14 match the independent assembly") {
  const auto g = grid("case14");
  const CsvData ref = read_csv(data_path("case14_ybus_rows12.csv"));
  REQUIRE(ref.rows.size() == 28);
  for (const auto& row : ref.rows) {
    const std::size_t i = g->net.index_of(std::stoi(row[0])), j = g->net.index_of(std::stoi(row[1]));
    CHECK(g->y.g(i, j) == doctest::Approx(parse_double(row[2])).epsilon(1e-12));
    CHECK(g->y.b(i, j) == doctest::Approx(parse_double(row[3])).epsilon(1e-12));
  }
}

TEST_CASE("out-of-service branches contribute nothing") {
  Network net = load_matpower_file(data_path("case3.m"));
  const AdmittanceMatrix full = build_ybus(net);
  net.branches[2].in_service = false;
  const AdmittanceMatrix cut = build_ybus(net);
  CHECK(cut.b(1, 2) == 0.0);
  CHECK(cut.g(1, 2) == 0.0);
  CHECK(full.b(1, 2) != 0.0);
  CHECK(cut.b(0, 1) == full.b(0, 1));
}

TEST_CASE("zero-impedance in-service branch is an error") {
  std::string text = two_bus_case(0.5, 10.0);
  text.replace(text.find(" 1 2 0 0.5 "), 11, " 1 2 0 0 ");
  CHECK_THROWS_AS(grid_from_text(text), Error);
}

TEST_CASE("make_snapshot scales injections linearly in lambda") {
  const auto g = grid("case14");
  const Snapshot s1 = make_snapshot(g, 1.0), s2 = make_snapshot(g, 2.0);
  CHECK((s2.p_spec - 2.0 * s1.p_spec).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((s2.q_spec - 2.0 * s1.q_spec).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(s1.lambda == 1.0);
  const Snapshot a = make_perturbed_snapshot(g, 1.0, 0.1, 42), b = make_perturbed_snapshot(g, 1.0, 0.1, 42);
  CHECK(a.p_spec == b.p_spec);
  CHECK(a.perturb == b.perturb);
  CHECK(a.perturb.minCoeff() >= 0.9);
  CHECK(a.perturb.maxCoeff() <= 1.1);
}

TEST_CASE("index map counts free coordinates by bus kind") {
  const auto g = grid("case14");
  const Snapshot s = make_snapshot(g, 1.0);
  std::size_t n_pv = 0, n_pq = 0;
  for (const Bus& b : g->net.buses) {
    n_pv += b.kind == BusKind::kPV;
    n_pq += b.kind == BusKind::kPQ;
  }
  CHECK(s.free_map.n_free == n_pv + 2 * n_pq);
  CHECK(s.free_map.free_theta.size() == n_pv + n_pq);
  CHECK(s.free_map.free_v.size() == n_pq);
  const int slack = static_cast<int>(g->net.slack_index());
  for (int i : s.free_map.free_theta) CHECK(i != slack);
  for (int i : s.free_map.free_v) CHECK(i != slack);
}

TEST_CASE("clamp_pinned, pack and unpack") {
  const auto g = grid("case14");
  const Snapshot s = make_snapshot(g, 1.0);
  Rng rng(7);
  FullState x{rng.normal_vec(14), Vec::Constant(14, 1.0) + 0.1 * rng.normal_vec(14)};
  const std::size_t slack = g->net.slack_index();
  x.theta[slack] = 0.3;
  const FullState c = clamp_pinned(s, x);
  CHECK(c.theta[slack] == g->net.buses[slack].theta_set);
  CHECK(c.v[slack] == g->net.buses[slack].v_set);
  for (std::size_t i = 0; i < 14; ++i) {
    if (g->net.buses[i].kind == BusKind::kPV) CHECK(c.v[i] == g->net.buses[i].v_set);
  }
  const FullState cc = clamp_pinned(s, c);
  CHECK(cc.theta == c.theta);
  CHECK(cc.v == c.v);

  const FullState round = unpack(s, pack(s, x));
  CHECK(round.theta == c.theta);
  CHECK(round.v == c.v);
  const Vec u = rng.normal_vec(static_cast<Eigen::Index>(s.free_map.n_free));
  CHECK(pack(s, unpack(s, u)) == u);

  const FullState z = unpack(s, Vec::Zero(static_cast<Eigen::Index>(s.free_map.n_free)));
  for (int i : s.free_map.free_theta) CHECK(z.theta[i] == 0.0);
  for (int i : s.free_map.free_v) CHECK(z.v[i] == 0.0);
  CHECK(z.v[slack] == g->net.buses[slack].v_set);

  CHECK_THROWS_AS(unpack(s, Vec::Zero(3)), Error);
}
