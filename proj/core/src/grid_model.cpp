#include "nrlab/grid_model.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "nrlab/random.hpp"

namespace nrlab {
namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

std::string strip_comments(std::istream& in) {
  std::string out;
  std::string line;
  while (std::getline(in, line)) {
    bool in_quote = false;
    for (char c : line) {
      if (c == '\'') in_quote = !in_quote;
      if (c == '%' && !in_quote) break;
      out.push_back(c);
    }
    out.push_back('\n');
  }
  return out;
}

// Finds `mpc.<field> = ` and returns the offset just past '='.
std::optional<std::size_t> find_assignment(const std::string& text, const std::string& field) {
  const std::string key = "mpc." + field;
  std::size_t pos = 0;
  while ((pos = text.find(key, pos)) != std::string::npos) {
    std::size_t p = pos + key.size();
    while (p < text.size() && (text[p] == ' ' || text[p] == '\t')) ++p;
    if (p < text.size() && text[p] == '=') return p + 1;
    pos = p;
  }
  return std::nullopt;
}

double parse_number(const std::string& tok, const std::string& where) {
  std::size_t used = 0;
  double value = 0.0;
  try {
    value = std::stod(tok, &used);
  } catch (const std::exception&) {
    throw Error(Error::Kind::kParse, "malformed matrix row in " + where + ": bad token '" + tok + "'");
  }
  if (used != tok.size()) {
    throw Error(Error::Kind::kParse, "malformed matrix row in " + where + ": bad token '" + tok + "'");
  }
  return value;
}

std::vector<std::vector<double>> parse_matrix(const std::string& text, const std::string& field,
                                              std::size_t min_cols) {
  auto start = find_assignment(text, field);
  if (!start) throw Error(Error::Kind::kParse, "missing mpc." + field + " matrix");
  std::size_t open = text.find('[', *start);
  std::size_t close = text.find(']', *start);
  if (open == std::string::npos || close == std::string::npos || close < open) {
    throw Error(Error::Kind::kParse, "unterminated mpc." + field + " matrix");
  }
  std::string body = text.substr(open + 1, close - open - 1);
  std::vector<std::vector<double>> rows;
  std::vector<double> current;
  std::string tok;
  auto flush_tok = [&] {
    if (!tok.empty()) {
      current.push_back(parse_number(tok, "mpc." + field));
      tok.clear();
    }
  };
  auto flush_row = [&] {
    flush_tok();
    if (current.empty()) return;
    if (current.size() < min_cols) {
      throw Error(Error::Kind::kParse, "malformed matrix row in mpc." + field + ": expected at least " +
                                           std::to_string(min_cols) + " columns, got " +
                                           std::to_string(current.size()));
    }
    rows.push_back(std::move(current));
    current.clear();
  };
  for (char c : body) {
    if (c == ';' || c == '\n') {
      flush_row();
    } else if (c == ' ' || c == '\t' || c == ',' || c == '\r') {
      flush_tok();
    } else {
      tok.push_back(c);
    }
  }
  flush_row();
  return rows;
}

double parse_scalar(const std::string& text, const std::string& field) {
  auto start = find_assignment(text, field);
  if (!start) throw Error(Error::Kind::kParse, "missing mpc." + field);
  std::size_t end = text.find(';', *start);
  std::string tok = text.substr(*start, end == std::string::npos ? std::string::npos : end - *start);
  tok.erase(std::remove_if(tok.begin(), tok.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); }),
            tok.end());
  return parse_number(tok, "mpc." + field);
}

}  // namespace

std::size_t Network::index_of(int bus_id) const {
  for (std::size_t i = 0; i < buses.size(); ++i) {
    if (buses[i].id == bus_id) return i;
  }
  throw Error(Error::Kind::kInvalidNetwork, "unknown bus reference " + std::to_string(bus_id));
}

std::size_t Network::slack_index() const {
  for (std::size_t i = 0; i < buses.size(); ++i) {
    if (buses[i].kind == BusKind::kSlack) return i;
  }
  throw Error(Error::Kind::kInvalidNetwork, "network has no slack bus");
}

Network parse_matpower(std::istream& in, std::string name) {
  const std::string text = strip_comments(in);
  Network net;
  net.name = std::move(name);
  net.base_mva = parse_scalar(text, "baseMVA");
  if (!(net.base_mva > 0.0)) throw Error(Error::Kind::kInvalidNetwork, "baseMVA must be positive");

  const auto bus_rows = parse_matrix(text, "bus", 13);
  const auto gen_rows = parse_matrix(text, "gen", 10);
  const auto branch_rows = parse_matrix(text, "branch", 11);
  const double base = net.base_mva;

  std::map<int, std::size_t> index;
  int n_slack = 0;
  for (const auto& row : bus_rows) {
    Bus bus;
    bus.id = static_cast<int>(row[0]);
    switch (static_cast<int>(row[1])) {
      case 1: bus.kind = BusKind::kPQ; break;
      case 2: bus.kind = BusKind::kPV; break;
      case 3: bus.kind = BusKind::kSlack; ++n_slack; break;
      default:
        throw Error(Error::Kind::kInvalidNetwork,
                    "unsupported bus type " + std::to_string(static_cast<int>(row[1])) + " at bus " +
                        std::to_string(bus.id));
    }
    bus.p_load = row[2] / base;
    bus.q_load = row[3] / base;
    bus.g_shunt = row[4] / base;
    bus.b_shunt = row[5] / base;
    bus.v_set = row[7];
    bus.theta_set = row[8] * kDegToRad;
    if (index.count(bus.id)) {
      throw Error(Error::Kind::kInvalidNetwork, "duplicate bus id " + std::to_string(bus.id));
    }
    index[bus.id] = net.buses.size();
    net.buses.push_back(bus);
  }
  if (n_slack == 0) throw Error(Error::Kind::kInvalidNetwork, "no slack bus");
  if (n_slack > 1) throw Error(Error::Kind::kInvalidNetwork, "multiple slack buses");

  auto lookup = [&](double id, const char* what) {
    auto it = index.find(static_cast<int>(id));
    if (it == index.end()) {
      throw Error(Error::Kind::kInvalidNetwork,
                  std::string("unknown bus reference ") + std::to_string(static_cast<int>(id)) + " in " + what);
    }
    return it->second;
  };

  std::vector<bool> has_gen(net.buses.size(), false);
  for (const auto& row : gen_rows) {
    Gen gen;
    gen.bus = static_cast<int>(row[0]);
    gen.p = row[1] / base;
    gen.q = row[2] / base;
    gen.v_set = row[5];
    gen.in_service = row[7] > 0.0;
    const std::size_t i = lookup(row[0], "gen");
    if (gen.in_service) {
      Bus& bus = net.buses[i];
      bus.p_gen += gen.p;
      bus.q_gen += gen.q;
      // First in-service generator fixes the voltage setpoint.
      if (!has_gen[i]) bus.v_set = gen.v_set;
      has_gen[i] = true;
    }
    net.gens.push_back(gen);
  }
  for (std::size_t i = 0; i < net.buses.size(); ++i) {
    Bus& bus = net.buses[i];
    if (bus.kind == BusKind::kPV && !has_gen[i]) bus.kind = BusKind::kPQ;
    if (bus.kind != BusKind::kPQ && !(bus.v_set > 0.0)) {
      throw Error(Error::Kind::kInvalidNetwork, "non-positive voltage setpoint at bus " + std::to_string(bus.id));
    }
  }

  for (const auto& row : branch_rows) {
    Branch br;
    br.from = static_cast<int>(row[0]);
    br.to = static_cast<int>(row[1]);
    lookup(row[0], "branch");
    lookup(row[1], "branch");
    br.r = row[2];
    br.x = row[3];
    br.b_charging = row[4];
    br.tap_ratio = row[8] == 0.0 ? 1.0 : row[8];
    br.phase_shift = row[9] * kDegToRad;
    br.in_service = row[10] > 0.0;
    net.branches.push_back(br);
  }
  return net;
}

Network load_matpower_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Error::Kind::kIo, "cannot open case file " + path);
  std::string name = path;
  if (auto slash = name.find_last_of('/'); slash != std::string::npos) name = name.substr(slash + 1);
  if (auto dot = name.rfind('.'); dot != std::string::npos) name = name.substr(0, dot);
  return parse_matpower(in, name);
}

AdmittanceMatrix build_ybus(const Network& net) {
  using cd = std::complex<double>;
  const std::size_t n = net.n();
  Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(n, n);
  for (const Branch& br : net.branches) {
    if (!br.in_service) continue;
    if (br.r == 0.0 && br.x == 0.0) {
      throw Error(Error::Kind::kInvalidNetwork, "in-service branch " + std::to_string(br.from) + "-" +
                                                    std::to_string(br.to) + " has zero impedance");
    }
    const std::size_t f = net.index_of(br.from);
    const std::size_t t = net.index_of(br.to);
    const cd ys = 1.0 / cd(br.r, br.x);
    const cd tap = std::polar(br.tap_ratio, br.phase_shift);
    const cd ytt = ys + cd(0.0, br.b_charging / 2.0);
    y(f, f) += ytt / (tap * std::conj(tap));
    y(f, t) += -ys / std::conj(tap);
    y(t, f) += -ys / tap;
    y(t, t) += ytt;
  }
  for (std::size_t i = 0; i < n; ++i) {
    y(i, i) += cd(net.buses[i].g_shunt, net.buses[i].b_shunt);
  }
  return {y.real(), y.imag()};
}

std::shared_ptr<const Grid> make_grid(Network net) {
  auto grid = std::make_shared<Grid>();
  grid->y = build_ybus(net);
  const std::size_t n = net.n();
  grid->neighbors.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j || grid->y.g(i, j) != 0.0 || grid->y.b(i, j) != 0.0) {
        grid->neighbors[i].push_back(static_cast<int>(j));
      }
    }
  }
  grid->net = std::move(net);
  return grid;
}

IndexMap build_index_map(const Network& net) {
  IndexMap m;
  for (std::size_t i = 0; i < net.n(); ++i) {
    const BusKind k = net.buses[i].kind;
    if (k != BusKind::kSlack) m.free_theta.push_back(static_cast<int>(i));
    if (k == BusKind::kPQ) m.free_v.push_back(static_cast<int>(i));
  }
  m.n_free = m.free_theta.size() + m.free_v.size();
  return m;
}

Vec FullState::stacked() const {
  Vec x(theta.size() + v.size());
  x << theta, v;
  return x;
}

FullState FullState::from_stacked(const Vec& x) {
  const Eigen::Index n = x.size() / 2;
  return {x.head(n), x.tail(n)};
}

Snapshot make_snapshot(std::shared_ptr<const Grid> grid, double lambda, const std::optional<Vec>& perturb) {
  const Network& net = grid->net;
  const std::size_t n = net.n();
  Snapshot s;
  s.lambda = lambda;
  s.perturb = perturb ? *perturb : Vec::Ones(n);
  if (static_cast<std::size_t>(s.perturb.size()) != n) {
    throw Error(Error::Kind::kDimension, "perturbation vector length does not match bus count");
  }
  s.p_spec.resize(n);
  s.q_spec.resize(n);
  s.p_load.resize(n);
  s.q_load.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Bus& b = net.buses[i];
    const double scale = lambda * s.perturb[i];
    s.p_spec[i] = scale * (b.p_gen - b.p_load);
    s.q_spec[i] = scale * (b.q_gen - b.q_load);
    s.p_load[i] = scale * b.p_load;
    s.q_load[i] = scale * b.q_load;
  }
  s.free_map = build_index_map(net);
  s.grid = std::move(grid);
  return s;
}

Vec draw_perturbation(std::size_t n, double spread, std::uint64_t seed) {
  Rng rng(seed);
  Vec m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = rng.uniform(1.0 - spread, 1.0 + spread);
  return m;
}

Snapshot make_perturbed_snapshot(std::shared_ptr<const Grid> grid, double lambda, double spread,
                                 std::uint64_t seed) {
  const std::size_t n = grid->net.n();
  return make_snapshot(std::move(grid), lambda, draw_perturbation(n, spread, seed));
}

FullState clamp_pinned(const Snapshot& s, FullState x) {
  const Network& net = s.net();
  for (std::size_t i = 0; i < net.n(); ++i) {
    const Bus& b = net.buses[i];
    if (b.kind == BusKind::kSlack) {
      x.theta[i] = b.theta_set;
      x.v[i] = b.v_set;
    } else if (b.kind == BusKind::kPV) {
      x.v[i] = b.v_set;
    }
  }
  return x;
}

Vec pack(const Snapshot& s, const FullState& x) {
  const IndexMap& m = s.free_map;
  if (static_cast<std::size_t>(x.theta.size()) != s.n() || static_cast<std::size_t>(x.v.size()) != s.n()) {
    throw Error(Error::Kind::kDimension, "full state dimension does not match bus count");
  }
  Vec u(m.n_free);
  std::size_t k = 0;
  for (int i : m.free_theta) u[k++] = x.theta[i];
  for (int i : m.free_v) u[k++] = x.v[i];
  return u;
}

FullState unpack(const Snapshot& s, const Vec& u) {
  const IndexMap& m = s.free_map;
  if (static_cast<std::size_t>(u.size()) != m.n_free) {
    throw Error(Error::Kind::kDimension, "reduced vector has length " + std::to_string(u.size()) +
                                             ", expected " + std::to_string(m.n_free));
  }
  FullState x = FullState::zeros(s.n());
  std::size_t k = 0;
  for (int i : m.free_theta) x.theta[i] = u[k++];
  for (int i : m.free_v) x.v[i] = u[k++];
  return clamp_pinned(s, std::move(x));
}

}  // namespace nrlab
