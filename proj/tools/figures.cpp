#include "figures.hpp"

#include <cmath>
#include <cstdio>

#include "nrlab/bound_diag.hpp"
#include "nrlab/continuation.hpp"
#include "nrlab/grid_model.hpp"
#include "nrlab/parallel.hpp"
#include "nrlab/random.hpp"

namespace nrlab::tools {
namespace {

NRConfig nr_from(const Config& cfg) {
  NRConfig nr;
  nr.tau = cfg.get_double("nr.tau", 1e-6);
  nr.cap = static_cast<int>(cfg.get_int("nr.cap", 1000));
  nr.validate();
  return nr;
}

ContinuationConfig continuation_from(const Config& cfg, const std::string& sec, const NRConfig& nr) {
  ContinuationConfig cc;
  cc.lambda0 = cfg.get_double(sec + "lambda0", 1.0);
  cc.lambda_step = cfg.get_double(sec + "lambda_step", 0.1);
  cc.min_step = cfg.get_double(sec + "min_step", 1e-5);
  cc.nr = nr;
  return cc;
}

std::string note(const char* format, double a, double b = 0.0, double c = 0.0) {
  char buf[200];
  std::snprintf(buf, sizeof buf, format, a, b, c);
  return buf;
}

}  // namespace

FigureOutput run_fig1(const Config& cfg, const std::string& case_path, const std::string& out_dir) {
  const Config used = cfg.subset({"nr.", "fig1."});
  const std::uint64_t hash = fnv1a64(used.canonical() + "case " + hex64(fnv1a64(read_text(case_path))));
  const NRConfig nr = nr_from(cfg);
  const auto grid = make_grid(load_matpower_file(case_path));
  const ContinuationPath path = trace_lambda(grid, continuation_from(cfg, "fig1.", nr));
  ensure_dir(out_dir);
  FigureOutput out;

  auto manifest = [&](const std::string& format) {
    Manifest m{format, hash, {}};
    m.add("case", grid->net.name).add("lambda-end", fmt(path.lambda_end));
    return m;
  };
  CsvTable minv({"lambda", "v_min"});
  CsvTable sig({"lambda", "sigma_min"});
  for (const auto& p : path.points) {
    minv.add_row({fmt(p.lambda), fmt(p.v_min)});
    sig.add_row({fmt(p.lambda), fmt(p.sigma_min)});
  }
  write_text(out_dir + "/minv.csv", minv.render(manifest("nrlab.fig1-minv/1")));
  write_text(out_dir + "/sigma.csv", sig.render(manifest("nrlab.fig1-sigma/1")));

  // Critical bus: largest collapse-mode participation at the last path point.
  const std::size_t last = path.points.size() - 1;
  const Snapshot s_end = path.snapshot_at(last);
  const SvdInfo svd = svd_min(jacobian(s_end, path.points[last].state));
  Vec part = Vec::Zero(static_cast<Eigen::Index>(grid->net.n()));
  const IndexMap& m = s_end.free_map;
  for (std::size_t k = 0; k < m.free_theta.size(); ++k) part[m.free_theta[k]] += std::pow(svd.w_right[k], 2);
  for (std::size_t k = 0; k < m.free_v.size(); ++k) {
    part[m.free_v[k]] += std::pow(svd.w_right[m.free_theta.size() + k], 2);
  }
  Eigen::Index crit = 0;
  part.maxCoeff(&crit);

  const int n_grid = static_cast<int>(cfg.get_int("fig1.basin_points", 41));
  if (n_grid < 3 || n_grid % 2 == 0) throw Error(Error::Kind::kConfig, "fig1.basin_points must be odd and >= 3");
  const double span_p = cfg.get_double("fig1.basin_span_p", 1.0);
  const double span_q = cfg.get_double("fig1.basin_span_q", 1.0);
  const Snapshot base = make_snapshot(grid, cfg.get_double("fig1.basin_lambda", 1.0));
  const double p0 = base.p_load[crit], q0 = base.q_load[crit];
  const std::size_t cells = static_cast<std::size_t>(n_grid) * static_cast<std::size_t>(n_grid);
  std::vector<NRResult> results(cells);
  std::vector<double> pv(cells), qv(cells);
  parallel_for(cells, [&](std::size_t c) {
    const int i = static_cast<int>(c) / n_grid, j = static_cast<int>(c) % n_grid;
    const double h = 2.0 / (n_grid - 1);
    pv[c] = p0 + span_p * (-1.0 + h * i);
    qv[c] = q0 + span_q * (-1.0 + h * j);
    Snapshot s = base;
    s.p_spec[crit] -= pv[c] - s.p_load[crit];
    s.q_spec[crit] -= qv[c] - s.q_load[crit];
    s.p_load[crit] = pv[c];
    s.q_load[crit] = qv[c];
    results[c] = newton_solve(s, flat_start(s), nr);
  });
  CsvTable basin({"p_load", "q_load", "iterations", "converged"});
  for (std::size_t c = 0; c < cells; ++c) {
    basin.add_row({fmt(pv[c]), fmt(qv[c]), std::to_string(results[c].converged ? results[c].iterations : nr.cap),
                   results[c].converged ? "1" : "0"});
  }
  Manifest bm = manifest("nrlab.fig1-basin/1");
  bm.add("critical-bus", std::to_string(grid->net.buses[crit].id));
  write_text(out_dir + "/basin.csv", basin.render(bm));

  out.files = {out_dir + "/minv.csv", out_dir + "/sigma.csv", out_dir + "/basin.csv"};
  out.notes.push_back(note("continuation: %.0f points, lambda_end %.5f, sigma_min %.4g", double(path.points.size()),
                           path.lambda_end, path.points.back().sigma_min));
  out.notes.push_back("critical bus " + std::to_string(grid->net.buses[crit].id));
  return out;
}

FigureOutput run_fig2(const Config& cfg, const std::string& case_path, const std::string& out_dir) {
  const Config used = cfg.subset({"nr.", "fig2."});
  const std::uint64_t hash = fnv1a64(used.canonical() + "case " + hex64(fnv1a64(read_text(case_path))));
  const NRConfig nr = nr_from(cfg);
  const std::uint64_t seed = cfg.get_u64("fig2.seed", 42);
  const int j_max = static_cast<int>(cfg.get_int("fig2.j_max", kDefaultLambdaTruncation));
  const auto grid = make_grid(load_matpower_file(case_path));
  const ContinuationPath path = trace_lambda(grid, continuation_from(cfg, "fig2.", nr));
  ensure_dir(out_dir);
  FigureOutput out;
  auto manifest = [&](const std::string& format) {
    Manifest m{format, hash, {}};
    m.add("case", grid->net.name).add("seed", std::to_string(seed)).add("tau", fmt(nr.tau));
    return m;
  };

  // Great circle through the two weakest singular directions.
  const double target_sigma = cfg.get_double("fig2.great_circle_sigma", 0.027);
  std::size_t gc_idx = 0;
  for (std::size_t i = 0; i < path.points.size(); ++i) {
    const auto dist = [&](std::size_t k) { return std::abs(std::log(path.points[k].sigma_min / target_sigma)); };
    if (dist(i) < dist(gc_idx)) gc_idx = i;
  }
  const LabeledSnapshot gc_point = path.labeled(gc_idx);
  const double gc_rho = cfg.get_double("fig2.great_circle_rho", 0.05);
  const auto gc = great_circle_sweep(gc_point, static_cast<int>(cfg.get_int("fig2.great_circle_points", 360)), gc_rho,
                                     nr, j_max);
  Manifest gm = manifest("nrlab.fig2-great-circle-lambda/1");
  gm.add("lambda", fmt(gc_point.snapshot.lambda)).add("sigma-min", fmt(gc_point.sigma_min)).add("rho", fmt(gc_rho));
  CsvTable gl({"theta", "Lambda"});
  CsvTable gb({"theta", "bound", "actual_k", "converged"});
  for (const auto& r : gc) {
    gl.add_row({fmt(r.theta), fmt(r.lambda)});
    gb.add_row({fmt(r.theta), fmt(r.bound), std::to_string(r.actual_k), r.converged ? "1" : "0"});
  }
  write_text(out_dir + "/great_circle_lambda.csv", gl.render(gm));
  gm.format = "nrlab.fig2-great-circle-bound/1";
  write_text(out_dir + "/great_circle_bound.csv", gb.render(gm));

  // Lambda against log(1/sigma) for fixed random directions.
  const int n_dirs = static_cast<int>(cfg.get_int("fig2.corollary_directions", 3));
  std::vector<Vec> dirs;
  Rng dir_rng = Rng(seed).split(11);
  for (int d = 0; d < n_dirs; ++d) dirs.push_back(dir_rng.unit_vector(static_cast<Eigen::Index>(gc_point.snapshot.free_map.n_free)));
  const auto records = corollary_sweep(path, dirs, j_max);
  const CorollaryFit fit = fit_corollary_tail(records, cfg.get_double("fig2.corollary_decades", 1.0));
  std::vector<std::string> header{"lambda", "sigma_min", "log_inv_sigma"};
  for (int d = 0; d < n_dirs; ++d) header.push_back("Lambda_" + std::to_string(d));
  CsvTable ct(header);
  for (const auto& r : records) {
    std::vector<std::string> row{fmt(r.lambda), fmt(r.sigma_min), fmt(r.log_inv_sigma)};
    for (const auto& l : r.lambda_per_direction) row.push_back(fmt(l));
    ct.add_row(std::move(row));
  }
  Manifest cm = manifest("nrlab.fig2-corollary/1");
  std::string slopes;
  for (double sl : fit.slopes) slopes += (slopes.empty() ? "" : " ") + fmt(sl);
  cm.add("tail-points", std::to_string(fit.points)).add("tail-slopes", slopes);
  write_text(out_dir + "/corollary.csv", ct.render(cm));

  // Bound validation scatter over the path snapshots.
  std::vector<LabeledSnapshot> snaps;
  for (std::size_t i = 0; i < path.points.size(); ++i) snaps.push_back(path.labeled(i));
  const auto samples = bound_validation_sweep(snaps, static_cast<std::size_t>(cfg.get_int("fig2.samples", 800)),
                                              cfg.get_double("fig2.rho_lo", 1e-4), cfg.get_double("fig2.rho_hi", 0.1),
                                              nr, seed, j_max);
  CsvTable sc({"index", "snapshot", "lambda", "sigma_min", "rho", "Lambda", "bound", "actual_k", "converged", "vacuous"});
  std::size_t non_vacuous = 0, violations = 0;
  for (const auto& b : samples) {
    sc.add_row({std::to_string(b.index), std::to_string(b.snapshot), fmt(b.lambda), fmt(b.sigma_min), fmt(b.rho),
                fmt(b.lambda_value), fmt(b.bound), std::to_string(b.actual_k), b.converged ? "1" : "0",
                b.vacuous ? "1" : "0"});
    if (!b.vacuous) {
      ++non_vacuous;
      if (b.actual_k < *b.bound) ++violations;
    }
  }
  Manifest sm = manifest("nrlab.fig2-bound-scatter/1");
  sm.add("non-vacuous", std::to_string(non_vacuous)).add("violations", std::to_string(violations));
  write_text(out_dir + "/bound_scatter.csv", sc.render(sm));

  out.files = {out_dir + "/great_circle_lambda.csv", out_dir + "/great_circle_bound.csv", out_dir + "/corollary.csv",
               out_dir + "/bound_scatter.csv"};
  out.notes.push_back(note("great circle at lambda %.5f, sigma_min %.4g", gc_point.snapshot.lambda, gc_point.sigma_min));
  out.notes.push_back("corollary tail slopes: " + slopes);
  out.notes.push_back(note("bound scatter: %.0f non-vacuous, %.0f violations", double(non_vacuous), double(violations)));
  return out;
}

}  // namespace nrlab::tools
