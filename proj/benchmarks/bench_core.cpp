#include <benchmark/benchmark.h>

#include "nrlab/bound_diag.hpp"
#include "nrlab/grid_model.hpp"
#include "nrlab/neural.hpp"
#include "nrlab/nr_solver.hpp"

namespace {

using namespace nrlab;

std::shared_ptr<const Grid> load(const std::string& name) {
  return make_grid(load_matpower_file(std::string(NRLAB_DATA_DIR) + "/" + name + ".m"));
}

const char* case_name(int64_t arg) { return arg == 0 ? "case14" : "case118"; }

void BM_NewtonFlatStart(benchmark::State& state) {
  const Snapshot s = make_snapshot(load(case_name(state.range(0))), 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(newton_solve(s, flat_start(s), NRConfig{}));
}
BENCHMARK(BM_NewtonFlatStart)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

void BM_Jacobian(benchmark::State& state) {
  const Snapshot s = make_snapshot(load(case_name(state.range(0))), 1.0);
  const FullState x = flat_start(s);
  for (auto _ : state) benchmark::DoNotOptimize(jacobian(s, x));
}
BENCHMARK(BM_Jacobian)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

void BM_HessianContract(benchmark::State& state) {
  const Snapshot s = make_snapshot(load(case_name(state.range(0))), 1.0);
  const FullState x = newton_solve(s, flat_start(s), NRConfig{}).final_state;
  Rng rng(1);
  const Vec v = rng.unit_vector(static_cast<Eigen::Index>(s.free_map.n_free));
  for (auto _ : state) benchmark::DoNotOptimize(hessian_contract(s, x, v));
}
BENCHMARK(BM_HessianContract)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

void BM_LambdaFunctional(benchmark::State& state) {
  const Snapshot s = make_snapshot(load(case_name(state.range(0))), 1.0);
  const FullState x = newton_solve(s, flat_start(s), NRConfig{}).final_state;
  const FactoredJacobian fj(s, x);
  Rng rng(2);
  const Vec v = rng.unit_vector(static_cast<Eigen::Index>(s.free_map.n_free));
  for (auto _ : state) benchmark::DoNotOptimize(lambda_functional(s, fj, v));
}
BENCHMARK(BM_LambdaFunctional)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

void BM_MlpForward(benchmark::State& state) {
  const int batch = static_cast<int>(state.range(0));
  const Mlp m = mlp_init({118 * 7, 512, 512, 512, 512, 236}, 3);
  Rng rng(4);
  const Mat x = rng.normal_vec(118 * 7 * batch).reshaped(118 * 7, batch);
  for (auto _ : state) benchmark::DoNotOptimize(mlp_forward(m, x));
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_MlpForward)->Arg(1)->Arg(16)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
