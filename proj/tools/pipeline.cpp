#include "pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>

#include "nrlab/continuation.hpp"
#include "nrlab/grid_model.hpp"
#include "nrlab/random.hpp"
#include "nrlab/reward_model.hpp"
#include "nrlab/rl.hpp"

namespace nrlab::tools {
namespace {

// Config sections each stage depends on, including its upstream stages.
const std::map<std::string, std::vector<std::string>> kStageSections{
    {"gen-pools", {"run.", "nr.", "pools."}},
    {"pretrain", {"run.", "nr.", "pools.", "pretrain."}},
    {"sft", {"run.", "nr.", "pools.", "pretrain.", "sft."}},
    {"gen-reward-data", {"run.", "nr.", "pools.", "pretrain.", "sft.", "reward_data."}},
    {"train-reward", {"run.", "nr.", "pools.", "pretrain.", "sft.", "reward_data.", "reward."}},
    {"ppo-vstar", {"run.", "nr.", "pools.", "pretrain.", "sft.", "policy.", "ppo."}},
    {"lantern", {"run.", "nr.", "pools.", "pretrain.", "sft.", "reward_data.", "reward.", "policy.", "lantern."}},
    {"eval", {"run.", "nr.", "pools.", "pretrain.", "sft.", "reward_data.", "reward.", "policy.", "ppo.", "lantern.", "eval."}},
};

const std::map<std::string, std::vector<std::string>> kUpstream{
    {"gen-pools", {}},
    {"pretrain", {"gen-pools"}},
    {"sft", {"pretrain"}},
    {"gen-reward-data", {"sft"}},
    {"train-reward", {"gen-reward-data"}},
    {"ppo-vstar", {"sft"}},
    {"lantern", {"sft", "train-reward"}},
    {"eval", {"pretrain", "sft", "ppo-vstar", "lantern"}},
};

std::string stage_dir(const std::string& stage) {
  std::string d = stage;
  std::replace(d.begin(), d.end(), '-', '_');
  return d;
}

template <class T>
std::vector<const T*> pick(const std::vector<T>& all, const std::vector<std::size_t>& idx) {
  std::vector<const T*> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(&all[i]);
  return out;
}

std::vector<const Snapshot*> snaps_of(const std::vector<const LabeledSnapshot*>& ls) {
  std::vector<const Snapshot*> out;
  out.reserve(ls.size());
  for (const auto* l : ls) out.push_back(&l->snapshot);
  return out;
}

std::string opt_fmt(const std::optional<double>& x) { return fmt(x); }

}  // namespace

Pipeline::Pipeline(Config cfg, std::string config_dir, std::string out_dir)
    : cfg_(std::move(cfg)), config_dir_(std::move(config_dir)), out_(std::move(out_dir)) {
  if (!cfg_.has("run.case")) throw Error(Error::Kind::kConfig, "config is missing run.case");
}

std::string Pipeline::resolve(const std::string& path) const {
  const std::filesystem::path p(path);
  if (p.is_absolute() || config_dir_.empty()) return path;
  return (std::filesystem::path(config_dir_) / p).lexically_normal().string();
}

std::uint64_t Pipeline::stage_hash(const std::string& stage) const {
  const auto it = kStageSections.find(stage);
  if (it == kStageSections.end()) throw Error(Error::Kind::kConfig, "unknown stage " + stage);
  Config sub = cfg_.subset(it->second);
  // The case path is a location, not content; hash the case text instead.
  sub.set("run.case", hex64(fnv1a64(read_text(resolve(cfg_.get_string("run.case", ""))))));
  return fnv1a64(std::string(kToolVersion) + "\n" + stage + "\n" + sub.canonical());
}

std::vector<StageOutcome> Pipeline::run(const std::string& stage, bool force, const Progress& progress) {
  std::vector<StageOutcome> out;
  if (stage == "all") {
    for (const auto& s : kStages) out.push_back(run_one(s, force, progress));
    return out;
  }
  if (!kStageSections.count(stage)) throw Error(Error::Kind::kConfig, "unknown stage " + stage);
  // Build missing upstream stages depth-first, in canonical order.
  std::vector<std::string> needed;
  std::vector<std::string> todo{stage};
  while (!todo.empty()) {
    const std::string s = todo.back();
    todo.pop_back();
    if (std::find(needed.begin(), needed.end(), s) != needed.end()) continue;
    needed.push_back(s);
    for (const auto& u : kUpstream.at(s)) todo.push_back(u);
  }
  for (const auto& s : kStages) {
    if (s == stage || std::find(needed.begin(), needed.end(), s) == needed.end()) continue;
    out.push_back(run_one(s, false, progress));
  }
  out.push_back(run_one(stage, force, progress));
  return out;
}

StageOutcome Pipeline::run_one(const std::string& stage, bool force, const Progress& progress) {
  const auto t0 = std::chrono::steady_clock::now();
  StageOutcome result{stage};
  const std::uint64_t hash = stage_hash(stage);
  const std::string dir = out_ + "/" + stage_dir(stage);
  const std::string marker = dir + "/done";
  if (!force && file_exists(marker) && trim(read_text(marker)) == hex64(hash)) {
    result.skipped = true;
    if (progress) progress(result);
    return result;
  }
  ensure_dir(dir);
  if (file_exists(marker)) std::filesystem::remove(marker);

  const std::uint64_t seed = cfg_.get_u64("run.seed", 42);
  const std::uint64_t split_seed = cfg_.get_u64("run.split_seed", 42);
  const std::uint64_t test_seed = cfg_.get_u64("run.test_seed", 42);
  NRConfig nr;
  nr.tau = cfg_.get_double("nr.tau", 1e-6);
  nr.cap = static_cast<int>(cfg_.get_int("nr.cap", 1000));
  nr.validate();

  auto manifest = [&](const std::string& format) {
    Manifest m{format, hash, {}};
    m.add("stage", stage).add("seed", std::to_string(seed)).add("split-seed", std::to_string(split_seed));
    m.add("test-seed", std::to_string(test_seed));
    return m;
  };

  const auto grid = make_grid(load_matpower_file(resolve(cfg_.get_string("run.case", ""))));
  auto load_pool_dir = [&] { return load_pool(grid, out_ + "/gen_pools"); };
  auto load_model = [&](const std::string& st) {
    return warm_start_deserialize(read_text(out_ + "/" + stage_dir(st) + "/model.txt"));
  };

  if (stage == "gen-pools") {
    SnapshotPool pool;
    pool.grid_name = grid->net.name;
    pool.pool_seed = seed;
    pool.split_seed = split_seed;
    pool.test_seed = test_seed;
    const Rng root(seed);

    StableSampling st;
    st.count = static_cast<std::size_t>(cfg_.get_int("pools.stable_count", 400));
    st.spread = cfg_.get_double("pools.stable_spread", 0.1);
    st.lambda = cfg_.get_double("pools.stable_lambda", 1.0);
    st.lambda_hi = cfg_.get_double("pools.stable_lambda_hi", 0.0);
    st.seed = root.split(1).next_u64();
    st.nr = nr;
    pool.stable = sample_stable(grid, st);

    CollapseSampling cs;
    cs.count = static_cast<std::size_t>(cfg_.get_int("pools.collapse_count", 150));
    cs.spread = cfg_.get_double("pools.collapse_spread", 0.1);
    const double center = cfg_.get_double("pools.band_center", 0.03);
    cs.sigma_lo = 0.5 * center;
    cs.sigma_hi = 2.0 * center;
    cs.seed = root.split(2).next_u64();
    cs.continuation.lambda_step = cfg_.get_double("pools.lambda_step", 0.1);
    cs.continuation.min_step = cfg_.get_double("pools.min_step", 1e-5);
    cs.continuation.nr = nr;
    CollapseReport report;
    pool.collapse = sample_collapse(grid, cs, &report);

    assign_splits(pool, cfg_.get_double("pools.stable_val_fraction", 0.1),
                  cfg_.get_double("pools.holdout_val_fraction", 0.2),
                  static_cast<std::size_t>(cfg_.get_int("pools.test_count", 30)));
    Manifest m = manifest("nrlab.pool/1");
    m.add("collapse-attempts", std::to_string(report.attempts)).add("collapse-skipped", std::to_string(report.skipped));
    save_pool(pool, dir, m.render());
    result.summary = std::to_string(pool.stable.size()) + " stable, " + std::to_string(pool.collapse.size()) +
                     " collapse (" + std::to_string(report.skipped) + " directions skipped)";
  } else if (stage == "pretrain" || stage == "sft") {
    const SnapshotPool pool = load_pool_dir();
    const bool pre = stage == "pretrain";
    const std::string sec = pre ? "pretrain." : "sft.";
    const auto train = snaps_of(pick(pre ? pool.stable : pool.collapse, pre ? pool.stable_train : pool.holdout_train));
    const auto val = snaps_of(pick(pre ? pool.stable : pool.collapse, pre ? pool.stable_val : pool.holdout_val));
    WarmStartModel model =
        pre ? make_warm_start_model(*grid, cfg_.get_ints(sec + "hidden", {512, 512, 512, 512}), seed, train)
            : load_model("pretrain");
    TrainConfig tc;
    tc.lr = cfg_.get_double(sec + "lr", pre ? 3e-4 : 1e-4);
    tc.batch = static_cast<std::size_t>(cfg_.get_int(sec + "batch", 16));
    tc.epochs = static_cast<int>(cfg_.get_int(sec + "epochs", pre ? 10 : 30));
    tc.patience = static_cast<int>(cfg_.get_int(sec + "patience", pre ? 8 : 5));
    tc.seed = pre ? seed : Rng(seed).split(3).next_u64();
    const double before = mean_pbl(model, val, tc.zeta);
    const auto history = train_supervised(model, train, val, tc);
    CsvTable t({"epoch", "train_pbl", "val_pbl", "best_val_pbl"});
    for (const auto& r : history) {
      t.add_row({std::to_string(r.epoch), fmt(r.train_loss), fmt(r.val_loss), fmt(r.best_val)});
    }
    write_text(dir + "/history.csv", t.render(manifest("nrlab.train-history/1")));
    write_text(dir + "/model.txt", manifest("nrlab.warm-start/1").render() + warm_start_serialize(model));
    char buf[128];
    std::snprintf(buf, sizeof buf, "val PBL %.4g -> %.4g over %zu epochs", before, mean_pbl(model, val, tc.zeta),
                  history.size());
    result.summary = buf;
  } else if (stage == "gen-reward-data") {
    const SnapshotPool pool = load_pool_dir();
    const WarmStartModel sft = load_model("sft");
    PerturbationConfig pc;
    pc.magnitudes = cfg_.get_doubles("reward_data.magnitudes", pc.magnitudes);
    pc.directions = static_cast<int>(cfg_.get_int("reward_data.directions", 5));
    pc.nr = nr;
    pc.seed = Rng(seed).split(4).next_u64();
    const auto samples = gen_perturbation_dataset(sft, pick(pool.collapse, pool.holdout_train), pc);
    std::vector<std::string> header{"snapshot", "snapshot_id", "magnitude", "direction", "radius", "target"};
    const Eigen::Index d = samples.empty() ? 0 : samples.front().input.size();
    for (Eigen::Index k = 0; k < d; ++k) header.push_back("x" + std::to_string(k));
    CsvTable t(header);
    for (const auto& s : samples) {
      std::vector<std::string> row{std::to_string(s.snapshot), s.snapshot_id, fmt(s.magnitude),
                                   std::to_string(s.direction), fmt(s.radius), fmt(s.target)};
      for (Eigen::Index k = 0; k < d; ++k) row.push_back(fmt(s.input[k]));
      t.add_row(std::move(row));
    }
    write_text(dir + "/samples.csv", t.render(manifest("nrlab.reward-samples/1")));
    result.summary = std::to_string(samples.size()) + " perturbation samples";
  } else if (stage == "train-reward") {
    const CsvData data = read_csv(out_ + "/gen_reward_data/samples.csv");
    std::vector<RewardSample> samples;
    const std::size_t c_snap = data.column("snapshot"), c_id = data.column("snapshot_id"),
                      c_mag = data.column("magnitude"), c_dir = data.column("direction"),
                      c_rad = data.column("radius"), c_tgt = data.column("target"), c_x0 = data.column("x0");
    for (const auto& row : data.rows) {
      RewardSample s;
      s.snapshot = std::stoull(row[c_snap]);
      s.snapshot_id = row[c_id];
      s.magnitude = parse_double(row[c_mag]);
      s.direction = std::stoi(row[c_dir]);
      s.radius = parse_double(row[c_rad]);
      s.target = parse_double(row[c_tgt]);
      s.input.resize(static_cast<Eigen::Index>(row.size() - c_x0));
      for (std::size_t k = c_x0; k < row.size(); ++k) s.input[static_cast<Eigen::Index>(k - c_x0)] = parse_double(row[k]);
      samples.push_back(std::move(s));
    }
    RewardTrainConfig rc;
    rc.hidden = cfg_.get_ints("reward.hidden", rc.hidden);
    rc.dropout = cfg_.get_doubles("reward.dropout", rc.dropout);
    rc.lr = cfg_.get_double("reward.lr", rc.lr);
    rc.weight_decay = cfg_.get_double("reward.weight_decay", rc.weight_decay);
    rc.batch = static_cast<std::size_t>(cfg_.get_int("reward.batch", 256));
    rc.epochs = static_cast<int>(cfg_.get_int("reward.epochs", 50));
    rc.val_fraction = cfg_.get_double("reward.val_fraction", 0.2);
    rc.seed = Rng(seed).split(5).next_u64();
    const RewardTrainResult tr = train_reward(samples, rc);
    CsvTable t({"epoch", "train_mse", "val_spearman"});
    for (const auto& e : tr.history) t.add_row({std::to_string(e.epoch), fmt(e.train_mse), fmt(e.val_spearman)});
    Manifest hm = manifest("nrlab.reward-history/1");
    hm.add("best-epoch", std::to_string(tr.best_epoch)).add("best-spearman", fmt(tr.best_spearman));
    write_text(dir + "/history.csv", t.render(hm));
    write_text(dir + "/model.txt", manifest("nrlab.reward-model/1").render() + reward_serialize(tr.model));
    char buf[128];
    std::snprintf(buf, sizeof buf, "best val Spearman %.4f at epoch %d", tr.best_spearman, tr.best_epoch);
    result.summary = buf;
  } else if (stage == "ppo-vstar" || stage == "lantern") {
    const SnapshotPool pool = load_pool_dir();
    PolicyParams policy = make_policy(load_model("sft"), cfg_.get_double("policy.sigma_v", 1e-3),
                                      cfg_.get_double("policy.sigma_theta", 5e-3));
    const auto train = pick(pool.collapse, pool.holdout_train);
    RlResult res;
    if (stage == "ppo-vstar") {
      PpoVstarConfig pc;
      pc.iterations = static_cast<int>(cfg_.get_int("ppo.iterations", 30));
      pc.states_per_iter = static_cast<std::size_t>(cfg_.get_int("ppo.states_per_iter", 16));
      pc.ppo.clip = cfg_.get_double("ppo.clip", 0.1);
      pc.ppo.epochs = static_cast<int>(cfg_.get_int("ppo.epochs", 4));
      pc.ppo.lr = cfg_.get_double("ppo.lr", 1e-5);
      pc.ppo.max_grad_norm = cfg_.get_double("ppo.max_grad_norm", 5e-3);
      pc.ppo.target_kl = cfg_.get_double("ppo.target_kl", 0.02);
      pc.r_plus = cfg_.get_double("ppo.r_plus", 2.0);
      pc.r_minus = cfg_.get_double("ppo.r_minus", 2.0);
      pc.nr = nr;
      pc.seed = Rng(seed).split(6).next_u64();
      res = run_ppo_vstar(train, policy, pc);
    } else {
      const RewardModel reward = reward_deserialize(read_text(out_ + "/train_reward/model.txt"));
      LanternConfig lc;
      lc.iterations = static_cast<int>(cfg_.get_int("lantern.iterations", 20));
      lc.batch_states = static_cast<std::size_t>(cfg_.get_int("lantern.batch_states", 2));
      lc.group_size = static_cast<int>(cfg_.get_int("lantern.group_size", 4));
      lc.ppo.clip = cfg_.get_double("lantern.clip", 0.1);
      lc.ppo.epochs = static_cast<int>(cfg_.get_int("lantern.epochs", 2));
      lc.ppo.lr = cfg_.get_double("lantern.lr", 1e-5);
      lc.ppo.max_grad_norm = cfg_.get_double("lantern.max_grad_norm", 5e-3);
      lc.val_interval = static_cast<int>(cfg_.get_int("lantern.val_interval", 2));
      lc.k_max = cfg_.get_double("lantern.k_max", 30.0);
      lc.bonus = cfg_.get_double("lantern.bonus", 10.0);
      lc.nr = nr;
      lc.seed = Rng(seed).split(7).next_u64();
      const std::size_t val_n = static_cast<std::size_t>(cfg_.get_int("lantern.val_samples", 10));
      std::vector<std::size_t> val_idx(pool.holdout_val.begin(),
                                       pool.holdout_val.begin() + std::min(val_n, pool.holdout_val.size()));
      res = run_newtons_lantern(train, pick(pool.collapse, val_idx), policy, reward, lc);
    }
    CsvTable t({"iteration", "mean_reward", "mean_ratio", "clip_fraction", "approx_kl", "ppo_epochs",
                "inner_nr_calls", "val_mean_iters"});
    for (const auto& r : res.history) {
      t.add_row({std::to_string(r.iteration), fmt(r.mean_reward), fmt(r.mean_ratio), fmt(r.clip_fraction),
                 fmt(r.approx_kl), std::to_string(r.ppo_epochs), std::to_string(r.inner_nr_calls),
                 opt_fmt(r.val_mean)});
    }
    Manifest hm = manifest("nrlab.rl-history/1");
    hm.add("best-iteration", std::to_string(res.best_iteration));
    write_text(dir + "/history.csv", t.render(hm));
    write_text(dir + "/policy.txt", manifest("nrlab.policy/1").render() + policy_serialize(res.policy));
    result.summary = "best iteration " + std::to_string(res.best_iteration);
    if (stage == "lantern") result.summary += ", val mean iters " + fmt(res.best_val);
  } else if (stage == "eval") {
    const SnapshotPool pool = load_pool_dir();
    const auto test = pick(pool.collapse, pool.holdout_test);
    const WarmStartModel pre = load_model("pretrain");
    const WarmStartModel sft = load_model("sft");
    const PolicyParams ppo = policy_deserialize(read_text(out_ + "/ppo_vstar/policy.txt"));
    const PolicyParams lantern = policy_deserialize(read_text(out_ + "/lantern/policy.txt"));
    const std::vector<std::pair<std::string, StartProvider>> methods{
        {"flat", [](const Snapshot& s) { return flat_start(s); }},
        {"dc", [](const Snapshot& s) { return dc_start(s); }},
        {"pretrain", [&](const Snapshot& s) { return predict_warmstart(pre, s); }},
        {"sft", [&](const Snapshot& s) { return predict_warmstart(sft, s); }},
        {"ppo-vstar", [&](const Snapshot& s) { return predict_warmstart(ppo.mean, s); }},
        {"lantern", [&](const Snapshot& s) { return predict_warmstart(lantern.mean, s); }},
    };
    CsvTable rows({"method", "snapshot_id", "solved", "iters", "distance", "pbl0"});
    CsvTable table({"method", "solved", "total", "iters_solved", "iters_all", "distance", "pbl0"});
    std::map<std::string, EvalSummary> sums;
    for (const auto& [name, start] : methods) {
      const auto r = evaluate(start, test, nr);
      for (const auto& e : r) {
        rows.add_row({name, e.id, e.solved ? "1" : "0", std::to_string(e.iters), fmt(e.distance), fmt(e.pbl0)});
      }
      const EvalSummary s = summarize(r);
      sums[name] = s;
      table.add_row({name, std::to_string(s.solved), std::to_string(s.total), fmt(s.iters_solved),
                     fmt(s.iters_all), fmt(s.distance), fmt(s.pbl0)});
    }
    write_text(dir + "/rows.csv", rows.render(manifest("nrlab.eval-rows/1")));
    write_text(dir + "/table.csv", table.render(manifest("nrlab.eval-table/1")));

    double best_iters = sums["flat"].iters_all;
    for (const auto& [name, s] : sums) best_iters = std::min(best_iters, s.iters_all);
    CsvTable order({"check", "lhs", "rhs", "pass"});
    auto check = [&](const std::string& name, double lhs, double rhs, bool pass) {
      order.add_row({name, fmt(lhs), fmt(rhs), pass ? "1" : "0"});
    };
    const auto& L = sums["lantern"];
    const auto& S = sums["sft"];
    const auto& P = sums["pretrain"];
    check("lantern_solved_ge_sft", static_cast<double>(L.solved), static_cast<double>(S.solved), L.solved >= S.solved);
    check("lantern_iters_le_sft", L.iters_all, S.iters_all, L.iters_all <= S.iters_all);
    check("sft_iters_le_pretrain", S.iters_all, P.iters_all, S.iters_all <= P.iters_all);
    check("dc_distance_lt_flat", sums["dc"].distance, sums["flat"].distance, sums["dc"].distance < sums["flat"].distance);
    check("dc_not_fastest", sums["dc"].iters_all, best_iters, sums["dc"].iters_all > best_iters);
    write_text(dir + "/ordering.csv", order.render(manifest("nrlab.eval-ordering/1")));
    char buf[160];
    std::snprintf(buf, sizeof buf, "iters(all) flat %.2f dc %.2f pre %.2f sft %.2f ppo %.2f lantern %.2f",
                  sums["flat"].iters_all, sums["dc"].iters_all, P.iters_all, S.iters_all, sums["ppo-vstar"].iters_all,
                  L.iters_all);
    result.summary = buf;
  }

  write_text(marker, hex64(hash) + "\n");
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (progress) progress(result);
  return result;
}

}  // namespace nrlab::tools
