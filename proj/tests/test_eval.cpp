#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <vector>

#include "rpolab/errors.hpp"
#include "rpolab/rng.hpp"
#include "rpolab/eval.hpp"
#include "rpolab/trainer.hpp"
#include "test_support.hpp"

using namespace rpolab;

namespace {

StepContext ctx_of(const char* method = "rpo", double tau = 1.0) {
  StepContext ctx;
  ctx.step = 1;
  ctx.method = method;
  (void)tau;
  return ctx;
}

struct Fixture {
  ts::Env env = ts::default_env();
  ReferencePolicy ref{random_policy(PolicyKind::Tabular, env.space, 11)};
  RewardMap rewards = RewardMap::from_dataset(env.ds, *env.space);
  double tau = 1.0;
  OracleSolution sol = solve_oracle(ref, rewards, tau);

  Policy optimum() const {
    Policy p = Policy::tabular(env.space);
    std::vector<double> params;
    params.reserve(env.space->total_pairs());
    for (const auto& po : sol.per_prompt)
      for (double v : po.optimal) params.push_back(std::log(v));
    p.set_params(params);
    return p;
  }
};

MetricsRow row_at(long long step, const char* method, double tau,
                  std::uint64_t seed, double kl_opt_max) {
  MetricsRow r;
  r.step = step;
  r.method = method;
  r.tau = tau;
  r.seed = seed;
  r.kl_opt_max = kl_opt_max;
  r.kl_opt = kl_opt_max * 0.5;
  r.loss = 1.0 / static_cast<double>(step);
  r.objective_j = 0.25;
  return r;
}

}  // namespace

TEST_CASE("metrics at the closed-form optimum") {
  Fixture f;
  MetricsRow row = policy_metrics(f.optimum(), f.ref, f.sol, f.rewards, ctx_of());
  CHECK(row.kl_opt < 1e-12);
  CHECK(row.kl_opt_max < 1e-12);
  CHECK(row.kl_opt >= -1e-12);
  CHECK(row.objective_j ==
        doctest::Approx(oracle_objective(f.sol, *f.env.space)).epsilon(1e-9));
  CHECK(row.tau == f.tau);
}

TEST_CASE("metrics at the reference policy") {
  Fixture f;
  MetricsRow row = policy_metrics(f.ref.policy(), f.ref, f.sol, f.rewards,
                                  ctx_of());
  CHECK(row.kl_ref == 0.0);
  // With zero reference KL the regularized objective is plain expected reward.
  CHECK(row.objective_j == doctest::Approx(row.expected_reward).epsilon(1e-12));

  // Expected reward matches a direct weighted enumeration.
  double want = 0.0;
  for (std::size_t x = 0; x < f.env.space->prompt_count(); ++x) {
    std::vector<double> pi = f.ref.action_distribution(x);
    for (std::size_t y = 0; y < pi.size(); ++y)
      want += f.env.space->prompt(x).weight * pi[y] * f.rewards.at(x, y);
  }
  CHECK(row.expected_reward == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("two-candidate worked numbers") {
  auto space = ts::pair_space();
  ReferencePolicy ref = ts::uniform_ref(space);
  RewardMap rewards = RewardMap::from_dataset(ts::pair_dataset(), *space);
  OracleSolution sol = solve_oracle(ref, rewards, 1.0);

  MetricsRow row = policy_metrics(ref.policy(), ref, sol, rewards, ctx_of());
  CHECK(row.expected_reward == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(row.objective_j == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(row.kl_opt == doctest::Approx(ts::kKlUniformTilted).epsilon(1e-12));
  CHECK(row.kl_opt_max == row.kl_opt);  // single prompt
  CHECK(oracle_objective(sol, *space) ==
        doctest::Approx(ts::kPairV).epsilon(1e-15));
}

TEST_CASE("objective never beats the oracle and the gap identity holds") {
  Fixture f;
  const double j_star = oracle_objective(f.sol, *f.env.space);
  SplitMix64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Policy p = random_policy(PolicyKind::Tabular, f.env.space, rng.next_u64());
    MetricsRow row = policy_metrics(p, f.ref, f.sol, f.rewards, ctx_of());
    CHECK(row.kl_ref >= -1e-12);
    CHECK(row.kl_opt >= -1e-12);
    CHECK(row.kl_opt_max + 1e-12 >= row.kl_opt);
    CHECK(row.objective_j <= j_star + 1e-9);

    // J* - J equals tau times the rho-weighted KL to the optimum.
    double weighted_kl = 0.0;
    for (std::size_t x = 0; x < f.env.space->prompt_count(); ++x)
      weighted_kl += f.env.space->prompt(x).weight *
                     exact_kl(p.action_distribution(x), f.sol.per_prompt[x].optimal);
    CHECK(j_star - row.objective_j ==
          doctest::Approx(f.tau * weighted_kl).epsilon(1e-9));
  }
}

TEST_CASE("metric evaluation has no side effects on its inputs") {
  Fixture f;
  Policy p = random_policy(PolicyKind::Tabular, f.env.space, 3);
  MetricsRow a = policy_metrics(p, f.ref, f.sol, f.rewards, ctx_of());
  MetricsRow b = policy_metrics(p, f.ref, f.sol, f.rewards, ctx_of());
  CHECK(a.kl_ref == b.kl_ref);
  CHECK(a.kl_opt == b.kl_opt);
  CHECK(a.kl_opt_max == b.kl_opt_max);
  CHECK(a.expected_reward == b.expected_reward);
  CHECK(a.objective_j == b.objective_j);
}

TEST_CASE("restricted solutions evaluate over the observed support only") {
  SyntheticConfig cfg;
  cfg.prompt_count = 4;
  cfg.responses_per_prompt = 6;
  cfg.coverage = 0.5;
  ts::Env env = ts::make_env(cfg, 13);
  ReferencePolicy ref(random_policy(PolicyKind::Tabular, env.space, 2));
  RewardMap rewards = RewardMap::from_dataset(env.ds, *env.space);
  REQUIRE(!rewards.fully_covered());

  OracleSolution sol = solve_oracle_restricted(ref, rewards, 1.0);
  Policy p = random_policy(PolicyKind::Tabular, env.space, 4);
  MetricsRow row = policy_metrics(p, ref, sol, rewards, ctx_of());
  CHECK(std::isfinite(row.kl_opt));
  CHECK(std::isfinite(row.objective_j));
  CHECK(row.kl_ref >= -1e-12);

  // A policy that matches the restricted optimum on the support is optimal
  // regardless of how it spreads mass off support.
  Policy shaped = Policy::tabular(env.space);
  std::vector<double> params = shaped.params();
  std::size_t base = 0;
  for (std::size_t x = 0; x < env.space->prompt_count(); ++x) {
    const auto& po = sol.per_prompt[x];
    for (std::size_t j = 0; j < po.support.size(); ++j)
      params[base + po.support[j]] = std::log(po.optimal[j]);
    base += env.space->candidate_count(x);
  }
  shaped.set_params(params);
  MetricsRow best = policy_metrics(shaped, ref, sol, rewards, ctx_of());
  CHECK(best.kl_opt_max < 1e-12);
}

TEST_CASE("metrics csv format is pinned") {
  ts::TempDir dir;
  const auto path = dir / "metrics.csv";

  SUBCASE("header only for an empty run") {
    emit_csv({}, path);
    CHECK(ts::read_file(path) ==
          "step,method,tau,seed,loss,kl_ref,kl_opt,kl_opt_max,"
          "expected_reward,objective_J,lr,wall_ms\n");
  }
  SUBCASE("one row, line feed endings, exact round trip") {
    MetricsRow r = row_at(50, "rpo", 0.5, 9, 1e-3);
    r.loss = 0.1;
    r.kl_ref = 1.0 / 3.0;
    r.lr = 1e-2;
    r.wall_ms = 0;
    emit_csv({r}, path);
    const std::string body = ts::read_file(path);
    CHECK(std::count(body.begin(), body.end(), '\n') == 2);
    CHECK(body.find('\r') == std::string::npos);
    CHECK(body.find(",rpo,") != std::string::npos);

    std::vector<MetricsRow> back = load_metrics_csv(path);
    REQUIRE(back.size() == 1);
    CHECK(back[0].step == 50);
    CHECK(back[0].method == "rpo");
    CHECK(back[0].tau == 0.5);
    CHECK(back[0].seed == 9);
    CHECK(back[0].loss == 0.1);            // exact through %.17g
    CHECK(back[0].kl_ref == 1.0 / 3.0);    // exact through %.17g
    CHECK(back[0].kl_opt == 5e-4);
    CHECK(back[0].lr == 1e-2);
  }
  SUBCASE("full-run round trip is bit exact") {
    ts::Env env = ts::default_env();
    ReferencePolicy ref(random_policy(PolicyKind::Tabular, env.space, 11));
    TrainConfig cfg;
    cfg.total_steps = 30;
    cfg.eval_interval = 10;
    TrainResult res = train(cfg, env.ds, env.space, ref);
    emit_csv(res.rows, path);
    std::vector<MetricsRow> back = load_metrics_csv(path);
    REQUIRE(back.size() == res.rows.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(back[i].loss == res.rows[i].loss);
      CHECK(back[i].kl_ref == res.rows[i].kl_ref);
      CHECK(back[i].kl_opt == res.rows[i].kl_opt);
      CHECK(back[i].kl_opt_max == res.rows[i].kl_opt_max);
      CHECK(back[i].expected_reward == res.rows[i].expected_reward);
      CHECK(back[i].objective_j == res.rows[i].objective_j);
      CHECK(back[i].lr == res.rows[i].lr);
    }
  }
  SUBCASE("loader rejects foreign headers and short rows") {
    ts::write_file(path, "step,method\n1,rpo\n");
    CHECK_THROWS_AS(load_metrics_csv(path), IoError);
    ts::write_file(path,
                   "step,method,tau,seed,loss,kl_ref,kl_opt,kl_opt_max,"
                   "expected_reward,objective_J,lr,wall_ms\n"
                   "1,rpo,1\n");
    CHECK_THROWS_WITH_AS(load_metrics_csv(path), doctest::Contains("line 2"),
                         IoError);
    CHECK_THROWS_AS(load_metrics_csv(dir / "absent.csv"), IoError);
  }
}

TEST_CASE("run comparison across seeds") {
  SUBCASE("single run echoes its final values") {
    RunSeries run{"rpo", 1.0, 7, {row_at(10, "rpo", 1.0, 7, 5e-3),
                                  row_at(20, "rpo", 1.0, 7, 1e-4)}};
    std::vector<ComparisonRow> table = compare_runs({run});
    REQUIRE(table.size() == 1);
    CHECK(table[0].method == "rpo");
    CHECK(table[0].seeds == 1);
    CHECK(table[0].final_kl_opt_mean == 5e-5);  // kl_opt of the last row
    CHECK(table[0].final_kl_opt_std == 0.0);
    REQUIRE(table[0].steps_to_threshold.has_value());
    CHECK(*table[0].steps_to_threshold == 10.0);
    CHECK(table[0].final_objective_j_mean == 0.25);
  }
  SUBCASE("identical seeds have zero spread") {
    RunSeries a{"dro", 1.0, 1, {row_at(20, "dro", 1.0, 1, 2e-3)}};
    RunSeries b{"dro", 1.0, 2, {row_at(20, "dro", 1.0, 2, 2e-3)}};
    std::vector<ComparisonRow> table = compare_runs({a, b});
    REQUIRE(table.size() == 1);
    CHECK(table[0].seeds == 2);
    CHECK(table[0].final_kl_opt_std == 0.0);
  }
  SUBCASE("runs that never converge produce an empty threshold column") {
    RunSeries a{"kto", 1.0, 1, {row_at(20, "kto", 1.0, 1, 0.5)}};
    std::vector<ComparisonRow> table = compare_runs({a});
    CHECK(!table[0].steps_to_threshold.has_value());
  }
  SUBCASE("groups sort by method then tau") {
    RunSeries a{"rpo", 5.0, 1, {row_at(10, "rpo", 5.0, 1, 1e-3)}};
    RunSeries b{"rpo", 0.5, 1, {row_at(10, "rpo", 0.5, 1, 1e-3)}};
    RunSeries c{"dro", 1.0, 1, {row_at(10, "dro", 1.0, 1, 1e-3)}};
    std::vector<ComparisonRow> table = compare_runs({a, b, c});
    REQUIRE(table.size() == 3);
    CHECK(table[0].method == "dro");
    CHECK(table[1].tau == 0.5);
    CHECK(table[2].tau == 5.0);
  }
  SUBCASE("comparison csv header") {
    ts::TempDir dir;
    RunSeries run{"rpo", 1.0, 7, {row_at(10, "rpo", 1.0, 7, 1e-3)}};
    emit_comparison_csv(compare_runs({run}), dir / "cmp.csv");
    const std::string body = ts::read_file(dir / "cmp.csv");
    CHECK(body.rfind("method,tau,seeds,final_kl_opt_mean,final_kl_opt_std,"
                     "steps_to_threshold,final_objective_J\n",
                     0) == 0);
    CHECK(body.find("not_reached") == std::string::npos);
  }
}

TEST_CASE("first_step_reaching scans in logged order") {
  std::vector<MetricsRow> rows = {row_at(5, "rpo", 1.0, 0, 0.5),
                                  row_at(10, "rpo", 1.0, 0, 9e-3),
                                  row_at(15, "rpo", 1.0, 0, 0.3)};
  auto hit = first_step_reaching(rows);
  REQUIRE(hit.has_value());
  CHECK(*hit == 10);
  CHECK(!first_step_reaching({rows[0]}).has_value());
  CHECK(!first_step_reaching({}).has_value());
}

TEST_CASE("plot data emission") {
  ts::TempDir dir;
  auto make_run = [](const char* method, double tau, std::uint64_t seed,
                     double scale) {
    RunSeries run{method, tau, seed, {}};
    for (long long s : {10, 20, 30})
      run.rows.push_back(
          row_at(s, method, tau, seed, scale / static_cast<double>(s)));
    return run;
  };
  std::vector<RunSeries> runs = {
      make_run("rpo", 1.0, 1, 1.0), make_run("rpo", 1.0, 2, 2.0),
      make_run("rpo", 0.5, 1, 1.0), make_run("dro", 1.0, 1, 1.0)};

  emit_plot_data(runs, dir.path());

  CHECK(std::filesystem::exists(dir / "series_rpo_tau1.csv"));
  CHECK(std::filesystem::exists(dir / "series_rpo_tau0.5.csv"));
  CHECK(std::filesystem::exists(dir / "series_dro_tau1.csv"));
  CHECK(std::filesystem::exists(dir / "index.json"));

  // Averaged across the two seeds: kl_opt at step 10 is (0.05 + 0.1) / 2.
  const std::string body = ts::read_file(dir / "series_rpo_tau1.csv");
  CHECK(body.rfind("step,", 0) == 0);
  CHECK(body.find("\n10,") != std::string::npos);
  CHECK(body.find("0.075") != std::string::npos);

  const std::string index = ts::read_file(dir / "index.json");
  CHECK(index.find("series_rpo_tau1.csv") != std::string::npos);
  CHECK(index.find("series_dro_tau1.csv") != std::string::npos);

  SUBCASE("regeneration is byte identical") {
    const std::string before = ts::read_file(dir / "series_rpo_tau1.csv");
    const std::string idx_before = ts::read_file(dir / "index.json");
    emit_plot_data(runs, dir.path());
    CHECK(ts::read_file(dir / "series_rpo_tau1.csv") == before);
    CHECK(ts::read_file(dir / "index.json") == idx_before);
  }
  SUBCASE("misaligned step grids are rejected") {
    std::vector<RunSeries> bad = runs;
    bad[1].rows.pop_back();
    CHECK_THROWS_AS(emit_plot_data(bad, dir.path()), UsageError);
  }
}
