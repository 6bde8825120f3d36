#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>
#include <vector>

#include "rpolab/errors.hpp"
#include "rpolab/rng.hpp"
#include "rpolab/objectives.hpp"
#include "rpolab/oracle.hpp"
#include "test_support.hpp"

using namespace rpolab;

namespace {

std::vector<std::size_t> all_indices(const TripletDataset& ds) {
  std::vector<std::size_t> idx(ds.records.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

// Policy whose log-ratios against ref equal the targets (r - v_hat) / tau,
// built by writing logits = ln pi_ref + target per pair.
Policy zero_residual_policy(const ts::Env& env, const ReferencePolicy& ref,
                            const PartitionEstimate& part, double tau) {
  Policy p = Policy::tabular(env.space);
  std::vector<double> params = p.params();
  std::size_t k = 0;
  RewardMap rewards = RewardMap::from_dataset(env.ds, *env.space);
  for (std::size_t x = 0; x < env.space->prompt_count(); ++x) {
    const double v_hat = part.require(x).v_hat;
    for (std::size_t y = 0; y < env.space->candidate_count(x); ++y)
      params[k++] = ref.log_prob(x, y) + (rewards.at(x, y) - v_hat) / tau;
  }
  p.set_params(params);
  return p;
}

}  // namespace

TEST_CASE("empirical partition worked examples") {
  auto space = ts::pair_space();
  ReferencePolicy ref = ts::uniform_ref(space);

  SUBCASE("full coverage reproduces the closed form") {
    TripletDataset ds = ts::pair_dataset();
    PartitionEstimate part =
        empirical_partition(group_by_prompt(ds), ds, ref, 1.0);
    const PromptPartition& pp = part.require(0);
    CHECK(pp.z_hat == doctest::Approx(ts::kPairZ).epsilon(1e-15));
    CHECK(pp.v_hat == doctest::Approx(ts::kPairV).epsilon(1e-15));
    CHECK(pp.v_hat == doctest::Approx(std::log(pp.z_hat)).epsilon(1e-15));
    CHECK(pp.contributing == 2);
    CHECK(pp.full_coverage);
    CHECK(part.tau == 1.0);
    CHECK(part.space_digest == space->digest());
  }
  SUBCASE("subset sums only the observed records") {
    TripletDataset ds;
    ds.records.push_back({"x0", "a", 1.0, 1.0});
    ds.standardized = true;
    PartitionEstimate part =
        empirical_partition(group_by_prompt(ds), ds, ref, 1.0);
    CHECK(part.require(0).z_hat ==
          doctest::Approx(ts::kPairZSubset).epsilon(1e-15));
    CHECK(!part.require(0).full_coverage);
  }
  SUBCASE("duplicates count per occurrence by default, once under dedup") {
    TripletDataset ds;
    ds.records.push_back({"x0", "a", 1.0, 1.0});
    ds.records.push_back({"x0", "a", 1.0, 1.0});
    ds.standardized = true;
    PromptIndex idx = group_by_prompt(ds);

    PartitionEstimate per = empirical_partition(idx, ds, ref, 1.0);
    CHECK(per.require(0).z_hat == doctest::Approx(ts::kPairZDup).epsilon(1e-15));
    CHECK(per.require(0).contributing == 2);

    PartitionEstimate dedup =
        empirical_partition(idx, ds, ref, 1.0, PartitionMode::Dedup);
    CHECK(dedup.require(0).z_hat ==
          doctest::Approx(ts::kPairZSubset).epsilon(1e-15));
    CHECK(dedup.require(0).contributing == 1);
  }
  SUBCASE("dedup keeps the latest reward of a repeated pair") {
    TripletDataset ds;
    ds.records.push_back({"x0", "a", 1.0, 1.0});
    ds.records.push_back({"x0", "a", 0.0, 0.0});
    ds.standardized = true;
    PartitionEstimate dedup = empirical_partition(group_by_prompt(ds), ds, ref,
                                                  1.0, PartitionMode::Dedup);
    CHECK(dedup.require(0).z_hat == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("input gating") {
    TripletDataset raw = ts::pair_dataset();
    raw.standardized = false;
    CHECK_THROWS_AS(empirical_partition(group_by_prompt(raw), raw, ref, 1.0),
                    UsageError);
    CHECK_NOTHROW(empirical_partition(group_by_prompt(raw), raw, ref, 1.0,
                                      PartitionMode::PerOccurrence, true));
    TripletDataset ds = ts::pair_dataset();
    CHECK_THROWS_AS(empirical_partition(group_by_prompt(ds), ds, ref, 0.0),
                    UsageError);
    PromptIndex holed;
    holed["x0"] = {};
    CHECK_THROWS_AS(empirical_partition(holed, ds, ref, 1.0), UsageError);
    ts::Env env = ts::default_env();
    ReferencePolicy env_ref = ts::uniform_ref(env.space);
    PromptIndex crossed = group_by_prompt(env.ds);
    // Move one record of the second prompt under the first.
    const std::string& p0 = env.space->prompt(0).id;
    const std::string& p1 = env.space->prompt(1).id;
    crossed[p0].push_back(crossed[p1].back());
    CHECK_THROWS_AS(empirical_partition(crossed, env.ds, env_ref, 1.0),
                    UsageError);
  }
}

TEST_CASE("empirical partition grows with additional records") {
  ts::Env env = ts::default_env(19);
  ReferencePolicy ref(random_policy(PolicyKind::Tabular, env.space, 23));
  const double tau = 1.4;

  TripletDataset subset;
  subset.standardized = true;
  subset.records.assign(env.ds.records.begin(), env.ds.records.begin() + 20);

  PartitionEstimate before =
      empirical_partition(group_by_prompt(subset), subset, ref, tau);
  subset.records.push_back(env.ds.records[20]);
  PartitionEstimate after =
      empirical_partition(group_by_prompt(subset), subset, ref, tau);

  const std::size_t grown =
      env.space->prompt_index(env.ds.records[20].prompt_id);
  CHECK(after.require(grown).z_hat > before.require(grown).z_hat);
}

TEST_CASE("squared-residual objective on the worked example") {
  auto space = ts::pair_space();
  ReferencePolicy ref = ts::uniform_ref(space);
  TripletDataset ds = ts::pair_dataset();
  PartitionEstimate part = empirical_partition(group_by_prompt(ds), ds, ref, 1.0);
  auto batch = all_indices(ds);

  SUBCASE("loss and gradient at the reference") {
    Policy p = uniform_policy(PolicyKind::Tabular, space);
    ObjectiveOutput out = rpo_loss_and_grad(p, ref, ds, batch, part, 1.0);
    CHECK(out.loss == doctest::Approx(ts::kPairRpoLoss).epsilon(1e-15));
    REQUIRE(out.residuals.size() == 2);
    // delta_i = -(r_i - V_hat); residuals on the two records are opposite.
    CHECK(out.residuals[0] ==
          doctest::Approx(-(1.0 - ts::kPairV)).epsilon(1e-15));
    CHECK(out.residuals[1] == doctest::Approx(ts::kPairV).epsilon(1e-15));

    // d loss / d logit(a) = mean_i delta_i (1{y_i=a} - pi(a)); with pi = 1/2
    // and opposite residuals this collapses to delta_1 / 2 = -0.25 exactly.
    REQUIRE(out.policy_grad.size() == 2);
    CHECK(out.policy_grad[0] == -0.25);
    CHECK(out.policy_grad[1] == 0.25);
    CHECK(out.value_grad.empty());
  }
  SUBCASE("loss vanishes at the tilted optimum") {
    ts::Env env{space, ds};
    Policy opt = zero_residual_policy(env, ref, part, 1.0);
    ObjectiveOutput out = rpo_loss_and_grad(opt, ref, ds, batch, part, 1.0);
    CHECK(out.loss < 1e-28);
    for (double g : out.policy_grad) CHECK(std::abs(g) < 1e-14);
  }
  SUBCASE("partition estimate must match tau and space") {
    Policy p = uniform_policy(PolicyKind::Tabular, space);
    CHECK_THROWS_AS(rpo_loss_and_grad(p, ref, ds, batch, part, 2.0),
                    UsageError);
    PartitionEstimate foreign = part;
    foreign.space_digest = "other";
    CHECK_THROWS_AS(rpo_loss_and_grad(p, ref, ds, batch, foreign, 1.0),
                    UsageError);
  }
  SUBCASE("empty batch and bad indices") {
    Policy p = uniform_policy(PolicyKind::Tabular, space);
    std::vector<std::size_t> empty;
    CHECK_THROWS_AS(rpo_loss_and_grad(p, ref, ds, empty, part, 1.0),
                    UsageError);
    std::vector<std::size_t> oob = {5};
    CHECK_THROWS_AS(rpo_loss_and_grad(p, ref, ds, oob, part, 1.0), UsageError);
  }
}

TEST_CASE("per-prompt reward shifts leave the normalized residuals unchanged") {
  ts::Env env = ts::default_env(41);
  ReferencePolicy ref(random_policy(PolicyKind::Tabular, env.space, 2));
  Policy p = random_policy(PolicyKind::Tabular, env.space, 3);
  auto batch = all_indices(env.ds);
  const double tau = 0.9;

  TripletDataset shifted = env.ds;
  for (auto& r : shifted.records)
    if (r.prompt_id == env.space->prompt(2).id) r.std_reward += 3.5;

  PartitionEstimate part_a =
      empirical_partition(group_by_prompt(env.ds), env.ds, ref, tau);
  PartitionEstimate part_b =
      empirical_partition(group_by_prompt(shifted), shifted, ref, tau);

  // V_hat absorbs the shift, so loss and gradient agree.
  ObjectiveOutput a = rpo_loss_and_grad(p, ref, env.ds, batch, part_a, tau);
  ObjectiveOutput b = rpo_loss_and_grad(p, ref, shifted, batch, part_b, tau);
  CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-9));
  for (std::size_t i = 0; i < a.policy_grad.size(); ++i)
    CHECK(a.policy_grad[i] == doctest::Approx(b.policy_grad[i]).epsilon(1e-9));

  // The unnormalized variant has no V_hat and must feel the shift.
  ObjectiveOutput na = rpo_nonorm_loss_and_grad(p, ref, env.ds, batch, tau);
  ObjectiveOutput nb = rpo_nonorm_loss_and_grad(p, ref, shifted, batch, tau);
  CHECK(std::abs(na.loss - nb.loss) > 1e-3);
}

TEST_CASE("unnormalized residual objective") {
  auto space = ts::pair_space();
  ReferencePolicy ref = ts::uniform_ref(space);
  TripletDataset ds = ts::pair_dataset();
  auto batch = all_indices(ds);
  Policy p = uniform_policy(PolicyKind::Tabular, space);

  // At the reference, deltas are -1 and 0: loss = (1 + 0) / 4 = 0.25.
  ObjectiveOutput out = rpo_nonorm_loss_and_grad(p, ref, ds, batch, 1.0);
  CHECK(out.loss == doctest::Approx(0.25).epsilon(1e-15));

  SUBCASE("achievable minimum stays strictly positive") {
    // With z := pi(a), the loss is [ (ln(2z) - 1)^2 + ln(2(1-z))^2 ] / 4.
    // A normalized softmax cannot zero both terms; scan z to find the floor.
    double best = 1e300;
    for (int i = 1; i < 100000; ++i) {
      const double z = static_cast<double>(i) / 100000.0;
      const double t1 = std::log(2.0 * z) - 1.0;
      const double t2 = std::log(2.0 * (1.0 - z));
      best = std::min(best, 0.25 * (t1 * t1 + t2 * t2));
    }
    CHECK(best == doctest::Approx(0.16761291199842343).epsilon(1e-6));
    CHECK(best > 0.1);

    // The analytic objective agrees with the scan formula at the scan's
    // minimizer, so the floor applies to it too.
    Policy q = Policy::tabular(space);
    const double z_star = 0.6574872307940355;
    q.set_params(std::vector<double>{std::log(z_star), std::log(1.0 - z_star)});
    ObjectiveOutput at_min = rpo_nonorm_loss_and_grad(q, ref, ds, batch, 1.0);
    CHECK(at_min.loss == doctest::Approx(0.16761291199842343).epsilon(1e-6));
  }
  SUBCASE("matches the normalized objective on a zero-shift dataset") {
    // If V_hat happens to be 0 (z_hat = 1), both objectives coincide.
    TripletDataset zds;
    zds.records.push_back({"x0", "a", 0.0, std::log(2.0)});
    zds.standardized = true;
    PartitionEstimate part =
        empirical_partition(group_by_prompt(zds), zds, ref, 1.0);
    CHECK(part.require(0).v_hat == doctest::Approx(0.0).epsilon(1e-15));
    std::vector<std::size_t> b0 = {0};
    Policy r = random_policy(PolicyKind::Tabular, space, 6);
    ObjectiveOutput norm = rpo_loss_and_grad(r, ref, zds, b0, part, 1.0);
    ObjectiveOutput nonorm = rpo_nonorm_loss_and_grad(r, ref, zds, b0, 1.0);
    CHECK(norm.loss == doctest::Approx(nonorm.loss).epsilon(1e-15));
  }
}

TEST_CASE("joint residual objective with a value table") {
  auto space = ts::pair_space();
  ReferencePolicy ref = ts::uniform_ref(space);
  TripletDataset ds = ts::pair_dataset();
  auto batch = all_indices(ds);

  SUBCASE("zero loss at the closed-form optimum") {
    RewardMap rewards = RewardMap::from_dataset(ds, *space);
    OracleSolution sol = solve_oracle(ref, rewards, 1.0);
    Policy p = Policy::tabular(space);
    p.set_params(std::vector<double>{std::log(sol.per_prompt[0].optimal[0]),
                                     std::log(sol.per_prompt[0].optimal[1])});
    ValueTable v(*space);
    v.values[0] = sol.per_prompt[0].soft_value;
    ObjectiveOutput out = dro_loss_and_grad(p, v, ref, ds, batch, 1.0);
    CHECK(out.loss < 1e-12);
    for (double g : out.policy_grad) CHECK(std::abs(g) < 1e-7);
    for (double g : out.value_grad) CHECK(std::abs(g) < 1e-7);
  }
  SUBCASE("reference policy with zero values") {
    Policy p = uniform_policy(PolicyKind::Tabular, space);
    ValueTable v(*space);
    ObjectiveOutput out = dro_loss_and_grad(p, v, ref, ds, batch, 1.0);
    // Residuals are r_i: loss = (1 + 0) / 4.
    CHECK(out.loss == doctest::Approx(0.25).epsilon(1e-15));
    // d loss / d v(x) = -(1/n) sum e_i = -(1 + 0) / 2.
    REQUIRE(out.value_grad.size() == 1);
    CHECK(out.value_grad[0] == -0.5);
    REQUIRE(out.residuals.size() == 2);
    CHECK(out.residuals[0] == 1.0);
    CHECK(out.residuals[1] == 0.0);
  }
  SUBCASE("both gradient blocks match finite differences") {
    ts::Env env = ts::default_env(55);
    ReferencePolicy r2(random_policy(PolicyKind::Tabular, env.space, 5));
    Policy p = random_policy(PolicyKind::Tabular, env.space, 6);
    ValueTable v(*env.space);
    SplitMix64 rng(91);
    for (double& val : v.values) val = rng.next_gaussian();
    auto b = all_indices(env.ds);
    const double tau = 0.8;

    ObjectiveOutput out = dro_loss_and_grad(p, v, r2, env.ds, b, tau);

    const std::size_t np = p.param_count();
    std::vector<double> joint = p.params();
    joint.insert(joint.end(), v.values.begin(), v.values.end());
    std::vector<double> numeric = finite_diff_grad(
        [&](std::span<const double> params) {
          Policy pp = p;
          pp.set_params(params.subspan(0, np));
          ValueTable vv(*env.space);
          for (std::size_t i = 0; i < vv.values.size(); ++i)
            vv.values[i] = params[np + i];
          return dro_loss_and_grad(pp, vv, r2, env.ds, b, tau).loss;
        },
        joint);
    std::vector<double> analytic = out.policy_grad;
    analytic.insert(analytic.end(), out.value_grad.begin(), out.value_grad.end());
    CHECK(relative_error(analytic, numeric) < 1e-5);
  }
  SUBCASE("value table must match the space") {
    Policy p = uniform_policy(PolicyKind::Tabular, space);
    ValueTable wrong;
    wrong.values = {0.0, 0.0};
    CHECK_THROWS_AS(dro_loss_and_grad(p, wrong, ref, ds, batch, 1.0),
                    UsageError);
  }
}

TEST_CASE("prospect-theoretic objective") {
  auto space = ts::pair_space();
  ReferencePolicy ref = ts::uniform_ref(space);
  TripletDataset ds = ts::pair_dataset();
  auto batch = all_indices(ds);
  KtoConfig cfg;
  cfg.threshold = 0.5;  // record a desirable, record b undesirable

  SUBCASE("at the reference both sigmoids sit at 1/2") {
    Policy p = uniform_policy(PolicyKind::Tabular, space);
    ObjectiveOutput out = kto_loss_and_grad(p, ref, ds, batch, cfg);
    // r_theta = 0 and z0 = 0, so v = lambda/2 on both records.
    CHECK(out.loss == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("loss is bounded by the lambda weights") {
    SplitMix64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
      Policy p = random_policy(PolicyKind::Tabular, space, rng.next_u64());
      ObjectiveOutput out = kto_loss_and_grad(p, ref, ds, batch, cfg);
      CHECK(out.loss > 0.0);
      CHECK(out.loss < 1.0);
    }
  }
  SUBCASE("moving mass toward the desirable record lowers the loss") {
    Policy p = Policy::tabular(space);
    p.set_params(std::vector<double>{2.0, -2.0});
    Policy q = Policy::tabular(space);
    q.set_params(std::vector<double>{-2.0, 2.0});
    const double good = kto_loss_and_grad(p, ref, ds, batch, cfg).loss;
    const double bad = kto_loss_and_grad(q, ref, ds, batch, cfg).loss;
    CHECK(good < bad);
  }
  SUBCASE("gradient matches finite differences under a frozen shift") {
    ts::Env env = ts::default_env(66);
    ReferencePolicy r2(random_policy(PolicyKind::Tabular, env.space, 4));
    Policy p = random_policy(PolicyKind::Tabular, env.space, 9);
    auto b = all_indices(env.ds);
    KtoConfig kc;
    kc.beta = 1.7;
    kc.lambda_d = 1.2;
    kc.lambda_u = 0.9;

    const std::vector<double> z0 = policy_reference_kl(p, r2);
    ObjectiveOutput out = kto_loss_and_grad(p, r2, env.ds, b, kc);
    std::vector<double> numeric = finite_diff_grad(
        [&](std::span<const double> params) {
          Policy pp = p;
          pp.set_params(params);
          return kto_loss_and_grad(pp, r2, env.ds, b, kc, &z0).loss;
        },
        p.params());
    CHECK(relative_error(out.policy_grad, numeric) < 1e-5);
  }
  SUBCASE("a record with NaN reward cannot be classified") {
    TripletDataset bad = ds;
    bad.records[0].std_reward = std::nan("");
    Policy p = uniform_policy(PolicyKind::Tabular, space);
    CHECK_THROWS_AS(kto_loss_and_grad(p, ref, bad, batch, cfg), UsageError);
  }
  SUBCASE("config validation") {
    KtoConfig bad;
    bad.beta = 0.0;
    CHECK_THROWS_AS(bad.validate(), UsageError);
    bad = {};
    bad.lambda_d = -1.0;
    CHECK_THROWS_AS(bad.validate(), UsageError);
  }
}

TEST_CASE("reference KL enumeration used as the prospect shift") {
  ts::Env env = ts::default_env(3);
  ReferencePolicy ref(random_policy(PolicyKind::Tabular, env.space, 8));
  Policy p = random_policy(PolicyKind::Tabular, env.space, 9);
  std::vector<double> z0 = policy_reference_kl(p, ref);
  REQUIRE(z0.size() == env.space->prompt_count());
  for (std::size_t x = 0; x < z0.size(); ++x) {
    CHECK(z0[x] >= 0.0);
    CHECK(z0[x] == doctest::Approx(exact_kl(p.action_distribution(x),
                                            ref.action_distribution(x)))
                       .epsilon(1e-14));
  }
  // A policy equal to the reference has zero shift everywhere.
  for (double v : policy_reference_kl(ref.policy(), ref)) CHECK(v == 0.0);
}

TEST_CASE("maximum-likelihood objective over qualifying records") {
  auto space = ts::pair_space();
  TripletDataset ds = ts::pair_dataset();
  auto batch = all_indices(ds);

  SUBCASE("uniform policy on the single qualifying record") {
    Policy p = uniform_policy(PolicyKind::Tabular, space);
    ObjectiveOutput out = sft_loss_and_grad(p, ds, batch, 0.5);
    CHECK(out.loss == doctest::Approx(ts::kLn2).epsilon(1e-15));
    // grad = -(1{y=a} - pi): pushes probability toward record a.
    CHECK(out.policy_grad[0] == doctest::Approx(-0.5).epsilon(1e-15));
    CHECK(out.policy_grad[1] == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("a policy concentrated on the kept record drives loss to zero") {
    Policy p = Policy::tabular(space);
    p.set_params(std::vector<double>{30.0, 0.0});
    CHECK(sft_loss_and_grad(p, ds, batch, 0.5).loss < 1e-8);
  }
  SUBCASE("no qualifying records is an error") {
    Policy p = uniform_policy(PolicyKind::Tabular, space);
    CHECK_THROWS_AS(sft_loss_and_grad(p, ds, batch, 100.0), UsageError);
  }
  SUBCASE("gradient matches finite differences") {
    ts::Env env = ts::default_env(77);
    Policy p = random_policy(PolicyKind::Tabular, env.space, 10);
    auto b = all_indices(env.ds);
    ObjectiveOutput out = sft_loss_and_grad(p, env.ds, b, 0.0);
    std::vector<double> numeric = finite_diff_grad(
        [&](std::span<const double> params) {
          Policy pp = p;
          pp.set_params(params);
          return sft_loss_and_grad(pp, env.ds, b, 0.0).loss;
        },
        p.params());
    CHECK(relative_error(out.policy_grad, numeric) < 1e-5);
  }
}

TEST_CASE("analytic gradients match finite differences for both policy classes") {
  SyntheticConfig fc;
  fc.prompt_count = 3;
  fc.responses_per_prompt = 4;
  fc.reward_law = RewardLaw::FeatureLinear;
  fc.feature_dim = 3;
  ts::Env feat = ts::make_env(fc, 8);
  ts::Env tab = ts::default_env(9);

  for (auto& [env, kind, hidden] :
       {std::tuple<ts::Env&, PolicyKind, std::size_t>{tab, PolicyKind::Tabular, 0},
        std::tuple<ts::Env&, PolicyKind, std::size_t>{feat, PolicyKind::Featurized, 5}}) {
    ReferencePolicy ref(random_policy(PolicyKind::Tabular, env.space, 14));
    Policy p = random_policy(kind, env.space, 15, hidden ? hidden : 8);
    auto batch = all_indices(env.ds);
    const double tau = 1.1;
    PartitionEstimate part =
        empirical_partition(group_by_prompt(env.ds), env.ds, ref, tau);

    auto check_fd = [&](auto loss_of) {
      std::vector<double> numeric = finite_diff_grad(
          [&](std::span<const double> params) {
            Policy pp = p;
            pp.set_params(params);
            return loss_of(pp).loss;
          },
          p.params());
      CHECK(relative_error(loss_of(p).policy_grad, numeric) < 1e-5);
    };

    check_fd([&](const Policy& pp) {
      return rpo_loss_and_grad(pp, ref, env.ds, batch, part, tau);
    });
    check_fd([&](const Policy& pp) {
      return rpo_nonorm_loss_and_grad(pp, ref, env.ds, batch, tau);
    });
  }
}

TEST_CASE("a sharper reweighting: minibatch gradients average to the full batch") {
  ts::Env env = ts::default_env(101);
  ReferencePolicy ref(random_policy(PolicyKind::Tabular, env.space, 1));
  Policy p = random_policy(PolicyKind::Tabular, env.space, 2);
  const double tau = 1.0;
  PartitionEstimate part =
      empirical_partition(group_by_prompt(env.ds), env.ds, ref, tau);

  auto full = all_indices(env.ds);
  ObjectiveOutput whole = rpo_loss_and_grad(p, ref, env.ds, full, part, tau);

  // Two disjoint halves; the record-weighted average of their gradients must
  // reproduce the full-batch gradient.
  const std::size_t n = full.size(), h = n / 2;
  std::vector<std::size_t> first(full.begin(), full.begin() + h);
  std::vector<std::size_t> second(full.begin() + h, full.end());
  ObjectiveOutput a = rpo_loss_and_grad(p, ref, env.ds, first, part, tau);
  ObjectiveOutput b = rpo_loss_and_grad(p, ref, env.ds, second, part, tau);

  const double wa = static_cast<double>(h) / static_cast<double>(n);
  const double wb = 1.0 - wa;
  for (std::size_t i = 0; i < whole.policy_grad.size(); ++i)
    CHECK(whole.policy_grad[i] ==
          doctest::Approx(wa * a.policy_grad[i] + wb * b.policy_grad[i])
              .epsilon(1e-12));
  CHECK(whole.loss == doctest::Approx(wa * a.loss + wb * b.loss).epsilon(1e-12));
}

TEST_CASE("method tokens") {
  CHECK(parse_method("rpo") == Method::Rpo);
  CHECK(parse_method("rpo-nonorm") == Method::RpoNoNorm);
  CHECK(parse_method("dro") == Method::Dro);
  CHECK(parse_method("kto") == Method::Kto);
  CHECK(parse_method("sft") == Method::Sft);
  for (Method m : {Method::Rpo, Method::RpoNoNorm, Method::Dro, Method::Kto,
                   Method::Sft}) {
    CHECK(parse_method(std::string(method_token(m))) == m);
  }
  CHECK_THROWS_WITH_AS(parse_method("RPO"), doctest::Contains("rpo-nonorm"),
                       UsageError);
  CHECK_THROWS_AS(parse_method("dpo"), UsageError);
}
