#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rpolab/oracle.hpp"

namespace rpolab {

/// One logged evaluation point. kl_ref / kl_opt are unweighted means over
/// covered prompts, kl_opt_max the max; expected_reward and objective_J are
/// prompt-weighted by the sampling distribution rho.
struct MetricsRow {
  long long step = 0;
  std::string method;
  double tau = 0.0;
  std::uint64_t seed = 0;
  double loss = 0.0;
  double kl_ref = 0.0;
  double kl_opt = 0.0;
  double kl_opt_max = 0.0;
  double expected_reward = 0.0;
  double objective_j = 0.0;
  double lr = 0.0;
  long long wall_ms = 0;
};

/// Fields policy_metrics cannot derive from the policy itself.
struct StepContext {
  long long step = 0;
  std::string method;
  std::uint64_t seed = 0;
  double loss = 0.0;
  double lr = 0.0;
  long long wall_ms = 0;
};

/// Exact-enumeration metrics against the closed-form solution. A restricted
/// solution evaluates over each prompt's observed support with the policy,
/// reference, and prompt weights renormalized; prompts with no observations
/// are skipped.
MetricsRow policy_metrics(const Policy& p, const ReferencePolicy& ref,
                          const OracleSolution& sol, const RewardMap& rewards,
                          const StepContext& ctx);

/// J(pi*) = sum_x rho(x) V*(x), the attainable optimum of objective_J.
double oracle_objective(const OracleSolution& sol, const PromptSpace& space);

/// One training run's logged rows plus its identity.
struct RunSeries {
  std::string method;
  double tau = 0.0;
  std::uint64_t seed = 0;
  std::vector<MetricsRow> rows;
};

/// kl_opt_max threshold defining "converged" for steps-to-threshold columns.
inline constexpr double kConvergenceKl = 1e-2;

struct ComparisonRow {
  std::string method;
  double tau = 0.0;
  std::size_t seeds = 0;
  double final_kl_opt_mean = 0.0;
  double final_kl_opt_std = 0.0;  // population std
  // Mean first step with kl_opt_max < kConvergenceKl over the seeds that
  // reached it; empty when none did.
  std::optional<double> steps_to_threshold;
  double final_objective_j_mean = 0.0;
};

/// First logged step whose kl_opt_max is below the threshold.
std::optional<long long> first_step_reaching(const std::vector<MetricsRow>& rows,
                                             double threshold = kConvergenceKl);

/// Aggregate runs per (method, tau) across seeds, sorted by method then tau.
std::vector<ComparisonRow> compare_runs(const std::vector<RunSeries>& runs);

void emit_csv(const std::vector<MetricsRow>& rows,
              const std::filesystem::path& path);
std::vector<MetricsRow> load_metrics_csv(const std::filesystem::path& path);

void emit_comparison_csv(const std::vector<ComparisonRow>& table,
                         const std::filesystem::path& path);

/// One plot-ready CSV per (method, tau) — columns step, kl_opt, loss, averaged
/// across seeds at aligned steps — plus an index.json naming every series.
void emit_plot_data(const std::vector<RunSeries>& runs,
                    const std::filesystem::path& dir);

}  // namespace rpolab
