#pragma once

#include <functional>
#include <span>
#include <vector>

#include "rpolab/policy.hpp"

namespace rpolab {

/// Deterministic reward lookup per (prompt, response), candidate-indexed.
/// Built from a dataset's live (standardized when available) rewards; later
/// occurrences of the same pair win unless strict mode is on, in which case
/// conflicting duplicates are an error.
class RewardMap {
 public:
  explicit RewardMap(const PromptSpace& space);
  static RewardMap from_dataset(const TripletDataset& ds, const PromptSpace& space,
                                bool strict = false);

  void set(std::size_t prompt_idx, std::size_t response_idx, double reward);
  bool has(std::size_t prompt_idx, std::size_t response_idx) const;
  double at(std::size_t prompt_idx, std::size_t response_idx) const;

  // Observed candidate indices for one prompt, ascending.
  std::vector<std::size_t> observed(std::size_t prompt_idx) const;
  bool prompt_fully_covered(std::size_t prompt_idx) const;
  bool fully_covered() const;

  std::size_t prompt_count() const { return values_.size(); }

 private:
  std::vector<std::vector<double>> values_;  // NaN marks a missing reward
};

struct PromptOracle {
  double partition = 0.0;            // Z(x)
  double soft_value = 0.0;           // V*(x) = tau ln Z(x)
  std::vector<double> optimal;       // pi*(.|x) over the support
  std::vector<std::size_t> support;  // candidate indices the solution covers
};

struct OracleSolution {
  double tau = 0.0;
  std::vector<PromptOracle> per_prompt;  // aligned with space prompt order
  bool restricted = false;               // true when support < candidate set
};

/// Z(x) = sum_y pi_ref(y|x) exp(r(x,y)/tau), evaluated in log space.
double exact_partition(const ReferencePolicy& ref, const RewardMap& rewards,
                       std::size_t prompt_idx, double tau);
double exact_partition(const ReferencePolicy& ref, const RewardMap& rewards,
                       const std::string& prompt_id, double tau);

/// V*(x) = tau ln Z(x), computed as tau * logsumexp without forming Z.
double soft_value(const ReferencePolicy& ref, const RewardMap& rewards,
                  std::size_t prompt_idx, double tau);
double soft_value(const ReferencePolicy& ref, const RewardMap& rewards,
                  const std::string& prompt_id, double tau);

/// pi*(y|x) = pi_ref(y|x) exp((r(x,y) - V*(x)) / tau).
std::vector<double> optimal_policy(const ReferencePolicy& ref,
                                   const RewardMap& rewards,
                                   std::size_t prompt_idx, double tau);
std::vector<double> optimal_policy(const ReferencePolicy& ref,
                                   const RewardMap& rewards,
                                   const std::string& prompt_id, double tau);

/// Full-coverage closed-form solution for every prompt.
OracleSolution solve_oracle(const ReferencePolicy& ref, const RewardMap& rewards,
                            double tau);

/// Partial-coverage variant: each prompt's universe is its observed candidate
/// set, with the reference renormalized over that support. Prompts with no
/// observations get an empty support.
OracleSolution solve_oracle_restricted(const ReferencePolicy& ref,
                                       const RewardMap& rewards, double tau);

/// KL(p || q) = sum p ln(p/q) with 0 ln 0 = 0. q must be strictly positive.
double exact_kl(std::span<const double> p, std::span<const double> q);

/// r(x,y) - V*(x) - tau ln(pi*(y|x) / pi_ref(y|x)); zero by construction.
double identity_residual(const RewardMap& rewards, const OracleSolution& sol,
                         const ReferencePolicy& ref, double tau,
                         std::size_t prompt_idx, std::size_t response_idx);

/// Central finite differences, the gradient oracle for all analytic gradients.
std::vector<double> finite_diff_grad(
    const std::function<double(std::span<const double>)>& loss,
    std::span<const double> params, double step = 1e-5);

/// Gradient-check metric: max-norm of the difference over max(1, max-norm of b).
double relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace rpolab
