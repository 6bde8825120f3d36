#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rpolab/policy.hpp"

namespace rpolab {

enum class Method { Rpo, RpoNoNorm, Dro, Kto, Sft };

/// Exact tokens, case-sensitive: rpo | rpo-nonorm | dro | kto | sft.
Method parse_method(std::string_view token);
std::string_view method_token(Method m);

/// How duplicate (prompt, response) records contribute to the empirical
/// partition sum: once per occurrence (the default, literal summation over
/// record indices) or collapsed to a single term.
enum class PartitionMode { PerOccurrence, Dedup };

struct PromptPartition {
  double z_hat = 0.0;
  double v_hat = 0.0;
  std::size_t contributing = 0;  // records summed into z_hat
  bool full_coverage = false;    // every candidate observed at least once
};

struct PartitionEstimate {
  double tau = 0.0;
  std::string space_digest;
  // Aligned with space prompt order; empty optional = prompt had no records.
  std::vector<std::optional<PromptPartition>> per_prompt;

  const PromptPartition& require(std::size_t prompt_idx) const;
};

/// Z_hat(x) = sum over the prompt's record indices of pi_ref(y_j|x) exp(r_j/tau),
/// accumulated in log space; V_hat = tau ln Z_hat. Rewards are the live
/// (standardized) values; pass allow_raw to accept an unstandardized dataset.
PartitionEstimate empirical_partition(const PromptIndex& index,
                                      const TripletDataset& ds,
                                      const ReferencePolicy& ref, double tau,
                                      PartitionMode mode = PartitionMode::PerOccurrence,
                                      bool allow_raw = false);

/// Per-prompt scalar value estimates, reward units (the DRO value model).
struct ValueTable {
  std::vector<double> values;  // aligned with space prompt order

  ValueTable() = default;
  explicit ValueTable(const PromptSpace& space)
      : values(space.prompts().size(), 0.0) {}
};

struct KtoConfig {
  double beta = 1.0;
  double lambda_d = 1.0;
  double lambda_u = 1.0;
  double threshold = 0.0;  // desirability cut on std_reward

  void validate() const;
};

struct ObjectiveOutput {
  double loss = 0.0;
  std::vector<double> policy_grad;
  std::vector<double> value_grad;  // DRO only, empty otherwise
  std::vector<double> residuals;   // batch-aligned; RPO family and DRO only
};

using Batch = std::span<const std::size_t>;

/// Squared-residual loss against targets (r_i - V_hat(x_i)) / tau:
/// loss = (1/2n) sum delta_i^2, delta_i = ln(pi/pi_ref) - target_i.
/// No gradient flows through V_hat.
ObjectiveOutput rpo_loss_and_grad(const Policy& p, const ReferencePolicy& ref,
                                  const TripletDataset& ds, Batch batch,
                                  const PartitionEstimate& part, double tau);

/// Same residual loss with V_hat replaced by zero (targets r_i / tau).
ObjectiveOutput rpo_nonorm_loss_and_grad(const Policy& p,
                                         const ReferencePolicy& ref,
                                         const TripletDataset& ds, Batch batch,
                                         double tau);

/// Squared Bellman residual (1/2n) sum (r_i - v(x_i) - tau ln(pi/pi_ref))^2,
/// with gradients for both the policy and the value table.
ObjectiveOutput dro_loss_and_grad(const Policy& p, const ValueTable& v,
                                  const ReferencePolicy& ref,
                                  const TripletDataset& ds, Batch batch,
                                  double tau);

/// Per-prompt KL(pi_theta(.|x) || pi_ref(.|x)) by enumeration: the z0 shift.
std::vector<double> policy_reference_kl(const Policy& p,
                                        const ReferencePolicy& ref);

/// Prospect-theoretic loss: v = lambda_D sigma(beta (r_theta - z0)) for
/// desirable records (std_reward >= cfg.threshold), lambda_U sigma(beta (z0 -
/// r_theta)) otherwise; loss = mean(lambda - v). z0 is treated as a constant;
/// pass frozen_shift to evaluate at externally pinned z0 values (the
/// finite-difference harness does).
ObjectiveOutput kto_loss_and_grad(const Policy& p, const ReferencePolicy& ref,
                                  const TripletDataset& ds, Batch batch,
                                  const KtoConfig& cfg,
                                  const std::vector<double>* frozen_shift = nullptr);

/// Maximum likelihood over records with std_reward >= threshold:
/// loss = -mean ln pi_theta(y_i|x_i). Errors when nothing qualifies.
ObjectiveOutput sft_loss_and_grad(const Policy& p, const TripletDataset& ds,
                                  Batch batch, double threshold);

}  // namespace rpolab
