#include "rpolab/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "rpolab/errors.hpp"
#include "rpolab/oracle.hpp"

namespace rpolab {

namespace {

void check_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw UsageError("tau must be finite and positive");
  }
}

void check_batch(Batch batch, const TripletDataset& ds) {
  if (batch.empty()) throw UsageError("batch must not be empty");
  for (std::size_t idx : batch) {
    if (idx >= ds.records.size()) {
      throw UsageError("batch index " + std::to_string(idx) +
                       " out of range for dataset of " +
                       std::to_string(ds.records.size()) + " records");
    }
  }
}

struct RecordRef {
  std::size_t prompt_idx;
  std::size_t response_idx;
  double reward;
};

RecordRef resolve(const PromptSpace& space, const TripletRecord& rec) {
  const std::size_t p = space.prompt_index(rec.prompt_id);
  return {p, space.response_index(p, rec.response_id), rec.std_reward};
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Shared core of the RPO pair: squared residuals against per-record targets.
ObjectiveOutput residual_objective(const Policy& p, const ReferencePolicy& ref,
                                   const TripletDataset& ds, Batch batch,
                                   const PartitionEstimate* part, double tau) {
  check_tau(tau);
  check_batch(batch, ds);
  const PromptSpace& space = p.space();
  ObjectiveOutput out;
  out.policy_grad.assign(p.param_count(), 0.0);
  out.residuals.reserve(batch.size());
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  std::span<double> grad(out.policy_grad);
  for (std::size_t idx : batch) {
    const RecordRef r = resolve(space, ds.records[idx]);
    const double v_hat = part ? part->require(r.prompt_idx).v_hat : 0.0;
    const double target = (r.reward - v_hat) / tau;
    const double delta =
        p.log_prob(r.prompt_idx, r.response_idx) -
        ref.log_prob(r.prompt_idx, r.response_idx) - target;
    out.loss += 0.5 * delta * delta * inv_n;
    p.accumulate_param_grad_log_prob(r.prompt_idx, r.response_idx,
                                     delta * inv_n, grad);
    out.residuals.push_back(delta);
  }
  return out;
}

}  // namespace

Method parse_method(std::string_view token) {
  if (token == "rpo") return Method::Rpo;
  if (token == "rpo-nonorm") return Method::RpoNoNorm;
  if (token == "dro") return Method::Dro;
  if (token == "kto") return Method::Kto;
  if (token == "sft") return Method::Sft;
  throw UsageError("unknown method '" + std::string(token) +
                   "' (expected rpo | rpo-nonorm | dro | kto | sft)");
}

std::string_view method_token(Method m) {
  switch (m) {
    case Method::Rpo: return "rpo";
    case Method::RpoNoNorm: return "rpo-nonorm";
    case Method::Dro: return "dro";
    case Method::Kto: return "kto";
    case Method::Sft: return "sft";
  }
  throw UsageError("invalid method enum value");
}

const PromptPartition& PartitionEstimate::require(std::size_t prompt_idx) const {
  if (prompt_idx >= per_prompt.size() || !per_prompt[prompt_idx]) {
    throw UsageError("partition estimate has no entry for prompt index " +
                     std::to_string(prompt_idx));
  }
  return *per_prompt[prompt_idx];
}

PartitionEstimate empirical_partition(const PromptIndex& index,
                                      const TripletDataset& ds,
                                      const ReferencePolicy& ref, double tau,
                                      PartitionMode mode, bool allow_raw) {
  check_tau(tau);
  if (!ds.standardized && !allow_raw) {
    throw UsageError("partition estimate over unstandardized rewards; "
                     "standardize first or allow raw explicitly");
  }
  const PromptSpace& space = ref.space();
  PartitionEstimate est;
  est.tau = tau;
  est.space_digest = space.digest();
  est.per_prompt.resize(space.prompts().size());
  for (const auto& [prompt_id, rec_indices] : index) {
    if (rec_indices.empty()) {
      throw UsageError("empty record group for prompt '" + prompt_id + "'");
    }
    const std::size_t p = space.prompt_index(prompt_id);
    const auto& ref_pi = ref.action_distribution(p);
    // Terms ln pi_ref + r/tau, one per contributing record (or distinct pair).
    std::vector<double> log_terms;
    std::set<std::size_t> seen;
    std::map<std::size_t, double> dedup_terms;  // response idx -> latest term
    for (std::size_t idx : rec_indices) {
      if (idx >= ds.records.size()) {
        throw UsageError("prompt index references record " +
                         std::to_string(idx) + " beyond dataset end");
      }
      const RecordRef r = resolve(space, ds.records[idx]);
      if (r.prompt_idx != p) {
        throw UsageError("prompt index groups record " + std::to_string(idx) +
                         " under the wrong prompt");
      }
      const double term = std::log(ref_pi[r.response_idx]) + r.reward / tau;
      seen.insert(r.response_idx);
      if (mode == PartitionMode::PerOccurrence) {
        log_terms.push_back(term);
      } else {
        dedup_terms[r.response_idx] = term;  // later occurrences win
      }
    }
    if (mode == PartitionMode::Dedup) {
      for (const auto& [y, term] : dedup_terms) log_terms.push_back(term);
    }
    double hi = -std::numeric_limits<double>::infinity();
    for (double t : log_terms) hi = std::max(hi, t);
    double acc = 0.0;
    for (double t : log_terms) acc += std::exp(t - hi);
    const double lse = hi + std::log(acc);

    PromptPartition pp;
    pp.z_hat = std::exp(lse);
    pp.v_hat = tau * lse;
    pp.contributing = log_terms.size();
    pp.full_coverage = seen.size() == space.prompts()[p].responses.size();
    est.per_prompt[p] = pp;
  }
  return est;
}

void KtoConfig::validate() const {
  if (!(beta > 0.0) || !(lambda_d > 0.0) || !(lambda_u > 0.0)) {
    throw UsageError("kto beta, lambda_d, lambda_u must all be positive");
  }
  if (!std::isfinite(threshold)) {
    throw UsageError("kto desirability threshold must be finite");
  }
}

ObjectiveOutput rpo_loss_and_grad(const Policy& p, const ReferencePolicy& ref,
                                  const TripletDataset& ds, Batch batch,
                                  const PartitionEstimate& part, double tau) {
  if (part.tau != tau) {
    throw UsageError("partition estimate was built for a different tau");
  }
  if (part.space_digest != p.space().digest()) {
    throw UsageError("partition estimate was built for a different space");
  }
  return residual_objective(p, ref, ds, batch, &part, tau);
}

ObjectiveOutput rpo_nonorm_loss_and_grad(const Policy& p,
                                         const ReferencePolicy& ref,
                                         const TripletDataset& ds, Batch batch,
                                         double tau) {
  return residual_objective(p, ref, ds, batch, nullptr, tau);
}

ObjectiveOutput dro_loss_and_grad(const Policy& p, const ValueTable& v,
                                  const ReferencePolicy& ref,
                                  const TripletDataset& ds, Batch batch,
                                  double tau) {
  check_tau(tau);
  check_batch(batch, ds);
  const PromptSpace& space = p.space();
  if (v.values.size() != space.prompts().size()) {
    throw UsageError("value table size does not match the prompt space");
  }
  ObjectiveOutput out;
  out.policy_grad.assign(p.param_count(), 0.0);
  out.value_grad.assign(v.values.size(), 0.0);
  out.residuals.reserve(batch.size());
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  std::span<double> grad(out.policy_grad);
  for (std::size_t idx : batch) {
    const RecordRef r = resolve(space, ds.records[idx]);
    const double log_ratio = p.log_prob(r.prompt_idx, r.response_idx) -
                             ref.log_prob(r.prompt_idx, r.response_idx);
    const double e = r.reward - v.values[r.prompt_idx] - tau * log_ratio;
    out.loss += 0.5 * e * e * inv_n;
    p.accumulate_param_grad_log_prob(r.prompt_idx, r.response_idx,
                                     -tau * e * inv_n, grad);
    out.value_grad[r.prompt_idx] -= e * inv_n;
    out.residuals.push_back(e);
  }
  return out;
}

std::vector<double> policy_reference_kl(const Policy& p,
                                        const ReferencePolicy& ref) {
  const PromptSpace& space = p.space();
  std::vector<double> out;
  out.reserve(space.prompts().size());
  for (std::size_t x = 0; x < space.prompts().size(); ++x) {
    out.push_back(
        exact_kl(p.action_distribution(x), ref.action_distribution(x)));
  }
  return out;
}

ObjectiveOutput kto_loss_and_grad(const Policy& p, const ReferencePolicy& ref,
                                  const TripletDataset& ds, Batch batch,
                                  const KtoConfig& cfg,
                                  const std::vector<double>* frozen_shift) {
  cfg.validate();
  check_batch(batch, ds);
  const PromptSpace& space = p.space();
  std::vector<double> shift_storage;
  const std::vector<double>* z0 = frozen_shift;
  if (z0 == nullptr) {
    shift_storage = policy_reference_kl(p, ref);
    z0 = &shift_storage;
  }
  if (z0->size() != space.prompts().size()) {
    throw UsageError("frozen shift table size does not match the prompt space");
  }
  ObjectiveOutput out;
  out.policy_grad.assign(p.param_count(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  std::span<double> grad(out.policy_grad);
  for (std::size_t idx : batch) {
    const RecordRef r = resolve(space, ds.records[idx]);
    const bool desirable = r.reward >= cfg.threshold;
    if (!desirable && !(r.reward < cfg.threshold)) {
      throw UsageError("record " + std::to_string(idx) +
                       " has an unclassifiable reward");
    }
    const double r_theta = p.log_prob(r.prompt_idx, r.response_idx) -
                           ref.log_prob(r.prompt_idx, r.response_idx);
    const double lambda = desirable ? cfg.lambda_d : cfg.lambda_u;
    const double u = desirable ? cfg.beta * (r_theta - (*z0)[r.prompt_idx])
                               : cfg.beta * ((*z0)[r.prompt_idx] - r_theta);
    const double s = sigmoid(u);
    out.loss += (lambda - lambda * s) * inv_n;
    // d(-lambda sigma(u))/d r_theta, sign of u's dependence on r_theta baked in
    const double coeff = (desirable ? -1.0 : 1.0) * lambda * cfg.beta * s *
                         (1.0 - s) * inv_n;
    p.accumulate_param_grad_log_prob(r.prompt_idx, r.response_idx, coeff, grad);
  }
  return out;
}

ObjectiveOutput sft_loss_and_grad(const Policy& p, const TripletDataset& ds,
                                  Batch batch, double threshold) {
  check_batch(batch, ds);
  if (!std::isfinite(threshold)) {
    throw UsageError("sft threshold must be finite");
  }
  const PromptSpace& space = p.space();
  std::vector<RecordRef> kept;
  for (std::size_t idx : batch) {
    const RecordRef r = resolve(space, ds.records[idx]);
    if (r.reward >= threshold) kept.push_back(r);
  }
  if (kept.empty()) {
    throw UsageError("no batch record meets the sft reward threshold");
  }
  ObjectiveOutput out;
  out.policy_grad.assign(p.param_count(), 0.0);
  const double inv_k = 1.0 / static_cast<double>(kept.size());
  std::span<double> grad(out.policy_grad);
  for (const RecordRef& r : kept) {
    out.loss -= p.log_prob(r.prompt_idx, r.response_idx) * inv_k;
    p.accumulate_param_grad_log_prob(r.prompt_idx, r.response_idx, -inv_k,
                                     grad);
  }
  return out;
}

}  // namespace rpolab
