#include "rpolab/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "rpolab/errors.hpp"

namespace rpolab {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

double log_sum_exp(std::span<const double> terms) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double t : terms) hi = std::max(hi, t);
  if (!std::isfinite(hi)) {
    throw DivergenceError("log-sum-exp over empty or non-finite terms");
  }
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - hi);
  return hi + std::log(acc);
}

void check_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw UsageError("tau must be finite and positive");
  }
}

// log pi_ref(y|x) + r(x,y)/tau for the observed candidates of one prompt.
struct PromptTerms {
  std::vector<double> log_terms;
  std::vector<std::size_t> support;
};

PromptTerms gather_terms(const ReferencePolicy& ref, const RewardMap& rewards,
                         std::size_t prompt_idx, double tau, bool require_full) {
  const auto& space = ref.space();
  const std::size_t n = space.prompts()[prompt_idx].responses.size();
  PromptTerms out;
  const auto& ref_pi = ref.action_distribution(prompt_idx);
  for (std::size_t y = 0; y < n; ++y) {
    if (!rewards.has(prompt_idx, y)) {
      if (require_full) {
        throw UsageError("reward map does not cover prompt '" +
                         space.prompts()[prompt_idx].id + "' candidate '" +
                         space.prompts()[prompt_idx].responses[y] + "'");
      }
      continue;
    }
    out.log_terms.push_back(std::log(ref_pi[y]) +
                            rewards.at(prompt_idx, y) / tau);
    out.support.push_back(y);
  }
  return out;
}

PromptOracle solve_prompt(const ReferencePolicy& ref, const RewardMap& rewards,
                          std::size_t prompt_idx, double tau, bool require_full) {
  PromptTerms terms = gather_terms(ref, rewards, prompt_idx, tau, require_full);
  PromptOracle out;
  out.support = std::move(terms.support);
  if (out.support.empty()) return out;  // uncovered prompt, restricted mode
  const double lse = log_sum_exp(terms.log_terms);
  out.partition = std::exp(lse);
  out.soft_value = tau * lse;
  out.optimal.resize(terms.log_terms.size());
  for (std::size_t j = 0; j < terms.log_terms.size(); ++j) {
    out.optimal[j] = std::exp(terms.log_terms[j] - lse);
  }
  return out;
}

}  // namespace

RewardMap::RewardMap(const PromptSpace& space) {
  values_.reserve(space.prompts().size());
  for (const auto& p : space.prompts()) {
    values_.emplace_back(p.responses.size(), kNan);
  }
}

RewardMap RewardMap::from_dataset(const TripletDataset& ds,
                                  const PromptSpace& space, bool strict) {
  RewardMap map(space);
  for (const auto& rec : ds.records) {
    const std::size_t pi = space.prompt_index(rec.prompt_id);
    const std::size_t yi = space.response_index(pi, rec.response_id);
    if (strict && map.has(pi, yi) && map.at(pi, yi) != rec.std_reward) {
      throw IntegrityError("conflicting duplicate reward for prompt '" +
                           rec.prompt_id + "' response '" + rec.response_id +
                           "'");
    }
    map.set(pi, yi, rec.std_reward);
  }
  return map;
}

void RewardMap::set(std::size_t prompt_idx, std::size_t response_idx,
                    double reward) {
  if (!std::isfinite(reward)) {
    throw UsageError("reward map entries must be finite");
  }
  values_.at(prompt_idx).at(response_idx) = reward;
}

bool RewardMap::has(std::size_t prompt_idx, std::size_t response_idx) const {
  return !std::isnan(values_.at(prompt_idx).at(response_idx));
}

double RewardMap::at(std::size_t prompt_idx, std::size_t response_idx) const {
  const double v = values_.at(prompt_idx).at(response_idx);
  if (std::isnan(v)) {
    throw UsageError("reward map has no entry for the requested pair");
  }
  return v;
}

std::vector<std::size_t> RewardMap::observed(std::size_t prompt_idx) const {
  std::vector<std::size_t> out;
  const auto& row = values_.at(prompt_idx);
  for (std::size_t y = 0; y < row.size(); ++y) {
    if (!std::isnan(row[y])) out.push_back(y);
  }
  return out;
}

bool RewardMap::prompt_fully_covered(std::size_t prompt_idx) const {
  const auto& row = values_.at(prompt_idx);
  return std::none_of(row.begin(), row.end(),
                      [](double v) { return std::isnan(v); });
}

bool RewardMap::fully_covered() const {
  for (std::size_t p = 0; p < values_.size(); ++p) {
    if (!prompt_fully_covered(p)) return false;
  }
  return true;
}

double exact_partition(const ReferencePolicy& ref, const RewardMap& rewards,
                       std::size_t prompt_idx, double tau) {
  check_tau(tau);
  PromptTerms terms = gather_terms(ref, rewards, prompt_idx, tau, true);
  return std::exp(log_sum_exp(terms.log_terms));
}

double exact_partition(const ReferencePolicy& ref, const RewardMap& rewards,
                       const std::string& prompt_id, double tau) {
  return exact_partition(ref, rewards, ref.space().prompt_index(prompt_id), tau);
}

double soft_value(const ReferencePolicy& ref, const RewardMap& rewards,
                  std::size_t prompt_idx, double tau) {
  check_tau(tau);
  PromptTerms terms = gather_terms(ref, rewards, prompt_idx, tau, true);
  return tau * log_sum_exp(terms.log_terms);
}

double soft_value(const ReferencePolicy& ref, const RewardMap& rewards,
                  const std::string& prompt_id, double tau) {
  return soft_value(ref, rewards, ref.space().prompt_index(prompt_id), tau);
}

std::vector<double> optimal_policy(const ReferencePolicy& ref,
                                   const RewardMap& rewards,
                                   std::size_t prompt_idx, double tau) {
  check_tau(tau);
  PromptOracle po = solve_prompt(ref, rewards, prompt_idx, tau, true);
  return po.optimal;
}

std::vector<double> optimal_policy(const ReferencePolicy& ref,
                                   const RewardMap& rewards,
                                   const std::string& prompt_id, double tau) {
  return optimal_policy(ref, rewards, ref.space().prompt_index(prompt_id), tau);
}

OracleSolution solve_oracle(const ReferencePolicy& ref, const RewardMap& rewards,
                            double tau) {
  check_tau(tau);
  OracleSolution sol;
  sol.tau = tau;
  sol.restricted = false;
  const std::size_t pn = ref.space().prompts().size();
  sol.per_prompt.reserve(pn);
  for (std::size_t p = 0; p < pn; ++p) {
    sol.per_prompt.push_back(solve_prompt(ref, rewards, p, tau, true));
  }
  return sol;
}

OracleSolution solve_oracle_restricted(const ReferencePolicy& ref,
                                       const RewardMap& rewards, double tau) {
  check_tau(tau);
  OracleSolution sol;
  sol.tau = tau;
  sol.restricted = true;
  const std::size_t pn = ref.space().prompts().size();
  sol.per_prompt.reserve(pn);
  for (std::size_t p = 0; p < pn; ++p) {
    sol.per_prompt.push_back(solve_prompt(ref, rewards, p, tau, false));
  }
  return sol;
}

double exact_kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw UsageError("KL arguments must have the same dimension");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 || q[i] < 0.0) {
      throw UsageError("KL arguments must be nonnegative");
    }
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) {
      throw UsageError("KL undefined: p > 0 where q = 0");
    }
    acc += p[i] * std::log(p[i] / q[i]);
  }
  return acc;
}

double identity_residual(const RewardMap& rewards, const OracleSolution& sol,
                         const ReferencePolicy& ref, double tau,
                         std::size_t prompt_idx, std::size_t response_idx) {
  if (tau != sol.tau) {
    throw UsageError("identity residual queried at a tau the solution was not "
                     "solved for");
  }
  const PromptOracle& po = sol.per_prompt.at(prompt_idx);
  const auto it =
      std::find(po.support.begin(), po.support.end(), response_idx);
  if (it == po.support.end()) {
    throw UsageError("identity residual queried outside the solved support");
  }
  const std::size_t j =
      static_cast<std::size_t>(std::distance(po.support.begin(), it));
  const double ref_p = ref.action_distribution(prompt_idx)[response_idx];
  const double log_ratio = std::log(po.optimal[j]) - std::log(ref_p);
  return rewards.at(prompt_idx, response_idx) - po.soft_value - tau * log_ratio;
}

std::vector<double> finite_diff_grad(
    const std::function<double(std::span<const double>)>& loss,
    std::span<const double> params, double step) {
  if (!(step > 0.0)) throw UsageError("finite-difference step must be positive");
  std::vector<double> work(params.begin(), params.end());
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < work.size(); ++i) {
    const double saved = work[i];
    work[i] = saved + step;
    const double up = loss(work);
    work[i] = saved - step;
    const double down = loss(work);
    work[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw DivergenceError("finite-difference probe produced a non-finite loss");
    }
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw UsageError("relative_error arguments must have the same dimension");
  }
  double diff = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / std::max(1.0, scale);
}

}  // namespace rpolab
