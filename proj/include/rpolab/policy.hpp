#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rpolab/data_model.hpp"

namespace rpolab {

enum class PolicyKind { Tabular, Featurized };
enum class InitMode { CopyReference, Zeros, SeededRandom };

PolicyKind parse_policy_kind(const std::string& token);
std::string policy_kind_token(PolicyKind kind);

/// Softmax policy over each prompt's candidate responses.
///
/// Tabular: one free logit per (prompt, candidate). Featurized: a shared
/// one-hidden-layer tanh score network s(x,y) = w2 . tanh(W1 phi(x,y) + b1) + b2
/// evaluated on the candidate's feature vector. Either way the distribution is
/// softmax(scores) per prompt, computed with max-subtraction.
class Policy {
 public:
  static Policy tabular(std::shared_ptr<const PromptSpace> space);
  static Policy featurized(std::shared_ptr<const PromptSpace> space,
                           std::size_t hidden_width);

  PolicyKind kind() const { return kind_; }
  const PromptSpace& space() const { return *space_; }
  const std::shared_ptr<const PromptSpace>& space_ptr() const { return space_; }
  std::size_t hidden_width() const { return hidden_; }

  std::size_t param_count() const;
  std::vector<double> params() const;
  void set_params(std::span<const double> params);

  // Candidate scores (pre-softmax logits) for one prompt.
  std::vector<double> scores(std::size_t prompt_idx) const;

  std::vector<double> action_distribution(std::size_t prompt_idx) const;
  std::vector<double> action_distribution(const std::string& prompt_id) const;

  double log_prob(std::size_t prompt_idx, std::size_t response_idx) const;
  double log_prob(const std::string& prompt_id,
                  const std::string& response_id) const;

  // d log pi(y_i | x) / d score(y | x) = 1{y = y_i} - pi(y | x).
  std::vector<double> logit_grad_log_prob(std::size_t prompt_idx,
                                          std::size_t response_idx) const;
  std::vector<double> logit_grad_log_prob(const std::string& prompt_id,
                                          const std::string& response_id) const;

  // grad += coeff * d log pi(y_i | x) / d params, over the flat layout.
  void accumulate_param_grad_log_prob(std::size_t prompt_idx,
                                      std::size_t response_idx, double coeff,
                                      std::span<double> grad) const;
  std::vector<double> param_grad_log_prob(std::size_t prompt_idx,
                                          std::size_t response_idx) const;
  std::vector<double> param_grad_log_prob(const std::string& prompt_id,
                                          const std::string& response_id) const;

 private:
  Policy() = default;

  PolicyKind kind_ = PolicyKind::Tabular;
  std::shared_ptr<const PromptSpace> space_;

  // Tabular: per-prompt logits; flat layout concatenates prompt rows.
  std::vector<std::vector<double>> logits_;
  std::vector<std::size_t> row_offsets_;

  // Featurized; flat layout is [w1 row-major h x d, b1, w2, b2].
  std::size_t hidden_ = 0;
  std::vector<double> w1_, b1_, w2_;
  double b2_ = 0.0;
};

/// Frozen anchor policy. Construction rejects any candidate with a numerically
/// zero probability, so log-ratios against it stay finite.
class ReferencePolicy {
 public:
  explicit ReferencePolicy(Policy frozen);

  const Policy& policy() const { return policy_; }
  const PromptSpace& space() const { return policy_.space(); }

  double log_prob(std::size_t prompt_idx, std::size_t response_idx) const {
    return policy_.log_prob(prompt_idx, response_idx);
  }
  std::vector<double> action_distribution(std::size_t prompt_idx) const {
    return policy_.action_distribution(prompt_idx);
  }

 private:
  Policy policy_;
};

/// Deterministic random parameters (tabular logits ~ N(0,1); featurized
/// layers scaled by 1/sqrt(fan-in)).
Policy random_policy(PolicyKind kind, std::shared_ptr<const PromptSpace> space,
                     std::uint64_t seed, std::size_t hidden_width = 8);

/// Zero parameters; every prompt's distribution is uniform.
Policy uniform_policy(PolicyKind kind, std::shared_ptr<const PromptSpace> space,
                      std::size_t hidden_width = 8);

Policy init_policy(PolicyKind kind, std::shared_ptr<const PromptSpace> space,
                   InitMode mode, const ReferencePolicy& ref, std::uint64_t seed,
                   std::size_t hidden_width = 8);

// Versioned JSON checkpoint with a space digest guard.
void save_policy(const Policy& policy, const std::filesystem::path& path);
Policy load_policy(const std::filesystem::path& path,
                   std::shared_ptr<const PromptSpace> space);

}  // namespace rpolab
