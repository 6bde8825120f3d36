#include "rpolab/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "rpolab/errors.hpp"
#include "rpolab/rng.hpp"
#include "serialize.hpp"

namespace rpolab {

using nlohmann::json;

namespace {

constexpr int kCheckpointVersion = 1;

// log softmax denominator with max-subtraction; the sole overflow guard.
double log_sum_exp(std::span<const double> v) {
  double m = v[0];
  for (double x : v) m = std::max(m, x);
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - m);
  return m + std::log(sum);
}

void check_finite(std::span<const double> params) {
  for (double p : params)
    if (!std::isfinite(p)) throw UsageError("policy parameters must be finite");
}

}  // namespace

PolicyKind parse_policy_kind(const std::string& token) {
  if (token == "tabular") return PolicyKind::Tabular;
  if (token == "featurized") return PolicyKind::Featurized;
  throw UsageError("unknown policy class \"" + token +
                   "\" (expected tabular or featurized)");
}

std::string policy_kind_token(PolicyKind kind) {
  return kind == PolicyKind::Tabular ? "tabular" : "featurized";
}

Policy Policy::tabular(std::shared_ptr<const PromptSpace> space) {
  if (!space) throw UsageError("policy needs a prompt space");
  Policy p;
  p.kind_ = PolicyKind::Tabular;
  p.space_ = std::move(space);
  p.logits_.resize(p.space_->prompt_count());
  p.row_offsets_.resize(p.space_->prompt_count());
  std::size_t offset = 0;
  for (std::size_t i = 0; i < p.space_->prompt_count(); ++i) {
    p.logits_[i].assign(p.space_->candidate_count(i), 0.0);
    p.row_offsets_[i] = offset;
    offset += p.space_->candidate_count(i);
  }
  return p;
}

Policy Policy::featurized(std::shared_ptr<const PromptSpace> space,
                          std::size_t hidden_width) {
  if (!space) throw UsageError("policy needs a prompt space");
  if (!space->has_features())
    throw UsageError("featurized policy requires feature vectors in the space");
  if (hidden_width < 1) throw UsageError("hidden width must be >= 1");
  Policy p;
  p.kind_ = PolicyKind::Featurized;
  p.space_ = std::move(space);
  p.hidden_ = hidden_width;
  p.w1_.assign(hidden_width * p.space_->feature_dim(), 0.0);
  p.b1_.assign(hidden_width, 0.0);
  p.w2_.assign(hidden_width, 0.0);
  p.b2_ = 0.0;
  return p;
}

std::size_t Policy::param_count() const {
  if (kind_ == PolicyKind::Tabular) return space_->total_pairs();
  return w1_.size() + b1_.size() + w2_.size() + 1;
}

std::vector<double> Policy::params() const {
  std::vector<double> out;
  out.reserve(param_count());
  if (kind_ == PolicyKind::Tabular) {
    for (const auto& row : logits_) out.insert(out.end(), row.begin(), row.end());
  } else {
    out.insert(out.end(), w1_.begin(), w1_.end());
    out.insert(out.end(), b1_.begin(), b1_.end());
    out.insert(out.end(), w2_.begin(), w2_.end());
    out.push_back(b2_);
  }
  return out;
}

void Policy::set_params(std::span<const double> params) {
  if (params.size() != param_count())
    throw UsageError("set_params: expected " + std::to_string(param_count()) +
                     " parameters, got " + std::to_string(params.size()));
  check_finite(params);
  std::size_t k = 0;
  if (kind_ == PolicyKind::Tabular) {
    for (auto& row : logits_)
      for (auto& v : row) v = params[k++];
  } else {
    for (auto& v : w1_) v = params[k++];
    for (auto& v : b1_) v = params[k++];
    for (auto& v : w2_) v = params[k++];
    b2_ = params[k++];
  }
}

std::vector<double> Policy::scores(std::size_t prompt_idx) const {
  if (prompt_idx >= space_->prompt_count())
    throw UsageError("prompt index out of range");
  if (kind_ == PolicyKind::Tabular) return logits_[prompt_idx];

  const std::size_t n = space_->candidate_count(prompt_idx);
  const std::size_t d = space_->feature_dim();
  std::vector<double> out(n);
  for (std::size_t y = 0; y < n; ++y) {
    const auto& phi = space_->features(prompt_idx, y);
    double score = b2_;
    for (std::size_t j = 0; j < hidden_; ++j) {
      double u = b1_[j];
      for (std::size_t k = 0; k < d; ++k) u += w1_[j * d + k] * phi[k];
      score += w2_[j] * std::tanh(u);
    }
    out[y] = score;
  }
  return out;
}

std::vector<double> Policy::action_distribution(std::size_t prompt_idx) const {
  std::vector<double> s = scores(prompt_idx);
  const double lse = log_sum_exp(s);
  for (double& v : s) v = std::exp(v - lse);
  return s;
}

std::vector<double> Policy::action_distribution(const std::string& prompt_id) const {
  return action_distribution(space_->prompt_index(prompt_id));
}

double Policy::log_prob(std::size_t prompt_idx, std::size_t response_idx) const {
  std::vector<double> s = scores(prompt_idx);
  if (response_idx >= s.size()) throw UsageError("response index out of range");
  return s[response_idx] - log_sum_exp(s);
}

double Policy::log_prob(const std::string& prompt_id,
                        const std::string& response_id) const {
  const std::size_t p = space_->prompt_index(prompt_id);
  return log_prob(p, space_->response_index(p, response_id));
}

std::vector<double> Policy::logit_grad_log_prob(std::size_t prompt_idx,
                                                std::size_t response_idx) const {
  std::vector<double> grad = action_distribution(prompt_idx);
  if (response_idx >= grad.size()) throw UsageError("response index out of range");
  for (double& g : grad) g = -g;
  grad[response_idx] += 1.0;
  return grad;
}

std::vector<double> Policy::logit_grad_log_prob(const std::string& prompt_id,
                                                const std::string& response_id) const {
  const std::size_t p = space_->prompt_index(prompt_id);
  return logit_grad_log_prob(p, space_->response_index(p, response_id));
}

void Policy::accumulate_param_grad_log_prob(std::size_t prompt_idx,
                                            std::size_t response_idx, double coeff,
                                            std::span<double> grad) const {
  if (grad.size() != param_count())
    throw UsageError("gradient buffer size mismatch");
  const std::vector<double> pi = action_distribution(prompt_idx);
  if (response_idx >= pi.size()) throw UsageError("response index out of range");

  if (kind_ == PolicyKind::Tabular) {
    const std::size_t base = row_offsets_[prompt_idx];
    for (std::size_t y = 0; y < pi.size(); ++y)
      grad[base + y] += coeff * ((y == response_idx ? 1.0 : 0.0) - pi[y]);
    return;
  }

  const std::size_t d = space_->feature_dim();
  const std::size_t w1_off = 0;
  const std::size_t b1_off = w1_.size();
  const std::size_t w2_off = b1_off + hidden_;
  const std::size_t b2_off = w2_off + hidden_;

  // Chain rule: sum over candidates of (1{y=y_i} - pi(y)) * d score(y)/d params.
  for (std::size_t y = 0; y < pi.size(); ++y) {
    const double c = coeff * ((y == response_idx ? 1.0 : 0.0) - pi[y]);
    const auto& phi = space_->features(prompt_idx, y);
    grad[b2_off] += c;
    for (std::size_t j = 0; j < hidden_; ++j) {
      double u = b1_[j];
      for (std::size_t k = 0; k < d; ++k) u += w1_[j * d + k] * phi[k];
      const double a = std::tanh(u);
      grad[w2_off + j] += c * a;
      const double back = c * w2_[j] * (1.0 - a * a);
      grad[b1_off + j] += back;
      for (std::size_t k = 0; k < d; ++k)
        grad[w1_off + j * d + k] += back * phi[k];
    }
  }
}

std::vector<double> Policy::param_grad_log_prob(std::size_t prompt_idx,
                                                std::size_t response_idx) const {
  std::vector<double> grad(param_count(), 0.0);
  accumulate_param_grad_log_prob(prompt_idx, response_idx, 1.0, grad);
  return grad;
}

std::vector<double> Policy::param_grad_log_prob(const std::string& prompt_id,
                                                const std::string& response_id) const {
  const std::size_t p = space_->prompt_index(prompt_id);
  return param_grad_log_prob(p, space_->response_index(p, response_id));
}

ReferencePolicy::ReferencePolicy(Policy frozen) : policy_(std::move(frozen)) {
  const auto& space = policy_.space();
  for (std::size_t p = 0; p < space.prompt_count(); ++p) {
    for (double prob : policy_.action_distribution(p)) {
      if (!(prob > 0.0))
        throw UsageError("reference policy has a zero-probability candidate in "
                         "prompt \"" + space.prompt(p).id + "\"");
    }
  }
}

Policy random_policy(PolicyKind kind, std::shared_ptr<const PromptSpace> space,
                     std::uint64_t seed, std::size_t hidden_width) {
  SplitMix64 rng(derive_seed(seed, 3));
  if (kind == PolicyKind::Tabular) {
    Policy p = Policy::tabular(std::move(space));
    std::vector<double> params(p.param_count());
    for (auto& v : params) v = rng.next_gaussian();
    p.set_params(params);
    return p;
  }
  Policy p = Policy::featurized(std::move(space), hidden_width);
  const std::size_t d = p.space().feature_dim();
  const std::size_t h = hidden_width;
  std::vector<double> params;
  params.reserve(p.param_count());
  for (std::size_t i = 0; i < h * d; ++i)
    params.push_back(rng.next_gaussian() / std::sqrt(static_cast<double>(d)));
  for (std::size_t i = 0; i < h; ++i)
    params.push_back(0.1 * rng.next_gaussian());
  for (std::size_t i = 0; i < h; ++i)
    params.push_back(rng.next_gaussian() / std::sqrt(static_cast<double>(h)));
  params.push_back(0.1 * rng.next_gaussian());
  p.set_params(params);
  return p;
}

Policy uniform_policy(PolicyKind kind, std::shared_ptr<const PromptSpace> space,
                      std::size_t hidden_width) {
  return kind == PolicyKind::Tabular
             ? Policy::tabular(std::move(space))
             : Policy::featurized(std::move(space), hidden_width);
}

Policy init_policy(PolicyKind kind, std::shared_ptr<const PromptSpace> space,
                   InitMode mode, const ReferencePolicy& ref, std::uint64_t seed,
                   std::size_t hidden_width) {
  switch (mode) {
    case InitMode::Zeros:
      return uniform_policy(kind, std::move(space), hidden_width);
    case InitMode::SeededRandom:
      return random_policy(kind, std::move(space), seed, hidden_width);
    case InitMode::CopyReference: {
      const Policy& src = ref.policy();
      if (src.kind() == kind) {
        if (kind == PolicyKind::Featurized) {
          Policy p = Policy::featurized(std::move(space), src.hidden_width());
          p.set_params(src.params());
          return p;
        }
        Policy p = Policy::tabular(std::move(space));
        p.set_params(src.params());
        return p;
      }
      if (kind == PolicyKind::Tabular && src.kind() == PolicyKind::Featurized) {
        // Log-probabilities as logits reproduce the distribution exactly.
        Policy p = Policy::tabular(space);
        std::vector<double> params;
        params.reserve(p.param_count());
        for (std::size_t x = 0; x < space->prompt_count(); ++x) {
          std::vector<double> s = src.scores(x);
          for (std::size_t y = 0; y < s.size(); ++y)
            params.push_back(src.log_prob(x, y));
        }
        p.set_params(params);
        return p;
      }
      throw UsageError(
          "copy-reference cannot build a featurized policy from a tabular "
          "reference");
    }
  }
  throw UsageError("unknown init mode");
}

json policy_to_json(const Policy& policy) {
  json doc;
  doc["version"] = kCheckpointVersion;
  doc["class"] = policy_kind_token(policy.kind());
  doc["space_digest"] = policy.space().digest();
  if (policy.kind() == PolicyKind::Featurized)
    doc["hidden_width"] = policy.hidden_width();
  // Nested arrays: per-prompt rows (tabular) or layer blocks (featurized).
  json params = json::array();
  const std::vector<double> flat = policy.params();
  if (policy.kind() == PolicyKind::Tabular) {
    std::size_t k = 0;
    for (std::size_t p = 0; p < policy.space().prompt_count(); ++p) {
      json row = json::array();
      for (std::size_t y = 0; y < policy.space().candidate_count(p); ++y)
        row.push_back(flat[k++]);
      params.push_back(std::move(row));
    }
  } else {
    const std::size_t h = policy.hidden_width();
    const std::size_t d = policy.space().feature_dim();
    std::size_t k = 0;
    json w1 = json::array(), b1 = json::array(), w2 = json::array();
    for (std::size_t i = 0; i < h * d; ++i) w1.push_back(flat[k++]);
    for (std::size_t i = 0; i < h; ++i) b1.push_back(flat[k++]);
    for (std::size_t i = 0; i < h; ++i) w2.push_back(flat[k++]);
    params.push_back(std::move(w1));
    params.push_back(std::move(b1));
    params.push_back(std::move(w2));
    params.push_back(flat[k++]);
  }
  doc["parameters"] = std::move(params);
  return doc;
}

Policy policy_from_json(const json& doc,
                        std::shared_ptr<const PromptSpace> space) {
  if (!doc.contains("version") || !doc["version"].is_number_integer() ||
      doc["version"].get<int>() != kCheckpointVersion)
    throw IntegrityError("checkpoint version mismatch (expected " +
                         std::to_string(kCheckpointVersion) + ")");
  if (doc.at("space_digest").get<std::string>() != space->digest())
    throw IntegrityError("checkpoint space digest mismatch");

  const PolicyKind kind = parse_policy_kind(doc.at("class").get<std::string>());
  const json& params = doc.at("parameters");
  std::vector<double> flat;

  if (kind == PolicyKind::Tabular) {
    for (const auto& row : params)
      for (const auto& v : row) flat.push_back(v.get<double>());
    Policy p = Policy::tabular(std::move(space));
    p.set_params(flat);
    return p;
  }

  const std::size_t h = doc.at("hidden_width").get<std::size_t>();
  if (params.size() != 4) throw IntegrityError("malformed featurized parameters");
  for (std::size_t block = 0; block < 3; ++block)
    for (const auto& v : params[block]) flat.push_back(v.get<double>());
  flat.push_back(params[3].get<double>());
  Policy p = Policy::featurized(std::move(space), h);
  p.set_params(flat);
  return p;
}

void save_policy(const Policy& policy, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write policy checkpoint: " + path.string());
  out << policy_to_json(policy).dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

Policy load_policy(const std::filesystem::path& path,
                   std::shared_ptr<const PromptSpace> space) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open policy checkpoint: " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw IoError("policy checkpoint " + path.string() + ": " + e.what());
  }
  return policy_from_json(doc, std::move(space));
}

}  // namespace rpolab
