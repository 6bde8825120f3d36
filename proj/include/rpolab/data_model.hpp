#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace rpolab {

struct PromptEntry {
  std::string id;
  std::vector<std::string> responses;
  double weight = 1.0;
  // One feature vector per response (same order), or empty when the space
  // carries no features. If any prompt has features, all must.
  std::vector<std::vector<double>> features;
};

/// Finite universe of prompts with their candidate response sets, optional
/// per-(prompt,response) features, and normalized prompt sampling weights.
/// Immutable after construction.
class PromptSpace {
 public:
  explicit PromptSpace(std::vector<PromptEntry> prompts);

  std::size_t prompt_count() const { return prompts_.size(); }
  const PromptEntry& prompt(std::size_t i) const { return prompts_[i]; }
  const std::vector<PromptEntry>& prompts() const { return prompts_; }

  std::optional<std::size_t> find_prompt(const std::string& id) const;
  std::optional<std::size_t> find_response(std::size_t prompt_idx,
                                           const std::string& id) const;
  // Throwing lookups (UsageError naming the missing identifier).
  std::size_t prompt_index(const std::string& id) const;
  std::size_t response_index(std::size_t prompt_idx,
                             const std::string& id) const;

  std::size_t candidate_count(std::size_t prompt_idx) const {
    return prompts_[prompt_idx].responses.size();
  }
  bool has_features() const { return feature_dim_ > 0; }
  std::size_t feature_dim() const { return feature_dim_; }
  const std::vector<double>& features(std::size_t prompt_idx,
                                      std::size_t response_idx) const {
    return prompts_[prompt_idx].features[response_idx];
  }
  std::size_t total_pairs() const { return total_pairs_; }

  // Stable content hash, used to detect checkpoints loaded against the
  // wrong space.
  const std::string& digest() const { return digest_; }

 private:
  std::vector<PromptEntry> prompts_;
  std::map<std::string, std::size_t> prompt_lookup_;
  std::vector<std::map<std::string, std::size_t>> response_lookup_;
  std::size_t feature_dim_ = 0;
  std::size_t total_pairs_ = 0;
  std::string digest_;
};

struct TripletRecord {
  std::string prompt_id;
  std::string response_id;
  double raw_reward = 0.0;
  double std_reward = 0.0;
};

struct TripletDataset {
  std::vector<TripletRecord> records;
  bool standardized = false;
};

// prompt_id -> record indices in dataset order; map iteration is sorted.
using PromptIndex = std::map<std::string, std::vector<std::size_t>>;

struct PromptCoverage {
  std::string prompt_id;
  std::size_t distinct_observed = 0;
  std::size_t total_candidates = 0;
  std::size_t duplicate_samples = 0;
};

struct CoverageStats {
  std::vector<PromptCoverage> per_prompt;  // sorted by prompt_id
  double full_coverage_fraction = 0.0;
};

PromptSpace load_space(const std::filesystem::path& path);
void save_space(const PromptSpace& space, const std::filesystem::path& path);

/// Reads a UTF-8 JSONL file of {"prompt","response","reward"} records.
/// Records keep file order; std_reward starts equal to raw_reward.
TripletDataset load_dataset(const std::filesystem::path& path,
                            const PromptSpace& space);
void save_dataset(const TripletDataset& ds, const std::filesystem::path& path);

/// Global standardization: std_reward = (raw - mean) / population std.
/// Zero-spread datasets standardize to all zeros.
TripletDataset standardize_rewards(const TripletDataset& ds);

PromptIndex group_by_prompt(const TripletDataset& ds);

CoverageStats coverage_report(const TripletDataset& ds,
                              const PromptSpace& space);

enum class RewardLaw { IidNormal, FeatureLinear, PromptShift };

RewardLaw parse_reward_law(const std::string& token);
std::string reward_law_token(RewardLaw law);

struct SyntheticConfig {
  std::size_t prompt_count = 8;
  std::size_t responses_per_prompt = 6;
  RewardLaw reward_law = RewardLaw::IidNormal;
  std::size_t feature_dim = 0;  // 0 = no features
  double coverage = 1.0;        // (0, 1]; fraction of candidates observed
  std::size_t duplication = 1;  // copies of each observed pair
  double shift_scale = 2.0;     // PromptShift: per-prompt mean in [-s, s]
  double noise_scale = 0.25;    // FeatureLinear / PromptShift noise
};

struct SyntheticEnv {
  PromptSpace space;
  TripletDataset dataset;
};

/// Deterministic synthetic environment: same (config, seed) reproduces the
/// space and dataset byte-for-byte. Rewards are a deterministic function of
/// the (prompt, response) pair, so duplicated records agree.
SyntheticEnv generate_synthetic(const SyntheticConfig& config,
                                std::uint64_t seed);

}  // namespace rpolab
