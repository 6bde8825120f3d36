#include "rpolab/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "rpolab/errors.hpp"
#include "rpolab/rng.hpp"
#include "text_util.hpp"

namespace rpolab {

using nlohmann::json;

namespace {

void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed,
                         const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw IoError(where + ": unknown key \"" + it.key() + "\"");
    }
  }
}

}  // namespace

PromptSpace::PromptSpace(std::vector<PromptEntry> prompts)
    : prompts_(std::move(prompts)) {
  if (prompts_.empty()) throw UsageError("PromptSpace: no prompts");

  double weight_sum = 0.0;
  bool any_features = false;
  for (const auto& p : prompts_) {
    if (p.responses.empty())
      throw UsageError("PromptSpace: prompt \"" + p.id + "\" has no responses");
    if (p.weight < 0.0)
      throw UsageError("PromptSpace: prompt \"" + p.id + "\" has negative weight");
    weight_sum += p.weight;
    if (!p.features.empty()) any_features = true;
  }
  if (!(weight_sum > 0.0))
    throw UsageError("PromptSpace: sampling weights sum to zero");

  response_lookup_.resize(prompts_.size());
  for (std::size_t i = 0; i < prompts_.size(); ++i) {
    auto& p = prompts_[i];
    p.weight /= weight_sum;
    if (!prompt_lookup_.emplace(p.id, i).second)
      throw UsageError("PromptSpace: duplicate prompt id \"" + p.id + "\"");
    for (std::size_t r = 0; r < p.responses.size(); ++r) {
      if (!response_lookup_[i].emplace(p.responses[r], r).second)
        throw UsageError("PromptSpace: duplicate response \"" + p.responses[r] +
                         "\" in prompt \"" + p.id + "\"");
    }
    total_pairs_ += p.responses.size();

    if (any_features) {
      if (p.features.size() != p.responses.size())
        throw UsageError("PromptSpace: prompt \"" + p.id +
                         "\" is missing feature vectors");
      for (const auto& f : p.features) {
        if (feature_dim_ == 0) feature_dim_ = f.size();
        if (f.empty() || f.size() != feature_dim_)
          throw UsageError("PromptSpace: inconsistent feature dimension in \"" +
                           p.id + "\"");
        for (double v : f)
          if (!std::isfinite(v))
            throw UsageError("PromptSpace: non-finite feature in \"" + p.id + "\"");
      }
    }
  }

  // Canonical text captures everything a checkpoint depends on.
  std::string canon;
  for (const auto& p : prompts_) {
    canon += p.id;
    canon += '\x1f';
    for (const auto& r : p.responses) {
      canon += r;
      canon += '\x1e';
    }
    canon += format_double(p.weight);
    canon += '\x1f';
    for (const auto& f : p.features)
      for (double v : f) {
        canon += format_double(v);
        canon += ',';
      }
    canon += '\n';
  }
  digest_ = to_hex(fnv1a64(canon));
}

std::optional<std::size_t> PromptSpace::find_prompt(const std::string& id) const {
  auto it = prompt_lookup_.find(id);
  if (it == prompt_lookup_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> PromptSpace::find_response(std::size_t prompt_idx,
                                                      const std::string& id) const {
  const auto& lookup = response_lookup_[prompt_idx];
  auto it = lookup.find(id);
  if (it == lookup.end()) return std::nullopt;
  return it->second;
}

std::size_t PromptSpace::prompt_index(const std::string& id) const {
  auto idx = find_prompt(id);
  if (!idx) throw UsageError("unknown prompt \"" + id + "\"");
  return *idx;
}

std::size_t PromptSpace::response_index(std::size_t prompt_idx,
                                        const std::string& id) const {
  auto idx = find_response(prompt_idx, id);
  if (!idx)
    throw UsageError("unknown response \"" + id + "\" for prompt \"" +
                     prompts_[prompt_idx].id + "\"");
  return *idx;
}

PromptSpace load_space(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open space file: " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw IoError("space file " + path.string() + ": " + e.what());
  }
  if (!doc.is_object()) throw IoError("space file: top level must be an object");
  reject_unknown_keys(doc, {"prompts"}, "space file");
  if (!doc.contains("prompts") || !doc["prompts"].is_array())
    throw IoError("space file: missing \"prompts\" array");

  std::vector<PromptEntry> entries;
  for (const auto& item : doc["prompts"]) {
    if (!item.is_object()) throw IoError("space file: prompt entry must be an object");
    reject_unknown_keys(item, {"id", "responses", "weight", "features"},
                        "space file prompt");
    PromptEntry e;
    e.id = item.at("id").get<std::string>();
    for (const auto& r : item.at("responses"))
      e.responses.push_back(r.get<std::string>());
    e.weight = item.at("weight").get<double>();
    if (item.contains("features")) {
      const auto& feats = item["features"];
      if (!feats.is_object())
        throw IoError("space file: \"features\" must map response ids to arrays");
      e.features.resize(e.responses.size());
      std::size_t filled = 0;
      for (std::size_t r = 0; r < e.responses.size(); ++r) {
        auto it = feats.find(e.responses[r]);
        if (it == feats.end())
          throw IoError("space file: prompt \"" + e.id +
                        "\" missing features for response \"" + e.responses[r] + "\"");
        e.features[r] = it->get<std::vector<double>>();
        ++filled;
      }
      if (feats.size() != filled)
        throw IoError("space file: prompt \"" + e.id +
                      "\" has features for unknown responses");
    }
    entries.push_back(std::move(e));
  }
  try {
    return PromptSpace(std::move(entries));
  } catch (const UsageError& e) {
    throw IoError(std::string("space file: ") + e.what());
  }
}

void save_space(const PromptSpace& space, const std::filesystem::path& path) {
  json prompts = json::array();
  for (const auto& p : space.prompts()) {
    json entry;
    entry["id"] = p.id;
    entry["responses"] = p.responses;
    entry["weight"] = p.weight;
    if (!p.features.empty()) {
      json feats = json::object();
      for (std::size_t r = 0; r < p.responses.size(); ++r)
        feats[p.responses[r]] = p.features[r];
      entry["features"] = std::move(feats);
    }
    prompts.push_back(std::move(entry));
  }
  json doc;
  doc["prompts"] = std::move(prompts);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write space file: " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

TripletDataset load_dataset(const std::filesystem::path& path,
                            const PromptSpace& space) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset file: " + path.string());

  TripletDataset ds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw IoError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!rec.is_object())
      throw IoError("dataset line " + std::to_string(line_no) + ": not an object");
    reject_unknown_keys(rec, {"prompt", "response", "reward"},
                        "dataset line " + std::to_string(line_no));
    if (!rec.contains("prompt") || !rec.contains("response") || !rec.contains("reward"))
      throw IoError("dataset line " + std::to_string(line_no) +
                    ": record needs prompt, response, reward");

    TripletRecord r;
    r.prompt_id = rec["prompt"].get<std::string>();
    r.response_id = rec["response"].get<std::string>();
    if (!rec["reward"].is_number())
      throw IoError("dataset line " + std::to_string(line_no) +
                    ": reward is not a number");
    r.raw_reward = rec["reward"].get<double>();

    auto p = space.find_prompt(r.prompt_id);
    if (!p)
      throw IoError("dataset line " + std::to_string(line_no) +
                    ": unknown prompt \"" + r.prompt_id + "\"");
    if (!space.find_response(*p, r.response_id))
      throw IoError("dataset line " + std::to_string(line_no) +
                    ": unknown response \"" + r.response_id + "\" for prompt \"" +
                    r.prompt_id + "\"");
    if (!std::isfinite(r.raw_reward))
      throw IoError("dataset line " + std::to_string(line_no) +
                    ": non-finite reward");
    r.std_reward = r.raw_reward;
    ds.records.push_back(std::move(r));
  }
  ds.standardized = false;
  return ds;
}

void save_dataset(const TripletDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset file: " + path.string());
  for (const auto& r : ds.records) {
    json rec;
    rec["prompt"] = r.prompt_id;
    rec["response"] = r.response_id;
    rec["reward"] = r.raw_reward;
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

TripletDataset standardize_rewards(const TripletDataset& ds) {
  if (ds.records.empty()) throw UsageError("standardize_rewards: empty dataset");

  const std::size_t n = ds.records.size();
  double mean = 0.0;
  for (const auto& r : ds.records) mean += r.raw_reward;
  mean /= static_cast<double>(n);

  double var = 0.0;
  for (const auto& r : ds.records) {
    const double d = r.raw_reward - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);  // population convention
  const double pop_std = std::sqrt(var);

  TripletDataset out = ds;
  for (auto& r : out.records)
    r.std_reward = pop_std < 1e-12 ? 0.0 : (r.raw_reward - mean) / pop_std;
  out.standardized = true;
  return out;
}

PromptIndex group_by_prompt(const TripletDataset& ds) {
  if (ds.records.empty()) throw UsageError("group_by_prompt: empty dataset");
  PromptIndex index;
  for (std::size_t i = 0; i < ds.records.size(); ++i)
    index[ds.records[i].prompt_id].push_back(i);
  return index;
}

CoverageStats coverage_report(const TripletDataset& ds, const PromptSpace& space) {
  std::vector<std::set<std::size_t>> seen(space.prompt_count());
  std::vector<std::size_t> duplicates(space.prompt_count(), 0);

  for (const auto& r : ds.records) {
    auto p = space.find_prompt(r.prompt_id);
    if (!p) throw UsageError("coverage_report: unknown prompt \"" + r.prompt_id + "\"");
    auto y = space.find_response(*p, r.response_id);
    if (!y)
      throw UsageError("coverage_report: unknown response \"" + r.response_id +
                       "\" for prompt \"" + r.prompt_id + "\"");
    if (!seen[*p].insert(*y).second) ++duplicates[*p];
  }

  CoverageStats stats;
  std::size_t full = 0;
  for (std::size_t p = 0; p < space.prompt_count(); ++p) {
    PromptCoverage c;
    c.prompt_id = space.prompt(p).id;
    c.distinct_observed = seen[p].size();
    c.total_candidates = space.candidate_count(p);
    c.duplicate_samples = duplicates[p];
    if (c.distinct_observed == c.total_candidates) ++full;
    stats.per_prompt.push_back(std::move(c));
  }
  std::sort(stats.per_prompt.begin(), stats.per_prompt.end(),
            [](const auto& a, const auto& b) { return a.prompt_id < b.prompt_id; });
  stats.full_coverage_fraction =
      static_cast<double>(full) / static_cast<double>(space.prompt_count());
  return stats;
}

RewardLaw parse_reward_law(const std::string& token) {
  if (token == "iid-normal") return RewardLaw::IidNormal;
  if (token == "feature-linear") return RewardLaw::FeatureLinear;
  if (token == "prompt-shift") return RewardLaw::PromptShift;
  throw UsageError("unknown reward law \"" + token +
                   "\" (expected iid-normal, feature-linear, or prompt-shift)");
}

std::string reward_law_token(RewardLaw law) {
  switch (law) {
    case RewardLaw::IidNormal: return "iid-normal";
    case RewardLaw::FeatureLinear: return "feature-linear";
    case RewardLaw::PromptShift: return "prompt-shift";
  }
  return "?";
}

namespace {

std::string padded_id(char prefix, std::size_t idx, std::size_t count) {
  std::size_t width = 1;
  for (std::size_t v = count > 0 ? count - 1 : 0; v >= 10; v /= 10) ++width;
  std::string digits = std::to_string(idx);
  std::string out(1, prefix);
  out.append(width - digits.size(), '0');
  out += digits;
  return out;
}

}  // namespace

SyntheticEnv generate_synthetic(const SyntheticConfig& config, std::uint64_t seed) {
  if (config.prompt_count < 1 || config.responses_per_prompt < 1)
    throw UsageError("generate_synthetic: counts must be >= 1");
  if (!(config.coverage > 0.0) || config.coverage > 1.0)
    throw UsageError("generate_synthetic: coverage must be in (0, 1]");
  if (config.duplication < 1)
    throw UsageError("generate_synthetic: duplication must be >= 1");
  if (config.reward_law == RewardLaw::FeatureLinear && config.feature_dim == 0)
    throw UsageError("generate_synthetic: feature-linear law needs feature_dim >= 1");

  const std::size_t P = config.prompt_count;
  const std::size_t R = config.responses_per_prompt;
  const std::size_t d = config.feature_dim;

  // Independent substreams keep each stage reproducible even if another
  // stage changes its draw count.
  SplitMix64 feature_rng(derive_seed(seed, 0));
  SplitMix64 reward_rng(derive_seed(seed, 1));
  SplitMix64 coverage_rng(derive_seed(seed, 2));

  std::vector<PromptEntry> entries(P);
  for (std::size_t p = 0; p < P; ++p) {
    auto& e = entries[p];
    e.id = padded_id('p', p, P);
    e.weight = 1.0;  // normalized to uniform by the PromptSpace constructor
    for (std::size_t r = 0; r < R; ++r)
      e.responses.push_back(padded_id('r', r, R));
    if (d > 0) {
      e.features.resize(R);
      for (std::size_t r = 0; r < R; ++r) {
        e.features[r].resize(d);
        for (std::size_t k = 0; k < d; ++k)
          e.features[r][k] = feature_rng.next_gaussian();
      }
    }
  }

  std::vector<double> linear_weights(d);
  for (std::size_t k = 0; k < d; ++k)
    linear_weights[k] = reward_rng.next_gaussian();

  // Rewards are deterministic per (prompt, response): duplicates and the
  // oracle see one consistent value.
  std::vector<std::vector<double>> rewards(P, std::vector<double>(R));
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t r = 0; r < R; ++r) {
      double value = 0.0;
      switch (config.reward_law) {
        case RewardLaw::IidNormal:
          value = reward_rng.next_gaussian();
          break;
        case RewardLaw::FeatureLinear: {
          double dot = 0.0;
          for (std::size_t k = 0; k < d; ++k)
            dot += linear_weights[k] * entries[p].features[r][k];
          value = dot / std::sqrt(static_cast<double>(d)) +
                  config.noise_scale * reward_rng.next_gaussian();
          break;
        }
        case RewardLaw::PromptShift: {
          const double pos = P > 1
              ? 2.0 * static_cast<double>(p) / static_cast<double>(P - 1) - 1.0
              : 0.0;
          value = config.shift_scale * pos +
                  config.noise_scale * reward_rng.next_gaussian();
          break;
        }
      }
      rewards[p][r] = value;
    }
  }

  TripletDataset ds;
  for (std::size_t p = 0; p < P; ++p) {
    std::size_t k = static_cast<std::size_t>(
        std::llround(config.coverage * static_cast<double>(R)));
    if (k < 1) k = 1;
    if (k > R) k = R;

    // Partial Fisher-Yates: first k slots of a shuffled index list.
    std::vector<std::size_t> order(R);
    for (std::size_t r = 0; r < R; ++r) order[r] = r;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(
          coverage_rng.next_below(static_cast<std::uint64_t>(R - i)));
      std::swap(order[i], order[j]);
    }
    std::vector<std::size_t> chosen(order.begin(), order.begin() + k);
    std::sort(chosen.begin(), chosen.end());

    for (std::size_t r : chosen) {
      for (std::size_t copy = 0; copy < config.duplication; ++copy) {
        TripletRecord rec;
        rec.prompt_id = entries[p].id;
        rec.response_id = entries[p].responses[r];
        rec.raw_reward = rewards[p][r];
        rec.std_reward = rec.raw_reward;
        ds.records.push_back(std::move(rec));
      }
    }
  }
  ds.standardized = false;

  return SyntheticEnv{PromptSpace(std::move(entries)), std::move(ds)};
}

}  // namespace rpolab
