#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rpolab/eval.hpp"
#include "rpolab/objectives.hpp"

namespace rpolab {

/// Piecewise-linear rate: 0 -> base over [0, warmup], base -> 0 over
/// [warmup, total]. With warmup = 0 the ramp vanishes and lr(0) = base.
double lr_schedule(std::size_t step, std::size_t warmup, std::size_t total,
                   double base);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled (applied outside the moment update)
};

struct OptimizerState {
  AdamConfig config;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  OptimizerState() = default;
  explicit OptimizerState(std::size_t dim, AdamConfig cfg = {})
      : config(cfg), m(dim, 0.0), v(dim, 0.0) {}
};

/// One bias-corrected AdamW update in place.
void adam_step(OptimizerState& state, std::span<double> params,
               std::span<const double> grads, double lr);

InitMode parse_init_mode(const std::string& token);
std::string init_mode_token(InitMode mode);

PartitionMode parse_partition_mode(const std::string& token);
std::string partition_mode_token(PartitionMode mode);

struct TrainConfig {
  Method method = Method::Rpo;
  double tau = 1.0;
  double base_lr = 1e-2;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1000;
  bool full_batch = true;
  std::size_t batch_size = 0;  // used when full_batch is false
  std::uint64_t seed = 0;
  PolicyKind policy_kind = PolicyKind::Tabular;
  InitMode init_mode = InitMode::CopyReference;
  std::size_t hidden_width = 8;  // featurized policies only
  KtoConfig kto;                 // method == kto only
  double sft_threshold = 0.0;    // method == sft only
  std::size_t eval_interval = 50;
  PartitionMode partition_mode = PartitionMode::PerOccurrence;
  bool recompute_partition = false;  // re-estimate the partition every step
  bool alternate_dro = false;        // alternate policy/value steps
  double weight_decay = 0.0;
  // When false every wall_ms is 0 so repeated runs are byte-identical.
  bool timing = false;
  std::string ref_spec;  // how the reference was provisioned (echoed to eval)

  void validate(std::size_t dataset_size) const;
};

struct TrainResult {
  std::vector<MetricsRow> rows;
  Policy final_policy;
  std::optional<ValueTable> final_value;  // DRO only
  OptimizerState policy_opt;
  std::optional<OptimizerState> value_opt;  // DRO only
  TrainConfig config;
  long long total_wall_ms = 0;
};

/// Deterministic training loop: fixed (config, dataset, space, reference)
/// reproduces bit-identical results.
TrainResult train(const TrainConfig& cfg, const TripletDataset& ds,
                  std::shared_ptr<const PromptSpace> space,
                  const ReferencePolicy& ref);

/// Policy parameters plus, for DRO, one value entry per prompt.
std::size_t trainable_param_count(Method method, const Policy& p,
                                  const PromptSpace& space);

void save_checkpoint(const TrainResult& result,
                     const std::filesystem::path& path);
TrainResult load_checkpoint(const std::filesystem::path& path,
                            std::shared_ptr<const PromptSpace> space);

RunSeries to_series(const TrainResult& result);

}  // namespace rpolab
