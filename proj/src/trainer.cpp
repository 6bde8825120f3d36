#include "rpolab/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

#include "rpolab/errors.hpp"
#include "rpolab/oracle.hpp"
#include "rpolab/rng.hpp"
#include "serialize.hpp"

namespace rpolab {

namespace {

using nlohmann::json;

json optimizer_to_json(const OptimizerState& s) {
  return json{{"beta1", s.config.beta1},   {"beta2", s.config.beta2},
              {"epsilon", s.config.epsilon}, {"weight_decay", s.config.weight_decay},
              {"step", s.step},            {"m", s.m},
              {"v", s.v}};
}

OptimizerState optimizer_from_json(const json& doc, std::size_t expect_dim) {
  OptimizerState s;
  s.config.beta1 = doc.at("beta1").get<double>();
  s.config.beta2 = doc.at("beta2").get<double>();
  s.config.epsilon = doc.at("epsilon").get<double>();
  s.config.weight_decay = doc.at("weight_decay").get<double>();
  s.step = doc.at("step").get<std::uint64_t>();
  s.m = doc.at("m").get<std::vector<double>>();
  s.v = doc.at("v").get<std::vector<double>>();
  if (s.m.size() != expect_dim || s.v.size() != expect_dim) {
    throw IntegrityError("optimizer state size does not match parameters");
  }
  return s;
}

json row_to_json(const MetricsRow& r) {
  return json{{"step", r.step},
              {"method", r.method},
              {"tau", r.tau},
              {"seed", r.seed},
              {"loss", r.loss},
              {"kl_ref", r.kl_ref},
              {"kl_opt", r.kl_opt},
              {"kl_opt_max", r.kl_opt_max},
              {"expected_reward", r.expected_reward},
              {"objective_J", r.objective_j},
              {"lr", r.lr},
              {"wall_ms", r.wall_ms}};
}

MetricsRow row_from_json(const json& doc) {
  MetricsRow r;
  r.step = doc.at("step").get<long long>();
  r.method = doc.at("method").get<std::string>();
  r.tau = doc.at("tau").get<double>();
  r.seed = doc.at("seed").get<std::uint64_t>();
  r.loss = doc.at("loss").get<double>();
  r.kl_ref = doc.at("kl_ref").get<double>();
  r.kl_opt = doc.at("kl_opt").get<double>();
  r.kl_opt_max = doc.at("kl_opt_max").get<double>();
  r.expected_reward = doc.at("expected_reward").get<double>();
  r.objective_j = doc.at("objective_J").get<double>();
  r.lr = doc.at("lr").get<double>();
  r.wall_ms = doc.at("wall_ms").get<long long>();
  return r;
}

json config_to_json(const TrainConfig& c) {
  json doc{{"method", std::string(method_token(c.method))},
           {"tau", c.tau},
           {"base_lr", c.base_lr},
           {"warmup_steps", c.warmup_steps},
           {"total_steps", c.total_steps},
           {"full_batch", c.full_batch},
           {"batch_size", c.batch_size},
           {"seed", c.seed},
           {"policy", policy_kind_token(c.policy_kind)},
           {"init", init_mode_token(c.init_mode)},
           {"hidden_width", c.hidden_width},
           {"eval_interval", c.eval_interval},
           {"partition_mode", partition_mode_token(c.partition_mode)},
           {"recompute_partition", c.recompute_partition},
           {"alternate_dro", c.alternate_dro},
           {"weight_decay", c.weight_decay},
           {"timing", c.timing},
           {"ref_spec", c.ref_spec}};
  if (c.method == Method::Kto) {
    doc["kto"] = json{{"beta", c.kto.beta},
                      {"lambda_d", c.kto.lambda_d},
                      {"lambda_u", c.kto.lambda_u},
                      {"threshold", c.kto.threshold}};
  }
  if (c.method == Method::Sft) doc["sft_threshold"] = c.sft_threshold;
  return doc;
}

TrainConfig config_from_json(const json& doc) {
  TrainConfig c;
  c.method = parse_method(doc.at("method").get<std::string>());
  c.tau = doc.at("tau").get<double>();
  c.base_lr = doc.at("base_lr").get<double>();
  c.warmup_steps = doc.at("warmup_steps").get<std::size_t>();
  c.total_steps = doc.at("total_steps").get<std::size_t>();
  c.full_batch = doc.at("full_batch").get<bool>();
  c.batch_size = doc.at("batch_size").get<std::size_t>();
  c.seed = doc.at("seed").get<std::uint64_t>();
  c.policy_kind = parse_policy_kind(doc.at("policy").get<std::string>());
  c.init_mode = parse_init_mode(doc.at("init").get<std::string>());
  c.hidden_width = doc.at("hidden_width").get<std::size_t>();
  c.eval_interval = doc.at("eval_interval").get<std::size_t>();
  c.partition_mode =
      parse_partition_mode(doc.at("partition_mode").get<std::string>());
  c.recompute_partition = doc.at("recompute_partition").get<bool>();
  c.alternate_dro = doc.at("alternate_dro").get<bool>();
  c.weight_decay = doc.at("weight_decay").get<double>();
  c.timing = doc.at("timing").get<bool>();
  c.ref_spec = doc.at("ref_spec").get<std::string>();
  if (c.method == Method::Kto) {
    const json& k = doc.at("kto");
    c.kto.beta = k.at("beta").get<double>();
    c.kto.lambda_d = k.at("lambda_d").get<double>();
    c.kto.lambda_u = k.at("lambda_u").get<double>();
    c.kto.threshold = k.at("threshold").get<double>();
  }
  if (c.method == Method::Sft) {
    c.sft_threshold = doc.at("sft_threshold").get<double>();
  }
  return c;
}

}  // namespace

double lr_schedule(std::size_t step, std::size_t warmup, std::size_t total,
                   double base) {
  if (total == 0) throw UsageError("total steps must be positive");
  if (warmup >= total) {
    throw UsageError("warmup steps must be less than total steps");
  }
  if (step > total) throw UsageError("schedule step beyond total steps");
  if (!(base > 0.0) || !std::isfinite(base)) {
    throw UsageError("base learning rate must be positive");
  }
  if (warmup > 0 && step <= warmup) {
    return base * static_cast<double>(step) / static_cast<double>(warmup);
  }
  return base * static_cast<double>(total - step) /
         static_cast<double>(total - warmup);
}

void adam_step(OptimizerState& state, std::span<double> params,
               std::span<const double> grads, double lr) {
  if (params.size() != state.m.size() || grads.size() != state.m.size()) {
    throw UsageError("optimizer state does not match parameter shape");
  }
  if (!(lr >= 0.0) || !std::isfinite(lr)) {
    throw UsageError("learning rate must be finite and nonnegative");
  }
  for (double g : grads) {
    if (!std::isfinite(g)) {
      throw DivergenceError("non-finite gradient in optimizer step");
    }
  }
  state.step += 1;
  const double b1 = state.config.beta1;
  const double b2 = state.config.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * grads[i];
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= lr * (m_hat / (std::sqrt(v_hat) + state.config.epsilon) +
                       state.config.weight_decay * params[i]);
  }
}

InitMode parse_init_mode(const std::string& token) {
  if (token == "copy-ref") return InitMode::CopyReference;
  if (token == "zeros") return InitMode::Zeros;
  if (token == "random") return InitMode::SeededRandom;
  throw UsageError("unknown init mode '" + token +
                   "' (expected copy-ref | zeros | random)");
}

std::string init_mode_token(InitMode mode) {
  switch (mode) {
    case InitMode::CopyReference: return "copy-ref";
    case InitMode::Zeros: return "zeros";
    case InitMode::SeededRandom: return "random";
  }
  throw UsageError("invalid init mode enum value");
}

PartitionMode parse_partition_mode(const std::string& token) {
  if (token == "per-occurrence") return PartitionMode::PerOccurrence;
  if (token == "dedup") return PartitionMode::Dedup;
  throw UsageError("unknown partition mode '" + token +
                   "' (expected per-occurrence | dedup)");
}

std::string partition_mode_token(PartitionMode mode) {
  switch (mode) {
    case PartitionMode::PerOccurrence: return "per-occurrence";
    case PartitionMode::Dedup: return "dedup";
  }
  throw UsageError("invalid partition mode enum value");
}

void TrainConfig::validate(std::size_t dataset_size) const {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw UsageError("tau must be finite and positive");
  }
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) {
    throw UsageError("learning rate must be positive");
  }
  if (total_steps == 0) throw UsageError("total steps must be positive");
  if (warmup_steps >= total_steps) {
    throw UsageError("warmup steps must be less than total steps");
  }
  if (dataset_size == 0) throw UsageError("dataset is empty");
  if (!full_batch) {
    if (batch_size == 0) throw UsageError("batch size must be positive");
    if (batch_size > dataset_size) {
      throw UsageError("batch size exceeds dataset size");
    }
  }
  if (eval_interval == 0) throw UsageError("evaluation interval must be positive");
  if (policy_kind == PolicyKind::Featurized && hidden_width == 0) {
    throw UsageError("hidden width must be positive");
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw UsageError("weight decay must be finite and nonnegative");
  }
  if (method == Method::Kto) kto.validate();
  if (method == Method::Sft && !std::isfinite(sft_threshold)) {
    throw UsageError("sft threshold must be finite");
  }
}

std::size_t trainable_param_count(Method method, const Policy& p,
                                  const PromptSpace& space) {
  return p.param_count() +
         (method == Method::Dro ? space.prompt_count() : 0);
}

TrainResult train(const TrainConfig& cfg, const TripletDataset& ds,
                  std::shared_ptr<const PromptSpace> space,
                  const ReferencePolicy& ref) {
  cfg.validate(ds.records.size());
  if (!ds.standardized) {
    throw UsageError("train requires a standardized dataset");
  }
  if (ref.space().digest() != space->digest()) {
    throw UsageError("reference policy was built for a different prompt space");
  }

  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed_ms = [&]() -> long long {
    if (!cfg.timing) return 0;
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::steady_clock::now() - t0)
        .count();
  };

  const RewardMap rewards = RewardMap::from_dataset(ds, *space);
  const OracleSolution sol = rewards.fully_covered()
                                 ? solve_oracle(ref, rewards, cfg.tau)
                                 : solve_oracle_restricted(ref, rewards, cfg.tau);

  const PromptIndex index = group_by_prompt(ds);
  Policy policy = init_policy(cfg.policy_kind, space, cfg.init_mode, ref,
                              cfg.seed, cfg.hidden_width);
  std::vector<double> params = policy.params();

  std::optional<PartitionEstimate> part;
  if (cfg.method == Method::Rpo && !cfg.recompute_partition) {
    part = empirical_partition(index, ds, ref, cfg.tau, cfg.partition_mode);
  }

  ValueTable value(*space);

  AdamConfig adam;
  adam.weight_decay = cfg.weight_decay;
  OptimizerState policy_opt(params.size(), adam);
  std::optional<OptimizerState> value_opt;
  if (cfg.method == Method::Dro) {
    value_opt.emplace(value.values.size(), adam);
  }

  // Epoch-cycled shuffled batching; full-batch mode never consumes randomness.
  const std::size_t n = ds.records.size();
  std::vector<std::size_t> full(n);
  std::iota(full.begin(), full.end(), std::size_t{0});
  SplitMix64 batch_rng(derive_seed(cfg.seed, 4));
  std::vector<std::size_t> order;
  std::size_t pos = 0;
  const auto draw_batch = [&](std::vector<std::size_t>& batch) {
    batch.clear();
    while (batch.size() < cfg.batch_size) {
      if (pos >= order.size()) {
        order = full;
        for (std::size_t i = n - 1; i > 0; --i) {
          std::swap(order[i], order[batch_rng.next_below(i + 1)]);
        }
        pos = 0;
      }
      batch.push_back(order[pos++]);
    }
  };

  std::vector<MetricsRow> rows;
  std::vector<std::size_t> batch;
  for (std::size_t k = 0; k < cfg.total_steps; ++k) {
    const double lr =
        lr_schedule(k, cfg.warmup_steps, cfg.total_steps, cfg.base_lr);
    const bool use_full = cfg.full_batch;
    if (!use_full) draw_batch(batch);
    const Batch b = use_full ? Batch(full) : Batch(batch);

    ObjectiveOutput out;
    switch (cfg.method) {
      case Method::Rpo: {
        if (cfg.recompute_partition) {
          part = empirical_partition(index, ds, ref, cfg.tau,
                                     cfg.partition_mode);
        }
        out = rpo_loss_and_grad(policy, ref, ds, b, *part, cfg.tau);
        break;
      }
      case Method::RpoNoNorm:
        out = rpo_nonorm_loss_and_grad(policy, ref, ds, b, cfg.tau);
        break;
      case Method::Dro:
        out = dro_loss_and_grad(policy, value, ref, ds, b, cfg.tau);
        break;
      case Method::Kto:
        out = kto_loss_and_grad(policy, ref, ds, b, cfg.kto);
        break;
      case Method::Sft:
        out = sft_loss_and_grad(policy, ds, b, cfg.sft_threshold);
        break;
    }
    if (!std::isfinite(out.loss)) {
      throw DivergenceError("non-finite loss at step " + std::to_string(k + 1));
    }

    if (cfg.method == Method::Dro) {
      const bool update_policy = !cfg.alternate_dro || k % 2 == 0;
      const bool update_value = !cfg.alternate_dro || k % 2 == 1;
      if (update_policy) {
        adam_step(policy_opt, params, out.policy_grad, lr);
        policy.set_params(params);
      }
      if (update_value) {
        adam_step(*value_opt, value.values, out.value_grad, lr);
      }
    } else {
      adam_step(policy_opt, params, out.policy_grad, lr);
      policy.set_params(params);
    }

    const std::size_t step = k + 1;
    if (step % cfg.eval_interval == 0 || step == cfg.total_steps) {
      StepContext ctx;
      ctx.step = static_cast<long long>(step);
      ctx.method = std::string(method_token(cfg.method));
      ctx.seed = cfg.seed;
      ctx.loss = out.loss;
      ctx.lr = lr;
      ctx.wall_ms = elapsed_ms();
      rows.push_back(policy_metrics(policy, ref, sol, rewards, ctx));
    }
  }

  TrainResult result{.rows = std::move(rows),
                     .final_policy = std::move(policy),
                     .final_value = std::nullopt,
                     .policy_opt = std::move(policy_opt),
                     .value_opt = std::nullopt,
                     .config = cfg,
                     .total_wall_ms = elapsed_ms()};
  if (cfg.method == Method::Dro) {
    result.final_value = std::move(value);
    result.value_opt = std::move(value_opt);
  }
  return result;
}

void save_checkpoint(const TrainResult& result,
                     const std::filesystem::path& path) {
  json doc = policy_to_json(result.final_policy);
  doc["optimizer"] = json{{"policy", optimizer_to_json(result.policy_opt)}};
  if (result.value_opt) {
    doc["optimizer"]["value"] = optimizer_to_json(*result.value_opt);
  }
  if (result.final_value) {
    doc["value_table"] = result.final_value->values;
  }
  json metrics = json::array();
  for (const MetricsRow& r : result.rows) metrics.push_back(row_to_json(r));
  doc["metrics"] = std::move(metrics);
  doc["config"] = config_to_json(result.config);
  doc["total_wall_ms"] = result.total_wall_ms;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

TrainResult load_checkpoint(const std::filesystem::path& path,
                            std::shared_ptr<const PromptSpace> space) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw IoError("checkpoint " + path.string() + ": " + e.what());
  }

  Policy policy = policy_from_json(doc, space);
  TrainConfig cfg;
  std::vector<MetricsRow> rows;
  OptimizerState policy_opt;
  std::optional<OptimizerState> value_opt;
  std::optional<ValueTable> value;
  long long wall = 0;
  try {
    cfg = config_from_json(doc.at("config"));
    for (const auto& r : doc.at("metrics")) rows.push_back(row_from_json(r));
    policy_opt =
        optimizer_from_json(doc.at("optimizer").at("policy"), policy.param_count());
    if (cfg.method == Method::Dro) {
      ValueTable vt;
      vt.values = doc.at("value_table").get<std::vector<double>>();
      if (vt.values.size() != space->prompt_count()) {
        throw IntegrityError("value table size does not match the prompt space");
      }
      value_opt = optimizer_from_json(doc.at("optimizer").at("value"),
                                      vt.values.size());
      value = std::move(vt);
    }
    wall = doc.at("total_wall_ms").get<long long>();
  } catch (const json::exception& e) {
    throw IntegrityError("checkpoint " + path.string() +
                         ": malformed trainer section: " + e.what());
  }

  return TrainResult{.rows = std::move(rows),
                     .final_policy = std::move(policy),
                     .final_value = std::move(value),
                     .policy_opt = std::move(policy_opt),
                     .value_opt = std::move(value_opt),
                     .config = std::move(cfg),
                     .total_wall_ms = wall};
}

RunSeries to_series(const TrainResult& result) {
  return RunSeries{std::string(method_token(result.config.method)),
                   result.config.tau, result.config.seed, result.rows};
}

}  // namespace rpolab
