#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "rpolab/data_model.hpp"
#include "rpolab/errors.hpp"
#include "rpolab/eval.hpp"
#include "rpolab/objectives.hpp"
#include "rpolab/oracle.hpp"
#include "rpolab/policy.hpp"
#include "rpolab/trainer.hpp"

namespace fs = std::filesystem;
using namespace rpolab;

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string tau_token(double tau) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", tau);
  return buf;
}

/// --ref grammar: uniform | random:<seed> | ckpt:<path>.
ReferencePolicy build_reference(const std::string& spec,
                                std::shared_ptr<const PromptSpace> space) {
  if (spec == "uniform") {
    return ReferencePolicy(uniform_policy(PolicyKind::Tabular, space));
  }
  if (spec.rfind("random:", 0) == 0) {
    const std::string tail = spec.substr(7);
    try {
      std::size_t pos = 0;
      const std::uint64_t seed = std::stoull(tail, &pos);
      if (pos != tail.size()) throw std::invalid_argument(tail);
      return ReferencePolicy(random_policy(PolicyKind::Tabular, space, seed));
    } catch (const std::exception&) {
      throw UsageError("--ref random:<seed> needs an unsigned integer seed, got '" +
                       tail + "'");
    }
  }
  if (spec.rfind("ckpt:", 0) == 0) {
    return ReferencePolicy(load_policy(spec.substr(5), std::move(space)));
  }
  throw UsageError("--ref must be uniform | random:<seed> | ckpt:<path>, got '" +
                   spec + "'");
}

struct GenFlags {
  std::size_t prompts = 8;
  std::size_t responses = 6;
  double coverage = 1.0;
  std::size_t duplication = 1;
  std::size_t feature_dim = 0;
  std::string reward_law = "iid-normal";
  double shift_scale = 2.0;
  double noise_scale = 0.25;
  std::uint64_t seed = 0;
  std::string out;
};

struct TrainFlags {
  std::string data;
  std::string space;
  std::string out;
  std::string method = "rpo";
  double tau = 1.0;
  double lr = 1e-2;
  std::size_t steps = 1000;
  std::size_t warmup = 0;
  std::size_t batch = 0;
  bool full_batch = false;
  std::uint64_t seed = 0;
  std::string policy = "tabular";
  std::size_t hidden = 8;
  std::string init = "auto";
  std::string ref = "uniform";
  double beta = 1.0;
  double lambda_d = 1.0;
  double lambda_u = 1.0;
  double kto_threshold = 0.0;
  double sft_threshold = 0.0;
  bool dedup_partition = false;
  bool recompute_partition = false;
  bool alternate_dro = false;
  double weight_decay = 0.0;
  bool slow_preset = false;
  bool timing = false;
  std::size_t eval_interval = 50;
};

struct SweepFlags {
  TrainFlags base;
  std::string methods = "rpo";
  std::string tau_grid = "0.1,1.0,5.0";
  std::string seeds = "1,2,3";
  std::size_t jobs = 1;
};

struct EvalFlags {
  std::string ckpt;
  std::string space;
  std::string data;
  std::string ref;  // optional override of the checkpoint's record
  std::string csv;  // optional append target
};

struct CompareFlags {
  std::vector<std::string> metrics_files;
  std::string out;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f, bool want_method,
                     bool want_tau_seed) {
  cmd->add_option("--data", f.data, "triplet dataset (JSONL)")->required();
  cmd->add_option("--space", f.space, "prompt space (JSON)")->required();
  cmd->add_option("--out", f.out, "output directory")->required();
  if (want_method) {
    cmd->add_option("--method", f.method,
                    "objective: rpo | rpo-nonorm | dro | kto | sft")
        ->required();
  }
  if (want_tau_seed) {
    cmd->add_option("--tau", f.tau, "KL temperature (default 1.0)");
    cmd->add_option("--seed", f.seed, "run seed (default 0)");
  }
  cmd->add_option("--lr", f.lr, "base learning rate (default 1e-2)");
  cmd->add_option("--steps", f.steps, "total optimizer steps (default 1000)");
  cmd->add_option("--warmup", f.warmup, "warmup steps (default 0)");
  auto* batch_opt =
      cmd->add_option("--batch", f.batch, "minibatch size (omit for full batch)");
  cmd->add_flag("--full-batch", f.full_batch, "force full-batch steps")
      ->excludes(batch_opt);
  cmd->add_option("--policy", f.policy, "policy class: tabular | featurized");
  cmd->add_option("--hidden", f.hidden,
                  "hidden width for featurized policies (default 8)");
  cmd->add_option("--init", f.init,
                  "init: auto | copy-ref | zeros | random (auto = copy-ref for "
                  "tabular, random for featurized)");
  cmd->add_option("--ref", f.ref,
                  "reference: uniform | random:<seed> | ckpt:<path>");
  cmd->add_option("--beta", f.beta, "kto: sigmoid sharpness (default 1.0)");
  cmd->add_option("--lambda-d", f.lambda_d, "kto: desirable weight (default 1.0)");
  cmd->add_option("--lambda-u", f.lambda_u,
                  "kto: undesirable weight (default 1.0)");
  cmd->add_option("--kto-threshold", f.kto_threshold,
                  "kto: desirability cut on std_reward (default 0.0)");
  cmd->add_option("--sft-threshold", f.sft_threshold,
                  "sft: keep records with std_reward >= this (default 0.0)");
  cmd->add_flag("--dedup-partition", f.dedup_partition,
                "collapse duplicate (prompt,response) pairs in the partition sum");
  cmd->add_flag("--recompute-partition", f.recompute_partition,
                "re-estimate the empirical partition every step");
  cmd->add_flag("--alternate-dro", f.alternate_dro,
                "alternate policy/value updates instead of joint steps");
  cmd->add_option("--weight-decay", f.weight_decay,
                  "decoupled weight decay (default 0)");
  cmd->add_flag("--slow-preset", f.slow_preset,
                "use lr 1e-4 with 150 warmup steps, overriding --lr/--warmup");
  cmd->add_flag("--timing", f.timing,
                "record wall-clock times (off by default so outputs are "
                "byte-reproducible)");
  cmd->add_option("--eval-interval", f.eval_interval,
                  "log metrics every N steps (default 50)");
}

TrainConfig make_config(const TrainFlags& f, const std::string& method_token_str,
                        double tau, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.method = parse_method(method_token_str);
  cfg.tau = tau;
  cfg.base_lr = f.slow_preset ? 1e-4 : f.lr;
  cfg.warmup_steps = f.slow_preset ? 150 : f.warmup;
  cfg.total_steps = f.steps;
  cfg.full_batch = f.batch == 0 || f.full_batch;
  cfg.batch_size = f.batch;
  cfg.seed = seed;
  cfg.policy_kind = parse_policy_kind(f.policy);
  if (f.init == "auto") {
    cfg.init_mode = cfg.policy_kind == PolicyKind::Tabular
                        ? InitMode::CopyReference
                        : InitMode::SeededRandom;
  } else {
    cfg.init_mode = parse_init_mode(f.init);
  }
  cfg.hidden_width = f.hidden;
  cfg.kto = KtoConfig{f.beta, f.lambda_d, f.lambda_u, f.kto_threshold};
  cfg.sft_threshold = f.sft_threshold;
  cfg.eval_interval = f.eval_interval;
  cfg.partition_mode = f.dedup_partition ? PartitionMode::Dedup
                                         : PartitionMode::PerOccurrence;
  cfg.recompute_partition = f.recompute_partition;
  cfg.alternate_dro = f.alternate_dro;
  cfg.weight_decay = f.weight_decay;
  cfg.timing = f.timing;
  cfg.ref_spec = f.ref;
  return cfg;
}

int cmd_gen_data(const GenFlags& f) {
  if (f.prompts < 1) throw UsageError("--prompts must be >= 1");
  if (f.responses < 1) throw UsageError("--responses must be >= 1");
  if (!(f.coverage > 0.0) || f.coverage > 1.0) {
    throw UsageError("--coverage must be in (0, 1]");
  }
  if (f.duplication < 1) throw UsageError("--duplication must be >= 1");

  SyntheticConfig cfg;
  cfg.prompt_count = f.prompts;
  cfg.responses_per_prompt = f.responses;
  cfg.reward_law = parse_reward_law(f.reward_law);
  cfg.feature_dim = f.feature_dim;
  cfg.coverage = f.coverage;
  cfg.duplication = f.duplication;
  cfg.shift_scale = f.shift_scale;
  cfg.noise_scale = f.noise_scale;
  if (cfg.reward_law == RewardLaw::FeatureLinear && cfg.feature_dim == 0) {
    throw UsageError("--reward-law feature-linear needs --feature-dim >= 1");
  }

  SyntheticEnv env = generate_synthetic(cfg, f.seed);
  std::error_code ec;
  fs::create_directories(f.out, ec);
  if (ec) throw IoError("cannot create directory: " + f.out);
  save_space(env.space, fs::path(f.out) / "space.json");
  save_dataset(env.dataset, fs::path(f.out) / "data.jsonl");

  const CoverageStats stats = coverage_report(env.dataset, env.space);
  std::cout << "gen-data: " << f.prompts << " prompts x " << f.responses
            << " responses, " << env.dataset.records.size()
            << " records, coverage " << tau_token(f.coverage)
            << " (fraction of prompts fully covered: "
            << tau_token(stats.full_coverage_fraction) << "), law "
            << f.reward_law << ", seed " << f.seed << " -> " << f.out << '\n';
  return 0;
}

void write_run_outputs(const TrainResult& result, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory: " + dir.string());
  emit_csv(result.rows, dir / "metrics.csv");
  save_checkpoint(result, dir / "checkpoint.json");
}

int cmd_train(const TrainFlags& f) {
  auto space = std::make_shared<const PromptSpace>(load_space(f.space));
  const TripletDataset ds = standardize_rewards(load_dataset(f.data, *space));
  const ReferencePolicy ref = build_reference(f.ref, space);
  const TrainConfig cfg = make_config(f, f.method, f.tau, f.seed);

  const TrainResult result = train(cfg, ds, space, ref);
  write_run_outputs(result, f.out);

  const MetricsRow& last = result.rows.back();
  std::cout << "train: method=" << f.method << " tau=" << tau_token(f.tau)
            << " seed=" << f.seed << " steps=" << f.steps
            << " final_loss=" << fmt(last.loss)
            << " kl_opt_max=" << fmt(last.kl_opt_max)
            << " objective_J=" << fmt(last.objective_j) << " -> " << f.out
            << '\n';
  return 0;
}

int cmd_eval(const EvalFlags& f) {
  auto space = std::make_shared<const PromptSpace>(load_space(f.space));
  const TrainResult stored = load_checkpoint(f.ckpt, space);
  const TripletDataset ds = standardize_rewards(load_dataset(f.data, *space));

  std::string ref_spec = !f.ref.empty() ? f.ref : stored.config.ref_spec;
  if (ref_spec.empty()) {
    throw UsageError(
        "checkpoint does not record how its reference was built; pass --ref");
  }
  const ReferencePolicy ref = build_reference(ref_spec, space);

  const RewardMap rewards = RewardMap::from_dataset(ds, *space);
  const OracleSolution sol =
      rewards.fully_covered()
          ? solve_oracle(ref, rewards, stored.config.tau)
          : solve_oracle_restricted(ref, rewards, stored.config.tau);

  if (stored.rows.empty()) {
    throw IntegrityError("checkpoint holds no metric rows");
  }
  const MetricsRow& last = stored.rows.back();
  StepContext ctx;
  ctx.step = last.step;
  ctx.method = last.method;
  ctx.seed = last.seed;
  ctx.loss = last.loss;
  ctx.lr = last.lr;
  ctx.wall_ms = last.wall_ms;

  const MetricsRow row = policy_metrics(stored.final_policy, ref, sol, rewards, ctx);
  std::cout << "step=" << row.step << " method=" << row.method
            << " tau=" << fmt(row.tau) << " seed=" << row.seed
            << " loss=" << fmt(row.loss) << " kl_ref=" << fmt(row.kl_ref)
            << " kl_opt=" << fmt(row.kl_opt)
            << " kl_opt_max=" << fmt(row.kl_opt_max)
            << " expected_reward=" << fmt(row.expected_reward)
            << " objective_J=" << fmt(row.objective_j) << " lr=" << fmt(row.lr)
            << " wall_ms=" << row.wall_ms << '\n';

  if (!f.csv.empty()) {
    std::vector<MetricsRow> rows;
    if (fs::exists(f.csv)) rows = load_metrics_csv(f.csv);
    rows.push_back(row);
    emit_csv(rows, f.csv);
  }
  return 0;
}

std::vector<std::string> parse_list(const std::string& csv, const char* flag) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : csv) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  if (out.empty()) {
    throw UsageError(std::string(flag) + " needs a non-empty comma-separated list");
  }
  return out;
}

struct Failure {
  int code = 0;
  std::string message;
};

Failure classify(const std::exception_ptr& ep) {
  try {
    std::rethrow_exception(ep);
  } catch (const UsageError& e) {
    return {2, e.what()};
  } catch (const IoError& e) {
    return {1, e.what()};
  } catch (const DivergenceError& e) {
    return {3, e.what()};
  } catch (const IntegrityError& e) {
    return {4, e.what()};
  } catch (const std::exception& e) {
    return {1, e.what()};
  }
}

int cmd_sweep(const SweepFlags& f) {
  auto space = std::make_shared<const PromptSpace>(load_space(f.base.space));
  const TripletDataset ds =
      standardize_rewards(load_dataset(f.base.data, *space));
  const ReferencePolicy ref = build_reference(f.base.ref, space);

  std::vector<std::string> methods = parse_list(f.methods, "--methods");
  for (const std::string& m : methods) parse_method(m);

  std::vector<double> taus;
  for (const std::string& t : parse_list(f.tau_grid, "--tau-grid")) {
    try {
      std::size_t pos = 0;
      taus.push_back(std::stod(t, &pos));
      if (pos != t.size()) throw std::invalid_argument(t);
    } catch (const std::exception&) {
      throw UsageError("--tau-grid entry '" + t + "' is not a number");
    }
  }
  std::vector<std::uint64_t> seeds;
  for (const std::string& s : parse_list(f.seeds, "--seeds")) {
    try {
      std::size_t pos = 0;
      seeds.push_back(std::stoull(s, &pos));
      if (pos != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw UsageError("--seeds entry '" + s + "' is not an unsigned integer");
    }
  }

  struct Job {
    TrainConfig cfg;
    std::string method;
    double tau;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const std::string& m : methods) {
    for (double tau : taus) {
      for (std::uint64_t seed : seeds) {
        jobs.push_back({make_config(f.base, m, tau, seed), m, tau, seed});
      }
    }
  }

  std::vector<std::optional<TrainResult>> results(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  const std::size_t workers = std::max<std::size_t>(1, f.jobs);
  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      try {
        results[i] = train(jobs[i].cfg, ds, space, ref);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (std::thread& t : pool) t.join();
  }

  bool failed = false;
  int exit_code = 0;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (!errors[i]) continue;
    failed = true;
    const Failure fail = classify(errors[i]);
    std::cerr << "sweep: run method=" << jobs[i].method
              << " tau=" << tau_token(jobs[i].tau) << " seed=" << jobs[i].seed
              << " failed: " << fail.message << '\n';
    // Most actionable failure class wins: usage > integrity > io > divergence.
    const auto rank = [](int code) {
      switch (code) {
        case 2: return 0;
        case 4: return 1;
        case 1: return 2;
        default: return 3;
      }
    };
    if (exit_code == 0 || rank(fail.code) < rank(exit_code)) {
      exit_code = fail.code;
    }
  }
  if (failed) return exit_code;

  const fs::path out(f.base.out);
  std::vector<RunSeries> series;
  series.reserve(jobs.size());
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const fs::path dir = out / (jobs[i].method + "_tau" + tau_token(jobs[i].tau) +
                                "_seed" + std::to_string(jobs[i].seed));
    write_run_outputs(*results[i], dir);
    series.push_back(to_series(*results[i]));
  }

  const std::vector<ComparisonRow> table = compare_runs(series);
  emit_comparison_csv(table, out / "comparison.csv");
  emit_plot_data(series, out / "plots");

  std::cout << "sweep: " << jobs.size() << " runs (" << methods.size()
            << " methods x " << taus.size() << " taus x " << seeds.size()
            << " seeds) -> " << f.base.out << '\n';
  for (const ComparisonRow& row : table) {
    std::cout << "  " << row.method << " tau=" << tau_token(row.tau)
              << " final_kl_opt=" << fmt(row.final_kl_opt_mean) << "+-"
              << fmt(row.final_kl_opt_std) << " steps_to_threshold=";
    if (row.steps_to_threshold) {
      std::cout << fmt(*row.steps_to_threshold);
    } else {
      std::cout << "not_reached";
    }
    std::cout << " objective_J=" << fmt(row.final_objective_j_mean) << '\n';
  }
  return 0;
}

int cmd_compare(const CompareFlags& f) {
  std::vector<RunSeries> series;
  for (const std::string& file : f.metrics_files) {
    const std::vector<MetricsRow> rows = load_metrics_csv(file);
    if (rows.empty()) {
      throw IoError("metrics file " + file + " has no data rows");
    }
    RunSeries run;
    run.method = rows.front().method;
    run.tau = rows.front().tau;
    run.seed = rows.front().seed;
    for (const MetricsRow& r : rows) {
      if (r.method != run.method || r.tau != run.tau || r.seed != run.seed) {
        throw IoError("metrics file " + file +
                      " mixes several runs; compare expects one run per file");
      }
    }
    run.rows = rows;
    series.push_back(std::move(run));
  }

  const std::vector<ComparisonRow> table = compare_runs(series);
  std::cout << "method,tau,seeds,final_kl_opt_mean,final_kl_opt_std,"
               "steps_to_threshold,final_objective_J\n";
  for (const ComparisonRow& row : table) {
    std::cout << row.method << ',' << fmt(row.tau) << ',' << row.seeds << ','
              << fmt(row.final_kl_opt_mean) << ',' << fmt(row.final_kl_opt_std)
              << ',';
    if (row.steps_to_threshold) {
      std::cout << fmt(*row.steps_to_threshold);
    } else {
      std::cout << "not_reached";
    }
    std::cout << ',' << fmt(row.final_objective_j_mean) << '\n';
  }
  if (!f.out.empty()) {
    emit_comparison_csv(table, f.out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale laboratory for single-trajectory policy optimization"};
  app.require_subcommand(1);

  GenFlags gen_flags;
  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic environment");
  gen->add_option("--prompts", gen_flags.prompts, "prompt count (default 8)");
  gen->add_option("--responses", gen_flags.responses,
                  "responses per prompt (default 6)");
  gen->add_option("--coverage", gen_flags.coverage,
                  "fraction of candidates observed, (0,1] (default 1.0)");
  gen->add_option("--duplication", gen_flags.duplication,
                  "copies of each observed pair (default 1)");
  gen->add_option("--feature-dim", gen_flags.feature_dim,
                  "per-pair feature dimension (default 0 = none)");
  gen->add_option("--reward-law", gen_flags.reward_law,
                  "iid-normal | feature-linear | prompt-shift");
  gen->add_option("--shift-scale", gen_flags.shift_scale,
                  "prompt-shift: offsets span [-s, s] (default 2.0)");
  gen->add_option("--noise-scale", gen_flags.noise_scale,
                  "reward noise scale (default 0.25)");
  gen->add_option("--seed", gen_flags.seed, "generator seed (default 0)");
  gen->add_option("--out", gen_flags.out, "output directory")->required();

  TrainFlags train_flags;
  CLI::App* train_cmd = app.add_subcommand("train", "run one training job");
  add_train_flags(train_cmd, train_flags, true, true);

  EvalFlags eval_flags;
  CLI::App* eval_cmd =
      app.add_subcommand("eval", "re-evaluate a checkpoint against the oracle");
  eval_cmd->add_option("--ckpt", eval_flags.ckpt, "trainer checkpoint (JSON)")
      ->required();
  eval_cmd->add_option("--space", eval_flags.space, "prompt space (JSON)")
      ->required();
  eval_cmd->add_option("--data", eval_flags.data, "triplet dataset (JSONL)")
      ->required();
  eval_cmd->add_option("--ref", eval_flags.ref,
                       "override the checkpoint's reference provisioning");
  eval_cmd->add_option("--csv", eval_flags.csv,
                       "append the recomputed row to this metrics CSV");

  SweepFlags sweep_flags;
  CLI::App* sweep_cmd =
      app.add_subcommand("sweep", "run a (method x tau x seed) grid");
  add_train_flags(sweep_cmd, sweep_flags.base, false, false);
  sweep_cmd->add_option("--methods", sweep_flags.methods,
                        "comma-separated method tokens (default rpo)");
  sweep_cmd->add_option("--tau-grid", sweep_flags.tau_grid,
                        "comma-separated taus (default 0.1,1.0,5.0)");
  sweep_cmd->add_option("--seeds", sweep_flags.seeds,
                        "comma-separated seeds (default 1,2,3)");
  sweep_cmd->add_option("--jobs", sweep_flags.jobs,
                        "parallel workers (default 1)");

  CompareFlags compare_flags;
  CLI::App* compare_cmd =
      app.add_subcommand("compare", "aggregate per-run metrics CSVs");
  compare_cmd
      ->add_option("files", compare_flags.metrics_files,
                   "metrics.csv files, one per run")
      ->required();
  compare_cmd->add_option("--out", compare_flags.out,
                          "also write the comparison CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_flags);
    if (train_cmd->parsed()) return cmd_train(train_flags);
    if (eval_cmd->parsed()) return cmd_eval(eval_flags);
    if (sweep_cmd->parsed()) return cmd_sweep(sweep_flags);
    if (compare_cmd->parsed()) return cmd_compare(compare_flags);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const IntegrityError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
