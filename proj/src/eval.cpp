#include "rpolab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "rpolab/errors.hpp"
#include "text_util.hpp"

namespace rpolab {

namespace {

constexpr const char* kMetricsHeader =
    "step,method,tau,seed,loss,kl_ref,kl_opt,kl_opt_max,expected_reward,"
    "objective_J,lr,wall_ms";

constexpr const char* kComparisonHeader =
    "method,tau,seeds,final_kl_opt_mean,final_kl_opt_std,steps_to_threshold,"
    "final_objective_J";

std::vector<double> renormalized(const std::vector<double>& full,
                                 const std::vector<std::size_t>& support) {
  std::vector<double> out;
  out.reserve(support.size());
  double total = 0.0;
  for (std::size_t y : support) total += full[y];
  if (!(total > 0.0)) {
    throw UsageError("policy places zero mass on the observed support");
  }
  for (std::size_t y : support) out.push_back(full[y] / total);
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write file: " + path.string());
  return out;
}

void finish_out(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

std::string tau_token(double tau) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", tau);
  return buf;
}

double parse_csv_double(const std::string& field, std::size_t line_no,
                        const std::filesystem::path& path) {
  char* end = nullptr;
  const double v = std::strtod(field.c_str(), &end);
  if (end == field.c_str() || *end != '\0') {
    throw IoError("metrics file " + path.string() + " line " +
                  std::to_string(line_no) + ": bad number \"" + field + "\"");
  }
  return v;
}

long long parse_csv_int(const std::string& field, std::size_t line_no,
                        const std::filesystem::path& path) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(field, &pos);
    if (pos != field.size()) throw std::invalid_argument(field);
    return v;
  } catch (const std::exception&) {
    throw IoError("metrics file " + path.string() + " line " +
                  std::to_string(line_no) + ": bad integer \"" + field + "\"");
  }
}

std::uint64_t parse_csv_uint(const std::string& field, std::size_t line_no,
                             const std::filesystem::path& path) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(field, &pos);
    if (pos != field.size()) throw std::invalid_argument(field);
    return v;
  } catch (const std::exception&) {
    throw IoError("metrics file " + path.string() + " line " +
                  std::to_string(line_no) + ": bad integer \"" + field + "\"");
  }
}

}  // namespace

MetricsRow policy_metrics(const Policy& p, const ReferencePolicy& ref,
                          const OracleSolution& sol, const RewardMap& rewards,
                          const StepContext& ctx) {
  const PromptSpace& space = p.space();
  const std::size_t pn = space.prompts().size();
  if (sol.per_prompt.size() != pn || rewards.prompt_count() != pn ||
      ref.space().digest() != space.digest()) {
    throw UsageError("metrics inputs were built for a different prompt space");
  }

  double weight_covered = 0.0;
  for (std::size_t x = 0; x < pn; ++x) {
    if (!sol.per_prompt[x].support.empty()) {
      weight_covered += space.prompts()[x].weight;
    }
  }
  if (!(weight_covered > 0.0)) {
    throw UsageError("no prompt has any observed candidates to evaluate on");
  }

  MetricsRow row;
  row.step = ctx.step;
  row.method = ctx.method;
  row.tau = sol.tau;
  row.seed = ctx.seed;
  row.loss = ctx.loss;
  row.lr = ctx.lr;
  row.wall_ms = ctx.wall_ms;

  double kl_ref_sum = 0.0;
  double kl_opt_sum = 0.0;
  double kl_opt_max = 0.0;
  double reward_weighted = 0.0;
  double kl_ref_weighted = 0.0;
  std::size_t covered = 0;

  for (std::size_t x = 0; x < pn; ++x) {
    const PromptOracle& po = sol.per_prompt[x];
    if (po.support.empty()) continue;
    ++covered;
    const double rho = space.prompts()[x].weight / weight_covered;

    std::vector<double> pi;
    std::vector<double> pi_ref;
    if (sol.restricted) {
      pi = renormalized(p.action_distribution(x), po.support);
      pi_ref = renormalized(ref.action_distribution(x), po.support);
    } else {
      pi = p.action_distribution(x);
      pi_ref = ref.action_distribution(x);
    }

    const double kl_r = exact_kl(pi, pi_ref);
    const double kl_o = exact_kl(pi, po.optimal);
    kl_ref_sum += kl_r;
    kl_opt_sum += kl_o;
    kl_opt_max = std::max(kl_opt_max, kl_o);
    kl_ref_weighted += rho * kl_r;

    double er = 0.0;
    for (std::size_t j = 0; j < po.support.size(); ++j) {
      er += pi[j] * rewards.at(x, po.support[j]);
    }
    reward_weighted += rho * er;
  }

  row.kl_ref = kl_ref_sum / static_cast<double>(covered);
  row.kl_opt = kl_opt_sum / static_cast<double>(covered);
  row.kl_opt_max = kl_opt_max;
  row.expected_reward = reward_weighted;
  row.objective_j = reward_weighted - sol.tau * kl_ref_weighted;
  return row;
}

double oracle_objective(const OracleSolution& sol, const PromptSpace& space) {
  if (sol.per_prompt.size() != space.prompts().size()) {
    throw UsageError("oracle solution was built for a different prompt space");
  }
  double weight_covered = 0.0;
  for (std::size_t x = 0; x < sol.per_prompt.size(); ++x) {
    if (!sol.per_prompt[x].support.empty()) {
      weight_covered += space.prompts()[x].weight;
    }
  }
  if (!(weight_covered > 0.0)) {
    throw UsageError("oracle solution covers no prompts");
  }
  double j = 0.0;
  for (std::size_t x = 0; x < sol.per_prompt.size(); ++x) {
    if (sol.per_prompt[x].support.empty()) continue;
    j += (space.prompts()[x].weight / weight_covered) *
         sol.per_prompt[x].soft_value;
  }
  return j;
}

std::optional<long long> first_step_reaching(const std::vector<MetricsRow>& rows,
                                             double threshold) {
  for (const MetricsRow& r : rows) {
    if (r.kl_opt_max < threshold) return r.step;
  }
  return std::nullopt;
}

std::vector<ComparisonRow> compare_runs(const std::vector<RunSeries>& runs) {
  if (runs.empty()) throw UsageError("compare_runs needs at least one run");
  std::map<std::pair<std::string, double>, std::vector<const RunSeries*>> groups;
  for (const RunSeries& run : runs) {
    if (run.rows.empty()) {
      throw UsageError("run series for method '" + run.method +
                       "' has no metric rows");
    }
    groups[{run.method, run.tau}].push_back(&run);
  }
  std::vector<ComparisonRow> table;
  table.reserve(groups.size());
  for (const auto& [key, members] : groups) {
    ComparisonRow row;
    row.method = key.first;
    row.tau = key.second;
    row.seeds = members.size();
    double kl_sum = 0.0;
    double kl_sq_sum = 0.0;
    double j_sum = 0.0;
    double step_sum = 0.0;
    std::size_t reached = 0;
    for (const RunSeries* run : members) {
      const MetricsRow& last = run->rows.back();
      kl_sum += last.kl_opt;
      kl_sq_sum += last.kl_opt * last.kl_opt;
      j_sum += last.objective_j;
      if (auto step = first_step_reaching(run->rows)) {
        step_sum += static_cast<double>(*step);
        ++reached;
      }
    }
    const double n = static_cast<double>(members.size());
    row.final_kl_opt_mean = kl_sum / n;
    const double var =
        std::max(0.0, kl_sq_sum / n - row.final_kl_opt_mean * row.final_kl_opt_mean);
    row.final_kl_opt_std = std::sqrt(var);
    row.final_objective_j_mean = j_sum / n;
    if (reached > 0) {
      row.steps_to_threshold = step_sum / static_cast<double>(reached);
    }
    table.push_back(std::move(row));
  }
  return table;
}

void emit_csv(const std::vector<MetricsRow>& rows,
              const std::filesystem::path& path) {
  std::ofstream out = open_out(path);
  out << kMetricsHeader << '\n';
  for (const MetricsRow& r : rows) {
    out << r.step << ',' << r.method << ',' << format_double(r.tau) << ','
        << r.seed << ',' << format_double(r.loss) << ','
        << format_double(r.kl_ref) << ',' << format_double(r.kl_opt) << ','
        << format_double(r.kl_opt_max) << ','
        << format_double(r.expected_reward) << ','
        << format_double(r.objective_j) << ',' << format_double(r.lr) << ','
        << r.wall_ms << '\n';
  }
  finish_out(out, path);
}

std::vector<MetricsRow> load_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open metrics file: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw IoError("metrics file " + path.string() +
                  ": header does not match the metrics schema");
  }
  std::vector<MetricsRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string> fields = split(line, ',');
    if (fields.size() != 12) {
      throw IoError("metrics file " + path.string() + " line " +
                    std::to_string(line_no) + ": expected 12 fields, got " +
                    std::to_string(fields.size()));
    }
    MetricsRow r;
    r.step = parse_csv_int(fields[0], line_no, path);
    r.method = fields[1];
    r.tau = parse_csv_double(fields[2], line_no, path);
    r.seed = parse_csv_uint(fields[3], line_no, path);
    r.loss = parse_csv_double(fields[4], line_no, path);
    r.kl_ref = parse_csv_double(fields[5], line_no, path);
    r.kl_opt = parse_csv_double(fields[6], line_no, path);
    r.kl_opt_max = parse_csv_double(fields[7], line_no, path);
    r.expected_reward = parse_csv_double(fields[8], line_no, path);
    r.objective_j = parse_csv_double(fields[9], line_no, path);
    r.lr = parse_csv_double(fields[10], line_no, path);
    r.wall_ms = parse_csv_int(fields[11], line_no, path);
    rows.push_back(std::move(r));
  }
  return rows;
}

void emit_comparison_csv(const std::vector<ComparisonRow>& table,
                         const std::filesystem::path& path) {
  std::ofstream out = open_out(path);
  out << kComparisonHeader << '\n';
  for (const ComparisonRow& r : table) {
    out << r.method << ',' << format_double(r.tau) << ',' << r.seeds << ','
        << format_double(r.final_kl_opt_mean) << ','
        << format_double(r.final_kl_opt_std) << ',';
    if (r.steps_to_threshold) {
      out << format_double(*r.steps_to_threshold);
    } else {
      out << "not_reached";
    }
    out << ',' << format_double(r.final_objective_j_mean) << '\n';
  }
  finish_out(out, path);
}

void emit_plot_data(const std::vector<RunSeries>& runs,
                    const std::filesystem::path& dir) {
  if (runs.empty()) throw UsageError("emit_plot_data needs at least one run");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory: " + dir.string());

  std::map<std::pair<std::string, double>, std::vector<const RunSeries*>> groups;
  for (const RunSeries& run : runs) {
    if (run.rows.empty()) {
      throw UsageError("run series for method '" + run.method +
                       "' has no metric rows");
    }
    groups[{run.method, run.tau}].push_back(&run);
  }

  nlohmann::json index;
  index["series"] = nlohmann::json::array();
  for (const auto& [key, members] : groups) {
    const RunSeries* first = members.front();
    for (const RunSeries* run : members) {
      if (run->rows.size() != first->rows.size()) {
        throw UsageError("runs for method '" + key.first +
                         "' log different step grids; cannot average");
      }
      for (std::size_t i = 0; i < run->rows.size(); ++i) {
        if (run->rows[i].step != first->rows[i].step) {
          throw UsageError("runs for method '" + key.first +
                           "' log different step grids; cannot average");
        }
      }
    }
    const std::string name =
        "series_" + key.first + "_tau" + tau_token(key.second) + ".csv";
    const std::filesystem::path file = dir / name;
    std::ofstream out = open_out(file);
    out << "step,kl_opt,loss\n";
    const double inv = 1.0 / static_cast<double>(members.size());
    for (std::size_t i = 0; i < first->rows.size(); ++i) {
      double kl = 0.0;
      double loss = 0.0;
      for (const RunSeries* run : members) {
        kl += run->rows[i].kl_opt;
        loss += run->rows[i].loss;
      }
      out << first->rows[i].step << ',' << format_double(kl * inv) << ','
          << format_double(loss * inv) << '\n';
    }
    finish_out(out, file);
    index["series"].push_back(
        {{"method", key.first}, {"tau", key.second}, {"path", name}});
  }

  const std::filesystem::path index_path = dir / "index.json";
  std::ofstream out = open_out(index_path);
  out << index.dump(2) << '\n';
  finish_out(out, index_path);
}

}  // namespace rpolab
