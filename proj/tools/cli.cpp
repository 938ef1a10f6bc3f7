#include "optsearch/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "optsearch/bench.hpp"
#include "optsearch/config.hpp"
#include "optsearch/errors.hpp"
#include "optsearch/harness.hpp"

namespace optsearch {

namespace {

namespace fs = std::filesystem;

// Quotes a CSV field when it contains a separator.
std::string csv_field(const std::string& text) {
  if (text.find_first_of(",\" ") == std::string::npos) return text;
  std::string out = "\"";
  for (char c : text) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::string fmt_double(double x) {
  if (std::isnan(x)) return "nan";
  std::ostringstream os;
  os << std::setprecision(10) << x;
  return os.str();
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory '" + dir.string() + "': " + ec.message());
}

void write_topk(const fs::path& path, const std::vector<RankedProgram>& topk) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "rank\treward\tsample_id\tprogram\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < topk.size(); ++i) {
    out << i + 1 << '\t' << topk[i].reward << '\t' << topk[i].sample_id << '\t'
        << topk[i].program << '\n';
  }
}

void save_policy(const fs::path& path, const ControllerPolicy& policy) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    policy.save(out);
  }
  fs::rename(tmp, path);
}

// --- search -----------------------------------------------------------------

struct SearchArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<std::size_t> samples;
  std::string task;
  std::string schedule;
  std::string out = "out";
  std::vector<std::string> settings;
  bool resume = false;
};

int cmd_search(const SearchArgs& a, std::ostream& out) {
  SearchConfig config = load_config(a.config);
  for (const auto& s : a.settings) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + s + "'");
    apply_setting(config, s.substr(0, eq), s.substr(eq + 1));
  }
  if (a.seed) config.seed = *a.seed;
  if (a.workers) config.workers = *a.workers;
  if (a.samples) config.total_samples = *a.samples;
  if (!a.task.empty()) apply_setting(config, "task", a.task);
  if (!a.schedule.empty()) apply_setting(config, "schedule", a.schedule);
  config.check();

  const fs::path dir(a.out);
  ensure_dir(dir);
  const fs::path log_path = dir / "search.jsonl";
  const fs::path ckpt_path = dir / "policy.ckpt";

  SearchHooks hooks;
  std::optional<ControllerPolicy> policy;
  if (a.resume && fs::exists(ckpt_path)) {
    std::ifstream in(ckpt_path);
    policy.emplace(ControllerPolicy::load(in));
    std::ifstream log_in(log_path);
    std::vector<EvalResult> prior = log_in ? read_results(log_in) : std::vector<EvalResult>{};
    // Records past the checkpoint belong to a batch whose update was lost.
    std::erase_if(prior, [&](const EvalResult& r) { return r.sample_id >= policy->samples_done; });
    hooks.prior = std::move(prior);
    hooks.policy = &*policy;
  }

  // Rewrite the kept prefix so the log stays consistent with the checkpoint.
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw Error("cannot write '" + log_path.string() + "'");
  for (const auto& r : hooks.prior) log << to_json(r).dump() << '\n';
  hooks.log = &log;
  hooks.on_batch = [&](const ControllerPolicy& p) { save_policy(ckpt_path, p); };

  const SearchOutcome outcome = run_search(config, hooks);
  log.close();
  write_topk(dir / "topk.tsv", outcome.topk);
  if (!fs::exists(ckpt_path)) {
    // A run without batches still leaves a loadable checkpoint.
    const SearchSpace space(config.constraints, config.n_groups);
    save_policy(ckpt_path, ControllerPolicy(space.vocab_sizes(), config.controller,
                                            hash_combine(config.seed, 0xC047ULL)));
  }

  out << "samples: " << outcome.results.size() << '\n';
  if (!outcome.topk.empty()) {
    out << "best: " << fmt_double(outcome.topk.front().reward) << "  "
        << outcome.topk.front().program << '\n';
  }
  out << "log: " << log_path.string() << '\n';
  return kExitOk;
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  std::vector<std::string> program;
  std::string config;
  std::string task;
  std::string schedule;
  std::string lrs;
  std::uint64_t seed = 0;
  std::optional<std::size_t> epochs;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  SearchConfig config = a.config.empty() ? SearchConfig{} : load_config(a.config);
  if (!a.task.empty()) apply_setting(config, "task", a.task);
  if (!a.schedule.empty()) apply_setting(config, "schedule", a.schedule);
  if (!a.lrs.empty()) config.sweep_grid = parse_lr_grid(a.lrs);
  if (a.epochs) config.full_epochs = *a.epochs;
  config.check();
  EvalJob job;
  job.rule = parse_update_rule(join(a.program));
  job.task = config.task;
  job.schedule = config.schedule;
  job.runtime = config.runtime;
  job.sweep_grid = config.sweep_grid;
  job.sweep_epochs = config.sweep_epochs;
  job.full_epochs = config.full_epochs;
  job.seed = a.seed;
  job.early_stop.enabled = false;
  const EvalResult r = evaluate_candidate(job);
  out << to_json(r).dump() << '\n';
  return kExitOk;
}

// --- bench ------------------------------------------------------------------

struct BenchArgs {
  std::vector<std::string> optimizers;
  std::string task = "rosenbrock";
  std::size_t iters = 4000;
  std::size_t epochs = 5;
  std::string lrs = "4";
  std::string schedule = "constant";
  std::uint64_t seed = 0;
  std::string out;
  bool tune_adam_eps = false;
  bool zero_internal_decay = false;
};

int cmd_bench(const BenchArgs& a, std::ostream& out) {
  BenchOptions options;
  try {
    options.task = TaskSpec{};
    options.task.kind = parse_task_kind(a.task);
    options.schedule = parse_schedule(a.schedule);
  } catch (const InvalidSpec& e) {
    throw ConfigError(e.what());
  }
  const bool analytic = options.task.kind == TaskKind::rosenbrock ||
                        options.task.kind == TaskKind::quadratic;
  options.task.iterations_per_epoch = a.iters;
  options.epochs = analytic ? 1 : a.epochs;
  options.lrs = parse_lr_grid(a.lrs);
  options.seed = a.seed;
  options.tune_adam_eps = a.tune_adam_eps;
  options.zero_internal_decay = a.zero_internal_decay;

  // Resolve every id before running anything.
  for (const auto& id : a.optimizers) (void)parse_update_rule(id);

  std::vector<BenchRow> rows;
  for (const auto& id : a.optimizers) rows.push_back(bench_optimizer(id, options));

  std::ostringstream csv;
  csv << "optimizer,lr,final,best\n";
  csv << std::setprecision(17);
  for (const auto& r : rows) {
    csv << csv_field(r.optimizer) << ',' << fmt_double(r.lr) << ',' << r.final_metric << ','
        << r.best_metric << '\n';
  }
  out << csv.str();

  if (!a.out.empty()) {
    const fs::path dir(a.out);
    ensure_dir(dir);
    std::ofstream table(dir / "bench.csv");
    table << csv.str();
    std::ofstream traj(dir / "trajectories.csv");
    traj << "optimizer,step,metric,w0,w1\n" << std::setprecision(17);
    for (const auto& r : rows) {
      for (const auto& p : r.trajectory) {
        traj << csv_field(r.optimizer) << ',' << p.step << ',' << p.metric << ',' << p.w0 << ','
             << p.w1 << '\n';
      }
    }
    if (!table || !traj) throw Error("cannot write bench output in '" + dir.string() + "'");
  }
  return kExitOk;
}

// --- fmt --------------------------------------------------------------------

int cmd_fmt(const std::vector<std::string>& words, std::ostream& out, std::ostream& err) {
  UpdateRuleProgram program;
  try {
    program = parse_program(join(words));
  } catch (const DslError& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  out << format_program(program) << '\n';
  out << "state: ";
  const auto slots = required_state(program);
  if (slots.empty()) out << "none";
  bool first = true;
  for (StateSlot s : slots) {
    out << (first ? "" : ", ") << to_string(s);
    first = false;
  }
  out << '\n';
  const ValidationReport report = validate(program, ConstraintSet::with_extensions());
  if (report.ok()) {
    out << "valid\n";
    return kExitOk;
  }
  for (const auto& v : report.violations) {
    out << "violation: group " << v.group << ": " << v.message << '\n';
  }
  return kExitFailure;
}

// --- rerun ------------------------------------------------------------------

struct RerunArgs {
  std::string log;
  std::vector<std::string> programs;
  std::string config;
  std::string task = "mlp";
  std::size_t k = 5;
  std::size_t multiplier = 10;
  std::optional<std::uint64_t> seed;
};

int cmd_rerun(const RerunArgs& a, std::ostream& out) {
  SearchConfig config = a.config.empty() ? SearchConfig{} : load_config(a.config);
  if (a.seed) config.seed = *a.seed;
  std::vector<std::string> programs = a.programs;
  if (!a.log.empty()) {
    std::ifstream in(a.log);
    if (!in) throw ConfigError("cannot read log '" + a.log + "'");
    for (const auto& r : replay_topk(in, a.k)) programs.push_back(r.program);
  }
  TaskSpec task = config.task;
  try {
    task.kind = parse_task_kind(a.task);
  } catch (const InvalidSpec& e) {
    throw ConfigError(e.what());
  }
  for (const auto& p : programs) (void)parse_update_rule(p);
  const auto report = topk_rerun(programs, config, task, a.multiplier);
  out << "rank,program,reward,best,final,lr,status\n" << std::setprecision(17);
  for (std::size_t i = 0; i < report.size(); ++i) {
    const auto& r = report[i];
    out << i + 1 << ',' << csv_field(r.program) << ',' << r.reward << ',' << r.best_metric << ','
        << r.final_metric << ',' << r.chosen_lr << ',' << to_string(r.status) << '\n';
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Search, evaluate and benchmark optimizer update rules"};
  app.require_subcommand(1);

  SearchArgs search;
  auto* s = app.add_subcommand("search", "Run a controller search");
  s->add_option("--config", search.config, "Config file")->required();
  s->add_option("--seed", search.seed, "Search seed");
  s->add_option("--workers", search.workers, "Worker threads")->check(CLI::PositiveNumber);
  s->add_option("--samples", search.samples, "Total sampled programs");
  s->add_option("--task", search.task, "Child task");
  s->add_option("--schedule", search.schedule, "Learning-rate schedule");
  s->add_option("--out", search.out, "Output directory");
  s->add_option("--set", search.settings, "Config override KEY=VALUE");
  s->add_flag("--resume", search.resume, "Continue from OUT/policy.ckpt");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Score one rule with the sweep protocol");
  e->add_option("program", eval.program, "Optimizer id or DSL program")->required();
  e->add_option("--config", eval.config, "Config file");
  e->add_option("--task", eval.task, "Child task");
  e->add_option("--schedule", eval.schedule, "Learning-rate schedule");
  e->add_option("--lrs", eval.lrs, "Sweep grid: count or comma list");
  e->add_option("--epochs", eval.epochs, "Full-run epochs");
  e->add_option("--seed", eval.seed, "Seed");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Compare optimizers with best-of-grid runs");
  b->add_option("optimizers", bench.optimizers, "Optimizer ids or DSL programs")->required();
  b->add_option("--task", bench.task, "Task");
  b->add_option("--iters", bench.iters, "Iterations (analytic tasks)")->check(CLI::PositiveNumber);
  b->add_option("--epochs", bench.epochs, "Epochs (learning tasks)")->check(CLI::PositiveNumber);
  b->add_option("--lrs", bench.lrs, "Learning rates: count or comma list");
  b->add_option("--schedule", bench.schedule, "Learning-rate schedule");
  b->add_option("--seed", bench.seed, "Seed");
  b->add_option("--out", bench.out, "Directory for bench.csv and trajectories.csv");
  b->add_flag("--tune-adam-eps", bench.tune_adam_eps, "Also search Adam's epsilon");
  b->add_flag("--zero-internal-decay", bench.zero_internal_decay, "Use f(t) = 0 in PowerSign/AddSign");

  std::vector<std::string> fmt_words;
  auto* f = app.add_subcommand("fmt", "Canonicalize and check a DSL program");
  f->add_option("program", fmt_words, "DSL program")->required();

  RerunArgs rerun;
  auto* r = app.add_subcommand("rerun", "Re-evaluate top programs with a longer budget");
  r->add_option("--log", rerun.log, "Search log to take the top-k from");
  r->add_option("--program", rerun.programs, "Extra programs");
  r->add_option("--config", rerun.config, "Config file");
  r->add_option("--task", rerun.task, "Task");
  r->add_option("-k,--top", rerun.k, "How many programs from the log");
  r->add_option("--multiplier", rerun.multiplier, "Epoch budget multiplier");
  r->add_option("--seed", rerun.seed, "Seed");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex, out, err);
    return kExitUsage;
  }

  try {
    if (*s) return cmd_search(search, out);
    if (*e) return cmd_eval(eval, out);
    if (*b) return cmd_bench(bench, out);
    if (*f) return cmd_fmt(fmt_words, out, err);
    if (*r) return cmd_rerun(rerun, out);
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const UnknownOptimizer& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const DslError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const InvalidSpec& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace optsearch
