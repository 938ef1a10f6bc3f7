#include "optsearch/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "optsearch/errors.hpp"

namespace optsearch {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split_words(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto end = s.find(sep, start);
    const auto piece = trim(s.substr(start, end == std::string_view::npos ? s.npos : end - start));
    if (!piece.empty()) out.push_back(piece);
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

double to_double(std::string_view key, std::string_view text) {
  double value = 0.0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError("'" + std::string(key) + "' expects a number, got '" + std::string(text) + "'");
  }
  return value;
}

std::uint64_t to_uint(std::string_view key, std::string_view text) {
  std::uint64_t value = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError("'" + std::string(key) + "' expects a non-negative integer, got '" +
                      std::string(text) + "'");
  }
  return value;
}

bool to_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("'" + std::string(key) + "' expects true/false, got '" + std::string(text) + "'");
}

std::string format_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

std::string join_doubles(const std::vector<double>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ", ";
    out += format_double(xs[i]);
  }
  return out;
}

template <typename T, typename F>
std::string join_tokens(const std::vector<T>& xs, F&& fmt) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ' ';
    out += std::string(fmt(xs[i]));
  }
  return out;
}

using Setter = std::function<void(SearchConfig&, std::string_view, std::string_view)>;

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = [] {
    std::map<std::string, Setter, std::less<>> t;
    auto size = [](std::size_t SearchConfig::*field) {
      return [field](SearchConfig& c, std::string_view k, std::string_view v) {
        c.*field = static_cast<std::size_t>(to_uint(k, v));
      };
    };
    t["seed"] = [](SearchConfig& c, auto k, auto v) { c.seed = to_uint(k, v); };
    t["workers"] = size(&SearchConfig::workers);
    t["queue_capacity"] = size(&SearchConfig::queue_capacity);
    t["max_retries"] = size(&SearchConfig::max_retries);
    t["samples"] = size(&SearchConfig::total_samples);
    t["n_groups"] = size(&SearchConfig::n_groups);
    t["sweep_epochs"] = size(&SearchConfig::sweep_epochs);
    t["full_epochs"] = size(&SearchConfig::full_epochs);
    t["top_k"] = size(&SearchConfig::top_k);
    t["log_path"] = [](SearchConfig& c, auto, auto v) { c.log_path = std::string(v); };
    t["sweep_grid"] = [](SearchConfig& c, auto, auto v) { c.sweep_grid = parse_double_list(v); };
    t["schedule"] = [](SearchConfig& c, auto, auto v) {
      try {
        const double base = c.schedule.base_lr;
        c.schedule = parse_schedule(v);
        c.schedule.base_lr = base;
      } catch (const InvalidSpec& e) {
        throw ConfigError(e.what());
      }
    };

    t["early_stop.enabled"] = [](SearchConfig& c, auto k, auto v) {
      c.early_stop.enabled = to_bool(k, v);
    };
    t["early_stop.checkpoints"] = [](SearchConfig& c, auto, auto v) {
      c.early_stop.checkpoints = parse_double_list(v);
    };
    t["early_stop.factor"] = [](SearchConfig& c, auto k, auto v) {
      c.early_stop.factor = to_double(k, v);
    };

    t["task"] = [](SearchConfig& c, auto, auto v) {
      try {
        c.task.kind = parse_task_kind(v);
      } catch (const InvalidSpec& e) {
        throw ConfigError(e.what());
      }
    };
    t["task.dimension"] = [](SearchConfig& c, auto k, auto v) { c.task.dimension = to_uint(k, v); };
    t["task.train_samples"] = [](SearchConfig& c, auto k, auto v) {
      c.task.train_samples = to_uint(k, v);
    };
    t["task.validation_samples"] = [](SearchConfig& c, auto k, auto v) {
      c.task.validation_samples = to_uint(k, v);
    };
    t["task.hidden_width"] = [](SearchConfig& c, auto k, auto v) {
      c.task.hidden_width = to_uint(k, v);
    };
    t["task.condition_number"] = [](SearchConfig& c, auto k, auto v) {
      c.task.condition_number = to_double(k, v);
    };
    t["task.separation"] = [](SearchConfig& c, auto k, auto v) {
      c.task.separation = to_double(k, v);
    };
    t["task.data_seed"] = [](SearchConfig& c, auto k, auto v) { c.task.data_seed = to_uint(k, v); };
    t["task.batch_size"] = [](SearchConfig& c, auto k, auto v) {
      c.task.batch_size = to_uint(k, v);
    };
    t["task.iterations"] = [](SearchConfig& c, auto k, auto v) {
      c.task.iterations_per_epoch = to_uint(k, v);
    };
    t["task.metric"] = [](SearchConfig& c, auto, auto v) {
      if (v == "default") {
        c.task.metric.reset();
      } else if (v == "accuracy") {
        c.task.metric = MetricKind::accuracy;
      } else if (v == "negative_log_loss") {
        c.task.metric = MetricKind::negative_log_loss;
      } else if (v == "function_value") {
        c.task.metric = MetricKind::function_value;
      } else {
        throw ConfigError("unknown metric '" + std::string(v) + "'");
      }
    };

    t["controller.hidden_size"] = [](SearchConfig& c, auto k, auto v) {
      c.controller.hidden_size = to_uint(k, v);
    };
    t["controller.embedding_size"] = [](SearchConfig& c, auto k, auto v) {
      c.controller.embedding_size = to_uint(k, v);
    };
    t["controller.init_scale"] = [](SearchConfig& c, auto k, auto v) {
      c.controller.init_scale = to_double(k, v);
    };

    t["ppo.clip"] = [](SearchConfig& c, auto k, auto v) { c.ppo.clip = to_double(k, v); };
    t["ppo.epochs"] = [](SearchConfig& c, auto k, auto v) { c.ppo.epochs = to_uint(k, v); };
    t["ppo.entropy_coef"] = [](SearchConfig& c, auto k, auto v) {
      c.ppo.entropy_coef = to_double(k, v);
    };
    t["ppo.baseline_decay"] = [](SearchConfig& c, auto k, auto v) {
      c.ppo.baseline_decay = to_double(k, v);
    };
    t["ppo.learning_rate"] = [](SearchConfig& c, auto k, auto v) {
      c.ppo.learning_rate = to_double(k, v);
    };
    t["ppo.batch_size"] = [](SearchConfig& c, auto k, auto v) { c.ppo.batch_size = to_uint(k, v); };

    t["constraints.distinct_operands"] = [](SearchConfig& c, auto k, auto v) {
      c.constraints.distinct_operands = to_bool(k, v);
    };
    t["constraints.no_final_add"] = [](SearchConfig& c, auto k, auto v) {
      c.constraints.no_final_add = to_bool(k, v);
    };
    t["constraints.must_reuse_output"] = [](SearchConfig& c, auto k, auto v) {
      c.constraints.must_reuse_output = to_bool(k, v);
    };
    t["constraints.operands"] = [](SearchConfig& c, auto, auto v) {
      c.constraints.operands.clear();
      for (auto w : split_words(v, ' ')) c.constraints.operands.push_back(parse_operand(w));
    };
    t["constraints.unaries"] = [](SearchConfig& c, auto, auto v) {
      c.constraints.unaries.clear();
      for (auto w : split_words(v, ' ')) c.constraints.unaries.push_back(parse_unary(w));
    };
    t["constraints.binaries"] = [](SearchConfig& c, auto, auto v) {
      c.constraints.binaries.clear();
      for (auto w : split_words(v, ' ')) c.constraints.binaries.push_back(parse_binary(w));
    };

    t["runtime.noise_as_stddev"] = [](SearchConfig& c, auto k, auto v) {
      c.runtime.noise_as_stddev = to_bool(k, v);
    };
    t["runtime.delta"] = [](SearchConfig& c, auto k, auto v) { c.runtime.delta = to_double(k, v); };
    t["runtime.bias_correction"] = [](SearchConfig& c, auto k, auto v) {
      c.runtime.bias_correction = to_bool(k, v);
    };
    return t;
  }();
  return table;
}

}  // namespace

std::vector<std::size_t> EarlyStopConfig::checkpoint_epochs(std::size_t budget) const {
  std::vector<std::size_t> out;
  for (double f : checkpoints) {
    const auto e = static_cast<std::size_t>(std::ceil(f * double(budget)));
    if (e >= 1 && e <= budget) out.push_back(e);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void SearchConfig::check() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (workers < 1) fail("workers must be >= 1");
  if (n_groups < 1 || n_groups > kMaxGroups) fail("n_groups must be in [1, 4]");
  if (sweep_grid.empty()) fail("sweep_grid must not be empty");
  for (std::size_t i = 0; i < sweep_grid.size(); ++i) {
    if (!(sweep_grid[i] > 0.0) || !std::isfinite(sweep_grid[i])) fail("sweep_grid must be positive");
    if (i > 0 && !(sweep_grid[i] > sweep_grid[i - 1])) fail("sweep_grid must be strictly increasing");
  }
  if (sweep_epochs < 1 || full_epochs < 1) fail("epoch budgets must be >= 1");
  if (total_samples > 0 && total_samples < ppo.batch_size) {
    fail("samples must be 0 or at least ppo.batch_size");
  }
  if (!(early_stop.factor > 0.0)) fail("early_stop.factor must be positive");
  for (double f : early_stop.checkpoints) {
    if (!(f > 0.0 && f <= 1.0)) fail("early_stop.checkpoints must lie in (0, 1]");
  }
  if (constraints.operands.empty() || constraints.unaries.empty() || constraints.binaries.empty()) {
    fail("constraint allow-lists must be non-empty");
  }
  try {
    ppo.check();
    task.check();
    runtime.check();
  } catch (const InvalidSpec& e) {
    fail(e.what());
  }
}

void apply_setting(SearchConfig& config, std::string_view key, std::string_view value) {
  const auto& table = setters();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown key '" + std::string(key) + "'");
  try {
    it->second(config, key, value);
  } catch (const DslError& e) {
    throw ConfigError("'" + std::string(key) + "': " + e.what());
  }
}

SearchConfig parse_config(std::string_view text) {
  SearchConfig config;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find('\n', start);
    std::string_view line =
        text.substr(start, end == std::string_view::npos ? text.npos : end - start);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (!line.empty()) {
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
      }
      try {
        apply_setting(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const ConfigError& e) {
        throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return config;
}

SearchConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  try {
    return parse_config(buffer.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::vector<double> parse_double_list(std::string_view text) {
  std::vector<double> out;
  for (auto piece : split_words(text, ',')) out.push_back(to_double("list", piece));
  return out;
}

std::string to_text(const SearchConfig& c) {
  std::ostringstream os;
  auto flag = [](bool b) { return b ? "true" : "false"; };
  os << "seed = " << c.seed << '\n'
     << "workers = " << c.workers << '\n'
     << "queue_capacity = " << c.queue_capacity << '\n'
     << "max_retries = " << c.max_retries << '\n'
     << "samples = " << c.total_samples << '\n'
     << "n_groups = " << c.n_groups << '\n'
     << "sweep_grid = " << join_doubles(c.sweep_grid) << '\n'
     << "sweep_epochs = " << c.sweep_epochs << '\n'
     << "full_epochs = " << c.full_epochs << '\n'
     << "top_k = " << c.top_k << '\n'
     << "log_path = " << c.log_path << '\n'
     << "schedule = " << to_string(c.schedule.kind) << '\n'
     << "early_stop.enabled = " << flag(c.early_stop.enabled) << '\n'
     << "early_stop.checkpoints = " << join_doubles(c.early_stop.checkpoints) << '\n'
     << "early_stop.factor = " << format_double(c.early_stop.factor) << '\n'
     << "task = " << to_string(c.task.kind) << '\n'
     << "task.dimension = " << c.task.dimension << '\n'
     << "task.train_samples = " << c.task.train_samples << '\n'
     << "task.validation_samples = " << c.task.validation_samples << '\n'
     << "task.hidden_width = " << c.task.hidden_width << '\n'
     << "task.condition_number = " << format_double(c.task.condition_number) << '\n'
     << "task.separation = " << format_double(c.task.separation) << '\n'
     << "task.data_seed = " << c.task.data_seed << '\n'
     << "task.batch_size = " << c.task.batch_size << '\n'
     << "task.iterations = " << c.task.iterations_per_epoch << '\n'
     << "task.metric = " << (c.task.metric ? std::string(to_string(*c.task.metric)) : "default")
     << '\n'
     << "controller.hidden_size = " << c.controller.hidden_size << '\n'
     << "controller.embedding_size = " << c.controller.embedding_size << '\n'
     << "controller.init_scale = " << format_double(c.controller.init_scale) << '\n'
     << "ppo.clip = " << format_double(c.ppo.clip) << '\n'
     << "ppo.epochs = " << c.ppo.epochs << '\n'
     << "ppo.entropy_coef = " << format_double(c.ppo.entropy_coef) << '\n'
     << "ppo.baseline_decay = " << format_double(c.ppo.baseline_decay) << '\n'
     << "ppo.learning_rate = " << format_double(c.ppo.learning_rate) << '\n'
     << "ppo.batch_size = " << c.ppo.batch_size << '\n'
     << "constraints.distinct_operands = " << flag(c.constraints.distinct_operands) << '\n'
     << "constraints.no_final_add = " << flag(c.constraints.no_final_add) << '\n'
     << "constraints.must_reuse_output = " << flag(c.constraints.must_reuse_output) << '\n'
     << "constraints.operands = "
     << join_tokens(c.constraints.operands, [](const Operand& o) { return to_string(o); }) << '\n'
     << "constraints.unaries = "
     << join_tokens(c.constraints.unaries, [](Unary u) { return to_string(u); }) << '\n'
     << "constraints.binaries = "
     << join_tokens(c.constraints.binaries, [](Binary b) { return to_string(b); }) << '\n'
     << "runtime.noise_as_stddev = " << flag(c.runtime.noise_as_stddev) << '\n'
     << "runtime.delta = " << format_double(c.runtime.delta) << '\n'
     << "runtime.bias_correction = " << flag(c.runtime.bias_correction) << '\n';
  return os.str();
}

}  // namespace optsearch
