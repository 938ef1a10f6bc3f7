#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "optsearch/controller.hpp"
#include "optsearch/dsl.hpp"
#include "optsearch/optimizer.hpp"
#include "optsearch/runtime.hpp"
#include "optsearch/tasks.hpp"

namespace optsearch {

struct EarlyStopConfig {
  bool enabled = true;
  /// Fractions of the full-run epoch budget at which runs are compared.
  std::vector<double> checkpoints{0.2, 0.5};
  double factor = 0.8;

  /// 1-based epoch numbers, ceil(fraction * budget), deduplicated.
  std::vector<std::size_t> checkpoint_epochs(std::size_t budget) const;
};

struct SearchConfig {
  ControllerConfig controller;
  PpoConfig ppo;
  std::size_t n_groups = 2;
  ConstraintSet constraints = ConstraintSet::defaults();
  TaskSpec task;
  ScheduleSpec schedule;
  RuntimeConfig runtime;
  std::size_t workers = 1;
  std::size_t queue_capacity = 0;  // 0: twice the worker count
  std::size_t max_retries = 1;
  std::size_t total_samples = 500;
  std::vector<double> sweep_grid{1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0};
  std::size_t sweep_epochs = 1;
  std::size_t full_epochs = 5;
  EarlyStopConfig early_stop;
  std::size_t top_k = 10;
  std::string log_path = "search.jsonl";
  std::uint64_t seed = 0;

  void check() const;  // throws ConfigError
};

/// Parses `key = value` lines; `#` starts a comment. Unknown keys and
/// malformed values throw ConfigError naming the line.
SearchConfig parse_config(std::string_view text);
SearchConfig load_config(const std::filesystem::path& path);

/// Applies one `key = value` setting on top of `config`.
void apply_setting(SearchConfig& config, std::string_view key, std::string_view value);

/// Round-trippable text form of every key.
std::string to_text(const SearchConfig& config);

std::vector<double> parse_double_list(std::string_view text);

}  // namespace optsearch
