#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "multipath/network.hpp"
#include "multipath/objective.hpp"
#include "multipath/optim.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

struct DataConfig {
  std::string kind = "hybrid";
  /// Canonical source files; empty means $MULTIPATH_DATA_DIR.
  std::string source_dir;
  /// Prepared dataset caches; empty means $MULTIPATH_DATA_DIR/cache.
  std::string cache_dir;
  std::uint64_t train_size = 4000;
  std::uint64_t validation_size = 1000;
  std::uint64_t test_size = 0;
  double validation_fraction = 0.1;
  std::uint64_t seed = 7;
  bool augment = true;
};

struct RegularizerConfig {
  double k_L2 = 1e-4;
  double k_dec = 0.01;
  double k_ure = 0.001;
};

struct CostConfig {
  double k_cpt = 8e-9;
  /// Draw k_cpt per example from `k_cpt_set` (requires conditioned routing).
  bool sample_per_example = false;
  std::vector<double> k_cpt_set;
};

enum class CriticMode { marginal, sampled };

struct TrainConfig {
  std::uint64_t iterations = 2000;
  std::uint64_t metrics_interval = 50;
  std::uint64_t checkpoint_interval = 500;
  std::uint64_t seed = 1;
  CriticMode critic_mode = CriticMode::marginal;
  std::uint64_t eval_batch = 250;
};

struct SweepConfig {
  std::vector<double> k_cpt;
  int static_max_columns = 8;
  /// Also train the statically-routed 1..static_max_columns baselines.
  bool include_static = true;
};

std::vector<double> default_kcpt_sweep();

struct ExperimentConfig {
  std::string profile = "desk";
  Strategy strategy = Strategy::actor;
  ArchitectureSchedule architecture;
  DataConfig data;
  OptimizerConfig optim;
  RegularizerConfig regularizer;
  CostConfig cost;
  TrainConfig train;
  SweepConfig sweep;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// "desk" (workstation scale) or "paper" (the published hyperparameters).
ExperimentConfig profile_config(std::string_view name);

/// Parses TOML text. A top-level `profile` key selects the base profile; every
/// other key overrides one field. Unknown keys and ill-typed values raise
/// ConfigError with the dotted field path.
ExperimentConfig parse_config(std::string_view text, std::string_view source = "config");
ExperimentConfig load_config(const std::filesystem::path& path);

/// Applies `path=value`, where value is a TOML literal (bare words are read as strings).
void apply_override(ExperimentConfig& config, std::string_view assignment);
void apply_override(ExperimentConfig& config, std::string_view path, std::string_view value);

/// Canonical TOML rendering; parse_config(to_toml(c)) reproduces c.
std::string to_toml(const ExperimentConfig& config);
/// Hex FNV-1a digest of the canonical rendering.
std::string config_digest(const ExperimentConfig& config);

/// Every addressable field with its canonical value text, in rendering order.
std::vector<std::pair<std::string, std::string>> config_fields(const ExperimentConfig& config);

/// Shortest round-trip decimal text for a double.
std::string format_number(double value);

std::size_t class_count(std::string_view dataset_kind);

std::filesystem::path resolve_source_dir(const DataConfig& data);
std::filesystem::path resolve_cache_dir(const DataConfig& data);

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
