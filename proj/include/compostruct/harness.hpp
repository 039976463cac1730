#pragma once

// Experiment orchestration: datasets -> base models -> mask search -> repeated
// mask training -> ablation evaluation -> report.
//
// Layout under <out>/<name>/:
//   manifest.json                 resolved config, config hash, stage states
//   <rule>/<seed>/base.ckpt       base (or control / pruned) model
//   <rule>/<seed>/base_log.csv    training log (standard mode)
//   <rule>/<seed>/prune.csv       pruning candidates (pruned mode)
//   <rule>/<seed>/search.csv      search tables of both subroutines
//   <rule>/<seed>/subnets/<subroutine>_r<k>.mask
//   <rule>/<seed>/records.jsonl   one RunRecord per repeat
//   report.json, summary.csv
//
// A stage is skipped on rerun when the manifest marks it done and its artifact
// is still on disk. Failures (gate misses, exhausted searches) are recorded in
// the manifest and halt only their own branch.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "compostruct/analysis.hpp"
#include "compostruct/model.hpp"
#include "compostruct/sparsifier.hpp"

namespace compostruct {

enum class ExperimentMode { Standard, RandomControl, PrunedBase };

std::string to_string(ExperimentMode m);
ExperimentMode parse_mode(std::string_view s);

/// Example counts; zero entries fall back to default_size().
struct SplitSizes {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

struct ExperimentConfig {
  std::string name = "default";
  ExperimentMode mode = ExperimentMode::Standard;
  std::vector<Rule> rules{kAllRules.begin(), kAllRules.end()};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t repeats = 3;
  /// Seed of every dataset; shared by all model seeds.
  std::uint64_t data_seed = 0;
  SplitSizes base_sizes;
  SplitSizes mask_sizes;
  /// Only val and test are used.
  SplitSizes test_sizes;
  /// Base training; the model seed replaces train.seed.
  TrainConfig train;
  /// Template for mask training; search fields override lr, s0 and start layer.
  MaskConfig mask;
  std::vector<double> learning_rates{0.01, 0.0001};
  std::vector<double> inits{0.1, 0.05, 0.0, -0.05};
  /// Empty means {0, backbone final, head}.
  std::vector<std::size_t> start_layers;
  double gate = 0.90;
  /// Completed standard experiment directory (control and pruned modes).
  std::filesystem::path reference;
  /// Not part of the config hash.
  std::filesystem::path out = "out";
  std::size_t jobs = 1;
  std::optional<std::filesystem::path> cache;

  /// Throws ConfigError on inconsistent settings.
  void validate() const;
  /// Resolved JSON with every default written out.
  std::string to_json() const;
  /// Unknown keys and malformed values throw ConfigError.
  static ExperimentConfig from_json(std::string_view text);
  static ExperimentConfig load(const std::filesystem::path& path);
  /// 16 hex digits over the resolved config without out/jobs/cache.
  std::string hash() const;

  std::filesystem::path dir() const { return out / name; }
  std::size_t size(Rule rule, Role role, Partition p) const;
  SearchSpace search_space() const;
};

struct ExperimentOutcome {
  std::filesystem::path dir;
  std::size_t records = 0;
  /// "<stage>: <message>" for each failed branch.
  std::vector<std::string> failures;
};

/// Runs (or resumes) the experiment in cfg.dir() and writes the report.
/// Control mode reuses the reference run's chosen configs; pruned mode prunes
/// the reference base checkpoints first.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg);

/// Regenerates report.json and summary.csv from the files in an experiment
/// directory; checks every artifact's config hash against the manifest.
void write_report(const std::filesystem::path& experiment_dir);

/// Human-readable summary of report.json.
std::string format_report(const std::filesystem::path& experiment_dir);

/// Provenance id of a base model: "<config hash>/<rule>/<seed>".
std::string base_id(const std::string& config_hash, Rule rule, std::uint64_t seed);

}  // namespace compostruct
