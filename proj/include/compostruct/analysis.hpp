#pragma once

// Accuracy differences, mask overlap and run summaries.
//
//   delta_sub = clamp(sub on Test-Target) - clamp(sub on Test-Other)
//   delta_abl = clamp(ablated on Test-Target) - clamp(ablated on Test-Other)
//
// with clamp to [0.25, 1]. A (rule, subroutine) shows the compositional
// signature when mean delta_sub > 0 and mean delta_abl < 0.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "compostruct/sparsifier.hpp"

namespace compostruct {

inline constexpr double kChance = 0.25;

double clamp_accuracy(double a);

struct RunRecord {
  std::string rule;
  std::string subroutine;
  std::uint64_t seed = 0;
  std::size_t repeat = 0;
  std::string base_id;
  std::string config;
  double acc_sub_target = 0.0;
  double acc_sub_other = 0.0;
  double acc_abl_target = 0.0;
  double acc_abl_other = 0.0;
  /// Own mask-training task accuracy of the subnetwork (test split).
  double acc_sub_own = 0.0;
  std::size_t start_layer = 0;
  std::vector<std::size_t> active_per_tensor;
  std::vector<std::size_t> total_per_tensor;

  std::size_t active() const;
  std::size_t total() const;
};

struct Differences {
  double delta_sub = 0.0;
  double delta_abl = 0.0;
};

/// Throws ConfigError if an accuracy lies outside [0, 1].
Differences difference_metrics(const RunRecord& r);

/// Per masked tensor |A & B| / |A | B|; an empty union counts as 1.0.
/// Throws ConfigError unless both masks cover the same tensors and shapes.
std::vector<double> iou_per_layer(const Subnetwork& a, const Subnetwork& b);
/// Elementwise AND of all masks (same layout required).
Subnetwork intersect_masks(const std::vector<Subnetwork>& masks);

struct SparsityRow {
  std::string rule;
  std::string subroutine;
  std::string model;
  std::size_t repeat = 0;
  std::size_t start_layer = 0;
  std::size_t active = 0;
  std::size_t total = 0;
};

SparsityRow sparsity_row(const Subnetwork& s, const std::string& rule, const std::string& model, std::size_t repeat);
/// CSV: rule,subroutine,model,repeat,start_layer,active,total.
std::string sparsity_csv(const std::vector<SparsityRow>& rows);

struct GroupSummary {
  std::string rule;
  std::string subroutine;
  std::size_t runs = 0;
  double mean_delta_sub = 0.0;
  double std_delta_sub = 0.0;
  double mean_delta_abl = 0.0;
  double std_delta_abl = 0.0;
  std::size_t positive_sub = 0;
  std::size_t negative_abl = 0;
  bool signature = false;
  /// "compositional", "subroutine found, not modular", or "no subroutine found".
  std::string verdict;
};

/// Groups records by (rule, subroutine) in first-appearance order.
/// Throws ConfigError on an empty record set.
std::vector<GroupSummary> summarize(const std::vector<RunRecord>& records);

/// Mean delta_abl with |mean| at or below this counts as "near zero".
inline constexpr double kNearZero = 0.05;

/// summary.csv with columns rule, subroutine, seed, repeat, acc_sub_target,
/// acc_sub_other, acc_abl_target, acc_abl_other, delta_sub, delta_abl, active, total.
std::string summary_csv(const std::vector<RunRecord>& records);

/// RunRecord <-> JSON text (one line).
std::string record_to_json(const RunRecord& r);
RunRecord record_from_json(const std::string& line);
std::vector<RunRecord> read_records(const std::filesystem::path& jsonl);

}  // namespace compostruct
