#pragma once

// Continuous sparsification over a frozen base model.
//
// Every weight (never a bias) at or after cfg.start_layer gets a logit tensor
// s of the same shape. Training uses the soft mask w * sigmoid(beta * s) and
// minimizes
//
//   L = CE(odd-one-out) + lambda * sum sigmoid(beta * s)
//
// with Adam on s only. beta is annealed per epoch as
// beta(e) = beta0 * (beta_max / beta0)^(e / (epochs - 1)).
// Inference uses the hard mask H(s) with H(0) = 0.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "compostruct/dataset.hpp"
#include "compostruct/model.hpp"

namespace compostruct {

struct MaskConfig {
  std::size_t start_layer = 0;
  double s0 = 0.05;
  double lr = 0.01;
  double lambda = 1e-8;
  double beta0 = 1.0;
  double beta_max = 200.0;
  std::size_t epochs = 90;
  std::size_t batch_size = 64;

  /// Throws ConfigError on invalid values or a start layer the model lacks.
  void validate(const Model& model) const;
  friend bool operator==(const MaskConfig&, const MaskConfig&) = default;
};

std::string describe(const MaskConfig& cfg);
/// One-line JSON object with every MaskConfig field.
std::string mask_config_json(const MaskConfig& cfg);
/// Inverse of mask_config_json; throws ConfigError on missing fields.
MaskConfig parse_mask_config(std::string_view text);

/// Whether parameter `p` is masked under `start_layer`.
bool is_maskable(const Parameter& p, std::size_t start_layer);

struct MaskState {
  /// Indices into Model::params of the masked tensors, in model order.
  std::vector<std::size_t> param_index;
  std::vector<Tensor> logits;
  double beta = 1.0;
};

MaskState init_mask_state(const Model& model, const MaskConfig& cfg);

struct Subnetwork {
  std::vector<std::size_t> param_index;
  std::vector<Shape> shapes;
  /// One 0/1 entry per weight of each masked tensor.
  std::vector<std::vector<std::uint8_t>> masks;

  std::string base_id;
  std::string subroutine;
  MaskConfig config;
  std::uint64_t seed = 0;

  std::size_t active(std::size_t tensor) const;
  std::size_t active() const;
  std::size_t total() const;
};

enum class MaskMode { Soft, Hard };

/// Weight bindings for a masked forward pass. In soft mode the logits become
/// trainable leaves when `trainable` is set; base weights are always constants.
std::vector<Var> bind_masked_weights(Tape& tape, const Model& model, MaskState& state, MaskMode mode, bool trainable);
/// Logits [examples, 4] under the masked weights.
Var masked_forward(Tape& tape, const Model& model, MaskState& state, const Batch& batch, MaskMode mode,
                   bool trainable = false);

struct MaskLoss {
  Var total;
  Var task;
  Var penalty;
};

/// Soft-mode loss with the sparsity penalty; logits are trainable leaves.
MaskLoss mask_loss(Tape& tape, const Model& model, MaskState& state, const Batch& batch, const MaskConfig& cfg);

/// Temperature for `epoch` (fractional epochs allowed). Throws ConfigError if cfg.epochs < 2.
double anneal_beta(double epoch, const MaskConfig& cfg);

struct MaskEpochLog {
  std::size_t epoch = 0;
  double beta = 0.0;
  double task_loss = 0.0;
  double penalty = 0.0;
  double active_fraction = 0.0;
};

struct MaskTrainResult {
  Subnetwork subnet;
  MaskState state;
  std::vector<MaskEpochLog> log;
};

/// Adam on the mask logits for cfg.epochs epochs; base weights are never written.
/// Throws NonFiniteError naming the epoch if the loss or a gradient stops being finite.
MaskTrainResult train_mask(const Model& base, const EncodedDataset& train, const MaskConfig& cfg, std::uint64_t seed);

/// m = 1 where s > 0, else 0.
Subnetwork binarize(const MaskState& state, const Model& model);

/// Weights w * m on masked tensors; everything else copied.
Model apply_subnetwork(const Model& base, const Subnetwork& subnet);
/// Weights w * (1 - m) on masked tensors; everything else copied.
Model ablate(const Model& base, const Subnetwork& subnet);
/// Weights w * sigmoid(beta * s) on masked tensors.
Model soft_masked_model(const Model& base, const MaskState& state, double beta);

/// JSON header line (provenance, shapes, active counts) then one packed
/// little-endian bitset per masked tensor, in checkpoint order.
void save_subnetwork(const Subnetwork& subnet, const std::filesystem::path& path);
Subnetwork load_subnetwork(const std::filesystem::path& path);

struct SearchSpace {
  std::vector<double> learning_rates{0.01, 0.0001};
  std::vector<double> inits{0.1, 0.05, 0.0, -0.05};
  /// Empty means {0, backbone final layer, head layer} of the model.
  std::vector<std::size_t> start_layers;
  /// Template for every other MaskConfig field.
  MaskConfig base;

  std::vector<MaskConfig> enumerate(const Model& model) const;
};

/// Validation splits used to score a search candidate.
struct SearchData {
  const EncodedDataset* mask_train = nullptr;
  const EncodedDataset* mask_val = nullptr;
  const EncodedDataset* target_val = nullptr;
  const EncodedDataset* other_val = nullptr;
};

struct SearchRow {
  MaskConfig config;
  double own_acc = 0.0;
  double ablated_target = 0.0;
  double ablated_other = 0.0;
  double score = 0.0;
  bool gated = false;
  std::size_t active = 0;
  std::size_t total = 0;
};

struct SearchResult {
  std::vector<SearchRow> table;
  std::size_t best = 0;
  Subnetwork best_subnet;
};

class SearchExhausted : public std::runtime_error {
 public:
  explicit SearchExhausted(std::vector<SearchRow> table);
  const std::vector<SearchRow>& table() const { return table_; }

 private:
  std::vector<SearchRow> table_;
};

/// Candidate score: clamp(ablated Test-Other) - clamp(ablated Test-Target).
double search_score(double ablated_target, double ablated_other);

/// Trains every candidate (in parallel across `jobs` workers), gates on
/// own-task validation accuracy >= gate, and returns the best score with ties
/// going to the first candidate in enumeration order.
SearchResult hyperparameter_search(const Model& base, const SearchSpace& space, const SearchData& data,
                                   std::uint64_t seed, std::size_t jobs = 1, double gate = 0.90);

/// Search table CSV.
void write_search_table(const std::vector<SearchRow>& table, const std::filesystem::path& path);

}  // namespace compostruct
