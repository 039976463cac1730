#pragma once

// Odd-one-out embedding models.
//
//   vision_mlp:          flatten 32x32 -> 1024->256->128 (backbone) -> 128->64->32 (head)
//   language_embed_mlp:  embed 16 x 12 tokens -> 192->128 (backbone) -> 128->64->32 (head)
//
// ReLU follows every linear layer except the last. Each of the four stimuli is
// embedded independently; logit_i = -sum_{j != i} e_i . e_j and the prediction
// is the argmax with ties going to the lowest index.
//
// Parameters carry a logical layer index used for start-layer masking:
//   layer 0: first weight (input linear / embedding table)
//   layer 1: final backbone linear
//   layer 2, 3: head linears

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "compostruct/autodiff.hpp"
#include "compostruct/dataset.hpp"
#include "compostruct/tensor.hpp"

namespace compostruct {

enum class Architecture { VisionMlp, LanguageEmbedMlp };

std::string to_string(Architecture a);
Architecture parse_architecture(std::string_view s);
Architecture architecture_for(Domain d);

struct Parameter {
  std::string name;
  Tensor value;
  std::size_t layer = 0;
  bool bias = false;
};

struct Model {
  Architecture arch = Architecture::VisionMlp;
  std::vector<Parameter> params;
  /// Linear layer widths from input to embedding, e.g. {1024, 256, 128, 64, 32}.
  std::vector<std::size_t> dims;
  std::size_t token_dim = 0;
  std::size_t vocab_size = 0;
  std::uint64_t seed = 0;

  std::size_t embedding_dim() const { return dims.back(); }
  std::size_t num_layers() const { return 4; }
  std::size_t backbone_final_layer() const { return 1; }
  std::size_t head_layer() const { return 2; }
  std::size_t parameter_count() const;
  std::vector<Tensor*> tensors();
};

/// He-uniform weights, zero biases, unit-variance uniform embedding table.
Model make_model(Architecture arch, std::uint64_t seed);

/// Inputs for a batch of examples: raster rows or flattened token ids.
struct Batch {
  std::size_t examples = 0;
  Tensor pixels;                 // [examples * 4, 1024], vision only
  std::vector<std::size_t> ids;  // examples * 4 * 12, language only
  std::vector<std::size_t> odd;
};

Batch make_batch(const EncodedDataset& data, std::span<const std::size_t> indices);

/// Embeddings [examples * 4, d] given one Var per model parameter.
Var forward_embeddings(Tape& tape, const Model& model, std::span<const Var> weights, const Batch& batch);
/// Logits [examples, 4].
Var forward_logits(Tape& tape, const Model& model, std::span<const Var> weights, const Batch& batch);
/// Constant bindings of every parameter.
std::vector<Var> bind_constants(Tape& tape, const Model& model);

/// Embedding of a single stimulus.
std::vector<double> embed(const Model& model, const EncodedDataset& data, std::size_t example, std::size_t slot);

/// Argmax with lowest-index tie-break.
std::size_t predict(std::span<const double> logits);

/// Fraction of examples predicted correctly. Throws ConfigError on an empty dataset
/// or a domain mismatch.
double evaluate(const Model& model, const EncodedDataset& data);

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 100;
  std::size_t patience = 75;
  std::uint64_t seed = 0;
  double threshold = 0.90;
  double dropout = 0.0;
  double weight_decay = 0.0;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double val_acc = 0.0;
  double test_acc = 0.0;
};

class BaseModelBelowThreshold : public std::runtime_error {
 public:
  BaseModelBelowThreshold(double accuracy, double threshold, TrainResult result);
  double accuracy() const { return accuracy_; }
  const TrainResult& result() const { return result_; }

 private:
  double accuracy_;
  TrainResult result_;
};

/// Adam on every parameter, keeping the checkpoint with the lowest validation loss.
/// Throws BaseModelBelowThreshold if that checkpoint's test accuracy is under cfg.threshold.
TrainResult train_base(Model init, const EncodedDataset& train, const EncodedDataset& val,
                       const EncodedDataset& test, const TrainConfig& cfg);

/// Mean cross-entropy over a dataset.
double dataset_loss(const Model& model, const EncodedDataset& data);

/// Training log CSV: epoch,train_loss,val_acc.
void write_training_log(const std::vector<EpochLog>& log, const std::filesystem::path& path);

/// JSON header line, then every parameter as little-endian float64 in order.
void save_checkpoint(const Model& model, const std::filesystem::path& path, const std::string& extra_json = "{}");
Model load_checkpoint(const std::filesystem::path& path);
/// The extra JSON stored with a checkpoint.
std::string checkpoint_extra(const std::filesystem::path& path);

}  // namespace compostruct
