#include "compostruct/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "compostruct/adam.hpp"

namespace compostruct {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(Architecture a) { return a == Architecture::VisionMlp ? "vision_mlp" : "language_embed_mlp"; }

Architecture parse_architecture(std::string_view s) {
  if (s == "vision_mlp") return Architecture::VisionMlp;
  if (s == "language_embed_mlp") return Architecture::LanguageEmbedMlp;
  throw ConfigError("unknown architecture '" + std::string(s) + "'");
}

Architecture architecture_for(Domain d) {
  return d == Domain::Vision ? Architecture::VisionMlp : Architecture::LanguageEmbedMlp;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

std::vector<Tensor*> Model::tensors() {
  std::vector<Tensor*> out;
  for (auto& p : params) out.push_back(&p.value);
  return out;
}

Model make_model(Architecture arch, std::uint64_t seed) {
  Model m;
  m.arch = arch;
  m.seed = seed;
  Rng rng(seed, "init");
  std::size_t first_linear_layer = 0;
  if (arch == Architecture::VisionMlp) {
    m.dims = {static_cast<std::size_t>(vision::kGridSize * vision::kGridSize), 256, 128, 64, 32};
  } else {
    m.token_dim = 16;
    m.vocab_size = language::Vocabulary::builtin().size();
    m.dims = {m.token_dim * language::kMaxLength, 128, 64, 32};
    Tensor table({m.vocab_size, m.token_dim});
    const double a = std::sqrt(3.0);
    for (double& v : table.values()) v = rng.uniform(-a, a);
    m.params.push_back({"embedding", std::move(table), 0, false});
    first_linear_layer = 1;
  }
  for (std::size_t l = 0; l + 1 < m.dims.size(); ++l) {
    const std::size_t in = m.dims[l], out = m.dims[l + 1];
    Tensor w({in, out});
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    for (double& v : w.values()) v = rng.uniform(-bound, bound);
    const std::size_t layer = first_linear_layer + l;
    m.params.push_back({"linear" + std::to_string(layer) + ".weight", std::move(w), layer, false});
    m.params.push_back({"linear" + std::to_string(layer) + ".bias", Tensor({out}), layer, true});
  }
  return m;
}

Batch make_batch(const EncodedDataset& data, std::span<const std::size_t> indices) {
  Batch b;
  b.examples = indices.size();
  b.odd.reserve(indices.size());
  if (data.domain == Domain::Vision) {
    b.pixels = Tensor({indices.size() * 4, data.width});
    auto out = b.pixels.values();
    std::size_t row = 0;
    for (std::size_t i : indices) {
      for (std::size_t k = 0; k < 4; ++k, ++row) {
        const std::uint16_t* src = data.stimulus(i, k);
        for (std::size_t c = 0; c < data.width; ++c) out[row * data.width + c] = src[c];
      }
    }
  } else {
    b.ids.reserve(indices.size() * 4 * data.width);
    for (std::size_t i : indices)
      for (std::size_t k = 0; k < 4; ++k) b.ids.insert(b.ids.end(), data.stimulus(i, k), data.stimulus(i, k) + data.width);
  }
  for (std::size_t i : indices) b.odd.push_back(data.odd.at(i));
  return b;
}

Var forward_embeddings(Tape& tape, const Model& model, std::span<const Var> w, const Batch& batch) {
  if (w.size() != model.params.size())
    throw ShapeError("forward: " + std::to_string(w.size()) + " weight bindings for " +
                     std::to_string(model.params.size()) + " parameters");
  std::size_t p = 0;
  Var h;
  if (model.arch == Architecture::VisionMlp) {
    if (batch.pixels.rank() != 2 || batch.pixels.cols() != model.dims[0])
      throw ShapeError("forward: vision model expects rows of " + std::to_string(model.dims[0]) + " pixels, got " +
                       shape_to_string(batch.pixels.shape()));
    h = tape.constant_ref(batch.pixels);
  } else {
    if (batch.ids.size() != batch.examples * 4 * language::kMaxLength)
      throw ShapeError("forward: language model expects " + std::to_string(language::kMaxLength) + " ids per stimulus");
    h = tape.embedding(w[p++], batch.ids);
    h = tape.reshape(h, {batch.examples * 4, model.dims[0]});
  }
  const std::size_t linears = model.dims.size() - 1;
  for (std::size_t l = 0; l < linears; ++l) {
    h = tape.add_bias(tape.matmul(h, w[p]), w[p + 1]);
    p += 2;
    if (l + 1 < linears) h = tape.relu(h);
  }
  return h;
}

Var forward_logits(Tape& tape, const Model& model, std::span<const Var> weights, const Batch& batch) {
  return tape.odd_one_out_logits(forward_embeddings(tape, model, weights, batch), 4);
}

std::vector<Var> bind_constants(Tape& tape, const Model& model) {
  std::vector<Var> w;
  for (const auto& p : model.params) w.push_back(tape.constant_ref(p.value));
  return w;
}

std::vector<double> embed(const Model& model, const EncodedDataset& data, std::size_t example, std::size_t slot) {
  const std::size_t idx[1] = {example};
  Batch b = make_batch(data, idx);
  Tape tape;
  const Tensor& e = tape.value(forward_embeddings(tape, model, bind_constants(tape, model), b));
  const auto row = e.values().subspan(slot * e.cols(), e.cols());
  return {row.begin(), row.end()};
}

std::size_t predict(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

namespace {

constexpr std::size_t kEvalBatch = 250;

void check_compatible(const Model& model, const EncodedDataset& data) {
  if (data.count == 0) throw ConfigError("evaluate: empty dataset");
  if (architecture_for(data.domain) != model.arch)
    throw ConfigError("evaluate: " + to_string(model.arch) + " model given a dataset of the other domain");
}

// Correct-prediction count and summed loss over a dataset.
std::pair<std::size_t, double> sweep(const Model& model, const EncodedDataset& data) {
  check_compatible(model, data);
  std::size_t correct = 0;
  double loss = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.count; start += kEvalBatch) {
    const std::size_t end = std::min(data.count, start + kEvalBatch);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Batch b = make_batch(data, idx);
    Tape tape;
    Var logits = forward_logits(tape, model, bind_constants(tape, model), b);
    Var l = tape.softmax_cross_entropy(logits, b.odd);
    loss += tape.value(l)[0] * static_cast<double>(b.examples);
    const Tensor& lv = tape.value(logits);
    for (std::size_t i = 0; i < b.examples; ++i)
      if (predict(lv.values().subspan(i * 4, 4)) == b.odd[i]) ++correct;
  }
  return {correct, loss};
}

}  // namespace

double evaluate(const Model& model, const EncodedDataset& data) {
  return static_cast<double>(sweep(model, data).first) / static_cast<double>(data.count);
}

double dataset_loss(const Model& model, const EncodedDataset& data) {
  return sweep(model, data).second / static_cast<double>(data.count);
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train: learning rate must be positive");
  if (batch_size == 0) throw ConfigError("train: batch size must be positive");
  if (max_epochs == 0) throw ConfigError("train: max_epochs must be positive");
  if (patience > max_epochs) throw ConfigError("train: patience exceeds max_epochs");
  if (!(threshold > 0.25 && threshold <= 1.0)) throw ConfigError("train: threshold must lie in (0.25, 1]");
  if (dropout != 0.0) throw ConfigError("train: dropout is not supported");
  if (weight_decay != 0.0) throw ConfigError("train: weight decay is not supported");
}

BaseModelBelowThreshold::BaseModelBelowThreshold(double accuracy, double threshold, TrainResult result)
    : std::runtime_error("base model test accuracy " + std::to_string(accuracy) + " is below the gate " +
                         std::to_string(threshold)),
      accuracy_(accuracy),
      result_(std::move(result)) {}

TrainResult train_base(Model init, const EncodedDataset& train, const EncodedDataset& val, const EncodedDataset& test,
                       const TrainConfig& cfg) {
  cfg.validate();
  check_compatible(init, train);
  check_compatible(init, val);
  check_compatible(init, test);

  TrainResult result;
  Model model = std::move(init);
  Model best = model;
  double best_val_loss = std::numeric_limits<double>::infinity();
  AdamState adam(AdamConfig{cfg.lr});
  std::vector<Tensor*> tensors = model.tensors();
  std::vector<std::size_t> order(train.count);

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(cfg.seed, "train_base.shuffle", {epoch});
    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < train.count; start += cfg.batch_size) {
      const std::size_t end = std::min(train.count, start + cfg.batch_size);
      Batch b = make_batch(train, std::span<const std::size_t>(order).subspan(start, end - start));
      for (Tensor* t : tensors) t->zero_grad();
      Tape tape;
      std::vector<Var> w;
      for (auto& p : model.params) w.push_back(tape.parameter(p.value));
      Var loss = tape.softmax_cross_entropy(forward_logits(tape, model, w, b), b.odd);
      loss_sum += tape.value(loss)[0] * static_cast<double>(b.examples);
      tape.backward(loss);
      adam.step(tensors);
    }
    for (Tensor* t : tensors) t->clear_grad();

    const auto [correct, val_loss_sum] = sweep(model, val);
    EpochLog log{epoch, loss_sum / static_cast<double>(train.count), val_loss_sum / static_cast<double>(val.count),
                 static_cast<double>(correct) / static_cast<double>(val.count)};
    result.log.push_back(log);
    if (log.val_loss < best_val_loss) {
      best_val_loss = log.val_loss;
      best = model;
      result.best_epoch = epoch;
      result.val_acc = log.val_acc;
    }
    if (epoch - result.best_epoch >= cfg.patience) break;
  }
  result.model = std::move(best);
  result.test_acc = evaluate(result.model, test);
  if (result.test_acc < cfg.threshold) {
    const double acc = result.test_acc;
    throw BaseModelBelowThreshold(acc, cfg.threshold, std::move(result));
  }
  return result;
}

void write_training_log(const std::vector<EpochLog>& log, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DatasetIoError("cannot write " + path.string());
  out << "epoch,train_loss,val_acc\n";
  out.precision(17);
  for (const auto& e : log) out << e.epoch << ',' << e.train_loss << ',' << e.val_acc << '\n';
}

namespace {

void put_le(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

std::pair<json, std::string> read_checkpoint_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetIoError("cannot open checkpoint " + path.string());
  std::string header;
  std::getline(in, header);
  std::ostringstream body;
  body << in.rdbuf();
  try {
    return {json::parse(header), body.str()};
  } catch (const json::exception& e) {
    throw DatasetIoError("bad checkpoint header in " + path.string() + ": " + e.what());
  }
}

}  // namespace

void save_checkpoint(const Model& model, const fs::path& path, const std::string& extra_json) {
  json params = json::array();
  std::string block;
  block.reserve(model.parameter_count() * 8);
  for (const auto& p : model.params) {
    params.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"layer", p.layer}, {"bias", p.bias}});
    for (double v : p.value.values()) put_le(block, v);
  }
  json header = {{"format", "compostruct-checkpoint-1"},
                 {"architecture", to_string(model.arch)},
                 {"dims", model.dims},
                 {"token_dim", model.token_dim},
                 {"vocab_size", model.vocab_size},
                 {"seed", model.seed},
                 {"params", params},
                 {"extra", json::parse(extra_json)}};
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetIoError("cannot write checkpoint " + path.string());
  out << header.dump() << '\n' << block;
  if (!out) throw DatasetIoError("write failed for checkpoint " + path.string());
}

Model load_checkpoint(const fs::path& path) {
  auto [header, block] = read_checkpoint_file(path);
  Model m;
  try {
    m.arch = parse_architecture(header.at("architecture").get<std::string>());
    m.dims = header.at("dims").get<std::vector<std::size_t>>();
    m.token_dim = header.at("token_dim");
    m.vocab_size = header.at("vocab_size");
    m.seed = header.at("seed");
    std::size_t offset = 0;
    const auto* bytes = reinterpret_cast<const unsigned char*>(block.data());
    for (const auto& p : header.at("params")) {
      Tensor t(p.at("shape").get<Shape>());
      if (offset + t.size() * 8 > block.size()) throw DatasetIoError("checkpoint " + path.string() + " is truncated");
      for (double& v : t.values()) {
        v = get_le(bytes + offset);
        offset += 8;
      }
      m.params.push_back({p.at("name"), std::move(t), p.at("layer"), p.at("bias")});
    }
    if (offset != block.size()) throw DatasetIoError("checkpoint " + path.string() + " has trailing bytes");
  } catch (const json::exception& e) {
    throw DatasetIoError("bad checkpoint header in " + path.string() + ": " + e.what());
  }
  return m;
}

std::string checkpoint_extra(const fs::path& path) { return read_checkpoint_file(path).first.at("extra").dump(); }

}  // namespace compostruct
