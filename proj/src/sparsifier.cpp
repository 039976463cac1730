#include "compostruct/sparsifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "compostruct/adam.hpp"
#include "compostruct/analysis.hpp"
#include "compostruct/parallel.hpp"

namespace compostruct {

using nlohmann::json;
namespace fs = std::filesystem;

void MaskConfig::validate(const Model& model) const {
  if (!(lambda >= 0.0)) throw ConfigError("mask: lambda must be non-negative");
  if (!(beta0 >= 1.0) || !std::isfinite(beta0)) throw ConfigError("mask: beta0 must be finite and >= 1");
  if (!(beta_max > beta0) || !std::isfinite(beta_max)) throw ConfigError("mask: beta_max must exceed beta0");
  if (!(lr > 0.0)) throw ConfigError("mask: learning rate must be positive");
  if (!std::isfinite(s0)) throw ConfigError("mask: s0 must be finite");
  if (epochs < 2) throw ConfigError("mask: at least 2 epochs are needed to anneal beta");
  if (batch_size == 0) throw ConfigError("mask: batch size must be positive");
  if (start_layer >= model.num_layers())
    throw ConfigError("mask: start layer " + std::to_string(start_layer) + " out of range for a " +
                      std::to_string(model.num_layers()) + "-layer model");
}

std::string describe(const MaskConfig& c) {
  std::ostringstream s;
  s << "start=" << c.start_layer << " s0=" << c.s0 << " lr=" << c.lr << " lambda=" << c.lambda
    << " beta=" << c.beta0 << ".." << c.beta_max << " epochs=" << c.epochs;
  return s.str();
}

bool is_maskable(const Parameter& p, std::size_t start_layer) { return !p.bias && p.layer >= start_layer; }

MaskState init_mask_state(const Model& model, const MaskConfig& cfg) {
  cfg.validate(model);
  MaskState st;
  st.beta = cfg.beta0;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    if (!is_maskable(model.params[i], cfg.start_layer)) continue;
    st.param_index.push_back(i);
    st.logits.emplace_back(model.params[i].value.shape(), cfg.s0);
  }
  return st;
}

std::size_t Subnetwork::active(std::size_t tensor) const {
  return static_cast<std::size_t>(std::count(masks.at(tensor).begin(), masks.at(tensor).end(), 1));
}

std::size_t Subnetwork::active() const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < masks.size(); ++t) n += active(t);
  return n;
}

std::size_t Subnetwork::total() const {
  std::size_t n = 0;
  for (const auto& m : masks) n += m.size();
  return n;
}

namespace {

void check_state(const Model& model, const MaskState& state) {
  if (state.param_index.size() != state.logits.size()) throw ShapeError("mask state: index/logit count mismatch");
  for (std::size_t k = 0; k < state.logits.size(); ++k) {
    const auto& p = model.params.at(state.param_index[k]);
    if (p.bias) throw ConfigError("mask state: bias " + p.name + " cannot be masked");
    if (p.value.shape() != state.logits[k].shape())
      throw ShapeError("mask logits " + shape_to_string(state.logits[k].shape()) + " do not match weight " + p.name +
                       " " + shape_to_string(p.value.shape()));
  }
}

void check_subnet(const Model& model, const Subnetwork& s) {
  if (s.param_index.size() != s.masks.size()) throw ShapeError("subnetwork: index/mask count mismatch");
  for (std::size_t k = 0; k < s.masks.size(); ++k) {
    const auto& p = model.params.at(s.param_index[k]);
    if (p.bias) throw ConfigError("subnetwork: bias " + p.name + " cannot be masked");
    if (p.value.size() != s.masks[k].size())
      throw ShapeError("subnetwork mask for " + p.name + " has " + std::to_string(s.masks[k].size()) +
                       " entries, weight has " + std::to_string(p.value.size()));
  }
}

Tensor hard_masked(const Tensor& w, const Tensor& s) {
  Tensor out(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = s[i] > 0.0 ? w[i] : 0.0;
  return out;
}

double penalty_value(const MaskState& st) {
  double p = 0.0;
  for (const auto& s : st.logits)
    for (double v : s.values()) p += 1.0 / (1.0 + std::exp(-st.beta * v));
  return p;
}

double active_fraction(const MaskState& st) {
  std::size_t on = 0, n = 0;
  for (const auto& s : st.logits) {
    for (double v : s.values()) on += v > 0.0 ? 1 : 0;
    n += s.size();
  }
  return n ? static_cast<double>(on) / static_cast<double>(n) : 0.0;
}

}  // namespace

std::vector<Var> bind_masked_weights(Tape& tape, const Model& model, MaskState& state, MaskMode mode, bool trainable) {
  check_state(model, state);
  std::vector<Var> w;
  w.reserve(model.params.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const Tensor& value = model.params[i].value;
    if (k < state.param_index.size() && state.param_index[k] == i) {
      if (mode == MaskMode::Hard) {
        w.push_back(tape.constant(hard_masked(value, state.logits[k])));
      } else {
        Var s = trainable ? tape.parameter(state.logits[k]) : tape.constant_ref(state.logits[k]);
        w.push_back(tape.soft_mask(tape.constant_ref(value), s, state.beta));
      }
      ++k;
    } else {
      w.push_back(tape.constant_ref(value));
    }
  }
  return w;
}

Var masked_forward(Tape& tape, const Model& model, MaskState& state, const Batch& batch, MaskMode mode, bool trainable) {
  return forward_logits(tape, model, bind_masked_weights(tape, model, state, mode, trainable), batch);
}

MaskLoss mask_loss(Tape& tape, const Model& model, MaskState& state, const Batch& batch, const MaskConfig& cfg) {
  check_state(model, state);
  std::vector<Var> w;
  std::vector<Var> s_vars;
  std::size_t k = 0;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const Tensor& value = model.params[i].value;
    if (k < state.param_index.size() && state.param_index[k] == i) {
      Var s = tape.parameter(state.logits[k]);
      s_vars.push_back(s);
      w.push_back(tape.soft_mask(tape.constant_ref(value), s, state.beta));
      ++k;
    } else {
      w.push_back(tape.constant_ref(value));
    }
  }
  MaskLoss out;
  out.task = tape.softmax_cross_entropy(forward_logits(tape, model, w, batch), batch.odd);
  Var pen = tape.constant(Tensor::scalar(0.0));
  for (Var s : s_vars) pen = tape.add(pen, tape.sum(tape.sigmoid(tape.scale(s, state.beta))));
  out.penalty = tape.scale(pen, cfg.lambda);
  out.total = tape.add(out.task, out.penalty);
  return out;
}

double anneal_beta(double epoch, const MaskConfig& cfg) {
  if (cfg.epochs < 2) throw ConfigError("anneal_beta: at least 2 epochs are needed");
  const double last = static_cast<double>(cfg.epochs - 1);
  if (epoch < 0.0 || epoch > last) throw ConfigError("anneal_beta: epoch out of range");
  if (epoch == last) return cfg.beta_max;
  return cfg.beta0 * std::pow(cfg.beta_max / cfg.beta0, epoch / last);
}

MaskTrainResult train_mask(const Model& base, const EncodedDataset& train, const MaskConfig& cfg, std::uint64_t seed) {
  MaskTrainResult result;
  MaskState state = init_mask_state(base, cfg);
  if (train.count == 0) throw ConfigError("train_mask: empty dataset");
  if (architecture_for(train.domain) != base.arch) throw ConfigError("train_mask: dataset domain does not match the model");
  AdamState adam(AdamConfig{cfg.lr});
  std::vector<Tensor*> tensors;
  for (auto& s : state.logits) tensors.push_back(&s);
  std::vector<std::size_t> order(train.count);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.beta = anneal_beta(static_cast<double>(epoch), cfg);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed, "train_mask.shuffle", {epoch});
    rng.shuffle(std::span<std::size_t>(order));
    double task_sum = 0.0;
    try {
      for (std::size_t start = 0; start < train.count; start += cfg.batch_size) {
        const std::size_t end = std::min(train.count, start + cfg.batch_size);
        Batch b = make_batch(train, std::span<const std::size_t>(order).subspan(start, end - start));
        for (Tensor* t : tensors) t->zero_grad();
        Tape tape;
        MaskLoss loss = mask_loss(tape, base, state, b, cfg);
        task_sum += tape.value(loss.task)[0] * static_cast<double>(b.examples);
        tape.backward(loss.total);
        adam.step(tensors);
      }
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("train_mask: epoch " + std::to_string(epoch) + " (beta " + std::to_string(state.beta) +
                           "): " + e.what());
    }
    result.log.push_back({epoch, state.beta, task_sum / static_cast<double>(train.count),
                          cfg.lambda * penalty_value(state), active_fraction(state)});
  }
  for (Tensor* t : tensors) t->clear_grad();
  result.subnet = binarize(state, base);
  result.subnet.config = cfg;
  result.subnet.seed = seed;
  result.state = std::move(state);
  return result;
}

Subnetwork binarize(const MaskState& state, const Model& model) {
  check_state(model, state);
  Subnetwork s;
  s.param_index = state.param_index;
  for (const auto& t : state.logits) {
    s.shapes.push_back(t.shape());
    std::vector<std::uint8_t> m(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) m[i] = t[i] > 0.0 ? 1 : 0;
    s.masks.push_back(std::move(m));
  }
  return s;
}

namespace {

Model masked_copy(const Model& base, const Subnetwork& subnet, bool keep) {
  check_subnet(base, subnet);
  Model m = base;
  for (std::size_t k = 0; k < subnet.masks.size(); ++k) {
    auto values = m.params[subnet.param_index[k]].value.values();
    const auto& mask = subnet.masks[k];
    for (std::size_t i = 0; i < values.size(); ++i)
      if ((mask[i] != 0) != keep) values[i] = 0.0;
  }
  return m;
}

}  // namespace

Model apply_subnetwork(const Model& base, const Subnetwork& subnet) { return masked_copy(base, subnet, true); }
Model ablate(const Model& base, const Subnetwork& subnet) { return masked_copy(base, subnet, false); }

Model soft_masked_model(const Model& base, const MaskState& state, double beta) {
  check_state(base, state);
  Model m = base;
  for (std::size_t k = 0; k < state.logits.size(); ++k) {
    auto values = m.params[state.param_index[k]].value.values();
    const auto& s = state.logits[k];
    for (std::size_t i = 0; i < values.size(); ++i) values[i] *= 1.0 / (1.0 + std::exp(-beta * s[i]));
  }
  return m;
}

namespace {

json config_json(const MaskConfig& c) {
  return {{"start_layer", c.start_layer}, {"s0", c.s0},           {"lr", c.lr},
          {"lambda", c.lambda},           {"beta0", c.beta0},     {"beta_max", c.beta_max},
          {"epochs", c.epochs},           {"batch_size", c.batch_size}};
}

MaskConfig config_from_json(const json& j) {
  MaskConfig c;
  c.start_layer = j.at("start_layer");
  c.s0 = j.at("s0");
  c.lr = j.at("lr");
  c.lambda = j.at("lambda");
  c.beta0 = j.at("beta0");
  c.beta_max = j.at("beta_max");
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  return c;
}

}  // namespace

std::string mask_config_json(const MaskConfig& c) { return config_json(c).dump(); }

MaskConfig parse_mask_config(std::string_view text) {
  try {
    return config_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad mask config: ") + e.what());
  }
}

void save_subnetwork(const Subnetwork& s, const fs::path& path) {
  json tensors = json::array();
  std::string block;
  for (std::size_t k = 0; k < s.masks.size(); ++k) {
    tensors.push_back({{"param", s.param_index[k]}, {"shape", s.shapes[k]}, {"active", s.active(k)}});
    const auto& m = s.masks[k];
    for (std::size_t i = 0; i < m.size(); i += 8) {
      std::uint8_t byte = 0;
      for (std::size_t b = 0; b < 8 && i + b < m.size(); ++b) byte |= static_cast<std::uint8_t>(m[i + b] << b);
      block.push_back(static_cast<char>(byte));
    }
  }
  json header = {{"format", "compostruct-subnetwork-1"},
                 {"base_id", s.base_id},
                 {"subroutine", s.subroutine},
                 {"seed", s.seed},
                 {"config", config_json(s.config)},
                 {"active", s.active()},
                 {"total", s.total()},
                 {"tensors", tensors}};
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetIoError("cannot write subnetwork " + path.string());
  out << header.dump() << '\n' << block;
  if (!out) throw DatasetIoError("write failed for subnetwork " + path.string());
}

Subnetwork load_subnetwork(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetIoError("cannot open subnetwork " + path.string());
  std::string header_line;
  std::getline(in, header_line);
  std::ostringstream body;
  body << in.rdbuf();
  const std::string block = body.str();
  Subnetwork s;
  try {
    const json h = json::parse(header_line);
    s.base_id = h.at("base_id");
    s.subroutine = h.at("subroutine");
    s.seed = h.at("seed");
    s.config = config_from_json(h.at("config"));
    std::size_t offset = 0;
    for (const auto& t : h.at("tensors")) {
      s.param_index.push_back(t.at("param"));
      s.shapes.push_back(t.at("shape").get<Shape>());
      const std::size_t n = shape_numel(s.shapes.back());
      const std::size_t bytes = (n + 7) / 8;
      if (offset + bytes > block.size()) throw DatasetIoError("subnetwork " + path.string() + " is truncated");
      std::vector<std::uint8_t> m(n);
      for (std::size_t i = 0; i < n; ++i)
        m[i] = (static_cast<std::uint8_t>(block[offset + i / 8]) >> (i % 8)) & 1;
      offset += bytes;
      s.masks.push_back(std::move(m));
      if (s.active(s.masks.size() - 1) != t.at("active").get<std::size_t>())
        throw DatasetIoError("subnetwork " + path.string() + ": stored active count does not match the bitset");
    }
    if (offset != block.size()) throw DatasetIoError("subnetwork " + path.string() + " has trailing bytes");
  } catch (const json::exception& e) {
    throw DatasetIoError("bad subnetwork header in " + path.string() + ": " + e.what());
  }
  return s;
}

std::vector<MaskConfig> SearchSpace::enumerate(const Model& model) const {
  std::vector<std::size_t> starts = start_layers;
  if (starts.empty()) starts = {0, model.backbone_final_layer(), model.head_layer()};
  std::vector<MaskConfig> out;
  for (double lr : learning_rates)
    for (double s0 : inits)
      for (std::size_t start : starts) {
        MaskConfig c = base;
        c.lr = lr;
        c.s0 = s0;
        c.start_layer = start;
        c.validate(model);
        out.push_back(c);
      }
  if (out.empty()) throw ConfigError("search space is empty");
  return out;
}

SearchExhausted::SearchExhausted(std::vector<SearchRow> table)
    : std::runtime_error("mask search: no candidate passed the accuracy gate (" + std::to_string(table.size()) +
                         " tried)"),
      table_(std::move(table)) {}

double search_score(double ablated_target, double ablated_other) {
  return clamp_accuracy(ablated_other) - clamp_accuracy(ablated_target);
}

SearchResult hyperparameter_search(const Model& base, const SearchSpace& space, const SearchData& data,
                                   std::uint64_t seed, std::size_t jobs, double gate) {
  if (!data.mask_train || !data.mask_val || !data.target_val || !data.other_val)
    throw ConfigError("mask search: missing validation data");
  const std::vector<MaskConfig> configs = space.enumerate(base);
  std::vector<SearchRow> rows(configs.size());
  std::vector<Subnetwork> subnets(configs.size());
  parallel_for(configs.size(), jobs, [&](std::size_t i) {
    MaskTrainResult r = train_mask(base, *data.mask_train, configs[i], derive_seed(seed, "search", {i}));
    SearchRow& row = rows[i];
    row.config = configs[i];
    row.own_acc = evaluate(apply_subnetwork(base, r.subnet), *data.mask_val);
    const Model abl = ablate(base, r.subnet);
    row.ablated_target = evaluate(abl, *data.target_val);
    row.ablated_other = evaluate(abl, *data.other_val);
    row.score = search_score(row.ablated_target, row.ablated_other);
    row.gated = row.own_acc >= gate;
    row.active = r.subnet.active();
    row.total = r.subnet.total();
    subnets[i] = std::move(r.subnet);
  });
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].gated && (!best || rows[i].score > rows[*best].score)) best = i;
  if (!best) throw SearchExhausted(std::move(rows));
  SearchResult result;
  result.best = *best;
  result.best_subnet = std::move(subnets[*best]);
  result.table = std::move(rows);
  return result;
}

void write_search_table(const std::vector<SearchRow>& table, const fs::path& path) {
  std::ostringstream out;
  out.precision(17);
  out << "index,start_layer,s0,lr,own_acc,ablated_target,ablated_other,score,gated,active,total\n";
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& r = table[i];
    out << i << ',' << r.config.start_layer << ',' << r.config.s0 << ',' << r.config.lr << ',' << r.own_acc << ','
        << r.ablated_target << ',' << r.ablated_other << ',' << r.score << ',' << (r.gated ? 1 : 0) << ',' << r.active
        << ',' << r.total << '\n';
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DatasetIoError("cannot write " + path.string());
  f << out.str();
}

}  // namespace compostruct
