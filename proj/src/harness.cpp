#include "compostruct/harness.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include <json.hpp>

#include "compostruct/parallel.hpp"

namespace compostruct {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------- files

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetIoError("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DatasetIoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw DatasetIoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string hex16(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

std::string num(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

// ---------------------------------------------------------------- config json

json sizes_json(const SplitSizes& s) { return {{"train", s.train}, {"val", s.val}, {"test", s.test}}; }

json train_json(const TrainConfig& t) {
  return {{"lr", t.lr},
          {"batch_size", t.batch_size},
          {"max_epochs", t.max_epochs},
          {"patience", t.patience},
          {"threshold", t.threshold},
          {"dropout", t.dropout},
          {"weight_decay", t.weight_decay}};
}

json mask_json(const MaskConfig& m) { return json::parse(mask_config_json(m)); }

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

void read_size(const json& j, const char* key, std::size_t& out, const std::string& where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_unsigned()) throw ConfigError(where + "." + key + ": expected a non-negative integer");
  out = v.get<std::size_t>();
}

void read_double(const json& j, const char* key, double& out, const std::string& where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number()) throw ConfigError(where + "." + key + ": expected a number");
  out = v.get<double>();
}

SplitSizes parse_sizes(const json& j, const std::string& where) {
  check_keys(j, where, {"train", "val", "test"});
  SplitSizes s;
  read_size(j, "train", s.train, where);
  read_size(j, "val", s.val, where);
  read_size(j, "test", s.test, where);
  return s;
}

TrainConfig parse_train(const json& j) {
  const std::string w = "train";
  check_keys(j, w, {"lr", "batch_size", "max_epochs", "patience", "threshold", "dropout", "weight_decay"});
  TrainConfig t;
  read_double(j, "lr", t.lr, w);
  read_size(j, "batch_size", t.batch_size, w);
  read_size(j, "max_epochs", t.max_epochs, w);
  read_size(j, "patience", t.patience, w);
  read_double(j, "threshold", t.threshold, w);
  read_double(j, "dropout", t.dropout, w);
  read_double(j, "weight_decay", t.weight_decay, w);
  return t;
}

MaskConfig parse_mask(const json& j) {
  const std::string w = "mask";
  check_keys(j, w, {"start_layer", "s0", "lr", "lambda", "beta0", "beta_max", "epochs", "batch_size"});
  MaskConfig m;
  read_size(j, "start_layer", m.start_layer, w);
  read_double(j, "s0", m.s0, w);
  read_double(j, "lr", m.lr, w);
  read_double(j, "lambda", m.lambda, w);
  read_double(j, "beta0", m.beta0, w);
  read_double(j, "beta_max", m.beta_max, w);
  read_size(j, "epochs", m.epochs, w);
  read_size(j, "batch_size", m.batch_size, w);
  return m;
}

json config_core(const ExperimentConfig& c) {
  json rules = json::array();
  for (Rule r : c.rules) rules.push_back(to_string(r));
  return {{"name", c.name},
          {"mode", to_string(c.mode)},
          {"rules", rules},
          {"seeds", c.seeds},
          {"repeats", c.repeats},
          {"data_seed", c.data_seed},
          {"sizes", {{"base", sizes_json(c.base_sizes)}, {"mask", sizes_json(c.mask_sizes)}, {"test", sizes_json(c.test_sizes)}}},
          {"train", train_json(c.train)},
          {"mask", mask_json(c.mask)},
          {"search",
           {{"learning_rates", c.learning_rates}, {"inits", c.inits}, {"start_layers", c.start_layers}}},
          {"gate", c.gate}};
}

// ---------------------------------------------------------------- manifest

class Manifest {
 public:
  Manifest(fs::path path, json doc) : path_(std::move(path)), doc_(std::move(doc)) {}

  std::optional<json> stage(const std::string& key) {
    std::lock_guard lock(mu_);
    const json& stages = doc_.at("stages");
    if (!stages.contains(key)) return std::nullopt;
    return stages.at(key);
  }

  /// Stores a stage entry, rewrites the manifest, then runs `after` under the same lock.
  void commit(const std::string& key, json entry, const std::function<void(const json&)>& after = {}) {
    std::lock_guard lock(mu_);
    doc_["stages"][key] = std::move(entry);
    write_atomic(path_, doc_.dump(2) + "\n");
    if (after) after(doc_);
  }

  json snapshot() {
    std::lock_guard lock(mu_);
    return doc_;
  }

 private:
  fs::path path_;
  json doc_;
  std::mutex mu_;
};

// ---------------------------------------------------------------- layout

std::string seed_dir(Rule rule, std::uint64_t seed) { return to_string(rule) + "/" + std::to_string(seed); }
std::string base_key(Rule rule, std::uint64_t seed) { return seed_dir(rule, seed) + "/base"; }
std::string search_key(Rule rule, std::uint64_t seed, Factor f) {
  return seed_dir(rule, seed) + "/" + to_string(f) + "/search";
}
std::string repeat_key(Rule rule, std::uint64_t seed, Factor f, std::size_t r) {
  return seed_dir(rule, seed) + "/" + to_string(f) + "/" + std::to_string(r);
}
std::string mask_file(Rule rule, std::uint64_t seed, Factor f, std::size_t r) {
  return seed_dir(rule, seed) + "/subnets/" + to_string(f) + "_r" + std::to_string(r) + ".mask";
}

bool stage_done(const std::optional<json>& st, const fs::path& dir) {
  if (!st) return false;
  const std::string status = st->value("status", "");
  if (status == "failed") return st->value("kind", "") == "gate";
  if (status != "done") return false;
  return !st->contains("artifact") || fs::exists(dir / st->at("artifact").get<std::string>());
}

bool stage_ok(const std::optional<json>& st) { return st && st->value("status", "") == "done"; }

json failure(const std::string& kind, const std::string& message) {
  return {{"status", "failed"}, {"kind", kind}, {"message", message}};
}

// search.csv for one (rule, seed): rows of every searched subroutine.
void write_search_csv(const json& doc, const fs::path& dir, Rule rule, std::uint64_t seed) {
  const std::string hash = doc.at("config_hash");
  std::ostringstream out;
  out << "config_hash,seed,subroutine,index,start_layer,s0,lr,own_acc,ablated_target,ablated_other,score,gated,"
         "active,total,chosen\n";
  bool any = false;
  for (Factor f : rule_factors(rule)) {
    const std::string key = search_key(rule, seed, f);
    if (!doc.at("stages").contains(key)) continue;
    const json& st = doc.at("stages").at(key);
    if (!st.contains("rows")) continue;
    const long chosen = st.value("chosen_index", -1L);
    const json& rows = st.at("rows");
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const json& r = rows[i];
      const MaskConfig c = parse_mask_config(r.at("config").dump());
      out << hash << ',' << seed << ',' << to_string(f) << ',' << i << ',' << c.start_layer << ',' << num(c.s0) << ','
          << num(c.lr) << ',' << num(r.at("own_acc")) << ',' << num(r.at("ablated_target")) << ','
          << num(r.at("ablated_other")) << ',' << num(r.at("score")) << ',' << (r.at("gated").get<bool>() ? 1 : 0)
          << ',' << r.at("active").get<std::size_t>() << ',' << r.at("total").get<std::size_t>() << ','
          << (static_cast<long>(i) == chosen ? 1 : 0) << '\n';
      any = true;
    }
  }
  if (any) write_atomic(dir / seed_dir(rule, seed) / "search.csv", out.str());
}

// records.jsonl for one (rule, seed), canonical order.
void write_records(const json& doc, const fs::path& dir, Rule rule, std::uint64_t seed, std::size_t repeats) {
  std::string text;
  for (Factor f : rule_factors(rule))
    for (std::size_t r = 0; r < repeats; ++r) {
      const std::string key = repeat_key(rule, seed, f, r);
      if (!doc.at("stages").contains(key)) continue;
      const json& st = doc.at("stages").at(key);
      if (st.value("status", "") != "done") continue;
      text += st.at("record").dump() + "\n";
    }
  write_atomic(dir / seed_dir(rule, seed) / "records.jsonl", text);
}

json search_row_json(const SearchRow& r) {
  return {{"config", mask_json(r.config)}, {"own_acc", r.own_acc},         {"ablated_target", r.ablated_target},
          {"ablated_other", r.ablated_other}, {"score", r.score},           {"gated", r.gated},
          {"active", r.active},               {"total", r.total}};
}

// ---------------------------------------------------------------- data

struct RuleData {
  EncodedDataset base_train, base_val, base_test;
  std::array<EncodedDataset, 2> mask_train, mask_val, mask_test;
  std::array<EncodedDataset, 2> target_val, target_test, other_val, other_test;
};

std::vector<TaskSpec> rule_tasks(const ExperimentConfig& cfg, Rule rule) {
  std::vector<TaskSpec> tasks;
  auto add = [&](Role role, std::optional<Factor> f, Partition p) {
    tasks.push_back(TaskSpec{rule, role, f, p, cfg.size(rule, role, p)});
  };
  for (Partition p : kAllPartitions) add(Role::Base, std::nullopt, p);
  for (Factor f : rule_factors(rule)) {
    for (Partition p : kAllPartitions) add(Role::MaskTrain, f, p);
    for (Role role : {Role::TestTarget, Role::TestOther}) {
      add(role, f, Partition::Val);
      add(role, f, Partition::Test);
    }
  }
  return tasks;
}

RuleData load_rule_data(const ExperimentConfig& cfg, Rule rule) {
  const std::vector<TaskSpec> tasks = rule_tasks(cfg, rule);
  std::vector<EncodedDataset> enc(tasks.size());
  parallel_for(tasks.size(), cfg.jobs,
               [&](std::size_t i) { enc[i] = encode(cached_dataset(tasks[i], cfg.data_seed, cfg.cache)); });
  RuleData d;
  d.base_train = std::move(enc[0]);
  d.base_val = std::move(enc[1]);
  d.base_test = std::move(enc[2]);
  for (std::size_t s = 0; s < 2; ++s) {
    const std::size_t o = 3 + s * 7;
    d.mask_train[s] = std::move(enc[o]);
    d.mask_val[s] = std::move(enc[o + 1]);
    d.mask_test[s] = std::move(enc[o + 2]);
    d.target_val[s] = std::move(enc[o + 3]);
    d.target_test[s] = std::move(enc[o + 4]);
    d.other_val[s] = std::move(enc[o + 5]);
    d.other_test[s] = std::move(enc[o + 6]);
  }
  return d;
}

// ---------------------------------------------------------------- stages

struct Context {
  const ExperimentConfig& cfg;
  fs::path dir;
  std::string hash;
  Manifest& manifest;
  std::optional<json> reference;
  fs::path reference_dir;
};

std::uint64_t rule_tag(Rule r) { return static_cast<std::uint64_t>(r); }

std::string checkpoint_extra_json(const Context& ctx, Rule rule, std::uint64_t seed, const json& more) {
  json extra = {{"config_hash", ctx.hash},
                {"seed", seed},
                {"rule", to_string(rule)},
                {"base_id", base_id(ctx.hash, rule, seed)},
                {"mode", to_string(ctx.cfg.mode)}};
  extra.update(more);
  return extra.dump();
}

void stage_base_trained(const Context& ctx, const RuleData& data, Rule rule, std::uint64_t seed) {
  const std::string rel = seed_dir(rule, seed) + "/base.ckpt";
  TrainConfig tc = ctx.cfg.train;
  tc.seed = derive_seed(seed, "base.shuffle", {rule_tag(rule)});
  const Model init = make_model(architecture_for(rule_domain(rule)), derive_seed(seed, "base.init", {rule_tag(rule)}));
  try {
    TrainResult r = train_base(init, data.base_train, data.base_val, data.base_test, tc);
    write_training_log(r.log, ctx.dir / seed_dir(rule, seed) / "base_log.csv");
    save_checkpoint(r.model, ctx.dir / rel,
                    checkpoint_extra_json(ctx, rule, seed, {{"val_acc", r.val_acc}, {"test_acc", r.test_acc}}));
    ctx.manifest.commit(base_key(rule, seed), {{"status", "done"},
                                               {"artifact", rel},
                                               {"source", "trained"},
                                               {"best_epoch", r.best_epoch},
                                               {"val_acc", r.val_acc},
                                               {"test_acc", r.test_acc}});
  } catch (const BaseModelBelowThreshold& e) {
    write_training_log(e.result().log, ctx.dir / seed_dir(rule, seed) / "base_log.csv");
    json f = failure("gate", e.what());
    f["test_acc"] = e.accuracy();
    ctx.manifest.commit(base_key(rule, seed), f);
  }
}

void stage_base_random(const Context& ctx, const RuleData& data, Rule rule, std::uint64_t seed) {
  const std::string rel = seed_dir(rule, seed) + "/base.ckpt";
  const Model m = make_model(architecture_for(rule_domain(rule)), derive_seed(seed, "base.init", {rule_tag(rule)}));
  const double val = evaluate(m, data.base_val), test = evaluate(m, data.base_test);
  save_checkpoint(m, ctx.dir / rel, checkpoint_extra_json(ctx, rule, seed, {{"val_acc", val}, {"test_acc", test}}));
  ctx.manifest.commit(base_key(rule, seed),
                      {{"status", "done"}, {"artifact", rel}, {"source", "random"}, {"val_acc", val}, {"test_acc", test}});
}

void stage_base_pruned(const Context& ctx, const RuleData& data, Rule rule, std::uint64_t seed) {
  const std::string rel = seed_dir(rule, seed) + "/base.ckpt";
  const fs::path ref_ckpt = ctx.reference_dir / rel;
  const auto ref_stage = ctx.reference->at("stages").value(base_key(rule, seed), json());
  if (!ref_stage.is_object() || ref_stage.value("status", "") != "done" || !fs::exists(ref_ckpt)) {
    ctx.manifest.commit(base_key(rule, seed), failure("gate", "reference run has no base model for " + seed_dir(rule, seed)));
    return;
  }
  const Model ref = load_checkpoint(ref_ckpt);
  std::vector<MaskConfig> grid;
  for (double lr : ctx.cfg.learning_rates)
    for (double s0 : ctx.cfg.inits) {
      MaskConfig m = ctx.cfg.mask;
      m.start_layer = 0;
      m.lr = lr;
      m.s0 = s0;
      m.validate(ref);
      grid.push_back(m);
    }
  struct Candidate {
    double val = 0.0, test = 0.0;
    std::size_t active = 0, total = 0;
    Subnetwork subnet;
  };
  std::vector<Candidate> cands(grid.size());
  parallel_for(grid.size(), ctx.cfg.jobs, [&](std::size_t i) {
    MaskTrainResult r = train_mask(ref, data.base_train, grid[i], derive_seed(seed, "prune", {rule_tag(rule), i}));
    const Model pruned = apply_subnetwork(ref, r.subnet);
    cands[i].val = evaluate(pruned, data.base_val);
    cands[i].test = evaluate(pruned, data.base_test);
    cands[i].active = r.subnet.active();
    cands[i].total = r.subnet.total();
    cands[i].subnet = std::move(r.subnet);
  });
  std::optional<std::size_t> best;
  json rows = json::array();
  std::ostringstream csv;
  csv << "config_hash,seed,index,s0,lr,val_acc,test_acc,gated,active,total\n";
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const bool gated = cands[i].val >= ctx.cfg.gate;
    if (gated && (!best || cands[i].active < cands[*best].active)) best = i;
    rows.push_back({{"config", mask_json(grid[i])},
                    {"val_acc", cands[i].val},
                    {"test_acc", cands[i].test},
                    {"gated", gated},
                    {"active", cands[i].active},
                    {"total", cands[i].total}});
    csv << ctx.hash << ',' << seed << ',' << i << ',' << num(grid[i].s0) << ',' << num(grid[i].lr) << ','
        << num(cands[i].val) << ',' << num(cands[i].test) << ',' << (gated ? 1 : 0) << ',' << cands[i].active << ','
        << cands[i].total << '\n';
  }
  write_atomic(ctx.dir / seed_dir(rule, seed) / "prune.csv", csv.str());
  if (!best) {
    json f = failure("gate", "no pruned model reached validation accuracy " + num(ctx.cfg.gate));
    f["candidates"] = rows;
    ctx.manifest.commit(base_key(rule, seed), f);
    return;
  }
  const Candidate& c = cands[*best];
  const Model pruned = apply_subnetwork(ref, c.subnet);
  save_checkpoint(pruned, ctx.dir / rel,
                  checkpoint_extra_json(ctx, rule, seed,
                                        {{"val_acc", c.val}, {"test_acc", c.test}, {"pruned_active", c.active}}));
  ctx.manifest.commit(base_key(rule, seed), {{"status", "done"},
                                             {"artifact", rel},
                                             {"source", "pruned"},
                                             {"val_acc", c.val},
                                             {"test_acc", c.test},
                                             {"candidates", rows},
                                             {"chosen_index", *best},
                                             {"active", c.active},
                                             {"total", c.total}});
}

void stage_search(const Context& ctx, const RuleData& data, Rule rule, std::uint64_t seed, std::size_t slot,
                  std::size_t inner_jobs) {
  const Factor f = rule_factors(rule)[slot];
  const std::string key = search_key(rule, seed, f);
  const std::string rel = seed_dir(rule, seed) + "/search.csv";
  auto after = [&](const json& doc) { write_search_csv(doc, ctx.dir, rule, seed); };

  if (ctx.cfg.mode == ExperimentMode::RandomControl) {
    const json ref = ctx.reference->at("stages").value(key, json());
    if (!ref.is_object() || ref.value("status", "") != "done" || !ref.contains("chosen")) {
      ctx.manifest.commit(key, failure("gate", "reference run has no chosen config for " + key));
      return;
    }
    ctx.manifest.commit(key, {{"status", "done"}, {"source", "reference"}, {"chosen", ref.at("chosen")}});
    return;
  }

  const Model base = load_checkpoint(ctx.dir / seed_dir(rule, seed) / "base.ckpt");
  SearchSpace space = ctx.cfg.search_space();
  SearchData sd{&data.mask_train[slot], &data.mask_val[slot], &data.target_val[slot], &data.other_val[slot]};
  const std::uint64_t s = derive_seed(seed, "search", {rule_tag(rule), slot});
  try {
    SearchResult r = hyperparameter_search(base, space, sd, s, inner_jobs, ctx.cfg.gate);
    json rows = json::array();
    for (const auto& row : r.table) rows.push_back(search_row_json(row));
    ctx.manifest.commit(key,
                        {{"status", "done"},
                         {"artifact", rel},
                         {"source", "search"},
                         {"rows", rows},
                         {"chosen_index", r.best},
                         {"chosen", mask_json(r.table[r.best].config)}},
                        after);
  } catch (const SearchExhausted& e) {
    json rows = json::array();
    for (const auto& row : e.table()) rows.push_back(search_row_json(row));
    json fl = failure("gate", e.what());
    fl["rows"] = rows;
    fl["artifact"] = rel;
    ctx.manifest.commit(key, fl, after);
  }
}

void stage_repeat(const Context& ctx, const RuleData& data, Rule rule, std::uint64_t seed, std::size_t slot,
                  std::size_t r) {
  const Factor f = rule_factors(rule)[slot];
  const json st = *ctx.manifest.stage(search_key(rule, seed, f));
  const MaskConfig cfg = parse_mask_config(st.at("chosen").dump());
  const Model base = load_checkpoint(ctx.dir / seed_dir(rule, seed) / "base.ckpt");
  MaskTrainResult t = train_mask(base, data.mask_train[slot], cfg, derive_seed(seed, "repeat", {rule_tag(rule), slot, r}));
  Subnetwork& sub = t.subnet;
  sub.base_id = base_id(ctx.hash, rule, seed);
  sub.subroutine = to_string(f);
  const std::string rel = mask_file(rule, seed, f, r);
  fs::create_directories((ctx.dir / rel).parent_path());
  fs::path tmp = ctx.dir / rel;
  tmp += ".tmp";
  save_subnetwork(sub, tmp);
  fs::rename(tmp, ctx.dir / rel);

  const Model kept = apply_subnetwork(base, sub), abl = ablate(base, sub);
  RunRecord rec;
  rec.rule = to_string(rule);
  rec.subroutine = to_string(f);
  rec.seed = seed;
  rec.repeat = r;
  rec.base_id = sub.base_id;
  rec.config = mask_config_json(cfg);
  rec.acc_sub_target = evaluate(kept, data.target_test[slot]);
  rec.acc_sub_other = evaluate(kept, data.other_test[slot]);
  rec.acc_abl_target = evaluate(abl, data.target_test[slot]);
  rec.acc_abl_other = evaluate(abl, data.other_test[slot]);
  rec.acc_sub_own = evaluate(kept, data.mask_test[slot]);
  rec.start_layer = cfg.start_layer;
  for (std::size_t k = 0; k < sub.masks.size(); ++k) {
    rec.active_per_tensor.push_back(sub.active(k));
    rec.total_per_tensor.push_back(sub.masks[k].size());
  }
  ctx.manifest.commit(repeat_key(rule, seed, f, r),
                      {{"status", "done"}, {"artifact", rel}, {"record", json::parse(record_to_json(rec))}},
                      [&](const json& doc) { write_records(doc, ctx.dir, rule, seed, ctx.cfg.repeats); });
}

/// Runs `fn`, recording any escaping error as a failed stage under `key`.
void guarded(Manifest& manifest, const std::string& key, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    manifest.commit(key, failure("error", e.what()));
  }
}

void run_rule(const Context& ctx, Rule rule) {
  const auto& cfg = ctx.cfg;
  std::optional<RuleData> data;
  auto need_data = [&] {
    if (!data) data = load_rule_data(cfg, rule);
    return &*data;
  };

  // Which branches still have work.
  std::vector<std::uint64_t> base_todo;
  for (auto seed : cfg.seeds)
    if (!stage_done(ctx.manifest.stage(base_key(rule, seed)), ctx.dir)) base_todo.push_back(seed);
  if (!base_todo.empty()) {
    const RuleData* d = need_data();
    parallel_for(base_todo.size(), std::min(cfg.jobs, base_todo.size()), [&](std::size_t i) {
      const auto seed = base_todo[i];
      guarded(ctx.manifest, base_key(rule, seed), [&] {
        fs::create_directories(ctx.dir / seed_dir(rule, seed));
        switch (cfg.mode) {
          case ExperimentMode::Standard: stage_base_trained(ctx, *d, rule, seed); break;
          case ExperimentMode::RandomControl: stage_base_random(ctx, *d, rule, seed); break;
          case ExperimentMode::PrunedBase: stage_base_pruned(ctx, *d, rule, seed); break;
        }
      });
    });
  }

  struct Branch {
    std::uint64_t seed;
    std::size_t slot;
    std::size_t repeat;
  };
  std::vector<Branch> search_todo;
  for (auto seed : cfg.seeds) {
    if (!stage_ok(ctx.manifest.stage(base_key(rule, seed)))) continue;
    for (std::size_t slot = 0; slot < 2; ++slot)
      if (!stage_done(ctx.manifest.stage(search_key(rule, seed, rule_factors(rule)[slot])), ctx.dir))
        search_todo.push_back({seed, slot, 0});
  }
  if (!search_todo.empty()) {
    const RuleData* d = need_data();
    const std::size_t outer = std::min(cfg.jobs, search_todo.size());
    const std::size_t inner = std::max<std::size_t>(1, cfg.jobs / outer);
    parallel_for(search_todo.size(), outer, [&](std::size_t i) {
      const Branch& b = search_todo[i];
      guarded(ctx.manifest, search_key(rule, b.seed, rule_factors(rule)[b.slot]),
              [&] { stage_search(ctx, *d, rule, b.seed, b.slot, inner); });
    });
  }

  std::vector<Branch> repeat_todo;
  for (auto seed : cfg.seeds) {
    if (!stage_ok(ctx.manifest.stage(base_key(rule, seed)))) continue;
    for (std::size_t slot = 0; slot < 2; ++slot) {
      const Factor f = rule_factors(rule)[slot];
      if (!stage_ok(ctx.manifest.stage(search_key(rule, seed, f)))) continue;
      for (std::size_t r = 0; r < cfg.repeats; ++r)
        if (!stage_done(ctx.manifest.stage(repeat_key(rule, seed, f, r)), ctx.dir)) repeat_todo.push_back({seed, slot, r});
    }
  }
  if (!repeat_todo.empty()) {
    const RuleData* d = need_data();
    parallel_for(repeat_todo.size(), std::min(cfg.jobs, repeat_todo.size()), [&](std::size_t i) {
      const Branch& b = repeat_todo[i];
      guarded(ctx.manifest, repeat_key(rule, b.seed, rule_factors(rule)[b.slot], b.repeat),
              [&] { stage_repeat(ctx, *d, rule, b.seed, b.slot, b.repeat); });
    });
  }
}

// ---------------------------------------------------------------- report

Subnetwork restrict_to(const Subnetwork& s, const std::vector<std::size_t>& params) {
  Subnetwork out;
  for (std::size_t k = 0; k < s.param_index.size(); ++k)
    if (std::find(params.begin(), params.end(), s.param_index[k]) != params.end()) {
      out.param_index.push_back(s.param_index[k]);
      out.shapes.push_back(s.shapes[k]);
      out.masks.push_back(s.masks[k]);
    }
  return out;
}

/// Within-subroutine mean pairwise IoU versus between-subroutine IoU of the
/// per-subroutine intersections, over tensors masked in every subnetwork.
std::optional<json> overlap_entry(const std::array<std::vector<Subnetwork>, 2>& subs, Rule rule, std::uint64_t seed) {
  if (subs[0].size() < 2 || subs[1].size() < 2) return std::nullopt;
  std::vector<std::size_t> shared = subs[0][0].param_index;
  for (const auto& group : subs)
    for (const auto& s : group)
      std::erase_if(shared, [&](std::size_t p) {
        return std::find(s.param_index.begin(), s.param_index.end(), p) == s.param_index.end();
      });
  if (shared.empty()) return std::nullopt;
  std::array<std::vector<Subnetwork>, 2> r;
  for (std::size_t g = 0; g < 2; ++g)
    for (const auto& s : subs[g]) r[g].push_back(restrict_to(s, shared));

  const std::size_t layers = shared.size();
  json within = json::object();
  std::vector<double> within_mean(layers, 0.0);
  const auto factors = rule_factors(rule);
  for (std::size_t g = 0; g < 2; ++g) {
    std::vector<double> acc(layers, 0.0);
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < r[g].size(); ++a)
      for (std::size_t b = a + 1; b < r[g].size(); ++b) {
        const auto iou = iou_per_layer(r[g][a], r[g][b]);
        for (std::size_t l = 0; l < layers; ++l) acc[l] += iou[l];
        ++pairs;
      }
    for (std::size_t l = 0; l < layers; ++l) {
      acc[l] /= static_cast<double>(pairs);
      within_mean[l] += acc[l] / 2.0;
    }
    within[to_string(factors[g])] = acc;
  }
  const std::vector<double> between = iou_per_layer(intersect_masks(r[0]), intersect_masks(r[1]));
  bool ordered = true;
  for (std::size_t l = 0; l < layers; ++l) ordered = ordered && within_mean[l] > between[l];
  return json{{"rule", to_string(rule)},        {"seed", seed},        {"params", shared},
              {"within", within},               {"within_mean", within_mean},
              {"between", between},             {"ordering_holds", ordered}};
}

json group_json(const GroupSummary& g) {
  return {{"rule", g.rule},
          {"subroutine", g.subroutine},
          {"runs", g.runs},
          {"mean_delta_sub", g.mean_delta_sub},
          {"std_delta_sub", g.std_delta_sub},
          {"mean_delta_abl", g.mean_delta_abl},
          {"std_delta_abl", g.std_delta_abl},
          {"positive_sub", g.positive_sub},
          {"negative_abl", g.negative_abl},
          {"signature", g.signature},
          {"verdict", g.verdict}};
}

json load_manifest(const fs::path& dir) {
  const fs::path p = dir / "manifest.json";
  if (!fs::exists(p)) throw ConfigError("no manifest.json in " + dir.string());
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw DatasetIoError("malformed manifest " + p.string() + ": " + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------- public

std::string to_string(ExperimentMode m) {
  switch (m) {
    case ExperimentMode::Standard: return "standard";
    case ExperimentMode::RandomControl: return "random_control";
    case ExperimentMode::PrunedBase: return "pruned_base";
  }
  return "?";
}

ExperimentMode parse_mode(std::string_view s) {
  for (auto m : {ExperimentMode::Standard, ExperimentMode::RandomControl, ExperimentMode::PrunedBase})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown mode '" + std::string(s) + "'");
}

std::string base_id(const std::string& config_hash, Rule rule, std::uint64_t seed) {
  return config_hash + "/" + to_string(rule) + "/" + std::to_string(seed);
}

void ExperimentConfig::validate() const {
  if (name.empty()) throw ConfigError("config: name is empty");
  for (char c : name)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.'))
      throw ConfigError("config: name may only use letters, digits, '_', '-' and '.'");
  if (rules.empty()) throw ConfigError("config: no rules");
  if (std::set<Rule>(rules.begin(), rules.end()).size() != rules.size()) throw ConfigError("config: duplicate rule");
  if (seeds.empty()) throw ConfigError("config: no seeds");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw ConfigError("config: seeds must be distinct");
  if (repeats == 0) throw ConfigError("config: repeats must be at least 1");
  if (jobs == 0) throw ConfigError("config: jobs must be at least 1");
  if (!(gate >= 0.0 && gate <= 1.0)) throw ConfigError("config: gate must lie in [0, 1]");
  if (learning_rates.empty() || inits.empty()) throw ConfigError("config: empty search space");
  if (test_sizes.train != 0) throw ConfigError("config: test roles have no train split");
  train.validate();
  if (mode != ExperimentMode::Standard && reference.empty())
    throw ConfigError("config: mode " + to_string(mode) + " needs a reference run directory");
  for (Rule r : rules) {
    const Model m = make_model(architecture_for(rule_domain(r)), 0);
    MaskConfig probe = mask;
    probe.start_layer = 0;
    probe.validate(m);
    search_space().enumerate(m);
  }
}

std::size_t ExperimentConfig::size(Rule rule, Role role, Partition p) const {
  const SplitSizes& s = role == Role::Base ? base_sizes : role == Role::MaskTrain ? mask_sizes : test_sizes;
  const std::size_t v = p == Partition::Train ? s.train : p == Partition::Val ? s.val : s.test;
  return v != 0 ? v : default_size(rule, role, p);
}

SearchSpace ExperimentConfig::search_space() const {
  SearchSpace s;
  s.learning_rates = learning_rates;
  s.inits = inits;
  s.start_layers = start_layers;
  s.base = mask;
  return s;
}

std::string ExperimentConfig::to_json() const {
  json j = config_core(*this);
  j["reference"] = reference.string();
  j["out"] = out.string();
  j["jobs"] = jobs;
  j["cache"] = cache ? json(cache->string()) : json(nullptr);
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  const std::string w = "config";
  check_keys(j, w,
             {"name", "mode", "rules", "seeds", "repeats", "data_seed", "sizes", "train", "mask", "search", "gate",
              "reference", "out", "jobs", "cache"});
  ExperimentConfig c;
  read_field(j, "name", c.name, w);
  if (j.contains("mode")) {
    if (!j.at("mode").is_string()) throw ConfigError("config.mode: expected a string");
    c.mode = parse_mode(j.at("mode").get<std::string>());
  }
  if (j.contains("rules")) {
    std::vector<std::string> names;
    read_field(j, "rules", names, w);
    c.rules.clear();
    for (const auto& n : names) c.rules.push_back(parse_rule(n));
  }
  read_field(j, "seeds", c.seeds, w);
  read_size(j, "repeats", c.repeats, w);
  if (j.contains("data_seed")) {
    if (!j.at("data_seed").is_number_unsigned()) throw ConfigError("config.data_seed: expected a non-negative integer");
    c.data_seed = j.at("data_seed").get<std::uint64_t>();
  }
  if (j.contains("sizes")) {
    const json& s = j.at("sizes");
    check_keys(s, "sizes", {"base", "mask", "test"});
    if (s.contains("base")) c.base_sizes = parse_sizes(s.at("base"), "sizes.base");
    if (s.contains("mask")) c.mask_sizes = parse_sizes(s.at("mask"), "sizes.mask");
    if (s.contains("test")) c.test_sizes = parse_sizes(s.at("test"), "sizes.test");
  }
  if (j.contains("train")) c.train = parse_train(j.at("train"));
  if (j.contains("mask")) c.mask = parse_mask(j.at("mask"));
  if (j.contains("search")) {
    const json& s = j.at("search");
    check_keys(s, "search", {"learning_rates", "inits", "start_layers"});
    read_field(s, "learning_rates", c.learning_rates, "search");
    read_field(s, "inits", c.inits, "search");
    read_field(s, "start_layers", c.start_layers, "search");
  }
  read_double(j, "gate", c.gate, w);
  if (j.contains("reference")) {
    std::string r;
    read_field(j, "reference", r, w);
    c.reference = r;
  }
  if (j.contains("out")) {
    std::string o;
    read_field(j, "out", o, w);
    c.out = o;
  }
  read_size(j, "jobs", c.jobs, w);
  if (j.contains("cache") && !j.at("cache").is_null()) {
    std::string p;
    read_field(j, "cache", p, w);
    c.cache = fs::path(p);
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  return from_json(read_text(path));
}

std::string ExperimentConfig::hash() const { return hex16(fnv1a64(config_core(*this).dump())); }

ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const fs::path dir = cfg.dir();
  const std::string hash = cfg.hash();
  fs::create_directories(dir);

  std::optional<json> reference;
  fs::path reference_dir;
  if (cfg.mode != ExperimentMode::Standard) {
    reference_dir = cfg.reference;
    reference = load_manifest(reference_dir);
    if (reference->value("config", json::object()).value("mode", "") != to_string(ExperimentMode::Standard))
      throw ConfigError("reference run " + reference_dir.string() + " is not a standard run");
  }

  json doc;
  const fs::path mpath = dir / "manifest.json";
  if (fs::exists(mpath)) {
    doc = load_manifest(dir);
    if (doc.value("config_hash", "") != hash)
      throw ConfigError("output directory " + dir.string() + " holds a run with config hash " +
                        doc.value("config_hash", "?") + ", not " + hash);
  } else {
    json datasets = json::object();
    for (Rule r : cfg.rules)
      for (const TaskSpec& t : rule_tasks(cfg, r)) datasets[t.name()] = t.size;
    doc = {{"experiment", cfg.name},
           {"config", config_core(cfg)},
           {"config_hash", hash},
           {"data_seed", cfg.data_seed},
           {"generator", kGeneratorVersion},
           {"datasets", datasets},
           {"stages", json::object()}};
    if (reference) doc["reference_hash"] = reference->at("config_hash");
    write_atomic(mpath, doc.dump(2) + "\n");
  }

  Manifest manifest(mpath, doc);
  Context ctx{cfg, dir, hash, manifest, reference, reference_dir};
  for (Rule rule : cfg.rules) run_rule(ctx, rule);

  write_report(dir);

  ExperimentOutcome out;
  out.dir = dir;
  const json snap = manifest.snapshot();
  for (const auto& [key, st] : snap.at("stages").items()) {
    if (st.value("status", "") == "failed") out.failures.push_back(key + ": " + st.value("message", ""));
    if (st.contains("record") && st.value("status", "") == "done") ++out.records;
  }
  return out;
}

void write_report(const fs::path& dir) {
  const json man = load_manifest(dir);
  const std::string hash = man.at("config_hash");
  const ExperimentConfig cfg = ExperimentConfig::from_json(man.at("config").dump());
  if (cfg.hash() != hash) throw DatasetIoError("manifest config does not match its config hash");
  const json& stages = man.at("stages");
  auto stage = [&](const std::string& key) -> const json* {
    return stages.contains(key) ? &stages.at(key) : nullptr;
  };

  json base_models = json::array(), searches = json::array(), overlap = json::array(), failures = json::array();
  std::vector<RunRecord> records;
  std::vector<SparsityRow> sparsity;

  for (Rule rule : cfg.rules) {
    const auto factors = rule_factors(rule);
    for (auto seed : cfg.seeds) {
      const std::string sd = seed_dir(rule, seed);
      const json* b = stage(base_key(rule, seed));
      if (!b || b->value("status", "") != "done") continue;
      const fs::path ckpt = dir / sd / "base.ckpt";
      const json extra = json::parse(checkpoint_extra(ckpt));
      if (extra.value("config_hash", "") != hash || extra.value("seed", std::uint64_t{0}) != seed)
        throw DatasetIoError(ckpt.string() + ": provenance does not match the manifest");
      base_models.push_back({{"rule", to_string(rule)},
                             {"seed", seed},
                             {"base_id", base_id(hash, rule, seed)},
                             {"source", b->value("source", "")},
                             {"val_acc", b->at("val_acc")},
                             {"test_acc", b->at("test_acc")}});

      for (Factor f : factors) {
        const json* s = stage(search_key(rule, seed, f));
        if (!s || s->value("status", "") != "done") continue;
        json e = {{"rule", to_string(rule)},
                  {"seed", seed},
                  {"subroutine", to_string(f)},
                  {"source", s->value("source", "")},
                  {"chosen", s->at("chosen")}};
        if (s->contains("rows")) {
          const json& row = s->at("rows").at(s->at("chosen_index").get<std::size_t>());
          e["chosen_index"] = s->at("chosen_index");
          e["candidates"] = s->at("rows").size();
          e["own_acc"] = row.at("own_acc");
          e["score"] = row.at("score");
        }
        searches.push_back(e);
      }
      const fs::path scsv = dir / sd / "search.csv";
      if (fs::exists(scsv)) {
        std::istringstream in(read_text(scsv));
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line))
          if (line.substr(0, line.find(',')) != hash)
            throw DatasetIoError(scsv.string() + ": row with a foreign config hash");
      }

      const fs::path rpath = dir / sd / "records.jsonl";
      if (!fs::exists(rpath)) continue;
      std::array<std::vector<Subnetwork>, 2> subs;
      for (const RunRecord& rec : read_records(rpath)) {
        if (rec.base_id != base_id(hash, rule, seed) || rec.seed != seed)
          throw DatasetIoError(rpath.string() + ": record provenance does not match the manifest");
        const Factor f = parse_factor(rec.subroutine);
        const std::size_t slot = factor_slot(rule, f);
        const fs::path mpath = dir / mask_file(rule, seed, f, rec.repeat);
        const Subnetwork sub = load_subnetwork(mpath);
        if (sub.base_id != rec.base_id) throw DatasetIoError(mpath.string() + ": base id does not match its record");
        if (sub.masks.size() != rec.active_per_tensor.size())
          throw DatasetIoError(mpath.string() + ": tensor count does not match its record");
        for (std::size_t k = 0; k < sub.masks.size(); ++k)
          if (sub.active(k) != rec.active_per_tensor[k])
            throw DatasetIoError(mpath.string() + ": active count does not match its record");
        sparsity.push_back(sparsity_row(sub, rec.rule, std::to_string(seed), rec.repeat));
        subs[slot].push_back(sub);
        records.push_back(rec);
      }
      if (auto o = overlap_entry(subs, rule, seed)) overlap.push_back(*o);
    }
  }
  for (const auto& [key, st] : stages.items())
    if (st.value("status", "") == "failed")
      failures.push_back({{"stage", key}, {"kind", st.value("kind", "")}, {"message", st.value("message", "")}});

  json groups = json::array();
  if (!records.empty())
    for (const auto& g : summarize(records)) groups.push_back(group_json(g));
  json recs = json::array();
  for (const auto& r : records) recs.push_back(json::parse(record_to_json(r)));
  json spars = json::array();
  for (const auto& s : sparsity)
    spars.push_back({{"rule", s.rule},
                     {"subroutine", s.subroutine},
                     {"model", s.model},
                     {"repeat", s.repeat},
                     {"start_layer", s.start_layer},
                     {"active", s.active},
                     {"total", s.total}});

  json tags = json::object();
  if (cfg.mode == ExperimentMode::RandomControl) tags["control"] = "random";
  if (cfg.mode == ExperimentMode::PrunedBase) tags["variant"] = "pruned";

  json report = {{"experiment", cfg.name},
                 {"mode", to_string(cfg.mode)},
                 {"config_hash", hash},
                 {"tags", tags},
                 {"architecture",
                  {{"vision", to_string(Architecture::VisionMlp)},
                   {"language", to_string(Architecture::LanguageEmbedMlp)},
                   {"substitute", true}}},
                 {"base_models", base_models},
                 {"searches", searches},
                 {"groups", groups},
                 {"overlap", overlap},
                 {"sparsity", spars},
                 {"records", recs},
                 {"failures", failures}};
  if (man.contains("reference_hash")) report["reference_hash"] = man.at("reference_hash");
  write_atomic(dir / "report.json", report.dump(2) + "\n");
  write_atomic(dir / "summary.csv", records.empty() ? std::string() : summary_csv(records));
  write_atomic(dir / "sparsity.csv", sparsity_csv(sparsity));
}

std::string format_report(const fs::path& dir) {
  const fs::path p = dir / "report.json";
  if (!fs::exists(p)) throw ConfigError("no report.json in " + dir.string() + " (run analyze first)");
  const json r = json::parse(read_text(p));
  std::ostringstream out;
  out << std::fixed << std::setprecision(3);
  out << "experiment " << r.at("experiment").get<std::string>() << "  mode " << r.at("mode").get<std::string>()
      << "  config " << r.at("config_hash").get<std::string>() << '\n';
  for (const auto& [k, v] : r.at("tags").items()) out << "tag " << k << '=' << v.get<std::string>() << '\n';
  out << "\nbase models\n";
  for (const auto& b : r.at("base_models"))
    out << "  " << std::left << std::setw(18) << b.at("rule").get<std::string>() << " seed " << b.at("seed")
        << "  val " << b.at("val_acc").get<double>() << "  test " << b.at("test_acc").get<double>() << '\n';
  out << "\nsubroutines\n";
  for (const auto& g : r.at("groups"))
    out << "  " << std::setw(18) << g.at("rule").get<std::string>() << ' ' << std::setw(11)
        << g.at("subroutine").get<std::string>() << " runs " << g.at("runs") << "  dsub " << std::showpos
        << g.at("mean_delta_sub").get<double>() << std::noshowpos << " +- " << g.at("std_delta_sub").get<double>()
        << " (" << g.at("positive_sub") << " pos)  dabl " << std::showpos << g.at("mean_delta_abl").get<double>()
        << std::noshowpos << " +- " << g.at("std_delta_abl").get<double>() << " (" << g.at("negative_abl")
        << " neg)  " << g.at("verdict").get<std::string>() << '\n';
  if (!r.at("overlap").empty()) {
    out << "\noverlap (within > between on every shared layer)\n";
    for (const auto& o : r.at("overlap"))
      out << "  " << std::setw(18) << o.at("rule").get<std::string>() << " seed " << o.at("seed") << "  "
          << (o.at("ordering_holds").get<bool>() ? "holds" : "violated") << '\n';
  }
  if (!r.at("failures").empty()) {
    out << "\nfailures\n";
    for (const auto& f : r.at("failures"))
      out << "  " << f.at("stage").get<std::string>() << ": " << f.at("message").get<std::string>() << '\n';
  }
  return out.str();
}

}  // namespace compostruct
