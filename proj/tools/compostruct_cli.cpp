// compostruct: command-line front end for data generation, training, mask
// search, full experiments and reports.
//
// Exit codes: 0 success, 1 a requested branch failed, 2 usage or config error,
// 3 I/O or data error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "compostruct/dataset.hpp"
#include "compostruct/harness.hpp"

using namespace compostruct;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t jobs = 0;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Experiment config (JSON)");
  app->add_option("--seed", c.seed, "Model seed (replaces the config's seed list)");
  app->add_option("--out", c.out, "Output path");
  app->add_option("--jobs", c.jobs, "Parallel fan-out width")->check(CLI::PositiveNumber);
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(c.config);
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.out.empty()) cfg.out = c.out;
  if (c.jobs != 0) cfg.jobs = c.jobs;
  return cfg;
}

std::uint64_t first_seed(const ExperimentConfig& cfg) { return cfg.seeds.front(); }

EncodedDataset load(const ExperimentConfig& cfg, Rule rule, Role role, std::optional<Factor> f, Partition p) {
  return encode(cached_dataset(TaskSpec{rule, role, f, p, cfg.size(rule, role, p)}, cfg.data_seed, cfg.cache));
}

std::optional<Factor> factor_arg(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return parse_factor(s);
}

int finish(const ExperimentOutcome& o) {
  std::cout << format_report(o.dir);
  std::cout << o.records << " run records in " << o.dir.string() << '\n';
  if (!o.failures.empty()) {
    std::cerr << o.failures.size() << " branch(es) failed\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structural compositionality experiments"};
  app.require_subcommand(1);

  Common c;
  std::string rule_s, role_s = "base", factor_s, partition_s = "test", base_path, model_path, mask_path, reference,
              dir, name;
  std::vector<std::string> rule_list;
  std::size_t count = 8;
  bool ablated = false;
  std::optional<std::size_t> start_layer;
  std::optional<double> s0, lr;

  auto* gen = app.add_subcommand("gen-data", "Build (or reuse) cached datasets for the config's rules");
  add_common(gen, c);
  gen->add_option("--rule", rule_list, "Restrict to these rules");

  auto* tb = app.add_subcommand("train-base", "Train one base model");
  add_common(tb, c);
  tb->add_option("--rule", rule_s)->required();

  auto* tm = app.add_subcommand("train-mask", "Train one subnetwork mask on a base model");
  add_common(tm, c);
  tm->add_option("--base", base_path, "Base checkpoint")->required();
  tm->add_option("--rule", rule_s)->required();
  tm->add_option("--subroutine", factor_s)->required();
  tm->add_option("--start-layer", start_layer);
  tm->add_option("--s0", s0);
  tm->add_option("--lr", lr);

  auto* ev = app.add_subcommand("evaluate", "Accuracy of a model (optionally masked or ablated) on one dataset");
  add_common(ev, c);
  ev->add_option("--model", model_path)->required();
  ev->add_option("--mask", mask_path, "Subnetwork file");
  ev->add_flag("--ablate", ablated, "Evaluate the complement of --mask");
  ev->add_option("--rule", rule_s)->required();
  ev->add_option("--role", role_s);
  ev->add_option("--subroutine", factor_s);
  ev->add_option("--partition", partition_s);

  auto* se = app.add_subcommand("search", "Mask hyperparameter search for one (model, subroutine)");
  add_common(se, c);
  se->add_option("--base", base_path)->required();
  se->add_option("--rule", rule_s)->required();
  se->add_option("--subroutine", factor_s)->required();

  auto* ra = app.add_subcommand("run-all", "Run or resume a full experiment");
  add_common(ra, c);

  auto* cr = app.add_subcommand("control-random", "Mask pipeline on random models with a standard run's configs");
  add_common(cr, c);
  cr->add_option("--reference", reference, "Completed standard experiment directory");
  cr->add_option("--name", name, "Experiment name (default <name>_control)");

  auto* pv = app.add_subcommand("pruned-variant", "Prune the standard run's base models, then rerun the analysis");
  add_common(pv, c);
  pv->add_option("--reference", reference, "Completed standard experiment directory");
  pv->add_option("--name", name, "Experiment name (default <name>_pruned)");

  auto* an = app.add_subcommand("analyze", "Regenerate report.json and summary.csv from an experiment directory");
  add_common(an, c);
  an->add_option("dir", dir)->required();

  auto* rp = app.add_subcommand("report", "Print the summary of an analyzed experiment");
  add_common(rp, c);
  rp->add_option("dir", dir)->required();

  auto* ex = app.add_subcommand("export-stimuli", "Write example stimuli (PGM images or sentences)");
  add_common(ex, c);
  ex->add_option("--rule", rule_s)->required();
  ex->add_option("--role", role_s);
  ex->add_option("--subroutine", factor_s);
  ex->add_option("--partition", partition_s);
  ex->add_option("--count", count)->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg = resolve(c);

    if (*gen) {
      std::vector<Rule> rules = cfg.rules;
      if (!rule_list.empty()) {
        rules.clear();
        for (const auto& r : rule_list) rules.push_back(parse_rule(r));
      }
      for (Rule r : rules)
        for (Role role : {Role::Base, Role::MaskTrain, Role::TestTarget, Role::TestOther}) {
          std::vector<std::optional<Factor>> subs;
          if (role == Role::Base)
            subs.push_back(std::nullopt);
          else
            for (Factor f : rule_factors(r)) subs.push_back(f);
          for (const auto& f : subs)
            for (Partition p : kAllPartitions) {
              if (cfg.size(r, role, p) == 0) continue;
              const TaskSpec t{r, role, f, p, cfg.size(r, role, p)};
              const Dataset ds = cached_dataset(t, cfg.data_seed, cfg.cache);
              if (!c.out.empty()) save_dataset(ds, fs::path(c.out) / (t.name() + ".jsonl"));
              std::cout << t.name() << ' ' << ds.size() << '\n';
            }
        }
      return 0;
    }

    if (*tb) {
      const Rule rule = parse_rule(rule_s);
      const std::uint64_t seed = first_seed(cfg);
      TrainConfig t = cfg.train;
      t.seed = derive_seed(seed, "base.shuffle", {static_cast<std::uint64_t>(rule)});
      const Model init = make_model(architecture_for(rule_domain(rule)),
                                    derive_seed(seed, "base.init", {static_cast<std::uint64_t>(rule)}));
      const fs::path out = c.out.empty() ? fs::path("base.ckpt") : fs::path(c.out);
      try {
        const TrainResult r = train_base(init, load(cfg, rule, Role::Base, std::nullopt, Partition::Train),
                                         load(cfg, rule, Role::Base, std::nullopt, Partition::Val),
                                         load(cfg, rule, Role::Base, std::nullopt, Partition::Test), t);
        save_checkpoint(r.model, out,
                        "{\"config_hash\":\"" + cfg.hash() + "\",\"seed\":" + std::to_string(seed) + ",\"rule\":\"" +
                            to_string(rule) + "\"}");
        std::cout << "best epoch " << r.best_epoch << "  val " << r.val_acc << "  test " << r.test_acc << '\n';
        return 0;
      } catch (const BaseModelBelowThreshold& e) {
        std::cerr << e.what() << '\n';
        return 1;
      }
    }

    if (*tm) {
      const Rule rule = parse_rule(rule_s);
      const Factor f = parse_factor(factor_s);
      const Model base = load_checkpoint(base_path);
      MaskConfig m = cfg.mask;
      if (start_layer) m.start_layer = *start_layer;
      if (s0) m.s0 = *s0;
      if (lr) m.lr = *lr;
      m.validate(base);
      MaskTrainResult r = train_mask(base, load(cfg, rule, Role::MaskTrain, f, Partition::Train), m, first_seed(cfg));
      r.subnet.subroutine = to_string(f);
      r.subnet.base_id = base_path;
      const fs::path out = c.out.empty() ? fs::path(to_string(f) + ".mask") : fs::path(c.out);
      save_subnetwork(r.subnet, out);
      const Model kept = apply_subnetwork(base, r.subnet), abl = ablate(base, r.subnet);
      std::cout << "active " << r.subnet.active() << '/' << r.subnet.total() << '\n'
                << "own      " << evaluate(kept, load(cfg, rule, Role::MaskTrain, f, Partition::Test)) << '\n'
                << "sub  T/O " << evaluate(kept, load(cfg, rule, Role::TestTarget, f, Partition::Test)) << ' '
                << evaluate(kept, load(cfg, rule, Role::TestOther, f, Partition::Test)) << '\n'
                << "abl  T/O " << evaluate(abl, load(cfg, rule, Role::TestTarget, f, Partition::Test)) << ' '
                << evaluate(abl, load(cfg, rule, Role::TestOther, f, Partition::Test)) << '\n';
      return 0;
    }

    if (*ev) {
      Model model = load_checkpoint(model_path);
      if (!mask_path.empty()) {
        const Subnetwork s = load_subnetwork(mask_path);
        model = ablated ? ablate(model, s) : apply_subnetwork(model, s);
      } else if (ablated) {
        throw ConfigError("--ablate needs --mask");
      }
      const Rule rule = parse_rule(rule_s);
      std::cout << evaluate(model, load(cfg, rule, parse_role(role_s), factor_arg(factor_s), parse_partition(partition_s)))
                << '\n';
      return 0;
    }

    if (*se) {
      const Rule rule = parse_rule(rule_s);
      const Factor f = parse_factor(factor_s);
      const Model base = load_checkpoint(base_path);
      const auto mt = load(cfg, rule, Role::MaskTrain, f, Partition::Train);
      const auto mv = load(cfg, rule, Role::MaskTrain, f, Partition::Val);
      const auto tv = load(cfg, rule, Role::TestTarget, f, Partition::Val);
      const auto ov = load(cfg, rule, Role::TestOther, f, Partition::Val);
      const fs::path out = c.out.empty() ? fs::path("search.csv") : fs::path(c.out);
      try {
        const SearchResult r =
            hyperparameter_search(base, cfg.search_space(), {&mt, &mv, &tv, &ov}, first_seed(cfg), cfg.jobs, cfg.gate);
        write_search_table(r.table, out);
        std::cout << "best " << r.best << ": " << describe(r.table[r.best].config) << "  score " << r.table[r.best].score
                  << '\n';
        return 0;
      } catch (const SearchExhausted& e) {
        write_search_table(e.table(), out);
        std::cerr << e.what() << '\n';
        return 1;
      }
    }

    if (*ra) return finish(run_experiment(cfg));

    if (*cr || *pv) {
      const bool control = cr->parsed();
      cfg.mode = control ? ExperimentMode::RandomControl : ExperimentMode::PrunedBase;
      if (!reference.empty()) cfg.reference = reference;
      if (cfg.reference.empty()) cfg.reference = cfg.dir();
      cfg.name = name.empty() ? cfg.name + (control ? "_control" : "_pruned") : name;
      return finish(run_experiment(cfg));
    }

    if (*an) {
      write_report(dir);
      std::cout << format_report(dir);
      return 0;
    }

    if (*rp) {
      std::cout << format_report(dir);
      return 0;
    }

    if (*ex) {
      const Rule rule = parse_rule(rule_s);
      const TaskSpec t{rule, parse_role(role_s), factor_arg(factor_s), parse_partition(partition_s), count};
      t.validate();
      const Dataset ds = build_dataset(t, cfg.data_seed);
      const fs::path out = c.out.empty() ? fs::path("stimuli") : fs::path(c.out);
      fs::create_directories(out);
      std::ofstream index(out / "index.txt");
      index << "# " << t.name() << " data_seed " << cfg.data_seed << '\n';
      for (std::size_t i = 0; i < ds.size(); ++i) {
        index << "example " << i << " odd " << ds.odd_index(i) << '\n';
        for (std::size_t s = 0; s < 4; ++s) {
          if (ds.domain() == Domain::Vision) {
            const std::string file = "ex" + std::to_string(i) + "_s" + std::to_string(s) + ".pgm";
            write_pgm(ds.vision[i].stimuli[s], out / file);
            index << "  " << file << '\n';
          } else {
            index << "  " << ds.language[i].stimuli[s].text() << '\n';
          }
        }
      }
      std::cout << "wrote " << ds.size() << " examples to " << out.string() << '\n';
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DatasetIoError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
