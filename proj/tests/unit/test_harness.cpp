#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include <json.hpp>

#include "compostruct/harness.hpp"
#include "doctest.h"

using namespace compostruct;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch() {
  static const fs::path root = [] {
    const fs::path p = fs::temp_directory_path() / ("compostruct_test_harness_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ExperimentConfig tiny(const std::string& name) {
  ExperimentConfig c;
  c.name = name;
  c.rules = {Rule::InsideContact};
  c.seeds = {1, 2, 3};
  c.repeats = 3;
  c.base_sizes = {300, 100, 100};
  c.mask_sizes = {150, 100, 100};
  c.test_sizes = {0, 100, 100};
  c.train.max_epochs = 2;
  c.train.patience = 2;
  c.train.threshold = 0.26;
  c.mask.epochs = 2;
  c.learning_rates = {0.01};
  c.inits = {0.05};
  c.start_layers = {2};
  c.gate = 0.0;
  c.out = scratch() / "out";
  c.cache = scratch() / "cache";
  return c;
}

}  // namespace

TEST_CASE("config json") {
  ExperimentConfig c = tiny("cfg");
  c.mode = ExperimentMode::RandomControl;
  c.reference = "ref";
  const ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.hash() == c.hash());

  SUBCASE("out and jobs do not change the hash") {
    ExperimentConfig d = c;
    d.out = "elsewhere";
    d.jobs = 4;
    CHECK(d.hash() == c.hash());
    d.repeats = 2;
    CHECK(d.hash() != c.hash());
  }
  SUBCASE("defaults") {
    const auto d = ExperimentConfig::from_json("{}");
    CHECK(d.rules.size() == 7);
    CHECK(d.seeds == std::vector<std::uint64_t>{1, 2, 3});
    CHECK(d.repeats == 3);
    CHECK(d.mode == ExperimentMode::Standard);
    CHECK(d.gate == 0.9);
    CHECK(d.search_space().learning_rates == std::vector<double>{0.01, 0.0001});
    CHECK(d.search_space().inits == std::vector<double>{0.1, 0.05, 0.0, -0.05});
    CHECK(d.size(Rule::AnaphoraPlural, Role::Base, Partition::Train) == 2500);
  }
  SUBCASE("malformed configs") {
    CHECK_THROWS_AS(ExperimentConfig::from_json("{\"seedz\": [1]}"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json("{\"train\": {\"epochs\": 3}}"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json("{\"repeats\": -1}"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json("{\"rules\": [\"Nope\"]}"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json("{\"mode\": \"other\"}"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json("{oops"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::load(scratch() / "missing.json"), ConfigError);
  }
  SUBCASE("validation") {
    ExperimentConfig d = tiny("v");
    CHECK_NOTHROW(d.validate());
    d.seeds = {1, 1};
    CHECK_THROWS_AS(d.validate(), ConfigError);
    d = tiny("v");
    d.repeats = 0;
    CHECK_THROWS_AS(d.validate(), ConfigError);
    d = tiny("v");
    d.mode = ExperimentMode::PrunedBase;
    CHECK_THROWS_AS(d.validate(), ConfigError);
    d = tiny("v");
    d.name = "../x";
    CHECK_THROWS_AS(d.validate(), ConfigError);
    d = tiny("v");
    d.start_layers = {9};
    CHECK_THROWS_AS(d.validate(), ConfigError);
  }
}

TEST_CASE("standard run, resume, regeneration, parallel fan-out") {
  const ExperimentConfig cfg = tiny("std");
  const auto outcome = run_experiment(cfg);
  CHECK(outcome.failures.empty());
  // 3 seeds x 2 subroutines x 3 repeats
  CHECK(outcome.records == 18);
  const fs::path dir = cfg.dir();
  const json report = json::parse(slurp(dir / "report.json"));
  CHECK(report.at("records").size() == 18);
  CHECK(report.at("groups").size() == 2);
  CHECK(report.at("base_models").size() == 3);
  CHECK(report.at("overlap").size() == 3);
  CHECK(report.at("tags").empty());
  for (auto seed : cfg.seeds) {
    const fs::path sd = dir / "InsideContact" / std::to_string(seed);
    CHECK(fs::exists(sd / "base.ckpt"));
    CHECK(fs::exists(sd / "search.csv"));
    CHECK(fs::exists(sd / "records.jsonl"));
    CHECK(checkpoint_extra(sd / "base.ckpt").find(cfg.hash()) != std::string::npos);
    CHECK(slurp(sd / "search.csv").find(cfg.hash() + "," + std::to_string(seed) + ",Inside,") != std::string::npos);
    for (const auto& r : read_records(sd / "records.jsonl")) CHECK(r.base_id == base_id(cfg.hash(), Rule::InsideContact, seed));
  }
  const std::string rep = slurp(dir / "report.json"), summary = slurp(dir / "summary.csv");
  const fs::path probe = dir / "InsideContact" / "2" / "base.ckpt";
  const auto stamp = fs::last_write_time(probe);

  SUBCASE("rerun does no work and reproduces the report") {
    const auto again = run_experiment(cfg);
    CHECK(again.records == 18);
    CHECK(fs::last_write_time(probe) == stamp);
    CHECK(slurp(dir / "report.json") == rep);
  }
  SUBCASE("a deleted subnetwork is regenerated alone") {
    const fs::path victim = dir / "InsideContact" / "2" / "subnets" / "Contact_r1.mask";
    const fs::path other = dir / "InsideContact" / "2" / "subnets" / "Contact_r0.mask";
    const auto other_stamp = fs::last_write_time(other);
    const std::string bytes = slurp(victim);
    fs::remove(victim);
    run_experiment(cfg);
    CHECK(slurp(victim) == bytes);
    CHECK(fs::last_write_time(other) == other_stamp);
    CHECK(fs::last_write_time(probe) == stamp);
    CHECK(slurp(dir / "report.json") == rep);
  }
  SUBCASE("jobs 4 gives the same report") {
    ExperimentConfig p = cfg;
    p.out = scratch() / "out_jobs4";
    p.jobs = 4;
    run_experiment(p);
    CHECK(slurp(p.dir() / "report.json") == rep);
    CHECK(slurp(p.dir() / "summary.csv") == summary);
  }
  SUBCASE("analyze regenerates from files and checks provenance") {
    write_report(dir);
    CHECK(slurp(dir / "report.json") == rep);
    CHECK(format_report(dir).find("InsideContact") != std::string::npos);
    const fs::path recs = dir / "InsideContact" / "3" / "records.jsonl";
    const std::string original = slurp(recs);
    std::string tampered = original;
    const std::string h = cfg.hash();
    tampered.replace(tampered.find(h), h.size(), std::string(h.size(), '0'));
    std::ofstream(recs, std::ios::trunc) << tampered;
    CHECK_THROWS_AS(write_report(dir), DatasetIoError);
    std::ofstream(recs, std::ios::trunc) << original;
    CHECK_NOTHROW(write_report(dir));
  }
  SUBCASE("a different config in the same directory is refused") {
    ExperimentConfig d = cfg;
    d.repeats = 2;
    CHECK_THROWS_AS(run_experiment(d), ConfigError);
  }
  SUBCASE("random control reuses the chosen configs") {
    ExperimentConfig c = cfg;
    c.name = "std_control";
    c.mode = ExperimentMode::RandomControl;
    c.reference = dir;
    const auto o = run_experiment(c);
    CHECK(o.records == 18);
    const json ctrl = json::parse(slurp(c.dir() / "report.json"));
    CHECK(ctrl.at("tags").at("control") == "random");
    const json ref_man = json::parse(slurp(dir / "manifest.json"));
    const json ctl_man = json::parse(slurp(c.dir() / "manifest.json"));
    for (const char* key : {"InsideContact/1/Inside/search", "InsideContact/3/Contact/search"})
      CHECK(ctl_man.at("stages").at(key).at("chosen") == ref_man.at("stages").at(key).at("chosen"));
    // same schema as the standard report
    for (const auto& [k, _] : report.items()) CHECK(ctrl.contains(k));
  }
  SUBCASE("pruned variant") {
    ExperimentConfig c = cfg;
    c.name = "std_pruned";
    c.mode = ExperimentMode::PrunedBase;
    c.reference = dir;
    c.seeds = {1};
    const auto o = run_experiment(c);
    CHECK(o.failures.empty());
    CHECK(o.records == 6);
    const json rp = json::parse(slurp(c.dir() / "report.json"));
    CHECK(rp.at("tags").at("variant") == "pruned");
    CHECK(rp.at("base_models")[0].at("source") == "pruned");
    CHECK(fs::exists(c.dir() / "InsideContact" / "1" / "prune.csv"));

    ExperimentConfig g = c;
    g.name = "std_pruned_gate";
    g.gate = 1.0;
    const auto failed = run_experiment(g);
    CHECK(failed.records == 0);
    REQUIRE(failed.failures.size() == 1);
    CHECK(failed.failures[0].find("InsideContact/1/base") == 0);
  }
  SUBCASE("control without a reference run") {
    ExperimentConfig c = cfg;
    c.name = "orphan";
    c.mode = ExperimentMode::RandomControl;
    c.reference = scratch() / "nowhere";
    CHECK_THROWS_AS(run_experiment(c), ConfigError);
  }
}

TEST_CASE("gate failures halt only their branch") {
  ExperimentConfig cfg = tiny("gates");
  cfg.seeds = {1};
  cfg.gate = 1.0;
  const auto o = run_experiment(cfg);
  CHECK(o.records == 0);
  CHECK(o.failures.size() == 2);
  const json report = json::parse(slurp(cfg.dir() / "report.json"));
  CHECK(report.at("failures").size() == 2);
  CHECK(report.at("base_models").size() == 1);

  ExperimentConfig b = tiny("base_gate");
  b.seeds = {1};
  b.train.threshold = 1.0;
  const auto ob = run_experiment(b);
  REQUIRE(ob.failures.size() == 1);
  CHECK(ob.failures[0].find("InsideContact/1/base") == 0);
}

TEST_CASE("cleanup") { fs::remove_all(scratch()); }
