#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <unistd.h>

#include "../support/vision_oracle.hpp"
#include "compostruct/dataset.hpp"
#include "doctest.h"

using namespace compostruct;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("compostruct_test_dataset_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("rle round trip") {
  Rng rng(3);
  for (int c = 0; c < 50; ++c) {
    vision::Bitmap bm(1024);
    const double density = rng.uniform();
    for (auto& b : bm) b = rng.uniform() < density ? 1 : 0;
    const auto runs = rle_encode(bm);
    std::size_t total = 0;
    for (auto r : runs) total += r;
    CHECK(total == bm.size());
    CHECK(rle_decode(runs, bm.size()) == bm);
  }
  CHECK(rle_encode(vision::Bitmap{1, 1, 0}) == std::vector<std::uint32_t>{0, 2, 1});
  CHECK(rle_encode(vision::Bitmap{0, 0, 1}) == std::vector<std::uint32_t>{2, 1});
  CHECK_THROWS_AS(rle_decode({2, 1}, 4), DatasetIoError);
}

TEST_CASE("build_dataset is deterministic and sized") {
  TaskSpec t{Rule::InsideContact, Role::Base, std::nullopt, Partition::Train, 40};
  const auto a = build_dataset(t, 17), b = build_dataset(t, 17), c = build_dataset(t, 18);
  CHECK(a.size() == 40);
  const auto pa = scratch("a.jsonl"), pb = scratch("b.jsonl"), pc = scratch("c.jsonl");
  save_dataset(a, pa);
  save_dataset(b, pb);
  save_dataset(c, pc);
  CHECK(slurp(pa) == slurp(pb));
  CHECK(slurp(pa.string() + ".meta.json") == slurp(pb.string() + ".meta.json"));
  CHECK(slurp(pa) != slurp(pc));

  std::size_t lines = 0;
  std::ifstream in(pa);
  for (std::string line; std::getline(in, line);) lines += line.empty() ? 0 : 1;
  CHECK(lines == 40);

  TaskSpec v = t;
  v.partition = Partition::Val;
  CHECK(slurp(pa) != [&] {
    auto p = scratch("v.jsonl");
    save_dataset(build_dataset(v, 17), p);
    return slurp(p);
  }());
}

TEST_CASE("save and load round trip with label audit") {
  for (Rule rule : {Rule::NumberContact, Rule::SvPlural}) {
    TaskSpec t{rule, Role::TestTarget, rule_factors(rule)[0], Partition::Val, 30};
    const auto ds = build_dataset(t, 5);
    const auto p = scratch(to_string(rule) + ".jsonl");
    save_dataset(ds, p);
    const auto back = load_dataset(p);
    CHECK(back.size() == ds.size());
    CHECK(back.task.name() == t.name());
    CHECK(back.seed == 5);
    for (std::size_t i = 0; i < ds.size(); ++i) CHECK(back.odd_index(i) == ds.odd_index(i));
    const auto e1 = encode(ds), e2 = encode(back);
    CHECK(e1.data == e2.data);
    CHECK(e1.odd == e2.odd);
    if (ds.domain() == Domain::Vision)
      for (const auto& ex : back.vision) CHECK(testing::oracle_odd(ex, t) == ex.odd_index);
  }
}

TEST_CASE("load rejects a tampered label") {
  TaskSpec t{Rule::InsideContact, Role::Base, std::nullopt, Partition::Test, 3};
  const auto p = scratch("tamper.jsonl");
  save_dataset(build_dataset(t, 1), p);
  std::string text = slurp(p);
  const auto at = text.find("\"odd_index\":");
  REQUIRE(at != std::string::npos);
  char& digit = text[at + 12];
  digit = digit == '0' ? '1' : '0';
  std::ofstream(p, std::ios::binary) << text;
  CHECK_THROWS_AS(load_dataset(p), DatasetIoError);
  CHECK_THROWS_AS(load_dataset(scratch("missing.jsonl")), DatasetIoError);
}

TEST_CASE("cache") {
  const auto dir = scratch("cache");
  ::setenv("COMPOSTRUCT_CACHE", dir.c_str(), 1);
  CHECK(default_cache_dir() == dir);
  TaskSpec t{Rule::InsideNumber, Role::MaskTrain, Factor::Number, Partition::Val, 12};
  const auto first = cached_dataset(t, 2);
  CHECK(fs::exists(cache_path(t, 2, dir)));
  const auto stamp = fs::last_write_time(cache_path(t, 2, dir));
  const auto second = cached_dataset(t, 2);
  CHECK(fs::last_write_time(cache_path(t, 2, dir)) == stamp);
  CHECK(encode(first).data == encode(second).data);
  CHECK(cache_path(t, 2, dir) != cache_path(t, 3, dir));
  ::unsetenv("COMPOSTRUCT_CACHE");
}

TEST_CASE("pgm export") {
  vision::VisionScene s;
  s.shapes = {{vision::ShapeKind::Square, 8, 8, 3}};
  s.labels = vision::compute_labels(s.shapes);
  const auto p = scratch("scene.pgm");
  write_pgm(s, p);
  std::ifstream in(p);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  CHECK(magic == "P2");
  CHECK(w == 32);
  CHECK(h == 32);
  CHECK(maxv == 255);
  int lit = 0, v = 0, n = 0;
  while (in >> v) {
    ++n;
    lit += v == 255 ? 1 : 0;
    CHECK((v == 0 || v == 255));
  }
  CHECK(n == 1024);
  CHECK(lit == 24);
}

TEST_CASE("default sizes") {
  CHECK(default_size(Rule::SvSingular, Role::Base, Partition::Train) == 9500);
  CHECK(default_size(Rule::SvSingular, Role::TestTarget, Partition::Val) == 300);
  CHECK(default_size(Rule::AnaphoraPlural, Role::MaskTrain, Partition::Test) == 200);
  CHECK(default_size(Rule::InsideContact, Role::TestOther, Partition::Train) == 0);
  CHECK(default_size(Rule::InsideContact, Role::MaskTrain, Partition::Train) == 5000);
}

TEST_CASE("invalid task specs") {
  CHECK_THROWS_AS(build_dataset(TaskSpec{Rule::InsideContact, Role::TestTarget, std::nullopt, Partition::Test, 5}, 1),
                  ConfigError);
  CHECK_THROWS_AS(build_dataset(TaskSpec{Rule::InsideContact, Role::Base, std::nullopt, Partition::Test, 0}, 1),
                  ConfigError);
  CHECK_THROWS_AS(build_dataset(TaskSpec{Rule::SvSingular, Role::MaskTrain, Factor::Inside, Partition::Test, 5}, 1),
                  ConfigError);
}
