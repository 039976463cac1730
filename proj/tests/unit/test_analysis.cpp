#include <cmath>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "compostruct/analysis.hpp"
#include "doctest.h"

using namespace compostruct;
namespace fs = std::filesystem;

namespace {

Subnetwork masks_of(std::vector<std::vector<std::uint8_t>> m) {
  Subnetwork s;
  for (std::size_t k = 0; k < m.size(); ++k) {
    s.param_index.push_back(2 * k);
    s.shapes.push_back({m[k].size()});
  }
  s.masks = std::move(m);
  return s;
}

RunRecord record(const std::string& sub, double st, double so, double at, double ao, std::size_t repeat = 0) {
  RunRecord r;
  r.rule = "InsideContact";
  r.subroutine = sub;
  r.seed = 1;
  r.repeat = repeat;
  r.base_id = "b";
  r.config = "c";
  r.acc_sub_target = st;
  r.acc_sub_other = so;
  r.acc_abl_target = at;
  r.acc_abl_other = ao;
  r.active_per_tensor = {3, 4};
  r.total_per_tensor = {10, 10};
  return r;
}

}  // namespace

TEST_CASE("clamp") {
  CHECK(clamp_accuracy(0.10) == 0.25);
  CHECK(clamp_accuracy(0.97) == 0.97);
  CHECK(clamp_accuracy(1.0) == 1.0);
  CHECK(clamp_accuracy(0.25) == 0.25);
}

TEST_CASE("difference metrics") {
  auto d = difference_metrics(record("Inside", 1.0, 0.25, 0.5, 0.5));
  CHECK(d.delta_sub == 0.75);
  d = difference_metrics(record("Inside", 0.5, 0.5, 0.25, 1.0));
  CHECK(d.delta_abl == -0.75);
  d = difference_metrics(record("Inside", 0.6, 0.6, 0.6, 0.6));
  CHECK(d.delta_sub == 0.0);
  CHECK(d.delta_abl == 0.0);
  d = difference_metrics(record("Inside", 0.95, 0.0, 0.1, 0.9));
  CHECK(d.delta_sub == doctest::Approx(0.70).epsilon(1e-12));
  CHECK(d.delta_abl == doctest::Approx(-0.65).epsilon(1e-12));
  CHECK_THROWS_AS(difference_metrics(record("Inside", 1.2, 0.5, 0.5, 0.5)), ConfigError);
  CHECK_THROWS_AS(difference_metrics(record("Inside", 0.5, 0.5, std::nan(""), 0.5)), ConfigError);
}

TEST_CASE("iou") {
  const auto a = masks_of({{1, 1, 0, 0}, {1, 0}});
  CHECK(iou_per_layer(a, a) == std::vector<double>{1.0, 1.0});
  const auto b = masks_of({{0, 0, 1, 1}, {0, 1}});
  CHECK(iou_per_layer(a, b) == std::vector<double>{0.0, 0.0});
  // |A & B| = 1, |A | B| = 4
  const auto c = masks_of({{1, 1, 1, 0}, {0, 0}});
  const auto d = masks_of({{1, 0, 0, 1}, {0, 0}});
  const auto iou = iou_per_layer(c, d);
  CHECK(iou[0] == 0.25);
  CHECK(iou[1] == 1.0);
  CHECK(iou_per_layer(d, c) == iou);
  CHECK_THROWS_AS(iou_per_layer(a, masks_of({{1, 1, 0, 0}})), ConfigError);
  CHECK_THROWS_AS(iou_per_layer(a, masks_of({{1, 1, 0}, {1, 0}})), ConfigError);

  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    std::vector<std::uint8_t> x(30), y(30);
    for (auto& v : x) v = rng.coin();
    for (auto& v : y) v = rng.coin();
    const double v = iou_per_layer(masks_of({x}), masks_of({y}))[0];
    CHECK((v >= 0.0 && v <= 1.0));
  }
}

TEST_CASE("intersection") {
  const auto a = masks_of({{1, 1, 0, 1}});
  CHECK(intersect_masks({a, a}).masks == a.masks);
  CHECK(intersect_masks({a, masks_of({{0, 0, 0, 0}})}).active() == 0);
  const auto b = masks_of({{1, 0, 1, 1}}), c = masks_of({{1, 1, 1, 1}});
  const auto i = intersect_masks({a, b, c});
  CHECK(i.masks[0] == std::vector<std::uint8_t>{1, 0, 0, 1});
  CHECK(i.active() <= std::min({a.active(), b.active(), c.active()}));
  CHECK_THROWS_AS(intersect_masks({}), ConfigError);
}

TEST_CASE("sparsity rows") {
  auto s = masks_of({{0, 0, 0}, {0, 0}});
  s.subroutine = "Contact";
  CHECK(sparsity_row(s, "InsideContact", "m", 0).active == 0);
  for (auto& m : s.masks) std::fill(m.begin(), m.end(), 1);
  const auto r = sparsity_row(s, "InsideContact", "m", 2);
  CHECK(r.active == r.total);
  CHECK(r.total == 5);
  CHECK(sparsity_csv({r}) == "rule,subroutine,model,repeat,start_layer,active,total\nInsideContact,Contact,m,2,0,5,5\n");
}

TEST_CASE("summaries") {
  SUBCASE("nine compositional runs") {
    std::vector<RunRecord> rs;
    for (std::size_t i = 0; i < 9; ++i) rs.push_back(record("Inside", 0.9, 0.3, 0.3, 0.8, i));
    const auto g = summarize(rs);
    REQUIRE(g.size() == 1);
    CHECK(g[0].signature);
    CHECK(g[0].positive_sub == 9);
    CHECK(g[0].negative_abl == 9);
    CHECK(g[0].runs == 9);
    CHECK(g[0].verdict == "compositional");
    CHECK(g[0].std_delta_sub == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("subroutine found but not modular") {
    std::vector<RunRecord> rs{record("Number", 0.9, 0.3, 0.5, 0.5), record("Number", 0.8, 0.3, 0.52, 0.5)};
    const auto g = summarize(rs);
    CHECK_FALSE(g[0].signature);
    CHECK(g[0].verdict == "subroutine found, not modular");
    CHECK(std::abs(g[0].mean_delta_abl) <= kNearZero);
    // sample std of {0.6, 0.5}
    CHECK(g[0].std_delta_sub == doctest::Approx(std::sqrt(0.005)).epsilon(1e-9));
  }
  SUBCASE("groups in first-appearance order") {
    const auto g = summarize({record("Inside", 0.3, 0.9, 0.5, 0.5), record("Contact", 0.9, 0.3, 0.3, 0.9),
                              record("Inside", 0.3, 0.9, 0.5, 0.5)});
    REQUIRE(g.size() == 2);
    CHECK(g[0].subroutine == "Inside");
    CHECK(g[0].runs == 2);
    CHECK(g[0].verdict == "no subroutine found");
    CHECK(g[1].subroutine == "Contact");
  }
  CHECK_THROWS_AS(summarize({}), ConfigError);
}

TEST_CASE("summary csv and record round trip") {
  std::vector<RunRecord> rs{record("Inside", 0.9, 0.3, 0.3, 0.8), record("Contact", 0.7, 0.1, 0.2, 0.6, 1)};
  const std::string csv = summary_csv(rs);
  CHECK(csv.substr(0, csv.find('\n')) ==
        "rule,subroutine,seed,repeat,acc_sub_target,acc_sub_other,acc_abl_target,acc_abl_other,delta_sub,delta_abl,"
        "active,total");
  CHECK(csv.find("InsideContact,Contact,1,1,0.7,0.1,0.2,0.6,0.45,-0.35,7,20") != std::string::npos);

  const fs::path p = fs::temp_directory_path() / ("compostruct_test_analysis_" + std::to_string(::getpid()) + ".jsonl");
  {
    std::ofstream out(p);
    for (const auto& r : rs) out << record_to_json(r) << '\n';
  }
  const auto back = read_records(p);
  REQUIRE(back.size() == 2);
  CHECK(record_to_json(back[1]) == record_to_json(rs[1]));
  // Regeneration from persisted records is byte-identical.
  CHECK(summary_csv(back) == csv);
  CHECK_THROWS_AS(record_from_json("{\"rule\": 1}"), DatasetIoError);
  fs::remove(p);
}

TEST_CASE("deltas ignore record order") {
  std::vector<RunRecord> rs;
  Rng rng(3);
  for (std::size_t i = 0; i < 9; ++i)
    rs.push_back(record("Inside", rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform(), i));
  const auto a = summarize(rs);
  std::reverse(rs.begin(), rs.end());
  const auto b = summarize(rs);
  CHECK(a[0].mean_delta_sub == doctest::Approx(b[0].mean_delta_sub).epsilon(1e-12));
  CHECK(a[0].mean_delta_abl == doctest::Approx(b[0].mean_delta_abl).epsilon(1e-12));
}
