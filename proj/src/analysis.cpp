#include "compostruct/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace compostruct {

using nlohmann::json;

double clamp_accuracy(double a) { return std::clamp(a, kChance, 1.0); }

std::size_t RunRecord::active() const {
  std::size_t n = 0;
  for (auto v : active_per_tensor) n += v;
  return n;
}

std::size_t RunRecord::total() const {
  std::size_t n = 0;
  for (auto v : total_per_tensor) n += v;
  return n;
}

Differences difference_metrics(const RunRecord& r) {
  for (double a : {r.acc_sub_target, r.acc_sub_other, r.acc_abl_target, r.acc_abl_other})
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("run record has an accuracy outside [0, 1]");
  return {clamp_accuracy(r.acc_sub_target) - clamp_accuracy(r.acc_sub_other),
          clamp_accuracy(r.acc_abl_target) - clamp_accuracy(r.acc_abl_other)};
}

namespace {

void check_same_layout(const Subnetwork& a, const Subnetwork& b) {
  if (a.param_index != b.param_index) throw ConfigError("masks cover different tensors (different start layers?)");
  for (std::size_t k = 0; k < a.masks.size(); ++k)
    if (a.masks[k].size() != b.masks[k].size()) throw ConfigError("mask tensors differ in size");
}

}  // namespace

std::vector<double> iou_per_layer(const Subnetwork& a, const Subnetwork& b) {
  check_same_layout(a, b);
  std::vector<double> out;
  for (std::size_t k = 0; k < a.masks.size(); ++k) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.masks[k].size(); ++i) {
      const bool x = a.masks[k][i] != 0, y = b.masks[k][i] != 0;
      inter += (x && y) ? 1 : 0;
      uni += (x || y) ? 1 : 0;
    }
    out.push_back(uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni));
  }
  return out;
}

Subnetwork intersect_masks(const std::vector<Subnetwork>& masks) {
  if (masks.empty()) throw ConfigError("intersect_masks: no masks given");
  Subnetwork out = masks.front();
  for (std::size_t j = 1; j < masks.size(); ++j) {
    check_same_layout(out, masks[j]);
    for (std::size_t k = 0; k < out.masks.size(); ++k)
      for (std::size_t i = 0; i < out.masks[k].size(); ++i) out.masks[k][i] &= masks[j].masks[k][i];
  }
  return out;
}

SparsityRow sparsity_row(const Subnetwork& s, const std::string& rule, const std::string& model, std::size_t repeat) {
  return {rule, s.subroutine, model, repeat, s.config.start_layer, s.active(), s.total()};
}

std::string sparsity_csv(const std::vector<SparsityRow>& rows) {
  std::ostringstream out;
  out << "rule,subroutine,model,repeat,start_layer,active,total\n";
  for (const auto& r : rows)
    out << r.rule << ',' << r.subroutine << ',' << r.model << ',' << r.repeat << ',' << r.start_layer << ','
        << r.active << ',' << r.total << '\n';
  return out.str();
}

std::vector<GroupSummary> summarize(const std::vector<RunRecord>& records) {
  if (records.empty()) throw ConfigError("summarize: no run records");
  std::vector<GroupSummary> groups;
  std::map<std::pair<std::string, std::string>, std::vector<Differences>> deltas;
  for (const auto& r : records) {
    auto key = std::make_pair(r.rule, r.subroutine);
    if (!deltas.count(key)) groups.push_back(GroupSummary{.rule = r.rule, .subroutine = r.subroutine});
    deltas[key].push_back(difference_metrics(r));
  }
  for (auto& g : groups) {
    const auto& d = deltas[{g.rule, g.subroutine}];
    const double n = static_cast<double>(d.size());
    g.runs = d.size();
    for (const auto& x : d) {
      g.mean_delta_sub += x.delta_sub / n;
      g.mean_delta_abl += x.delta_abl / n;
      g.positive_sub += x.delta_sub > 0.0 ? 1 : 0;
      g.negative_abl += x.delta_abl < 0.0 ? 1 : 0;
    }
    for (const auto& x : d) {
      g.std_delta_sub += (x.delta_sub - g.mean_delta_sub) * (x.delta_sub - g.mean_delta_sub);
      g.std_delta_abl += (x.delta_abl - g.mean_delta_abl) * (x.delta_abl - g.mean_delta_abl);
    }
    // Sample standard deviation; zero for a single run.
    g.std_delta_sub = d.size() > 1 ? std::sqrt(g.std_delta_sub / (n - 1)) : 0.0;
    g.std_delta_abl = d.size() > 1 ? std::sqrt(g.std_delta_abl / (n - 1)) : 0.0;
    g.signature = g.mean_delta_sub > 0.0 && g.mean_delta_abl < 0.0;
    if (g.signature)
      g.verdict = "compositional";
    else if (g.mean_delta_sub > 0.0)
      g.verdict = "subroutine found, not modular";
    else
      g.verdict = "no subroutine found";
  }
  return groups;
}

std::string summary_csv(const std::vector<RunRecord>& records) {
  std::ostringstream out;
  out.precision(10);
  out << "rule,subroutine,seed,repeat,acc_sub_target,acc_sub_other,acc_abl_target,acc_abl_other,delta_sub,delta_abl,"
         "active,total\n";
  for (const auto& r : records) {
    const Differences d = difference_metrics(r);
    out << r.rule << ',' << r.subroutine << ',' << r.seed << ',' << r.repeat << ',' << r.acc_sub_target << ','
        << r.acc_sub_other << ',' << r.acc_abl_target << ',' << r.acc_abl_other << ',' << d.delta_sub << ','
        << d.delta_abl << ',' << r.active() << ',' << r.total() << '\n';
  }
  return out.str();
}

std::string record_to_json(const RunRecord& r) {
  const json j = {{"rule", r.rule},
                  {"subroutine", r.subroutine},
                  {"seed", r.seed},
                  {"repeat", r.repeat},
                  {"base_id", r.base_id},
                  {"config", r.config},
                  {"acc_sub_target", r.acc_sub_target},
                  {"acc_sub_other", r.acc_sub_other},
                  {"acc_abl_target", r.acc_abl_target},
                  {"acc_abl_other", r.acc_abl_other},
                  {"acc_sub_own", r.acc_sub_own},
                  {"start_layer", r.start_layer},
                  {"active_per_tensor", r.active_per_tensor},
                  {"total_per_tensor", r.total_per_tensor}};
  return j.dump();
}

RunRecord record_from_json(const std::string& line) {
  RunRecord r;
  try {
    const json j = json::parse(line);
    r.rule = j.at("rule");
    r.subroutine = j.at("subroutine");
    r.seed = j.at("seed");
    r.repeat = j.at("repeat");
    r.base_id = j.at("base_id");
    r.config = j.at("config");
    r.acc_sub_target = j.at("acc_sub_target");
    r.acc_sub_other = j.at("acc_sub_other");
    r.acc_abl_target = j.at("acc_abl_target");
    r.acc_abl_other = j.at("acc_abl_other");
    r.acc_sub_own = j.at("acc_sub_own");
    r.start_layer = j.at("start_layer");
    r.active_per_tensor = j.at("active_per_tensor").get<std::vector<std::size_t>>();
    r.total_per_tensor = j.at("total_per_tensor").get<std::vector<std::size_t>>();
  } catch (const json::exception& e) {
    throw DatasetIoError(std::string("bad run record: ") + e.what());
  }
  return r;
}

std::vector<RunRecord> read_records(const std::filesystem::path& jsonl) {
  std::ifstream in(jsonl);
  if (!in) throw DatasetIoError("cannot open " + jsonl.string());
  std::vector<RunRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(record_from_json(line));
  return out;
}

}  // namespace compostruct
