#include "compostruct/dataset.hpp"

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <unistd.h>

#include <json.hpp>

namespace compostruct {

using nlohmann::json;
namespace fs = std::filesystem;

std::size_t Dataset::odd_index(std::size_t i) const {
  return domain() == Domain::Vision ? vision.at(i).odd_index : language.at(i).odd_index;
}

namespace {

std::uint64_t subroutine_tag(const TaskSpec& t) { return t.subroutine ? static_cast<std::uint64_t>(*t.subroutine) + 1 : 0; }

const language::LanguageGenerator& language_generator(Rule rule) {
  static std::mutex mu;
  static std::map<Rule, std::unique_ptr<language::LanguageGenerator>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[rule];
  if (!slot) slot = std::make_unique<language::LanguageGenerator>(rule);
  return *slot;
}

const char* kind_name(vision::ShapeKind k) { return k == vision::ShapeKind::Circle ? "circle" : "square"; }

vision::ShapeKind parse_kind(const std::string& s) {
  if (s == "circle") return vision::ShapeKind::Circle;
  if (s == "square") return vision::ShapeKind::Square;
  throw DatasetIoError("unknown shape kind '" + s + "'");
}

std::array<const char*, 2> feature_names(Rule rule) {
  if (language::family_of(rule) == language::TaskFamily::SubjectVerb) return {"subject_number", "verb_number"};
  return {"antecedent_number", "pronoun_number"};
}

json scene_to_json(const vision::VisionScene& s) {
  json shapes = json::array();
  for (const auto& sh : s.shapes)
    shapes.push_back({{"kind", kind_name(sh.kind)}, {"x", sh.x}, {"y", sh.y}, {"size", sh.size}});
  return {{"shapes", shapes},
          {"labels", {{"inside", s.labels.inside}, {"contact", s.labels.contact}, {"count", s.labels.count}}},
          {"raster_rle", rle_encode(vision::render(s))}};
}

vision::VisionScene scene_from_json(const json& j) {
  vision::VisionScene s;
  for (const auto& sh : j.at("shapes"))
    s.shapes.push_back({parse_kind(sh.at("kind")), sh.at("x"), sh.at("y"), sh.at("size")});
  const auto& l = j.at("labels");
  s.labels = {l.at("inside"), l.at("contact"), l.at("count")};
  if (vision::compute_labels(s.shapes, s.grid_size) != s.labels)
    throw DatasetIoError("stored labels disagree with the geometric predicates");
  return s;
}

json sentence_to_json(const language::SentenceStimulus& s, Rule rule) {
  const auto names = feature_names(rule);
  return {{"tokens", s.tokens},
          {"surface", s.surface},
          {"features", {{names[0], language::to_string(s.features[0])}, {names[1], language::to_string(s.features[1])}}}};
}

language::SentenceStimulus sentence_from_json(const json& j, Rule rule) {
  const auto names = feature_names(rule);
  language::SentenceStimulus s;
  s.tokens = j.at("tokens").get<std::vector<std::size_t>>();
  s.surface = j.at("surface").get<std::vector<std::string>>();
  const auto& f = j.at("features");
  s.features = {language::parse_number(f.at(names[0]).get<std::string>()),
                language::parse_number(f.at(names[1]).get<std::string>())};
  if (s.tokens.size() != language::kMaxLength) throw DatasetIoError("token sequence has the wrong length");
  return s;
}

json task_json(const TaskSpec& t) {
  return {{"rule", to_string(t.rule)},
          {"role", to_string(t.role)},
          {"subroutine", t.subroutine ? json(to_string(*t.subroutine)) : json(nullptr)},
          {"partition", to_string(t.partition)},
          {"size", t.size}};
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetIoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetIoError("cannot write " + path.string());
  out << bytes;
  if (!out) throw DatasetIoError("write failed for " + path.string());
}

}  // namespace

Dataset build_dataset(const TaskSpec& task, std::uint64_t seed) {
  task.validate();
  Dataset ds{task, seed, {}, {}};
  Rng rng(seed, "dataset",
          {static_cast<std::uint64_t>(task.rule), static_cast<std::uint64_t>(task.role), subroutine_tag(task),
           static_cast<std::uint64_t>(task.partition)});
  if (ds.domain() == Domain::Vision) {
    ds.vision.reserve(task.size);
    for (std::size_t i = 0; i < task.size; ++i) ds.vision.push_back(vision::generate_example(task, rng));
  } else {
    const auto& gen = language_generator(task.rule);
    ds.language.reserve(task.size);
    for (std::size_t i = 0; i < task.size; ++i) ds.language.push_back(gen.generate_example(task, rng));
  }
  return ds;
}

std::vector<std::uint32_t> rle_encode(const vision::Bitmap& bitmap) {
  std::vector<std::uint32_t> runs;
  std::uint8_t current = 0;
  std::uint32_t length = 0;
  for (std::uint8_t px : bitmap) {
    const std::uint8_t v = px ? 1 : 0;
    if (v != current) {
      runs.push_back(length);
      current = v;
      length = 0;
    }
    ++length;
  }
  runs.push_back(length);
  return runs;
}

vision::Bitmap rle_decode(const std::vector<std::uint32_t>& runs, std::size_t pixels) {
  vision::Bitmap out;
  out.reserve(pixels);
  std::uint8_t v = 0;
  for (std::uint32_t r : runs) {
    if (out.size() + r > pixels) throw DatasetIoError("run-length data overflows the raster");
    out.insert(out.end(), r, v);
    v ^= 1;
  }
  if (out.size() != pixels)
    throw DatasetIoError("run-length data covers " + std::to_string(out.size()) + " of " + std::to_string(pixels) +
                         " pixels");
  return out;
}

void save_dataset(const Dataset& ds, const fs::path& path) {
  std::string lines;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    json ex = task_json(ds.task);
    ex.erase("partition");
    ex.erase("size");
    json stimuli = json::array();
    if (ds.domain() == Domain::Vision) {
      for (const auto& s : ds.vision[i].stimuli) stimuli.push_back(scene_to_json(s));
      ex["n"] = ds.vision[i].n;
    } else {
      for (const auto& s : ds.language[i].stimuli) stimuli.push_back(sentence_to_json(s, ds.task.rule));
      ex["n"] = 0;
    }
    ex["stimuli"] = std::move(stimuli);
    ex["odd_index"] = ds.odd_index(i);
    lines += ex.dump();
    lines += '\n';
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file(path, lines);

  json meta = {{"task", task_json(ds.task)},
               {"seed", ds.seed},
               {"generator", kGeneratorVersion},
               {"examples", ds.size()},
               {"base_violators", "uniform over admissible violating cells"}};
  if (ds.domain() == Domain::Vision) {
    meta["grid_size"] = vision::kGridSize;
  } else {
    meta["max_length"] = language::kMaxLength;
    meta["vocabulary"] = language::Vocabulary::builtin().tokens();
    meta["sentence_split"] = "fnv1a64(text) mod 10: 0-7 train, 8 val, 9 test";
  }
  write_file(fs::path(path.string() + ".meta.json"), meta.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& path) {
  const json meta = json::parse(read_file(fs::path(path.string() + ".meta.json")));
  Dataset ds;
  const auto& t = meta.at("task");
  ds.task.rule = parse_rule(t.at("rule").get<std::string>());
  ds.task.role = parse_role(t.at("role").get<std::string>());
  if (!t.at("subroutine").is_null()) ds.task.subroutine = parse_factor(t.at("subroutine").get<std::string>());
  ds.task.partition = parse_partition(t.at("partition").get<std::string>());
  ds.task.size = t.at("size");
  ds.seed = meta.at("seed");

  std::istringstream in(read_file(path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json ex = json::parse(line);
      const std::size_t odd = ex.at("odd_index");
      if (odd > 3) throw DatasetIoError("odd_index out of range");
      const auto& st = ex.at("stimuli");
      if (st.size() != 4) throw DatasetIoError("expected 4 stimuli");
      if (ds.domain() == Domain::Vision) {
        vision::VisionExample v;
        for (std::size_t k = 0; k < 4; ++k) v.stimuli[k] = scene_from_json(st[k]);
        v.odd_index = odd;
        v.n = ex.at("n");
        if (vision::recompute_odd_index(v, ds.task) != odd) throw DatasetIoError("odd_index disagrees with the predicates");
        ds.vision.push_back(std::move(v));
      } else {
        language::LanguageExample l;
        for (std::size_t k = 0; k < 4; ++k) l.stimuli[k] = sentence_from_json(st[k], ds.task.rule);
        l.odd_index = odd;
        if (language::recompute_odd_index(l, ds.task) != odd)
          throw DatasetIoError("odd_index disagrees with the agreement features");
        ds.language.push_back(std::move(l));
      }
    } catch (const json::exception& e) {
      throw DatasetIoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const std::runtime_error& e) {
      throw DatasetIoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (ds.size() != ds.task.size)
    throw DatasetIoError(path.string() + ": expected " + std::to_string(ds.task.size) + " examples, found " +
                         std::to_string(ds.size()));
  return ds;
}

fs::path default_cache_dir() {
  if (const char* env = std::getenv("COMPOSTRUCT_CACHE"); env && *env) return fs::path(env);
  return fs::path(".compostruct_cache");
}

fs::path cache_path(const TaskSpec& task, std::uint64_t seed, const fs::path& cache_dir) {
  return cache_dir / to_string(task.rule) /
         (task.name() + ".n" + std::to_string(task.size) + ".s" + std::to_string(seed) + "." + kGeneratorVersion +
          ".jsonl");
}

Dataset cached_dataset(const TaskSpec& task, std::uint64_t seed, const std::optional<fs::path>& cache_dir) {
  const fs::path path = cache_path(task, seed, cache_dir.value_or(default_cache_dir()));
  if (fs::exists(path) && fs::exists(path.string() + ".meta.json")) return load_dataset(path);
  Dataset ds = build_dataset(task, seed);
  // Unique temp names keep concurrent builders of the same file from clobbering each other.
  static std::atomic<std::uint64_t> counter{0};
  const std::string suffix = ".tmp." + std::to_string(::getpid()) + "." +
                             std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())) + "." +
                             std::to_string(counter++);
  const fs::path tmp = path.string() + suffix;
  save_dataset(ds, tmp);
  fs::rename(tmp.string() + ".meta.json", path.string() + ".meta.json");
  fs::rename(tmp, path);
  return ds;
}

void write_pgm(const vision::VisionScene& scene, const fs::path& path) {
  const vision::Bitmap bm = vision::render(scene);
  std::ostringstream out;
  out << "P2\n" << scene.grid_size << ' ' << scene.grid_size << "\n255\n";
  for (int y = 0; y < scene.grid_size; ++y) {
    for (int x = 0; x < scene.grid_size; ++x) {
      if (x) out << ' ';
      out << (bm[static_cast<std::size_t>(y * scene.grid_size + x)] ? 255 : 0);
    }
    out << '\n';
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file(path, out.str());
}

std::size_t default_size(Rule rule, Role role, Partition partition) {
  const bool test_role = role == Role::TestTarget || role == Role::TestOther;
  const auto pick = [&](std::size_t train, std::size_t val, std::size_t test, std::size_t test_val,
                        std::size_t test_test) -> std::size_t {
    if (test_role) return partition == Partition::Train ? 0 : partition == Partition::Val ? test_val : test_test;
    return partition == Partition::Train ? train : partition == Partition::Val ? val : test;
  };
  switch (rule) {
    case Rule::InsideContact:
    case Rule::NumberContact:
    case Rule::InsideNumber:
      return pick(role == Role::Base ? 10000 : 5000, 500, 1000, 500, 1000);
    case Rule::SvSingular:
    case Rule::SvPlural:
      return pick(9500, 500, 1000, 300, 300);
    case Rule::AnaphoraSingular:
    case Rule::AnaphoraPlural:
      return pick(2500, 200, 200, 200, 200);
  }
  return 0;
}

EncodedDataset encode(const Dataset& ds) {
  EncodedDataset e;
  e.domain = ds.domain();
  e.count = ds.size();
  e.width = e.domain == Domain::Vision ? static_cast<std::size_t>(vision::kGridSize * vision::kGridSize)
                                       : language::kMaxLength;
  e.data.reserve(e.count * 4 * e.width);
  e.odd.reserve(e.count);
  for (std::size_t i = 0; i < e.count; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      if (e.domain == Domain::Vision) {
        const auto bm = vision::render(ds.vision[i].stimuli[k]);
        e.data.insert(e.data.end(), bm.begin(), bm.end());
      } else {
        const auto& t = ds.language[i].stimuli[k].tokens;
        e.data.insert(e.data.end(), t.begin(), t.end());
      }
    }
    e.odd.push_back(ds.odd_index(i));
  }
  return e;
}

}  // namespace compostruct
