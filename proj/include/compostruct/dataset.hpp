#pragma once

// Odd-one-out datasets: generation, JSON Lines serialization, the on-disk
// cache, and the compact encoding the models train on.
//
// One line per example:
//   {"n":..,"odd_index":..,"role":..,"rule":..,"subroutine":..|null,
//    "stimuli":[4 x stimulus]}
// Vision stimulus:   {"shapes":[{"kind","x","y","size"}],"labels":{..},"raster_rle":[..]}
// Language stimulus: {"tokens":[..],"surface":[..],"features":{..}}
// A sidecar <file>.meta.json records task, seed and generator settings.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "compostruct/language.hpp"
#include "compostruct/task.hpp"
#include "compostruct/vision.hpp"

namespace compostruct {

/// Bumped whenever generator output changes; part of every cache key.
inline constexpr const char* kGeneratorVersion = "g3";

class DatasetIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  TaskSpec task;
  std::uint64_t seed = 0;
  std::vector<vision::VisionExample> vision;
  std::vector<language::LanguageExample> language;

  Domain domain() const { return rule_domain(task.rule); }
  std::size_t size() const { return domain() == Domain::Vision ? vision.size() : language.size(); }
  std::size_t odd_index(std::size_t i) const;
};

/// Deterministic in (task, seed); the stream is derived from rule, role,
/// subroutine and partition so partitions never share draws.
Dataset build_dataset(const TaskSpec& task, std::uint64_t seed);

/// Run lengths of alternating 0/1 pixels, starting with a (possibly empty) 0 run.
std::vector<std::uint32_t> rle_encode(const vision::Bitmap& bitmap);
/// Throws DatasetIoError if runs do not cover exactly `pixels` entries.
vision::Bitmap rle_decode(const std::vector<std::uint32_t>& runs, std::size_t pixels);

/// Writes `path` and `path.meta.json`; byte-identical for identical datasets.
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
/// Reads a dataset back and re-verifies every label and odd_index from the stimuli.
Dataset load_dataset(const std::filesystem::path& path);

/// COMPOSTRUCT_CACHE if set, otherwise ./.compostruct_cache.
std::filesystem::path default_cache_dir();
std::filesystem::path cache_path(const TaskSpec& task, std::uint64_t seed, const std::filesystem::path& cache_dir);
/// Loads from the cache or builds and stores (write to temp, then rename).
Dataset cached_dataset(const TaskSpec& task, std::uint64_t seed,
                       const std::optional<std::filesystem::path>& cache_dir = std::nullopt);

/// Plain-text PGM (P2) of one scene, 0 = background, 255 = outline.
void write_pgm(const vision::VisionScene& scene, const std::filesystem::path& path);

/// Default example counts (train ignored for test_target / test_other roles).
std::size_t default_size(Rule rule, Role role, Partition partition);

/// Stimuli flattened for the models: pixels (0/1) or token ids.
struct EncodedDataset {
  Domain domain = Domain::Vision;
  std::size_t count = 0;
  /// Values per stimulus: grid^2 pixels or kMaxLength token ids.
  std::size_t width = 0;
  std::vector<std::uint16_t> data;
  std::vector<std::size_t> odd;

  const std::uint16_t* stimulus(std::size_t example, std::size_t slot) const {
    return data.data() + (example * 4 + slot) * width;
  }
};

EncodedDataset encode(const Dataset& ds);

}  // namespace compostruct
