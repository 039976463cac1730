#pragma once

// Raster stimuli for the inside / contact / number subroutines.
//
// A scene is a few circle or square outlines on a 32x32 single-channel grid
// (outline 1.0, background 0.0). Labels are never asserted by the sampler:
// they are recomputed from the rendered outlines by the predicates below.
//
//   inside(a, b):  every outline pixel of a lies in the region enclosed by
//                  b's outline (excluding b's outline itself).
//   contact(a, b): some outline pixel of a is within Chebyshev distance 1 of
//                  some outline pixel of b.
//   scene labels:  inside  = some ordered pair is inside,
//                  contact = some pair is in contact,
//                  count   = number of shapes.
//
// Cell table used by sample_scene (factor values not named by a rule are
// held false so they cannot confound it):
//
//   rule           shapes             inside          contact         count
//   InsideContact  2                  requested       requested       2
//   NumberContact  N or M (M != N)    false           pair 0-1        requested
//   InsideNumber   N or M (M != N)    pair 0-1        false           requested
//
// N is drawn from {2..5} per example; M is uniform over {1..6} \ {N}, minus
// 1 when the cell needs a relation to hold.
//
// Geometry: the relation pair (or its anchor shape when the relation is
// absent) sits within 1 pixel of the grid centre. Pairs sampled as apart keep
// an outline distance of at least 3. Number scenes only use shapes of equal
// outline length (16 pixels, plus one 40-pixel container in InsideNumber), and
// their distractors sit anywhere with the same 3-pixel clearance.

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "compostruct/rng.hpp"
#include "compostruct/task.hpp"

namespace compostruct::vision {

inline constexpr int kGridSize = 32;
inline constexpr int kMinShapeSize = 2;
inline constexpr int kMaxCount = 6;
inline constexpr int kMinN = 2;
inline constexpr int kMaxN = 5;
inline constexpr int kRetryBudget = 10000;

enum class ShapeKind { Circle, Square };

struct Shape {
  ShapeKind kind = ShapeKind::Square;
  int x = 0;
  int y = 0;
  /// Radius for circles, half side length for squares.
  int size = kMinShapeSize;

  friend bool operator==(const Shape&, const Shape&) = default;
};

struct Pixel {
  int x = 0;
  int y = 0;
  friend auto operator<=>(const Pixel&, const Pixel&) = default;
};

struct SceneLabels {
  bool inside = false;
  bool contact = false;
  int count = 0;
  friend bool operator==(const SceneLabels&, const SceneLabels&) = default;
};

struct VisionScene {
  int grid_size = kGridSize;
  std::vector<Shape> shapes;
  SceneLabels labels;
};

/// Row-major grid_size x grid_size occupancy.
using Bitmap = std::vector<std::uint8_t>;

/// Outline pixels (sorted, unique). Circles use the midpoint algorithm, so the
/// outline is a closed 8-connected curve.
std::vector<Pixel> outline_pixels(const Shape& s);
/// Shape fits with at least one pixel of margin and has size >= 2.
bool in_bounds(const Shape& s, int grid = kGridSize);
/// Pixels enclosed by the outline: not 4-reachable from the border without crossing it.
Bitmap interior(const Shape& s, int grid = kGridSize);

bool predicate_inside(const Shape& a, const Shape& b, int grid = kGridSize);
bool predicate_contact(const Shape& a, const Shape& b, int grid = kGridSize);
SceneLabels compute_labels(const std::vector<Shape>& shapes, int grid = kGridSize);

Bitmap render(const VisionScene& scene);
/// Raster as doubles (1.0 outline / 0.0 background).
std::vector<double> render_values(const VisionScene& scene);

/// Which cell a scene must realize. Unset relational factors are required false.
struct SceneRequest {
  Rule rule = Rule::InsideContact;
  std::optional<bool> inside;
  std::optional<bool> contact;
  std::optional<bool> number;
  /// Per-example N; only read when `number` is set.
  int n = 0;
};

/// Rejection-samples a scene whose recomputed labels realize `req` exactly.
/// Throws GeneratorError naming the cell after kRetryBudget failed draws.
VisionScene sample_scene(const SceneRequest& req, Rng& rng);

/// Value of one factor for a scene; Number compares the count to `n`.
bool factor_value(Factor f, const SceneLabels& labels, int n);

struct VisionExample {
  std::array<VisionScene, 4> stimuli;
  std::size_t odd_index = 0;
  /// Shared N for rules with a number factor, 0 otherwise.
  int n = 0;
};

VisionExample generate_example(const TaskSpec& task, Rng& rng);

/// Recomputes labels from the shapes and returns the slot of the single
/// rule violator, or nullopt if there is not exactly one.
std::optional<std::size_t> recompute_odd_index(const VisionExample& ex, const TaskSpec& task);

}  // namespace compostruct::vision
