#include "compostruct/vision.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace compostruct::vision {

namespace {

// Geometry ranges. Two-shape scenes keep the anchor near the grid centre;
// number scenes spread small shapes over the whole grid.
constexpr int kAnchorJitter = 1;
// Pairs sampled as not touching keep at least this outline distance, so the
// -Contact cells are visibly apart (the predicate itself still uses <= 1).
constexpr int kClearance = 3;
constexpr int kOuterMin = 6;
constexpr int kOuterMax = 11;
constexpr int kPairMin = 3;
constexpr int kPairMax = 7;
// Number scenes use shapes of equal outline length so total ink tracks the
// count: a "counted" shape is a half-2 square or radius-3 circle (16 pixels),
// a container is a half-5 square or radius-7 circle (40 pixels).
constexpr int kCountedSquare = 2;
constexpr int kCountedCircle = 3;
constexpr int kContainerSquare = 5;
constexpr int kContainerCircle = 7;
constexpr int kExtraTries = 200;

std::size_t idx(int x, int y, int grid) { return static_cast<std::size_t>(y * grid + x); }

ShapeKind random_kind(Rng& rng) { return rng.coin() ? ShapeKind::Circle : ShapeKind::Square; }

Shape random_shape(Rng& rng, int min_size, int max_size) {
  Shape s;
  s.kind = random_kind(rng);
  s.size = rng.range(min_size, max_size);
  return s;
}

Shape counted_shape(Rng& rng) {
  Shape s;
  s.kind = random_kind(rng);
  s.size = s.kind == ShapeKind::Square ? kCountedSquare : kCountedCircle;
  return s;
}

Shape container_shape(Rng& rng) {
  Shape s;
  s.kind = random_kind(rng);
  s.size = s.kind == ShapeKind::Square ? kContainerSquare : kContainerCircle;
  return s;
}

void place_uniform(Shape& s, Rng& rng) {
  s.x = rng.range(1 + s.size, kGridSize - 2 - s.size);
  s.y = rng.range(1 + s.size, kGridSize - 2 - s.size);
}

void place_near_centre(Shape& s, Rng& rng) {
  const int lo = 1 + s.size, hi = kGridSize - 2 - s.size;
  const int c = kGridSize / 2;
  s.x = std::clamp(c + rng.range(-kAnchorJitter, kAnchorJitter), lo, hi);
  s.y = std::clamp(c + rng.range(-kAnchorJitter, kAnchorJitter), lo, hi);
}

/// In-bounds placements of `mover` along a ray from `from`, one per distinct rounded point.
std::vector<Shape> ray_placements(const Shape& from, Shape mover, double angle, int max_t) {
  std::vector<Shape> out;
  const double dx = std::cos(angle), dy = std::sin(angle);
  for (int t = 0; t <= max_t; ++t) {
    mover.x = from.x + static_cast<int>(std::lround(t * dx));
    mover.y = from.y + static_cast<int>(std::lround(t * dy));
    if (!in_bounds(mover)) continue;
    if (!out.empty() && out.back().x == mover.x && out.back().y == mover.y) continue;
    out.push_back(mover);
  }
  return out;
}

bool all_inside(const std::vector<Pixel>& pixels, const Bitmap& region, int grid) {
  return std::all_of(pixels.begin(), pixels.end(), [&](const Pixel& p) { return region[idx(p.x, p.y, grid)] != 0; });
}

Bitmap dilated_outline(const Shape& s, int grid) {
  Bitmap out(static_cast<std::size_t>(grid * grid), 0);
  for (const auto& p : outline_pixels(s))
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int x = p.x + dx, y = p.y + dy;
        if (x >= 0 && y >= 0 && x < grid && y < grid) out[idx(x, y, grid)] = 1;
      }
  return out;
}

int outline_distance(const Shape& a, const Shape& b) {
  int best = 1 << 20;
  const auto pb = outline_pixels(b);
  for (const auto& p : outline_pixels(a))
    for (const auto& q : pb) best = std::min(best, std::max(std::abs(p.x - q.x), std::abs(p.y - q.y)));
  return best;
}

// Accepted range of outline distances for a sampled pair.
struct Gap {
  int min = 0;
  int max = 1 << 20;
};

constexpr Gap kTouching{0, 1};
constexpr Gap kAdjacent{1, 1};
constexpr Gap kApart{kClearance};
constexpr Gap kNotTouching{2};

bool within(const Shape& a, const Shape& b, Gap gap) {
  const int d = outline_distance(a, b);
  return d >= gap.min && d <= gap.max;
}

double random_angle(Rng& rng) { return rng.uniform(0.0, 2.0 * std::numbers::pi); }

void place(Shape& s, bool centred, Rng& rng) {
  if (centred)
    place_near_centre(s, rng);
  else
    place_uniform(s, rng);
}

/// `outer` placed, then `inner` slid along a random ray inside it.
std::optional<std::vector<Shape>> inside_pair(Rng& rng, Shape outer, Shape inner, Gap gap, bool centred) {
  place(outer, centred, rng);
  const Bitmap region = interior(outer);
  std::vector<Shape> candidates;
  for (const auto& c : ray_placements(outer, inner, random_angle(rng), outer.size)) {
    if (!all_inside(outline_pixels(c), region, kGridSize)) continue;
    if (within(c, outer, gap)) candidates.push_back(c);
  }
  if (candidates.empty()) return std::nullopt;
  return std::vector<Shape>{outer, rng.pick<Shape>(candidates)};
}

/// Two shapes, neither inside the other, at an outline distance within `gap`.
std::optional<std::vector<Shape>> outside_pair(Rng& rng, Shape a, Shape b, Gap gap, bool centred) {
  place(a, centred, rng);
  std::vector<Shape> candidates;
  for (const auto& c : ray_placements(a, b, random_angle(rng), a.size + b.size + 8)) {
    if (predicate_inside(c, a) || predicate_inside(a, c)) continue;
    if (within(c, a, gap)) candidates.push_back(c);
  }
  if (candidates.empty()) return std::nullopt;
  return std::vector<Shape>{a, rng.pick<Shape>(candidates)};
}

bool unrelated(const Shape& s, const std::vector<Shape>& others) {
  return std::none_of(others.begin(), others.end(), [&](const Shape& o) {
    return outline_distance(s, o) < kClearance || predicate_inside(s, o) || predicate_inside(o, s);
  });
}

/// Adds small shapes that touch nothing and contain nothing until `shapes` has `count` members.
bool add_unrelated_shapes(std::vector<Shape>& shapes, int count, Rng& rng) {
  while (static_cast<int>(shapes.size()) < count) {
    bool placed = false;
    for (int attempt = 0; attempt < kExtraTries && !placed; ++attempt) {
      Shape s = counted_shape(rng);
      place_uniform(s, rng);
      if (unrelated(s, shapes)) {
        shapes.push_back(s);
        placed = true;
      }
    }
    if (!placed) return false;
  }
  return true;
}

std::string describe(const SceneRequest& req) {
  auto flag = [](const char* name, const std::optional<bool>& v) {
    return v ? std::string(*v ? "+" : "-") + name : std::string();
  };
  std::string s = to_string(req.rule) + " cell (";
  for (const auto& part : {flag("Inside", req.inside), flag("Contact", req.contact), flag("Number", req.number)})
    if (!part.empty()) s += (s.back() == '(' ? "" : ", ") + part;
  if (req.number) s += ", N=" + std::to_string(req.n);
  return s + ")";
}

int draw_count(const SceneRequest& req, bool relation_required, Rng& rng) {
  if (!req.number) return 2;
  if (*req.number) return req.n;
  std::vector<int> options;
  for (int m = 1; m <= kMaxCount; ++m)
    if (m != req.n && (m >= 2 || !relation_required)) options.push_back(m);
  return rng.pick<int>(options);
}

void validate_request(const SceneRequest& req) {
  const auto fs = rule_factors(req.rule);
  if (rule_domain(req.rule) != Domain::Vision) throw ConfigError("sample_scene: " + to_string(req.rule) + " is not a vision rule");
  auto uses = [&](Factor f) { return fs[0] == f || fs[1] == f; };
  if (req.inside && !uses(Factor::Inside)) throw ConfigError("sample_scene: Inside is not a factor of " + to_string(req.rule));
  if (req.contact && !uses(Factor::Contact)) throw ConfigError("sample_scene: Contact is not a factor of " + to_string(req.rule));
  if (req.number) {
    if (!uses(Factor::Number)) throw ConfigError("sample_scene: Number is not a factor of " + to_string(req.rule));
    if (req.n < kMinN || req.n > kMaxN)
      throw ConfigError("sample_scene: N=" + std::to_string(req.n) + " outside [" + std::to_string(kMinN) + ", " +
                        std::to_string(kMaxN) + "]");
  }
}

}  // namespace

std::vector<Pixel> outline_pixels(const Shape& s) {
  std::vector<Pixel> px;
  const int r = s.size;
  if (s.kind == ShapeKind::Square) {
    for (int d = -r; d <= r; ++d) {
      px.push_back({s.x + d, s.y - r});
      px.push_back({s.x + d, s.y + r});
      px.push_back({s.x - r, s.y + d});
      px.push_back({s.x + r, s.y + d});
    }
  } else {
    int x = r, y = 0, err = 1 - r;
    while (x >= y) {
      for (auto [a, b] : {std::pair{x, y}, std::pair{y, x}})
        for (int sx : {-1, 1})
          for (int sy : {-1, 1}) px.push_back({s.x + sx * a, s.y + sy * b});
      ++y;
      if (err < 0) {
        err += 2 * y + 1;
      } else {
        --x;
        err += 2 * (y - x) + 1;
      }
    }
  }
  std::sort(px.begin(), px.end());
  px.erase(std::unique(px.begin(), px.end()), px.end());
  return px;
}

bool in_bounds(const Shape& s, int grid) {
  return s.size >= kMinShapeSize && s.x - s.size >= 1 && s.y - s.size >= 1 && s.x + s.size <= grid - 2 &&
         s.y + s.size <= grid - 2;
}

Bitmap interior(const Shape& s, int grid) {
  const auto n = static_cast<std::size_t>(grid * grid);
  Bitmap wall(n, 0), outside(n, 0);
  for (const auto& p : outline_pixels(s))
    if (p.x >= 0 && p.y >= 0 && p.x < grid && p.y < grid) wall[idx(p.x, p.y, grid)] = 1;
  std::vector<Pixel> stack;
  auto seed = [&](int x, int y) {
    const auto i = idx(x, y, grid);
    if (!wall[i] && !outside[i]) {
      outside[i] = 1;
      stack.push_back({x, y});
    }
  };
  for (int t = 0; t < grid; ++t) {
    seed(t, 0);
    seed(t, grid - 1);
    seed(0, t);
    seed(grid - 1, t);
  }
  while (!stack.empty()) {
    const Pixel p = stack.back();
    stack.pop_back();
    if (p.x > 0) seed(p.x - 1, p.y);
    if (p.x + 1 < grid) seed(p.x + 1, p.y);
    if (p.y > 0) seed(p.x, p.y - 1);
    if (p.y + 1 < grid) seed(p.x, p.y + 1);
  }
  Bitmap in(n, 0);
  for (std::size_t i = 0; i < n; ++i) in[i] = (!wall[i] && !outside[i]) ? 1 : 0;
  return in;
}

bool predicate_inside(const Shape& a, const Shape& b, int grid) {
  return all_inside(outline_pixels(a), interior(b, grid), grid);
}

bool predicate_contact(const Shape& a, const Shape& b, int grid) {
  const Bitmap near_a = dilated_outline(a, grid);
  for (const auto& p : outline_pixels(b))
    if (p.x >= 0 && p.y >= 0 && p.x < grid && p.y < grid && near_a[idx(p.x, p.y, grid)]) return true;
  return false;
}

SceneLabels compute_labels(const std::vector<Shape>& shapes, int grid) {
  SceneLabels l;
  l.count = static_cast<int>(shapes.size());
  for (std::size_t i = 0; i < shapes.size(); ++i)
    for (std::size_t j = 0; j < shapes.size(); ++j) {
      if (i == j) continue;
      if (!l.inside && predicate_inside(shapes[i], shapes[j], grid)) l.inside = true;
      if (i < j && !l.contact && predicate_contact(shapes[i], shapes[j], grid)) l.contact = true;
    }
  return l;
}

Bitmap render(const VisionScene& scene) {
  const int g = scene.grid_size;
  Bitmap bm(static_cast<std::size_t>(g * g), 0);
  for (const auto& s : scene.shapes)
    for (const auto& p : outline_pixels(s))
      if (p.x >= 0 && p.y >= 0 && p.x < g && p.y < g) bm[idx(p.x, p.y, g)] = 1;
  return bm;
}

std::vector<double> render_values(const VisionScene& scene) {
  const Bitmap bm = render(scene);
  return std::vector<double>(bm.begin(), bm.end());
}

VisionScene sample_scene(const SceneRequest& req, Rng& rng) {
  validate_request(req);
  const bool want_inside = req.inside.value_or(false);
  const bool want_contact = req.contact.value_or(false);
  const bool two_shape = req.rule == Rule::InsideContact;
  const bool relation = two_shape ? true : (req.rule == Rule::NumberContact ? want_contact : want_inside);
  const int count = draw_count(req, relation && !two_shape, rng);

  for (int draw = 0; draw < kRetryBudget; ++draw) {
    std::optional<std::vector<Shape>> shapes;
    if (two_shape) {
      if (want_inside) {
        Shape outer = random_shape(rng, kOuterMin, kOuterMax);
        Shape inner = random_shape(rng, kMinShapeSize, outer.size - 2);
        shapes = inside_pair(rng, outer, inner, want_contact ? kTouching : kApart, true);
      } else {
        shapes = outside_pair(rng, random_shape(rng, kPairMin, kPairMax), random_shape(rng, kPairMin, kPairMax),
                              want_contact ? kTouching : kApart, true);
      }
    } else {
      // The relation pair (or, for the - cell, its anchor alone) sits near the centre.
      if (req.rule == Rule::NumberContact) {
        if (want_contact) {
          shapes = outside_pair(rng, counted_shape(rng), counted_shape(rng), kAdjacent, true);
        } else {
          Shape anchor = counted_shape(rng);
          place_near_centre(anchor, rng);
          shapes = std::vector<Shape>{anchor};
        }
      } else {
        Shape box = container_shape(rng);
        if (want_inside) {
          shapes = inside_pair(rng, box, counted_shape(rng), kNotTouching, true);
        } else {
          place_near_centre(box, rng);
          shapes = std::vector<Shape>{box};
        }
      }
      if (shapes && !add_unrelated_shapes(*shapes, count, rng)) shapes.reset();
    }
    if (!shapes) continue;

    const SceneLabels labels = compute_labels(*shapes);
    if (labels.inside != want_inside || labels.contact != want_contact || labels.count != count) continue;
    VisionScene scene;
    scene.shapes = std::move(*shapes);
    scene.labels = labels;
    return scene;
  }
  throw GeneratorError("sample_scene: retry budget of " + std::to_string(kRetryBudget) + " draws exhausted for " +
                       describe(req));
}

bool factor_value(Factor f, const SceneLabels& labels, int n) {
  switch (f) {
    case Factor::Inside:
      return labels.inside;
    case Factor::Contact:
      return labels.contact;
    case Factor::Number:
      return labels.count == n;
    default:
      throw ConfigError("factor " + to_string(f) + " is not a vision subroutine");
  }
}

VisionExample generate_example(const TaskSpec& task, Rng& rng) {
  if (rule_domain(task.rule) != Domain::Vision)
    throw ConfigError("vision::generate_example: " + to_string(task.rule) + " is not a vision rule");
  const CellPlan plan = plan_cells(task, rng, true);
  const auto fs = rule_factors(task.rule);
  VisionExample ex;
  ex.odd_index = plan.odd_index;
  const bool has_number = fs[0] == Factor::Number || fs[1] == Factor::Number;
  if (has_number) ex.n = rng.range(kMinN, kMaxN);
  for (std::size_t i = 0; i < 4; ++i) {
    SceneRequest req;
    req.rule = task.rule;
    req.n = ex.n;
    for (std::size_t k = 0; k < 2; ++k) {
      const bool v = plan.cells[i][k];
      switch (fs[k]) {
        case Factor::Inside:
          req.inside = v;
          break;
        case Factor::Contact:
          req.contact = v;
          break;
        case Factor::Number:
          req.number = v;
          break;
        default:
          break;
      }
    }
    ex.stimuli[i] = sample_scene(req, rng);
  }
  return ex;
}

std::optional<std::size_t> recompute_odd_index(const VisionExample& ex, const TaskSpec& task) {
  const auto fs = rule_factors(task.rule);
  std::optional<std::size_t> odd;
  for (std::size_t i = 0; i < 4; ++i) {
    const SceneLabels labels = compute_labels(ex.stimuli[i].shapes, ex.stimuli[i].grid_size);
    const Cell cell{factor_value(fs[0], labels, ex.n), factor_value(fs[1], labels, ex.n)};
    if (!follows_rule(task, cell)) {
      if (odd) return std::nullopt;
      odd = i;
    }
  }
  return odd;
}

}  // namespace compostruct::vision
