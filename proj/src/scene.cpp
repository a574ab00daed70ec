#include "causalvae/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace causalvae::scene {

namespace {

using Color = std::array<double, 3>;

constexpr Color kBackground{0.9, 0.9, 0.9};
constexpr Color kRod{0.8, 0.1, 0.1};
constexpr Color kPivot{0.3, 0.05, 0.05};
constexpr Color kLight{1.0, 0.85, 0.0};
constexpr Color kShadow{0.15, 0.15, 0.15};
constexpr Color kFloor{0.55, 0.55, 0.55};
constexpr Color kCup{0.25, 0.25, 0.3};
constexpr Color kWater{0.2, 0.45, 0.9};
constexpr Color kBall{0.95, 0.55, 0.1};

Image background() {
  Image img = Image::blank(kImageSize, kImageSize, kChannels, 1.0);
  for (std::size_t p = 0; p < kImageSize * kImageSize; ++p) {
    for (std::size_t c = 0; c < 3; ++c) img.pixels[p * kChannels + c] = kBackground[c];
  }
  return img;
}

void blend(Image& img, std::size_t row, std::size_t col, const Color& color, double coverage) {
  if (coverage <= 0.0) return;
  coverage = std::min(coverage, 1.0);
  for (std::size_t c = 0; c < 3; ++c) {
    double& v = img.at(row, col, c);
    v = v * (1.0 - coverage) + color[c] * coverage;
  }
}

// Pixel (row, col) covers scene x in [col, col+1], y in [H-row-1, H-row].
void bounding_rows_cols(double x0, double x1, double y0, double y1, std::size_t& r0, std::size_t& r1,
                        std::size_t& c0, std::size_t& c1) {
  const double h = static_cast<double>(kImageSize);
  auto clampi = [h](double v) { return static_cast<std::size_t>(std::clamp(v, 0.0, h)); };
  c0 = clampi(std::floor(x0));
  c1 = clampi(std::ceil(x1));
  r0 = clampi(std::floor(h - y1));
  r1 = clampi(std::ceil(h - y0));
}

double segment_distance(double px, double py, double x0, double y0, double x1, double y1) {
  const double dx = x1 - x0;
  const double dy = y1 - y0;
  const double len2 = dx * dx + dy * dy;
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp(((px - x0) * dx + (py - y0) * dy) / len2, 0.0, 1.0);
  return std::hypot(px - (x0 + t * dx), py - (y0 + t * dy));
}

// Antialiased stroke: coverage falls off linearly over one pixel at the edge.
void paint_capsule(Image& img, double x0, double y0, double x1, double y1, double radius, const Color& color) {
  std::size_t r0, r1, c0, c1;
  bounding_rows_cols(std::min(x0, x1) - radius - 1, std::max(x0, x1) + radius + 1, std::min(y0, y1) - radius - 1,
                     std::max(y0, y1) + radius + 1, r0, r1, c0, c1);
  const double h = static_cast<double>(kImageSize);
  for (std::size_t r = r0; r < r1; ++r) {
    for (std::size_t c = c0; c < c1; ++c) {
      const double px = static_cast<double>(c) + 0.5;
      const double py = h - static_cast<double>(r) - 0.5;
      blend(img, r, c, color, radius + 0.5 - segment_distance(px, py, x0, y0, x1, y1));
    }
  }
}

void paint_disc(Image& img, double x, double y, double radius, const Color& color) {
  paint_capsule(img, x, y, x, y, radius, color);
}

// Exact area coverage of an axis-aligned rectangle.
void paint_rect(Image& img, double x0, double y0, double x1, double y1, const Color& color) {
  std::size_t r0, r1, c0, c1;
  bounding_rows_cols(x0, x1, y0, y1, r0, r1, c0, c1);
  const double h = static_cast<double>(kImageSize);
  for (std::size_t r = r0; r < r1; ++r) {
    const double top = h - static_cast<double>(r);
    const double oy = std::max(0.0, std::min(top, y1) - std::max(top - 1.0, y0));
    for (std::size_t c = c0; c < c1; ++c) {
      const double left = static_cast<double>(c);
      const double ox = std::max(0.0, std::min(left + 1.0, x1) - std::max(left, x0));
      blend(img, r, c, color, ox * oy);
    }
  }
}

double floor_projection(double light_x, double light_y, double px, double py) {
  const double t = (light_y - pendulum_geometry::kFloorY) / (light_y - py);
  return light_x + t * (px - light_x);
}

void check_range(const char* what, double v, double lo, double hi) {
  if (!std::isfinite(v) || v < lo - 1e-12 || v > hi + 1e-12) {
    throw ValidationError(std::string(what) + " = " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " +
                          std::to_string(hi) + "]");
  }
}

}  // namespace

Image Image::blank(std::size_t height, std::size_t width, std::size_t channels, double fill) {
  Image img;
  img.height = height;
  img.width = width;
  img.channels = channels;
  img.pixels.assign(height * width * channels, fill);
  return img;
}

double Image::sum() const {
  double s = 0.0;
  for (double v : pixels) s += v;
  return s;
}

Image average_pool(const Image& image, std::size_t factor) {
  if (factor == 0 || image.height % factor != 0 || image.width % factor != 0) {
    throw std::invalid_argument("average_pool: factor " + std::to_string(factor) + " does not divide " +
                                std::to_string(image.height) + "x" + std::to_string(image.width));
  }
  if (factor == 1) return image;
  Image out = Image::blank(image.height / factor, image.width / factor, image.channels, 0.0);
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t r = 0; r < image.height; ++r) {
    for (std::size_t c = 0; c < image.width; ++c) {
      for (std::size_t ch = 0; ch < image.channels; ++ch) {
        out.at(r / factor, c / factor, ch) += image.at(r, c, ch) * inv;
      }
    }
  }
  return out;
}

PendulumGeometry pendulum_geometry_of(const PendulumScene& scene) {
  using namespace pendulum_geometry;
  check_range("pendulum_angle", scene.pendulum_angle, -kAngleLimit, kAngleLimit);
  check_range("light_angle", scene.light_angle, -kAngleLimit, kAngleLimit);
  PendulumGeometry g{};
  g.light_x = kPivotX + kLightRadius * std::sin(scene.light_angle);
  g.light_y = kPivotY + kLightRadius * std::cos(scene.light_angle);
  g.bob_x = kPivotX + kRodLength * std::sin(scene.pendulum_angle);
  g.bob_y = kPivotY - kRodLength * std::cos(scene.pendulum_angle);
  g.shadow_a = floor_projection(g.light_x, g.light_y, kPivotX, kPivotY);
  g.shadow_b = floor_projection(g.light_x, g.light_y, g.bob_x, g.bob_y);
  g.shadow_position = 0.5 * (g.shadow_a + g.shadow_b);
  g.shadow_length = std::abs(g.shadow_a - g.shadow_b);
  return g;
}

std::array<double, kConcepts> pendulum_labels(const PendulumScene& scene) {
  const PendulumGeometry g = pendulum_geometry_of(scene);
  return {g.light_x, scene.pendulum_angle, g.shadow_position, g.shadow_length};
}

Image render_pendulum(const PendulumScene& scene) {
  using namespace pendulum_geometry;
  const PendulumGeometry g = pendulum_geometry_of(scene);
  Image img = background();
  paint_rect(img, 0.0, kFloorY - 1.0, static_cast<double>(kImageSize), kFloorY, kFloor);
  paint_capsule(img, g.shadow_a, kFloorY + 0.5, g.shadow_b, kFloorY + 0.5, 1.5, kShadow);
  paint_disc(img, g.light_x, g.light_y, 4.0, kLight);
  paint_capsule(img, kPivotX, kPivotY, g.bob_x, g.bob_y, 1.2, kRod);
  paint_disc(img, g.bob_x, g.bob_y, 4.0, kRod);
  paint_disc(img, kPivotX, kPivotY, 1.5, kPivot);
  return img;
}

double estimate_pendulum_angle(const Image& image, std::size_t pool) {
  using namespace pendulum_geometry;
  const double f = static_cast<double>(pool);
  const double h = static_cast<double>(image.height) * f;
  double wsum = 0.0;
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t r = 0; r < image.height; ++r) {
    for (std::size_t c = 0; c < image.width; ++c) {
      const double x = (static_cast<double>(c) + 0.5) * f;
      const double y = h - (static_cast<double>(r) + 0.5) * f;
      if (y > kPivotY || std::hypot(x - kPivotX, y - kPivotY) > kRodLength + 6.0) continue;
      const double w = std::max(0.0, image.at(r, c, 0) - image.at(r, c, 1));
      wsum += w;
      mx += w * (x - kPivotX);
      my += w * (kPivotY - y);
    }
  }
  if (wsum <= 0.0) return 0.0;
  return std::atan2(mx, my);
}

FlowState flow_state(const FlowScene& scene, double gravity) {
  using namespace flow_geometry;
  if (!(scene.ball_size < kCupWidth)) {
    throw ValidationError("ball_size " + std::to_string(scene.ball_size) + " does not fit the cup width " +
                          std::to_string(kCupWidth));
  }
  check_range("ball_size", scene.ball_size, 0.0, kCupWidth);
  check_range("water_level", scene.water_level, 0.0, kCupTop - kGroundY);
  check_range("hole_position", scene.hole_position, 0.0, kCupTop - kGroundY);
  if (!(gravity > 0.0) || !std::isfinite(gravity)) throw ValidationError("gravity must be positive");
  FlowState s{};
  const double radius = 0.5 * scene.ball_size;
  s.water_height = scene.water_level + std::numbers::pi * radius * radius / kCupWidth;
  if (s.water_height > kCupTop - kGroundY) throw ValidationError("water overflows the cup");
  s.gravity = gravity;
  const double head = std::max(0.0, s.water_height - scene.hole_position);
  s.exit_speed = std::sqrt(2.0 * kGravity * head);
  s.reach = s.exit_speed * std::sqrt(2.0 * scene.hole_position / gravity);
  return s;
}

double sample_gravity(std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, std::sqrt(flow_geometry::kGravityNoiseVariance));
  return flow_geometry::kGravity + noise(rng);
}

std::array<double, kConcepts> flow_labels(const FlowState& state, const FlowScene& scene) {
  return {scene.ball_size, state.water_height, scene.hole_position, state.reach};
}

Image render_flow(const FlowScene& scene, const FlowState& state) {
  using namespace flow_geometry;
  Image img = background();
  const double w = static_cast<double>(kImageSize);
  paint_rect(img, 0.0, kGroundY - 1.0, w, kGroundY, kCup);
  paint_rect(img, kCupLeft, kGroundY, kCupRight, kGroundY + state.water_height, kWater);
  const double r = 0.5 * scene.ball_size;
  paint_disc(img, 0.5 * (kCupLeft + kCupRight), kGroundY + r, r, kBall);
  paint_capsule(img, kCupLeft, kGroundY, kCupLeft, kCupTop, 0.8, kCup);
  paint_capsule(img, kCupRight, kGroundY, kCupRight, kCupTop, 0.8, kCup);
  if (state.reach > 0.0) {
    // y(x) = d (1 - (x / reach)^2) along the jet
    const int pieces = 24;
    const double d = scene.hole_position;
    for (int p = 0; p < pieces; ++p) {
      const double t0 = static_cast<double>(p) / pieces;
      const double t1 = static_cast<double>(p + 1) / pieces;
      paint_capsule(img, kCupRight + t0 * state.reach, kGroundY + d * (1.0 - t0 * t0), kCupRight + t1 * state.reach,
                    kGroundY + d * (1.0 - t1 * t1), 1.0, kWater);
    }
  }
  return img;
}

FlowRender render_flow(const FlowScene& scene, std::mt19937_64& rng) {
  FlowState state = flow_state(scene, sample_gravity(rng));
  return {render_flow(scene, state), state};
}

SceneKind parse_kind(const std::string& name) {
  if (name == "pendulum") return SceneKind::pendulum;
  if (name == "flow") return SceneKind::flow;
  throw ValidationError("unknown scene kind '" + name + "' (expected pendulum or flow)");
}

std::string to_string(SceneKind kind) { return kind == SceneKind::pendulum ? "pendulum" : "flow"; }

std::vector<std::string> concept_names(SceneKind kind) {
  if (kind == SceneKind::pendulum) return {"light", "angle", "shadow_position", "shadow_length"};
  return {"ball_size", "water_height", "hole", "water_flow"};
}

std::vector<std::pair<std::size_t, std::size_t>> true_graph(SceneKind kind) {
  if (kind == SceneKind::pendulum) return {{0, 2}, {0, 3}, {1, 2}, {1, 3}};
  return {{0, 1}, {1, 3}, {2, 3}};
}

std::vector<std::string> param_names(SceneKind kind) {
  if (kind == SceneKind::pendulum) return {"pendulum_angle", "light_angle"};
  return {"ball_size", "water_level", "hole_position", "gravity"};
}

LabeledSample sample_scene(SceneKind kind, std::mt19937_64& rng) {
  LabeledSample s;
  if (kind == SceneKind::pendulum) {
    using pendulum_geometry::kAngleLimit;
    std::uniform_real_distribution<double> angle(-kAngleLimit, kAngleLimit);
    PendulumScene scene;
    scene.pendulum_angle = angle(rng);
    scene.light_angle = angle(rng);
    s.image = render_pendulum(scene);
    s.labels = pendulum_labels(scene);
    s.params = {scene.pendulum_angle, scene.light_angle};
    return s;
  }
  using namespace flow_geometry;
  FlowScene scene;
  scene.ball_size = std::uniform_real_distribution<double>(kBallMin, kBallMax)(rng);
  scene.water_level = std::uniform_real_distribution<double>(kLevelMin, kLevelMax)(rng);
  scene.hole_position = std::uniform_real_distribution<double>(kHoleMin, kHoleMax)(rng);
  FlowRender r = render_flow(scene, rng);
  s.image = std::move(r.image);
  s.labels = flow_labels(r.state, scene);
  s.params = {scene.ball_size, scene.water_level, scene.hole_position, r.state.gravity};
  return s;
}

}  // namespace causalvae::scene
