#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace causalvae::scene {

constexpr std::size_t kImageSize = 96;
constexpr std::size_t kChannels = 4;
constexpr std::size_t kConcepts = 4;

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Row-major [height, width, channels] with values in [0, 1].
struct Image {
  std::size_t height = kImageSize;
  std::size_t width = kImageSize;
  std::size_t channels = kChannels;
  std::vector<double> pixels;

  static Image blank(std::size_t height, std::size_t width, std::size_t channels, double fill);
  double& at(std::size_t row, std::size_t col, std::size_t ch) {
    return pixels[(row * width + col) * channels + ch];
  }
  double at(std::size_t row, std::size_t col, std::size_t ch) const {
    return pixels[(row * width + col) * channels + ch];
  }
  double sum() const;
};

// Average pooling by an integer factor that must divide both sides.
Image average_pool(const Image& image, std::size_t factor);

// Scene coordinates have y pointing up, origin at the bottom-left corner of
// the image, one unit per pixel.
namespace pendulum_geometry {
constexpr double kPivotX = 48.0;
constexpr double kPivotY = 50.0;
constexpr double kRodLength = 20.0;
constexpr double kLightRadius = 40.0;  // arc centred on the pivot
constexpr double kFloorY = 8.0;
constexpr double kAngleLimit = 0.7853981633974483;  // pi / 4
}  // namespace pendulum_geometry

struct PendulumScene {
  double pendulum_angle = 0.0;  // radians, 0 = hanging straight down
  double light_angle = 0.0;     // radians, 0 = light straight above the pivot
};

struct PendulumGeometry {
  double light_x;
  double light_y;
  double bob_x;
  double bob_y;
  double shadow_a;  // floor abscissa of the projected pivot
  double shadow_b;  // floor abscissa of the projected bob
  double shadow_position;
  double shadow_length;
};

PendulumGeometry pendulum_geometry_of(const PendulumScene& scene);
// (light position, pendulum angle, shadow position, shadow length)
std::array<double, kConcepts> pendulum_labels(const PendulumScene& scene);
Image render_pendulum(const PendulumScene& scene);

// Angle of the rod measured from the red-dominant mass around the pivot.
// Works on pooled images as well, given the pooling factor.
double estimate_pendulum_angle(const Image& image, std::size_t pool = 1);

namespace flow_geometry {
constexpr double kGroundY = 10.0;
constexpr double kCupLeft = 16.0;
constexpr double kCupRight = 48.0;
constexpr double kCupWidth = kCupRight - kCupLeft;
constexpr double kCupTop = 70.0;
constexpr double kGravity = 9.8;
constexpr double kGravityNoiseVariance = 0.01;
constexpr double kBallMin = 6.0;
constexpr double kBallMax = 16.0;
constexpr double kLevelMin = 24.0;
constexpr double kLevelMax = 40.0;
constexpr double kHoleMin = 4.0;
constexpr double kHoleMax = 22.0;
}  // namespace flow_geometry

struct FlowScene {
  double ball_size = 10.0;      // diameter
  double water_level = 30.0;    // height of the water above the cup bottom before the ball is added
  double hole_position = 10.0;  // height of the hole above the ground
};

struct FlowState {
  double water_height;
  double gravity;
  double exit_speed;
  double reach;  // horizontal distance from the cup wall to the landing point
};

// Deterministic part of the physics given a sampled gravitational acceleration.
FlowState flow_state(const FlowScene& scene, double gravity);
double sample_gravity(std::mt19937_64& rng);
// (ball size, water height, hole position, water flow)
std::array<double, kConcepts> flow_labels(const FlowState& state, const FlowScene& scene);
Image render_flow(const FlowScene& scene, const FlowState& state);

struct FlowRender {
  Image image;
  FlowState state;
};
FlowRender render_flow(const FlowScene& scene, std::mt19937_64& rng);

enum class SceneKind { pendulum, flow };

SceneKind parse_kind(const std::string& name);
std::string to_string(SceneKind kind);
std::vector<std::string> concept_names(SceneKind kind);
// Ground-truth edges (from, to) over the label order above.
std::vector<std::pair<std::size_t, std::size_t>> true_graph(SceneKind kind);
std::vector<std::string> param_names(SceneKind kind);

struct LabeledSample {
  Image image;
  std::array<double, kConcepts> labels{};
  std::vector<double> params;
};

// Draws the free parameters uniformly from their ranges using `rng`.
LabeledSample sample_scene(SceneKind kind, std::mt19937_64& rng);

}  // namespace causalvae::scene
