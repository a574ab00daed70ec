#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "causalvae/scene.hpp"

namespace causalvae::dataset {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Manifest {
  int format_version = 1;
  scene::SceneKind kind = scene::SceneKind::pendulum;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::vector<double> fractions;          // train, test
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::vector<std::string> concepts;
  std::vector<std::string> params;
  std::vector<double> label_mean;         // over the training split
  std::vector<double> label_std;
  std::vector<double> label_min;          // raw, training split
  std::vector<double> label_max;
  std::vector<std::pair<std::size_t, std::size_t>> true_graph;

  std::vector<double> normalize(const std::vector<double>& raw) const;
  std::vector<double> denormalize(const std::vector<double>& normalized) const;
};

// In-memory split with images average-pooled by `pool` while loading.
struct Split {
  std::size_t count = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> images;      // [count, height * width * channels]
  std::vector<double> labels_raw;  // [count, 4]
  std::vector<double> labels;      // normalized, [count, 4]
  std::vector<double> params;      // [count, n_params]
  std::vector<std::size_t> index;  // sample index in generation order

  std::size_t image_size() const { return height * width * channels; }
};

// Pure sample generation for index i of a (kind, seed) dataset.
scene::LabeledSample generate_sample(scene::SceneKind kind, std::uint64_t seed, std::size_t index);

// Assignment of generation indices to the two splits (sorted within each).
void assign_splits(std::size_t n, std::uint64_t seed, const std::vector<double>& fractions,
                   std::vector<std::size_t>& train, std::vector<std::size_t>& test);

Manifest generate_dataset(scene::SceneKind kind, std::size_t n, std::uint64_t seed,
                          const std::vector<double>& fractions, const std::filesystem::path& dir);

Manifest read_manifest(const std::filesystem::path& dir);
Split load_split(const std::filesystem::path& dir, const std::string& split, std::size_t pool = 1,
                 std::size_t limit = 0);

}  // namespace causalvae::dataset
