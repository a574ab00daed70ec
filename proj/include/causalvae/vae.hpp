#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "causalvae/autodiff.hpp"
#include "causalvae/scm.hpp"

namespace causalvae::vae {

using ad::Tensor;

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PriorMode { unit, abs_u };
enum class Variant { supervised, unsup };

std::string to_string(PriorMode mode);
PriorMode parse_prior_mode(const std::string& name);
std::string to_string(Variant variant);
Variant parse_variant(const std::string& name);

struct ModelConfig {
  std::size_t n = 4;
  std::size_t k = 4;
  std::size_t pool = 1;  // average-pooling factor applied to 96x96 inputs
  std::size_t height = 96;
  std::size_t width = 96;
  std::size_t channels = 4;
  std::vector<std::size_t> encoder_hidden{900, 300};
  std::vector<std::size_t> decoder_hidden{300, 300, 1024};
  std::size_t mask_hidden = 32;
  Variant variant = Variant::supervised;
  PriorMode prior_mode = PriorMode::abs_u;
  double prior_floor = 1e-3;
  double sigma_xi = 0.1;
  double adjacency_init = 0.5;  // off-diagonal starting value

  std::size_t image_size() const { return height * width * channels; }
  bool encoder_uses_labels() const { return variant == Variant::supervised; }

  // Layer widths of the appendix tables at full 96x96x4 resolution.
  static ModelConfig appendix();
  // Reduced widths on 4x average-pooled 24x24x4 inputs.
  static ModelConfig desk();
  // Very small network used for finite-difference checks.
  static ModelConfig tiny();
  static ModelConfig preset(const std::string& name);

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
};

// Fully connected stack with ELU between layers and a linear last layer.
struct Mlp {
  std::vector<Linear> layers;

  static Mlp init(const std::vector<std::size_t>& widths, std::mt19937_64& rng, double last_gain = 1.0);
  Tensor forward(const Tensor& x) const;
};

struct Model {
  ModelConfig config;
  Mlp encoder;
  std::vector<Mlp> decoder;  // one branch per concept
  Tensor adjacency;          // raw parameter; the diagonal is masked out on use
  scm::MaskParams mask;

  static Model init(const ModelConfig& config, std::uint64_t seed);

  // A with its diagonal forced to zero.
  Tensor effective_adjacency() const;
  std::vector<Tensor> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;
  // Copy of the model that uses `params` (in parameters() order) in place of its own tensors.
  Model with_parameters(const std::vector<Tensor>& params) const;
};

struct Encoding {
  Tensor mu;      // [B, n, k]
  Tensor logvar;  // [B, n, k]
};

// x is [B, image_size] in [0, 1]; u is [B, n] normalized labels.
Encoding encode(const Model& model, const Tensor& x, const Tensor& u);
Tensor reparameterize(const Tensor& mu, const Tensor& logvar, std::mt19937_64& rng);
// z is [B, n, k]; returns [B, image_size] in [0, 1].
Tensor decode(const Model& model, const Tensor& z);

Tensor kl_eps(const Tensor& mu, const Tensor& logvar);
Tensor kl_z(const Tensor& mu, const Tensor& logvar, const Tensor& adjacency, const Tensor& u, PriorMode mode,
            double floor = 1e-3);
// Per-concept prior variance for the chosen mode, shape [B, n].
Tensor prior_variance(const Tensor& u, PriorMode mode, double floor);
// -||x - x_hat||^2 / (2 sigma^2), batch mean; the Gaussian normalizer is dropped.
Tensor reconstruction_log_likelihood(const Tensor& x, const Tensor& x_hat, double sigma_xi);

struct ElboResult {
  Tensor elbo;
  Tensor recon;
  Tensor kl_eps;
  Tensor kl_z;  // undefined for the unsup variant
  Tensor eps;
  Tensor z;
  Tensor x_hat;
  Encoding encoding;
};

ElboResult elbo(const Model& model, const Tensor& x, const Tensor& u, std::mt19937_64& rng);

// Directory with manifest.json and params.bin.
void save_checkpoint(const Model& model, const std::filesystem::path& dir, const nlohmann::json& extra);
Model load_checkpoint(const std::filesystem::path& dir, nlohmann::json* extra = nullptr);

}  // namespace causalvae::vae
