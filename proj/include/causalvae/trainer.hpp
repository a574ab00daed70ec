#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "causalvae/autodiff.hpp"
#include "causalvae/vae.hpp"

namespace causalvae::trainer {

using ad::Tensor;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

class NonConvergenceError : public std::runtime_error {
 public:
  NonConvergenceError(const std::string& what, std::vector<double> h_trace)
      : std::runtime_error(what), h_trace_(std::move(h_trace)) {}
  const std::vector<double>& h_trace() const { return h_trace_; }

 private:
  std::vector<double> h_trace_;
};

struct TrainConfig {
  double alpha = 0.3;
  double beta = 1.0;
  double gamma = 1.0;
  double lr = 1e-3;
  std::size_t batch = 64;
  std::size_t epochs = 80;
  std::size_t pretrain_epochs = 10;
  std::uint64_t seed = 0;
  vae::PriorMode prior_mode = vae::PriorMode::abs_u;
  bool unsup = false;
  double prune_threshold = 0.3;
  std::string model_preset = "desk";
  std::size_t train_limit = 0;  // use only the first N training samples (0 = all)
  bool save_every_epoch = true;

  // alpha = 0.3, beta = gamma = 1
  static TrainConfig synthetic();
  // alpha = beta = gamma = 1
  static TrainConfig main_text();

  void validate() const;
  nlohmann::json to_json() const;
  // Fields absent from `j` keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void zero_grad();
  // Parameters without a gradient this step are left untouched.
  void step();
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

struct LagrangianState {
  double lambda = 0.0;
  double c = 1.0;
  double last_h = std::numeric_limits<double>::infinity();
  double eta = 10.0;     // penalty growth factor
  double ratio = 0.25;   // required reduction of H between rounds

  // lambda += c * h; c *= eta when |h| > ratio * |previous h|.
  void update(double h);
};

struct PretrainConfig {
  std::size_t max_rounds = 200;
  double h_tolerance = 1e-8;
  double initial_value = 0.5;  // off-diagonal start
  double initial_c = 1.0;
  std::size_t inner_iterations = 500;
  double inner_tolerance = 1e-10;
  bool throw_on_failure = true;
};

struct PretrainRound {
  std::size_t round;
  double h;
  double l_u;
  double lambda;
  double c;
};

struct PretrainResult {
  std::vector<double> adjacency;  // n x n, zero diagonal
  std::vector<PretrainRound> rounds;
  bool converged = false;
};

// l_pre(A) = l_u(A) + lambda H(A) + (c / 2) H(A)^2 with the sigmoid-free l_u.
Tensor pretrain_objective(const Tensor& adjacency, const Tensor& labels, double lambda, double c);

// labels is [B, n] row-major, already normalized.
PretrainResult pretrain_graph(const std::vector<double>& labels, std::size_t n, const PretrainConfig& config);

struct LossTerms {
  Tensor total;
  double elbo = 0.0;
  double recon = 0.0;
  double kl_eps = 0.0;
  double kl_z = std::numeric_limits<double>::quiet_NaN();  // NaN when the variant has no kl_z
  double h = 0.0;
  double l_u = 0.0;
  double l_m = 0.0;
};

// -ELBO + alpha H + beta l_u + gamma l_m. Terms with zero weight are evaluated
// for logging only and contribute no gradient.
LossTerms compute_loss(const vae::Model& model, const Tensor& x, const Tensor& u, const TrainConfig& config,
                       std::mt19937_64& rng);

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
  double recon = 0.0;
  double kl_eps = 0.0;
  double kl_z = 0.0;
  double h = 0.0;
  double l_u = 0.0;
  double l_m = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  vae::Model model;
  std::vector<EpochRecord> epochs;
  PretrainResult pretrain;
  nlohmann::json checkpoint_extra;
};

// Hook called after every epoch; used by tests and the CLI for progress.
using EpochCallback = std::function<void(const EpochRecord&)>;

TrainResult train(const std::filesystem::path& dataset_dir, const TrainConfig& config,
                  const std::filesystem::path& out_dir, const EpochCallback& on_epoch = {});

// Mask layer off, N(0, I) prior on z, beta = gamma = 0, labels withheld from the encoder.
TrainResult train_unsup_ablation(const std::filesystem::path& dataset_dir, TrainConfig config,
                                 const std::filesystem::path& out_dir, const EpochCallback& on_epoch = {});

}  // namespace causalvae::trainer
