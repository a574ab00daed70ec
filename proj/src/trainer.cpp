#include "causalvae/trainer.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "causalvae/dataset.hpp"
#include "causalvae/rng.hpp"
#include "causalvae/scm.hpp"

namespace causalvae::trainer {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::uint64_t kShuffleStream = 1000;
constexpr std::uint64_t kNoiseStream = 1000000;

std::vector<std::size_t> off_diagonal_indices(std::size_t n) {
  std::vector<std::size_t> idx;
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      if (i != j) idx.push_back(j * n + i);
    }
  }
  return idx;
}

// BFGS with Armijo backtracking over the off-diagonal entries of A.
class InnerSolver {
 public:
  // gram is U^T U / B; the label loss only depends on the labels through it.
  InnerSolver(const Tensor& gram, std::size_t n, double lambda, double c)
      : gram_(gram), n_(n), lambda_(lambda), c_(c), idx_(off_diagonal_indices(n)) {}

  double value_and_grad(const Eigen::VectorXd& x, Eigen::VectorXd& g) const {
    std::vector<double> a(n_ * n_, 0.0);
    for (std::size_t p = 0; p < idx_.size(); ++p) a[idx_[p]] = x(static_cast<Eigen::Index>(p));
    Tensor adj = Tensor::parameter({n_, n_}, std::move(a));
    // ||U - U A||^2 / B = tr(S) - 2 tr(S A) + tr(A^T S A)
    Tensor sa = ad::matmul(gram_, adj);
    Tensor lu = ad::add_scalar(ad::add(ad::scale(ad::trace(sa), -2.0), ad::trace(ad::matmul(ad::transpose(adj), sa))),
                               ad::trace(gram_).item());
    Tensor h = scm::dag_constraint(adj);
    Tensor obj = ad::add(lu, ad::add(ad::scale(h, lambda_), ad::scale(ad::square(h), 0.5 * c_)));
    ad::backward(obj);
    g.resize(static_cast<Eigen::Index>(idx_.size()));
    for (std::size_t p = 0; p < idx_.size(); ++p) g(static_cast<Eigen::Index>(p)) = adj.grad()[idx_[p]];
    return obj.item();
  }

  Eigen::VectorXd minimize(Eigen::VectorXd x, std::size_t max_iter, double tol) const {
    const auto d = static_cast<Eigen::Index>(idx_.size());
    Eigen::MatrixXd h_inv = Eigen::MatrixXd::Identity(d, d);
    Eigen::VectorXd g;
    double f = value_and_grad(x, g);
    for (std::size_t it = 0; it < max_iter && g.lpNorm<Eigen::Infinity>() > tol; ++it) {
      Eigen::VectorXd dir = -h_inv * g;
      if (dir.dot(g) >= 0.0) {
        h_inv.setIdentity();
        dir = -g;
      }
      double step = 1.0;
      Eigen::VectorXd x_new, g_new;
      double f_new = f;
      bool accepted = false;
      for (int ls = 0; ls < 60; ++ls) {
        x_new = x + step * dir;
        f_new = value_and_grad(x_new, g_new);
        if (std::isfinite(f_new) && f_new <= f + 1e-4 * step * g.dot(dir)) {
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted) break;
      const Eigen::VectorXd s = x_new - x;
      const Eigen::VectorXd y = g_new - g;
      const double sy = s.dot(y);
      if (sy > 1e-300) {
        const double rho = 1.0 / sy;
        const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);
        h_inv = (eye - rho * s * y.transpose()) * h_inv * (eye - rho * y * s.transpose()) + rho * s * s.transpose();
      }
      x = x_new;
      g = g_new;
      f = f_new;
    }
    return x;
  }

 private:
  Tensor gram_;
  std::size_t n_;
  double lambda_;
  double c_;
  std::vector<std::size_t> idx_;
};

Tensor rows(const std::vector<double>& data, std::size_t width, const std::vector<std::size_t>& order,
            std::size_t begin, std::size_t end) {
  std::vector<double> out;
  out.reserve((end - begin) * width);
  for (std::size_t r = begin; r < end; ++r) {
    const auto first = data.begin() + static_cast<std::ptrdiff_t>(order[r] * width);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(width));
  }
  return Tensor::from({end - begin, width}, std::move(out));
}

json record_json(const EpochRecord& r, bool has_kl_z) {
  json j{{"phase", "train"},  {"epoch", r.epoch}, {"step", r.step}, {"loss", r.loss}, {"recon", r.recon},
         {"kl_eps", r.kl_eps}, {"h", r.h},         {"l_u", r.l_u},   {"l_m", r.l_m},   {"wall_seconds", r.wall_seconds}};
  if (has_kl_z) j["kl_z"] = r.kl_z;
  return j;
}

}  // namespace

TrainConfig TrainConfig::synthetic() { return TrainConfig{}; }

TrainConfig TrainConfig::main_text() {
  TrainConfig c;
  c.alpha = 1.0;
  return c;
}

void TrainConfig::validate() const {
  if (alpha < 0.0 || beta < 0.0 || gamma < 0.0) throw ConfigError("alpha, beta and gamma must be non-negative");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch < 1) throw ConfigError("batch size must be at least 1");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(prune_threshold >= 0.0)) throw ConfigError("prune threshold must be non-negative");
}

json TrainConfig::to_json() const {
  return {{"alpha", alpha},
          {"beta", beta},
          {"gamma", gamma},
          {"lr", lr},
          {"batch", batch},
          {"epochs", epochs},
          {"pretrain_epochs", pretrain_epochs},
          {"seed", seed},
          {"prior_mode", vae::to_string(prior_mode)},
          {"unsup", unsup},
          {"prune_threshold", prune_threshold},
          {"model_preset", model_preset},
          {"train_limit", train_limit},
          {"save_every_epoch", save_every_epoch}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.gamma = j.value("gamma", c.gamma);
    c.lr = j.value("lr", c.lr);
    c.batch = j.value("batch", c.batch);
    c.epochs = j.value("epochs", c.epochs);
    c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
    c.seed = j.value("seed", c.seed);
    c.prior_mode = vae::parse_prior_mode(j.value("prior_mode", vae::to_string(c.prior_mode)));
    c.unsup = j.value("unsup", c.unsup);
    c.prune_threshold = j.value("prune_threshold", c.prune_threshold);
    c.model_preset = j.value("model_preset", c.model_preset);
    c.train_limit = j.value("train_limit", c.train_limit);
    c.save_every_epoch = j.value("save_every_epoch", c.save_every_epoch);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
  return c;
}

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    auto values = params_[i].mutable_values();
    const auto grad = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * grad[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * grad[j] * grad[j];
      values[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

void LagrangianState::update(double h) {
  lambda += c * h;
  if (std::abs(h) > ratio * std::abs(last_h)) c *= eta;
  last_h = h;
}

Tensor pretrain_objective(const Tensor& adjacency, const Tensor& labels, double lambda, double c) {
  Tensor h = scm::dag_constraint(adjacency);
  Tensor lu = scm::label_constraint_lu(adjacency, labels, false);
  return ad::add(lu, ad::add(ad::scale(h, lambda), ad::scale(ad::square(h), 0.5 * c)));
}

PretrainResult pretrain_graph(const std::vector<double>& labels, std::size_t n, const PretrainConfig& config) {
  if (n < 2) throw ConfigError("pretraining needs at least two concepts");
  if (labels.empty() || labels.size() % n != 0) throw ConfigError("label buffer is not a multiple of n");
  const Tensor u = Tensor::from({labels.size() / n, n}, labels);
  Tensor gram;
  {
    ad::NoGradGuard guard;
    gram = ad::scale(ad::matmul(ad::transpose(u), u), 1.0 / static_cast<double>(u.dim(0)));
  }
  const auto idx = off_diagonal_indices(n);
  Eigen::VectorXd x = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(idx.size()), config.initial_value);
  LagrangianState state;
  state.c = config.initial_c;
  PretrainResult result;
  auto to_matrix = [&](const Eigen::VectorXd& v) {
    std::vector<double> a(n * n, 0.0);
    for (std::size_t p = 0; p < idx.size(); ++p) a[idx[p]] = v(static_cast<Eigen::Index>(p));
    return a;
  };
  for (std::size_t round = 0; round < config.max_rounds; ++round) {
    InnerSolver solver(gram, n, state.lambda, state.c);
    x = solver.minimize(x, config.inner_iterations, config.inner_tolerance);
    const Tensor a = Tensor::from({n, n}, to_matrix(x));
    double h = 0.0;
    double lu = 0.0;
    {
      ad::NoGradGuard guard;
      h = scm::dag_constraint(a).item();
      lu = scm::label_constraint_lu(a, u, false).item();
    }
    state.update(h);
    result.rounds.push_back({round + 1, h, lu, state.lambda, state.c});
    if (h < config.h_tolerance) {
      result.converged = true;
      break;
    }
  }
  result.adjacency = to_matrix(x);
  if (!result.converged && config.throw_on_failure) {
    std::vector<double> trace;
    for (const auto& r : result.rounds) trace.push_back(r.h);
    throw NonConvergenceError("pretrain_graph: H(A) = " + std::to_string(trace.empty() ? 0.0 : trace.back()) +
                                  " still above tolerance after " + std::to_string(result.rounds.size()) + " rounds",
                              std::move(trace));
  }
  return result;
}

LossTerms compute_loss(const vae::Model& model, const Tensor& x, const Tensor& u, const TrainConfig& config,
                       std::mt19937_64& rng) {
  const bool supervised = model.config.variant == vae::Variant::supervised;
  const vae::ElboResult r = vae::elbo(model, x, u, rng);
  LossTerms t;
  t.elbo = r.elbo.item();
  t.recon = r.recon.item();
  t.kl_eps = r.kl_eps.item();
  if (r.kl_z.defined()) t.kl_z = r.kl_z.item();
  Tensor total = ad::neg(r.elbo);
  const Tensor a = model.effective_adjacency();

  auto weighted = [&](double weight, const std::function<Tensor()>& term, double& slot) {
    if (weight > 0.0) {
      Tensor v = term();
      slot = v.item();
      total = ad::add(total, ad::scale(v, weight));
    } else {
      ad::NoGradGuard guard;
      slot = term().item();
    }
  };
  weighted(config.alpha, [&] { return scm::dag_constraint(a); }, t.h);
  if (supervised) {
    weighted(config.beta, [&] { return scm::label_constraint_lu(a, u, true); }, t.l_u);
    weighted(config.gamma, [&] { return scm::mask_constraint_lm(r.z, scm::mask_layer(r.z, a, model.mask)); }, t.l_m);
  }
  t.total = total;
  return t;
}

TrainResult train(const fs::path& dataset_dir, const TrainConfig& config, const fs::path& out_dir,
                  const EpochCallback& on_epoch) {
  config.validate();
  const dataset::Manifest manifest = dataset::read_manifest(dataset_dir);
  vae::ModelConfig mc = vae::ModelConfig::preset(config.model_preset);
  mc.prior_mode = config.prior_mode;
  mc.variant = config.unsup ? vae::Variant::unsup : vae::Variant::supervised;
  if (manifest.concepts.size() != mc.n) {
    throw ConfigError("dataset has " + std::to_string(manifest.concepts.size()) + " concepts but the model expects " +
                      std::to_string(mc.n));
  }
  const dataset::Split split = dataset::load_split(dataset_dir, "train", mc.pool, config.train_limit);
  if (split.count == 0) throw ConfigError("training split is empty");
  if (split.image_size() != mc.image_size()) throw ConfigError("pooled image size does not match the model preset");

  TrainResult result{vae::Model::init(mc, config.seed), {}, {}, {}};
  vae::Model& model = result.model;

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  std::ofstream log;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    log.open(out_dir / "train_log.jsonl", std::ios::trunc);
    if (!log) throw dataset::IoError("cannot write training log in " + out_dir.string());
  }

  if (!config.unsup && config.pretrain_epochs > 0) {
    PretrainConfig pc;
    pc.max_rounds = config.pretrain_epochs;
    pc.initial_value = mc.adjacency_init;
    pc.throw_on_failure = false;
    result.pretrain = pretrain_graph(split.labels, mc.n, pc);
    auto a = model.adjacency.mutable_values();
    std::copy(result.pretrain.adjacency.begin(), result.pretrain.adjacency.end(), a.begin());
    for (const auto& r : result.pretrain.rounds) {
      if (log.is_open()) {
        log << json{{"phase", "pretrain"}, {"round", r.round}, {"h", r.h},
                    {"l_u", r.l_u},        {"lambda", r.lambda}, {"c", r.c}}.dump()
            << "\n";
      }
    }
  }

  result.checkpoint_extra = {
      {"train_config", config.to_json()},
      {"dataset",
       {{"path", fs::absolute(dataset_dir).string()},
        {"kind", scene::to_string(manifest.kind)},
        {"concepts", manifest.concepts},
        {"normalization", {{"mean", manifest.label_mean}, {"std", manifest.label_std}}},
        {"label_range", {{"min", manifest.label_min}, {"max", manifest.label_max}}},
        {"true_graph", manifest.true_graph}}},
      {"prune_threshold", config.prune_threshold},
      {"pretrain",
       {{"rounds", result.pretrain.rounds.size()},
        {"converged", result.pretrain.converged},
        {"final_h", result.pretrain.rounds.empty() ? 0.0 : result.pretrain.rounds.back().h}}}};

  Adam adam(model.parameters(), config.lr);
  const std::size_t d = split.image_size();
  const std::size_t n = mc.n;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(split.count);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng = stream_rng(config.seed, kShuffleStream + epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::mt19937_64 noise_rng = stream_rng(config.seed, kNoiseStream + epoch);

    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t begin = 0; begin < split.count; begin += config.batch) {
      const std::size_t end = std::min(split.count, begin + config.batch);
      const Tensor x = rows(split.images, d, order, begin, end);
      const Tensor u = rows(split.labels, n, order, begin, end);
      ++step;
      LossTerms t;
      try {
        t = compute_loss(model, x, u, config, noise_rng);
      } catch (const vae::NumericalError& e) {
        throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(step), step);
      } catch (const ad::SingularMatrixError& e) {
        throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(step), step);
      }
      const double loss = t.total.item();
      if (!std::isfinite(loss)) {
        throw DivergenceError("training diverged (non-finite loss) at step " + std::to_string(step) +
                                  "; the last good checkpoint is the one saved after epoch " +
                                  std::to_string(epoch - 1),
                              step);
      }
      adam.zero_grad();
      ad::backward(t.total);
      adam.step();
      const double w = static_cast<double>(end - begin) / static_cast<double>(split.count);
      rec.loss += w * loss;
      rec.recon += w * t.recon;
      rec.kl_eps += w * t.kl_eps;
      rec.kl_z += w * t.kl_z;
      rec.h += w * t.h;
      rec.l_u += w * t.l_u;
      rec.l_m += w * t.l_m;
    }
    rec.step = step;
    rec.wall_seconds = elapsed();
    result.epochs.push_back(rec);
    if (log.is_open()) log << record_json(rec, !config.unsup).dump() << "\n" << std::flush;
    if (!out_dir.empty() && (config.save_every_epoch || epoch == config.epochs)) {
      result.checkpoint_extra["epoch"] = epoch;
      vae::save_checkpoint(model, out_dir / "checkpoint", result.checkpoint_extra);
    }
    if (on_epoch) on_epoch(rec);
  }
  result.checkpoint_extra["epoch"] = config.epochs;
  return result;
}

TrainResult train_unsup_ablation(const fs::path& dataset_dir, TrainConfig config, const fs::path& out_dir,
                                 const EpochCallback& on_epoch) {
  config.unsup = true;
  config.beta = 0.0;
  config.gamma = 0.0;
  config.pretrain_epochs = 0;
  return train(dataset_dir, config, out_dir, on_epoch);
}

}  // namespace causalvae::trainer
