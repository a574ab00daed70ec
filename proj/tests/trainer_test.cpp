#include "causalvae/trainer.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "causalvae/dataset.hpp"
#include "causalvae/scm.hpp"

using namespace causalvae;
using ad::Tensor;
using trainer::PretrainConfig;
using trainer::TrainConfig;

namespace {

Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// Least-squares oracle over the two DAGs on two variables: regress the child
// on the parent and keep the direction with the smaller residual sum.
struct TwoNodeOracle {
  bool forward;  // 0 -> 1
  double coefficient;
};

TwoNodeOracle two_node_oracle(const std::vector<double>& u) {
  double s11 = 0, s22 = 0, s12 = 0;
  const std::size_t b = u.size() / 2;
  for (std::size_t r = 0; r < b; ++r) {
    s11 += u[2 * r] * u[2 * r];
    s22 += u[2 * r + 1] * u[2 * r + 1];
    s12 += u[2 * r] * u[2 * r + 1];
  }
  const double cost_forward = s11 + (s22 - s12 * s12 / s11);
  const double cost_reverse = s22 + (s11 - s12 * s12 / s22);
  if (cost_forward <= cost_reverse) return {true, s12 / s11};
  return {false, s12 / s22};
}

std::vector<double> linear_pair(double coef, double noise_sd, std::size_t b, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<double> u;
  for (std::size_t r = 0; r < b; ++r) {
    const double u1 = nd(rng);
    u.push_back(u1);
    u.push_back(coef * u1 + noise_sd * nd(rng));
  }
  return u;
}

std::filesystem::path tiny_dataset() {
  static const std::filesystem::path dir = [] {
    auto p = std::filesystem::temp_directory_path() / "causalvae_trainer_test_data";
    std::filesystem::remove_all(p);
    dataset::generate_dataset(scene::SceneKind::pendulum, 40, 5, {0.75, 0.25}, p);
    return p;
  }();
  return dir;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.model_preset = "tiny";
  c.epochs = 2;
  c.pretrain_epochs = 3;
  c.batch = 8;
  c.seed = 17;
  return c;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(is, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST(Adam, FirstStepHasLearningRateMagnitude) {
  Tensor w = Tensor::parameter({3}, {1.0, -2.0, 0.5});
  trainer::Adam opt({w}, 0.01);
  ad::backward(ad::sum(ad::square(w)));
  opt.step();
  EXPECT_NEAR(w.at(0), 0.99, 1e-9);
  EXPECT_NEAR(w.at(1), -1.99, 1e-9);
  EXPECT_NEAR(w.at(2), 0.49, 1e-9);
}

TEST(Adam, MinimizesQuadratic) {
  Tensor w = Tensor::parameter({2}, {3.0, -4.0});
  trainer::Adam opt({w}, 0.05);
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    ad::backward(ad::sum(ad::square(ad::add_scalar(w, -1.0))));
    opt.step();
  }
  EXPECT_NEAR(w.at(0), 1.0, 1e-3);
  EXPECT_NEAR(w.at(1), 1.0, 1e-3);
}

TEST(Lagrangian, PenaltyGrowsOnlyWhenReductionIsInsufficient) {
  trainer::LagrangianState s;
  s.update(1.0);  // first round has nothing to compare to
  EXPECT_DOUBLE_EQ(s.c, 1.0);
  EXPECT_DOUBLE_EQ(s.lambda, 1.0);
  s.update(0.2);  // 0.2 <= 0.25 * 1.0
  EXPECT_DOUBLE_EQ(s.c, 1.0);
  EXPECT_DOUBLE_EQ(s.lambda, 1.2);
  s.update(0.1);  // 0.1 > 0.25 * 0.2
  EXPECT_DOUBLE_EQ(s.c, 10.0);
  EXPECT_DOUBLE_EQ(s.lambda, 1.3);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> h(0.0, 1.0);
  double last_c = s.c;
  for (int i = 0; i < 100; ++i) {
    const double prev = s.last_h;
    const double next = h(rng) * prev * 0.5;
    s.update(next);
    EXPECT_GE(s.c, last_c);
    EXPECT_DOUBLE_EQ(s.c, next > 0.25 * prev ? last_c * 10.0 : last_c);
    last_c = s.c;
  }
}

TEST(Pretrain, TwoVariablesFollowLeastSquaresOracle) {
  // Small noise: var(u2) < var(u1), so the oracle picks the reverse edge.
  // Larger noise: var(u2) > var(u1), the oracle picks the forward edge.
  for (double noise : {0.1, 0.7}) {
    const auto u = linear_pair(0.8, noise, 4000, 3);
    const auto oracle = two_node_oracle(u);
    PretrainConfig pc;
    const auto r = trainer::pretrain_graph(u, 2, pc);
    ASSERT_TRUE(r.converged);
    EXPECT_LT(r.rounds.back().h, 1e-8);
    const double fwd = r.adjacency[1];
    const double rev = r.adjacency[2];
    if (oracle.forward) {
      EXPECT_NEAR(fwd, oracle.coefficient, 0.02);
      EXPECT_NEAR(rev, 0.0, 1e-3);
    } else {
      EXPECT_NEAR(rev, oracle.coefficient, 0.02);
      EXPECT_NEAR(fwd, 0.0, 1e-3);
    }
    EXPECT_EQ(r.adjacency[0], 0.0);
    EXPECT_EQ(r.adjacency[3], 0.0);
    if (noise == 0.7) {
      EXPECT_TRUE(oracle.forward);
      EXPECT_NEAR(fwd, 0.8, 0.05);
    }
  }
}

TEST(Pretrain, IndependentLabelsPruneToEmptyGraph) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  std::vector<double> u(6000 * 4);
  for (double& v : u) v = nd(rng);
  const auto r = trainer::pretrain_graph(u, 4, PretrainConfig{});
  ASSERT_TRUE(r.converged);
  EXPECT_TRUE(scm::pruned_edges(Tensor::from({4, 4}, r.adjacency), 0.3).empty());
  const Tensor labels = Tensor::from({6000, 4}, u);
  const double at_zero = scm::label_constraint_lu(Tensor::zeros({4, 4}), labels, false).item();
  const double at_result = scm::label_constraint_lu(Tensor::from({4, 4}, r.adjacency), labels, false).item();
  EXPECT_LE(at_result, at_zero);
  EXPECT_GE(at_result, 0.99 * at_zero);
}

TEST(Pretrain, RoundCapRaisesNonConvergenceWithTrace) {
  const auto u = linear_pair(0.8, 0.7, 500, 5);
  PretrainConfig pc;
  pc.max_rounds = 1;
  try {
    trainer::pretrain_graph(u, 2, pc);
    FAIL() << "expected NonConvergenceError";
  } catch (const trainer::NonConvergenceError& e) {
    EXPECT_EQ(e.h_trace().size(), 1u);
    EXPECT_GT(e.h_trace()[0], 1e-8);
  }
  pc.throw_on_failure = false;
  EXPECT_FALSE(trainer::pretrain_graph(u, 2, pc).converged);
}

TEST(Pretrain, RejectsBadInput) {
  EXPECT_THROW(trainer::pretrain_graph({1.0, 2.0}, 1, PretrainConfig{}), trainer::ConfigError);
  EXPECT_THROW(trainer::pretrain_graph({1.0, 2.0, 3.0}, 2, PretrainConfig{}), trainer::ConfigError);
}

TEST(Loss, FullObjectivePassesGradCheck) {
  vae::ModelConfig mc = vae::ModelConfig::tiny();
  const vae::Model base = vae::Model::init(mc, 21);
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({2, 64}, rng, 0.0, 1.0);
  Tensor u = random_tensor({2, 4}, rng, 0.3, 1.5);
  // keep A small enough that I - A^T is well conditioned
  std::vector<Tensor> point;
  for (const auto& p : base.parameters()) point.push_back(p.detach());
  const auto names = base.parameter_names();
  const auto a_index = std::find(names.begin(), names.end(), "adjacency") - names.begin();
  for (double& v : point[a_index].mutable_values()) v *= 0.3;
  TrainConfig cfg = TrainConfig::synthetic();
  auto fn = [&](const std::vector<Tensor>& p) {
    std::mt19937_64 noise(99);
    return trainer::compute_loss(base.with_parameters(p), x, u, cfg, noise).total;
  };
  EXPECT_LT(ad::grad_check(fn, point, 1e-4), 1e-4);
}

TEST(Loss, ZeroWeightsReduceToConditionalVae) {
  const vae::Model m = vae::Model::init(vae::ModelConfig::tiny(), 22);
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({3, 64}, rng, 0.0, 1.0);
  Tensor u = random_tensor({3, 4}, rng);
  TrainConfig cfg;
  cfg.alpha = cfg.beta = cfg.gamma = 0.0;
  std::mt19937_64 a(1);
  const auto t = trainer::compute_loss(m, x, u, cfg, a);
  EXPECT_EQ(t.total.item(), -t.elbo);
  EXPECT_GT(t.h, 0.0);  // still reported for logging
  EXPECT_GT(t.l_u, 0.0);
  // H and l_u contribute nothing: A's gradient equals the ELBO-only gradient
  ad::backward(t.total);
  const std::vector<double> g_total(m.adjacency.grad().begin(), m.adjacency.grad().end());
  const vae::Model fresh = m.with_parameters(m.parameters());
  for (auto p : fresh.parameters()) p.zero_grad();
  std::mt19937_64 b(1);
  ad::backward(ad::neg(vae::elbo(fresh, x, u, b).elbo));
  for (std::size_t i = 0; i < 16; ++i) EXPECT_DOUBLE_EQ(fresh.adjacency.grad()[i], g_total[i]);
}

TEST(Train, EpochOneLossIsBitReproducibleAndLogged) {
  const auto out1 = std::filesystem::temp_directory_path() / "causalvae_train_run1";
  const auto out2 = std::filesystem::temp_directory_path() / "causalvae_train_run2";
  std::filesystem::remove_all(out1);
  std::filesystem::remove_all(out2);
  const auto r1 = trainer::train(tiny_dataset(), tiny_config(), out1);
  const auto r2 = trainer::train(tiny_dataset(), tiny_config(), out2);
  ASSERT_EQ(r1.epochs.size(), 2u);
  EXPECT_EQ(r1.epochs[0].loss, r2.epochs[0].loss);
  EXPECT_EQ(r1.epochs[1].loss, r2.epochs[1].loss);
  for (const auto& e : r1.epochs) EXPECT_TRUE(std::isfinite(e.loss));
  const auto lines = read_lines(out1 / "train_log.jsonl");
  ASSERT_EQ(lines.size(), 3u + 2u);  // three pretrain rounds, two epochs
  const auto last = nlohmann::json::parse(lines.back());
  for (const char* key : {"epoch", "step", "loss", "recon", "kl_eps", "kl_z", "h", "l_u", "l_m", "wall_seconds"}) {
    EXPECT_TRUE(last.contains(key)) << key;
  }
  nlohmann::json extra;
  const auto loaded = vae::load_checkpoint(out1 / "checkpoint", &extra);
  EXPECT_EQ(extra.at("epoch"), 2);
  EXPECT_EQ(loaded.config.variant, vae::Variant::supervised);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(loaded.adjacency.at(i), r1.model.adjacency.at(i));
  std::filesystem::remove_all(out1);
  std::filesystem::remove_all(out2);
}

TEST(Train, UnsupAblationMetadataAndLogs) {
  const auto out = std::filesystem::temp_directory_path() / "causalvae_train_unsup";
  std::filesystem::remove_all(out);
  const auto r = trainer::train_unsup_ablation(tiny_dataset(), tiny_config(), out);
  EXPECT_TRUE(r.pretrain.rounds.empty());
  const auto manifest = nlohmann::json::parse(std::ifstream(out / "checkpoint" / "manifest.json"));
  EXPECT_EQ(manifest.at("variant"), "unsup");
  for (const auto& line : read_lines(out / "train_log.jsonl")) {
    EXPECT_FALSE(nlohmann::json::parse(line).contains("kl_z"));
  }
  std::filesystem::remove_all(out);
}

TEST(Train, RejectsBadConfigAndDiverges) {
  TrainConfig bad = tiny_config();
  bad.epochs = 0;
  EXPECT_THROW(trainer::train(tiny_dataset(), bad, {}), trainer::ConfigError);
  bad = tiny_config();
  bad.model_preset = "desk";  // fine resolution, but train on the tiny dataset still works
  bad.alpha = -1.0;
  EXPECT_THROW(trainer::train(tiny_dataset(), bad, {}), trainer::ConfigError);
  TrainConfig wild = tiny_config();
  wild.lr = 1e200;
  wild.epochs = 3;
  EXPECT_THROW(trainer::train(tiny_dataset(), wild, {}), trainer::DivergenceError);
}

TEST(TrainConfig, JsonRoundTripKeepsDefaultsForMissingFields) {
  TrainConfig c = TrainConfig::main_text();
  c.seed = 9;
  c.unsup = true;
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.alpha, 1.0);
  EXPECT_EQ(back.seed, 9u);
  EXPECT_TRUE(back.unsup);
  const TrainConfig partial = TrainConfig::from_json({{"epochs", 5}});
  EXPECT_EQ(partial.epochs, 5u);
  EXPECT_EQ(partial.alpha, 0.3);
  EXPECT_THROW(TrainConfig::from_json({{"epochs", "many"}}), trainer::ConfigError);
}
