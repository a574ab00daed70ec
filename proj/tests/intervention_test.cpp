#include "causalvae/intervention.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "causalvae/scm.hpp"

using namespace causalvae;
using ad::Tensor;
using intervention::DoRequest;

namespace {

constexpr double kThreshold = 0.3;

// Tiny model whose adjacency is replaced by `a` (row-major n x n).
vae::Model model_with_graph(const std::vector<double>& a, std::uint64_t seed = 3) {
  vae::Model m = vae::Model::init(vae::ModelConfig::tiny(), seed);
  auto v = m.adjacency.mutable_values();
  std::copy(a.begin(), a.end(), v.begin());
  return m;
}

std::vector<double> pendulum_graph() {
  std::vector<double> a(16, 0.0);
  a[0 * 4 + 2] = 0.9;
  a[0 * 4 + 3] = -0.7;
  a[1 * 4 + 2] = 0.8;
  a[1 * 4 + 3] = 0.6;
  return a;
}

struct Sample {
  Tensor x;
  Tensor u;
};

Sample random_sample(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pix(0.0, 1.0);
  std::normal_distribution<double> lab;
  std::vector<double> x(64), u(4);
  for (double& v : x) v = pix(rng);
  for (double& v : u) v = lab(rng);
  return {Tensor::from({1, 64}, x), Tensor::from({1, 4}, u)};
}

std::vector<double> concept_values(const Tensor& z, std::size_t i) {
  const std::size_t k = z.dim(2);
  return {z.values().begin() + static_cast<std::ptrdiff_t>(i * k),
          z.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * k)};
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.at(i) != b.at(i)) return false;
  }
  return true;
}

// Random DAG over a random permutation, weights on both sides of the threshold.
std::vector<double> random_dag(std::mt19937_64& rng, std::size_t n) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::uniform_real_distribution<double> w(-1.2, 1.2);
  std::bernoulli_distribution present(0.6);
  std::vector<double> a(n * n, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = p + 1; q < n; ++q) {
      if (present(rng)) a[perm[p] * n + perm[q]] = w(rng);
    }
  }
  return a;
}

}  // namespace

TEST(Intervene, IdentityInterventionReproducesReconstructionBitwise) {
  const vae::Model m = model_with_graph(pendulum_graph());
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const Sample s = random_sample(rng);
    for (bool deterministic : {true, false}) {
      for (std::size_t i = 0; i < 4; ++i) {
        DoRequest probe{i, {0.0}, deterministic, 0.1, 42};
        const Tensor z = intervention::infer_latents(m, s.x, s.u, probe);
        DoRequest req = probe;
        req.value = concept_values(z, i);
        const auto cf = intervention::intervene(m, kThreshold, s.x, s.u, req);
        EXPECT_TRUE(bitwise_equal(cf.z_after, cf.z_before));
        EXPECT_TRUE(bitwise_equal(cf.image, cf.reconstruction));
        ad::NoGradGuard guard;
        EXPECT_TRUE(bitwise_equal(cf.reconstruction, vae::decode(m, z)));
      }
    }
  }
}

TEST(Intervene, SinkConceptLeavesEveryOtherLatentUnchanged) {
  const vae::Model m = model_with_graph(pendulum_graph());
  std::mt19937_64 rng(2);
  const Sample s = random_sample(rng);
  for (std::size_t sink : {2u, 3u}) {
    const auto cf = intervention::intervene(m, kThreshold, s.x, s.u, DoRequest{sink, {1.7}});
    for (std::size_t j = 0; j < 4; ++j) {
      if (j == sink) {
        EXPECT_EQ(concept_values(cf.z_after, j), std::vector<double>(4, 1.7));
      } else {
        EXPECT_EQ(concept_values(cf.z_after, j), concept_values(cf.z_before, j));
      }
    }
  }
}

TEST(Intervene, CauseChangesEffectsButNotOtherCause) {
  const vae::Model m = model_with_graph(pendulum_graph());
  std::mt19937_64 rng(3);
  const Sample s = random_sample(rng);
  const auto cf = intervention::intervene(m, kThreshold, s.x, s.u, DoRequest{1, {2.0}});
  EXPECT_EQ(concept_values(cf.z_after, 0), concept_values(cf.z_before, 0));
  for (std::size_t effect : {2u, 3u}) {
    const auto a = concept_values(cf.z_after, effect);
    const auto b = concept_values(cf.z_before, effect);
    double diff = 0.0;
    for (std::size_t s2 = 0; s2 < 4; ++s2) diff += std::abs(a[s2] - b[s2]);
    EXPECT_GT(diff, 1e-6) << "effect " << effect;
  }
  EXPECT_EQ(cf.affected, (std::vector<bool>{false, true, true, true}));
}

TEST(Intervene, RandomGraphsSatisfyCauseInvarianceIdempotenceAndResidualPreservation) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> pick(0, 3);
  std::normal_distribution<double> val(0.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    const vae::Model m = model_with_graph(random_dag(rng, 4), 100 + trial);
    const auto graph = intervention::prune_graph(m, kThreshold);
    const Sample s = random_sample(rng);
    const std::size_t target = pick(rng);
    const std::vector<double> v{val(rng), val(rng), val(rng), val(rng)};
    const Tensor z = intervention::infer_latents(m, s.x, s.u, DoRequest{});
    const Tensor once = intervention::apply_do(m, graph, z, target, v);
    const Tensor twice = intervention::apply_do(m, graph, once, target, v);
    EXPECT_TRUE(bitwise_equal(once, twice));

    const auto down = scm::descendants(graph.edges, target);
    ad::NoGradGuard guard;
    for (std::size_t j = 0; j < 4; ++j) {
      if (j == target) {
        EXPECT_EQ(concept_values(once, j), v);
      } else if (!down[j]) {
        EXPECT_EQ(concept_values(once, j), concept_values(z, j));
      } else {
        // z_j - g_j(parents) is the exogenous part and must survive the do.
        const Tensor g_after = scm::mask_concept(once, graph.adjacency, m.mask, j);
        const Tensor g_before = scm::mask_concept(z, graph.adjacency, m.mask, j);
        for (std::size_t q = 0; q < 4; ++q) {
          EXPECT_NEAR(once.at(j * 4 + q) - g_after.at(q), z.at(j * 4 + q) - g_before.at(q), 1e-12);
        }
      }
    }
  }
}

TEST(Intervene, ChainPropagatesTwoHops) {
  std::vector<double> a(16, 0.0);
  a[0 * 4 + 1] = 1.0;
  a[1 * 4 + 2] = 1.0;
  const vae::Model m = model_with_graph(a);
  std::mt19937_64 rng(5);
  const Sample s = random_sample(rng);
  const auto cf = intervention::intervene(m, kThreshold, s.x, s.u, DoRequest{0, {3.0}});
  EXPECT_NE(concept_values(cf.z_after, 2), concept_values(cf.z_before, 2));
  EXPECT_EQ(concept_values(cf.z_after, 3), concept_values(cf.z_before, 3));
}

TEST(Intervene, EdgesBelowThresholdDoNotPropagate) {
  std::vector<double> a(16, 0.0);
  a[0 * 4 + 1] = 0.29;
  const vae::Model m = model_with_graph(a);
  std::mt19937_64 rng(6);
  const Sample s = random_sample(rng);
  const auto cf = intervention::intervene(m, kThreshold, s.x, s.u, DoRequest{0, {3.0}});
  EXPECT_EQ(concept_values(cf.z_after, 1), concept_values(cf.z_before, 1));
  const auto cf_low = intervention::intervene(m, 0.2, s.x, s.u, DoRequest{0, {3.0}});
  EXPECT_NE(concept_values(cf_low.z_after, 1), concept_values(cf_low.z_before, 1));
}

TEST(Intervene, ScalarBroadcastsOverSubdimensions) {
  const vae::Model m = model_with_graph(pendulum_graph());
  std::mt19937_64 rng(7);
  const Sample s = random_sample(rng);
  const auto a = intervention::intervene(m, kThreshold, s.x, s.u, DoRequest{1, {0.5}});
  const auto b = intervention::intervene(m, kThreshold, s.x, s.u, DoRequest{1, {0.5, 0.5, 0.5, 0.5}});
  EXPECT_TRUE(bitwise_equal(a.image, b.image));
}

TEST(Intervene, StochasticModeIsSeededAndShrunkTowardsTheMean) {
  const vae::Model m = model_with_graph(pendulum_graph());
  std::mt19937_64 rng(8);
  const Sample s = random_sample(rng);
  DoRequest req{0, {0.0}, false, 0.1, 11};
  const Tensor z1 = intervention::infer_latents(m, s.x, s.u, req);
  const Tensor z2 = intervention::infer_latents(m, s.x, s.u, req);
  EXPECT_TRUE(bitwise_equal(z1, z2));
  const Tensor mean = intervention::infer_latents(m, s.x, s.u, DoRequest{});
  req.variance_scale = 1.0;
  const Tensor wide = intervention::infer_latents(m, s.x, s.u, req);
  // Same noise draw and a linear causal layer: the deviation from the mean scales by sqrt(0.1).
  for (std::size_t i = 0; i < z1.size(); ++i) {
    EXPECT_NEAR(z1.at(i) - mean.at(i), std::sqrt(0.1) * (wide.at(i) - mean.at(i)), 1e-9);
  }
  req.variance_scale = 0.0;
  EXPECT_TRUE(bitwise_equal(intervention::infer_latents(m, s.x, s.u, req), mean));
}

TEST(Intervene, RejectsInvalidRequests) {
  const vae::Model m = model_with_graph(pendulum_graph());
  std::mt19937_64 rng(9);
  const Sample s = random_sample(rng);
  EXPECT_THROW(intervention::intervene(m, kThreshold, s.x, s.u, DoRequest{4, {0.0}}), intervention::InterventionError);
  EXPECT_THROW(intervention::intervene(m, kThreshold, s.x, s.u, DoRequest{0, {0.0, 1.0}}),
               intervention::InterventionError);
  EXPECT_THROW(intervention::intervene(m, kThreshold, s.x, s.u, DoRequest{0, {NAN}}), intervention::InterventionError);
  EXPECT_THROW(intervention::intervene(m, kThreshold, s.x, s.u, DoRequest{0, {}}), intervention::InterventionError);
  std::vector<double> cyclic(16, 0.0);
  cyclic[0 * 4 + 1] = 0.8;
  cyclic[1 * 4 + 0] = 0.8;
  const vae::Model bad = model_with_graph(cyclic);
  EXPECT_THROW(intervention::intervene(bad, kThreshold, s.x, s.u, DoRequest{2, {0.0}}),
               intervention::InterventionError);
  // the same 2-cycle below threshold prunes away
  EXPECT_NO_THROW(intervention::intervene(bad, 0.9, s.x, s.u, DoRequest{2, {0.0}}));
}

TEST(Traverse, EmptyAndSingletonStrips) {
  const vae::Model m = model_with_graph(pendulum_graph());
  std::mt19937_64 rng(10);
  const Sample s = random_sample(rng);
  DoRequest req{1, {0.0}};
  EXPECT_TRUE(intervention::traverse(m, kThreshold, s.x, s.u, req, {}).empty());
  const auto strip = intervention::traverse(m, kThreshold, s.x, s.u, req, {{-1.25}});
  ASSERT_EQ(strip.size(), 1u);
  req.value = {-1.25};
  EXPECT_TRUE(bitwise_equal(strip[0], intervention::intervene(m, kThreshold, s.x, s.u, req).image));
  const auto three = intervention::traverse(m, kThreshold, s.x, s.u, req, {{-1.0}, {0.0}, {1.0}});
  ASSERT_EQ(three.size(), 3u);
  EXPECT_FALSE(bitwise_equal(three[0], three[2]));
}
