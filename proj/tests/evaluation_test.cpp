#include "causalvae/evaluation.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>

#include "mic_oracle.hpp"

using namespace causalvae;
using evaluation::MicOptions;

namespace {

std::vector<double> uniform(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST(Mic, PerfectDependenceSaturates) {
  std::mt19937_64 rng(1);
  const auto x = uniform(rng, 500);
  std::vector<double> y(x.size());
  std::transform(x.begin(), x.end(), y.begin(), [](double v) { return 2.0 * v + 1.0; });
  EXPECT_NEAR(evaluation::mic(x, x), 1.0, 1e-12);
  EXPECT_NEAR(evaluation::mic(x, y), 1.0, 1e-12);
}

TEST(Mic, IndependentPairsStayBelowNullThreshold) {
  std::mt19937_64 rng(2);
  int mic_ok = 0, order_ok = 0;
  constexpr int kTrials = 100;
  for (int t = 0; t < kTrials; ++t) {
    const auto x = uniform(rng, 500);
    const auto y = uniform(rng, 500);
    const auto r = evaluation::mine_statistics(x, y);
    if (r.mic < 0.25) ++mic_ok;
    if (r.tic < r.mic && r.mic < 0.25) ++order_ok;
  }
  EXPECT_GE(mic_ok, 95);
  EXPECT_GE(order_ok, 95);
}

TEST(Mic, TicNeverExceedsMic) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 30; ++t) {
    const auto x = uniform(rng, 200);
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::sin(6.0 * x[i]) + 0.3 * t / 30.0 * nd(rng);
    const auto r = evaluation::mine_statistics(x, y);
    EXPECT_LE(r.tic, r.mic);
    EXPECT_GE(r.tic, 0.0);
    EXPECT_LE(r.mic, 1.0);
  }
}

TEST(Mic, InvariantUnderStrictlyMonotoneTransforms) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  const auto x = uniform(rng, 300);
  std::vector<double> y(x.size()), ex(x.size()), cube(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = x[i] * x[i] + 0.1 * nd(rng);
    ex[i] = std::exp(x[i]);
    cube[i] = y[i] * y[i] * y[i];
  }
  const auto base = evaluation::mine_statistics(x, y);
  const auto moved = evaluation::mine_statistics(ex, cube);
  EXPECT_EQ(base.mic, moved.mic);
  EXPECT_EQ(base.tic, moved.tic);
}

TEST(Mic, Symmetric) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  const auto x = uniform(rng, 400);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::cos(4.0 * x[i]) + 0.2 * nd(rng);
  EXPECT_EQ(evaluation::mic(x, y), evaluation::mic(y, x));
  EXPECT_EQ(evaluation::tic(x, y), evaluation::tic(y, x));
}

TEST(Mic, ExhaustiveModeMatchesBruteForceMatrix) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd;
  MicOptions exhaustive;
  exhaustive.budget = 16;
  exhaustive.axis_cap = 4;
  exhaustive.exhaustive = true;
  MicOptions heuristic = exhaustive;
  heuristic.exhaustive = false;
  for (int t = 0; t < 6; ++t) {
    auto x = uniform(rng, 25 + t);
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * (t % 2 ? -1.0 : 1.0) + 0.4 * nd(rng);
    if (t >= 4) {  // ties on both axes
      for (double& v : x) v = std::round(v * 6.0);
      for (double& v : y) v = std::round(v * 4.0);
    }
    const auto bf = mic_oracle::brute_force_matrix(x, y, 16, 4);
    const auto m = evaluation::characteristic_matrix(x, y, exhaustive);
    const auto h = evaluation::characteristic_matrix(x, y, heuristic);
    double bf_max = 0.0, bf_sum = 0.0;
    for (const auto& [grid, value] : bf.entries) {
      EXPECT_NEAR(m.entries[grid.first - 2][grid.second - 2], value, 1e-12)
          << "trial " << t << " grid " << grid.first << "x" << grid.second;
      EXPECT_LE(h.entries[grid.first - 2][grid.second - 2], value + 1e-12);
      bf_max = std::max(bf_max, value);
      bf_sum += value;
    }
    const auto r = evaluation::mine_statistics(x, y, exhaustive);
    EXPECT_NEAR(r.mic, bf_max, 1e-12);
    EXPECT_NEAR(r.tic, bf_sum / static_cast<double>(bf.entries.size()), 1e-12);
  }
}

TEST(Mic, InjectiveMapWithFewRunsReachesOne) {
  std::vector<double> x(26), y(26);
  for (std::size_t i = 0; i < 26; ++i) {
    x[i] = static_cast<double>(i);
    y[i] = static_cast<double>((i + 7) % 26);
  }
  MicOptions o;
  o.budget = 16;
  o.axis_cap = 8;
  EXPECT_NEAR(evaluation::mic(x, y, o), 1.0, 1e-12);
  // three runs of row labels along x, so a 2 x 4 grid already separates them
  o.axis_cap = 4;
  o.exhaustive = true;
  EXPECT_NEAR(evaluation::mic(x, y, o), 1.0, 1e-12);
}

TEST(Mic, ConstantInputIsFlaggedAsZero) {
  std::mt19937_64 rng(7);
  const auto x = uniform(rng, 50);
  const std::vector<double> c(50, 3.0);
  const auto r = evaluation::mine_statistics(x, c);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.mic, 0.0);
  EXPECT_EQ(r.tic, 0.0);
  EXPECT_TRUE(evaluation::mine_statistics(c, x).degenerate);
}

TEST(Mic, RejectsBadInput) {
  std::mt19937_64 rng(8);
  const auto x = uniform(rng, 30);
  EXPECT_THROW(evaluation::mic(x, uniform(rng, 29)), evaluation::EvaluationError);
  EXPECT_THROW(evaluation::mic(uniform(rng, 24), uniform(rng, 24)), evaluation::EvaluationError);
  auto bad = x;
  bad[3] = NAN;
  EXPECT_THROW(evaluation::mic(x, bad), evaluation::EvaluationError);
}

TEST(Shd, CountsInsertionsDeletionsAndReversalsOnce) {
  const std::vector<std::pair<std::size_t, std::size_t>> truth{{0, 1}};
  auto adj = [](std::vector<double> v) { return ad::Tensor::from({2, 2}, std::move(v)); };
  EXPECT_EQ(evaluation::graph_shd(adj({0, 0.9, 0, 0}), truth, 0.3), 0u);   // same
  EXPECT_EQ(evaluation::graph_shd(adj({0, 0, 0.9, 0}), truth, 0.3), 1u);   // reversed
  EXPECT_EQ(evaluation::graph_shd(adj({0, 0, 0, 0}), truth, 0.3), 1u);     // deleted
  EXPECT_EQ(evaluation::graph_shd(adj({0, 0.9, 0.9, 0}), truth, 0.3), 1u); // extra reverse edge
  EXPECT_EQ(evaluation::graph_shd(adj({0, 0.2, 0, 0}), truth, 0.3), 1u);   // pruned away
  EXPECT_EQ(evaluation::graph_shd(adj({5, 0.9, 0, 5}), truth, 0.3), 0u);   // diagonal ignored

  std::vector<double> a(16, 0.0);
  const std::vector<std::pair<std::size_t, std::size_t>> pend{{0, 2}, {0, 3}, {1, 2}, {1, 3}};
  for (const auto& [f, t] : pend) a[f * 4 + t] = -0.8;
  EXPECT_EQ(evaluation::graph_shd(ad::Tensor::from({4, 4}, a), pend, 0.3), 0u);
  a[0 * 4 + 1] = 0.5;  // single extra edge
  EXPECT_EQ(evaluation::graph_shd(ad::Tensor::from({4, 4}, a), pend, 0.3), 1u);
  EXPECT_THROW(evaluation::graph_shd(ad::Tensor::from({4, 4}, a), std::vector<std::pair<std::size_t, std::size_t>>{{0, 4}}, 0.3),
               evaluation::EvaluationError);
}

TEST(Stats, MeanAndStandardError) {
  const auto r = evaluation::mean_se({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(r.mean, 2.5);
  EXPECT_NEAR(r.se, std::sqrt(5.0 / 3.0) / 2.0, 1e-15);
  EXPECT_EQ(evaluation::mean_se({7.0}).se, 0.0);
  EXPECT_THROW(evaluation::mean_se({}), evaluation::EvaluationError);
  EXPECT_NEAR(evaluation::correlation({1, 2, 3}, {2, 4, 6}), 1.0, 1e-15);
  EXPECT_NEAR(evaluation::correlation({1, 2, 3}, {3, 2, 1}), -1.0, 1e-15);
  EXPECT_EQ(evaluation::correlation({1, 1, 1}, {3, 2, 1}), 0.0);
}

TEST(Alignment, LabelsAsLatentsGivePerfectScoreAndNoiseDoesNot) {
  std::mt19937_64 rng(9);
  evaluation::Alignment al;
  al.concepts = {"a", "b", "c", "d"};
  evaluation::Alignment noise = al;
  for (int i = 0; i < 4; ++i) {
    al.labels.push_back(uniform(rng, 500));
    al.latents.push_back(al.labels.back());
    noise.labels.push_back(al.labels.back());
    noise.latents.push_back(uniform(rng, 500));
  }
  const vae::Model m = vae::Model::init(vae::ModelConfig::tiny(), 1);
  const std::vector<std::vector<bool>> none(4, std::vector<bool>(4, false));
  const auto perfect = evaluation::evaluate_alignment(al, m, none, 0.3);
  for (double v : perfect.mic) EXPECT_NEAR(v, 1.0, 1e-12);
  EXPECT_NEAR(perfect.mean_mic, 1.0, 1e-12);
  const auto null = evaluation::evaluate_alignment(noise, m, none, 0.3);
  for (double v : null.mic) EXPECT_LT(v, 0.25);
  // the initial model keeps every off-diagonal weight at 0.5
  EXPECT_EQ(perfect.shd, 6u);
  EXPECT_EQ(perfect.edges.size(), 12u);

  const auto summary = evaluation::summarize_seeds({perfect, null});
  EXPECT_NEAR(summary.mean_mic.mean, (perfect.mean_mic + null.mean_mic) / 2.0, 1e-15);
  EXPECT_GT(summary.mean_mic.se, 0.0);
  EXPECT_TRUE(summary.to_json().contains("mean_tic"));
}

TEST(Alignment, CheckpointOnDatasetAndScatterExport) {
  const auto dir = std::filesystem::temp_directory_path() / "causalvae_eval_test";
  std::filesystem::remove_all(dir);
  const auto manifest = dataset::generate_dataset(scene::SceneKind::pendulum, 160, 3, {0.5, 0.5}, dir / "data");
  const vae::Model m = vae::Model::init(vae::ModelConfig::tiny(), 2);
  const auto split = dataset::load_split(dir / "data", "test", m.config.pool);
  const auto al = evaluation::compute_alignment(m, split, manifest.concepts);
  ASSERT_EQ(al.latents.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    ASSERT_EQ(al.latents[i].size(), split.count);
    EXPECT_NEAR(std::abs(evaluation::correlation(al.latents[i], al.labels[i])), std::abs(al.correlation[i]), 1e-12);
  }
  const auto report = evaluation::evaluate_alignment(m, dir / "data", 0.3);
  EXPECT_EQ(report.concepts, manifest.concepts);
  for (double v : report.mic) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }

  const auto csv = dir / "scatter.csv";
  evaluation::export_alignment_scatter(al, csv);
  std::ifstream is(csv);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "concept,u,z");
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> cols;
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string name, u, z;
    std::getline(ss, name, ',');
    std::getline(ss, u, ',');
    std::getline(ss, z, ',');
    cols[name].first.push_back(std::stod(u));
    cols[name].second.push_back(std::stod(z));
    ++rows;
  }
  EXPECT_EQ(rows, split.count * 4);
  for (std::size_t i = 0; i < 4; ++i) {
    ASSERT_TRUE(cols.count(manifest.concepts[i]));
    const auto& [u, z] = cols[manifest.concepts[i]];
    EXPECT_NEAR(evaluation::correlation(z, u), evaluation::correlation(al.latents[i], al.labels[i]), 1e-12);
  }

  vae::ModelConfig wrong = vae::ModelConfig::tiny();
  wrong.n = 3;
  EXPECT_THROW(evaluation::evaluate_alignment(vae::Model::init(wrong, 1), dir / "data", 0.3),
               evaluation::EvaluationError);
  EXPECT_THROW(evaluation::compute_alignment(m, dataset::load_split(dir / "data", "test", 4), manifest.concepts),
               evaluation::EvaluationError);
  std::filesystem::remove_all(dir);
}
