#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "causalvae/autodiff.hpp"
#include "causalvae/dataset.hpp"
#include "causalvae/vae.hpp"

namespace causalvae::evaluation {

class EvaluationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Grid search settings for the maximal information coefficient.
struct MicOptions {
  double alpha = 0.6;                   // grid budget B(N) = N^alpha
  std::optional<std::size_t> budget;    // overrides N^alpha when set
  std::size_t axis_cap = 16;            // at most this many bins per axis
  double clump_factor = 15.0;           // superclumps per column when optimizing an axis
  bool exhaustive = false;              // search every row partition (small N only)
};

// Normalized mutual information for each grid x columns by y rows with
// x * y <= budget. entries[x - 2][y - 2]; grids outside the budget hold NaN.
struct CharacteristicMatrix {
  std::size_t budget = 0;
  std::vector<std::vector<double>> entries;
};

struct MicResult {
  double mic = 0.0;
  double tic = 0.0;
  bool degenerate = false;  // one input is constant; both statistics are reported as 0
};

// Minimum sample count accepted by the estimators.
inline constexpr std::size_t kMinSamples = 25;

CharacteristicMatrix characteristic_matrix(const std::vector<double>& xs, const std::vector<double>& ys,
                                           const MicOptions& options = {});
MicResult mine_statistics(const std::vector<double>& xs, const std::vector<double>& ys,
                          const MicOptions& options = {});
double mic(const std::vector<double>& xs, const std::vector<double>& ys, const MicOptions& options = {});
double tic(const std::vector<double>& xs, const std::vector<double>& ys, const MicOptions& options = {});

// Pearson correlation; 0 when either input has zero variance.
double correlation(const std::vector<double>& a, const std::vector<double>& b);

// Structural Hamming distance: one unit per unordered concept pair whose edge
// state (none, forward, backward, both) differs after pruning |A| < threshold.
std::size_t graph_shd(const ad::Tensor& learned, const std::vector<std::vector<bool>>& truth, double threshold);
std::size_t graph_shd(const ad::Tensor& learned, const std::vector<std::pair<std::size_t, std::size_t>>& truth,
                      double threshold);

// Each latent concept reduced to one scalar per sample.
struct Alignment {
  std::vector<std::string> concepts;
  std::vector<std::vector<double>> labels;  // [concept][sample], raw units
  std::vector<std::vector<double>> latents;  // [concept][sample], chosen sub-dimension of z_i
  std::vector<std::size_t> subdimension;     // argmax_s |corr(z_i[s], u_i)|
  std::vector<double> correlation;           // signed correlation of the chosen sub-dimension
};

// Deterministic encoding (posterior mean through the causal layer) of a split.
Alignment compute_alignment(const vae::Model& model, const dataset::Split& split,
                            const std::vector<std::string>& concepts);

struct MetricReport {
  std::vector<std::string> concepts;
  std::vector<double> mic;
  std::vector<double> tic;
  double mean_mic = 0.0;
  double mean_tic = 0.0;
  std::size_t shd = 0;
  std::vector<nlohmann::json> edges;  // pruned edges with weights

  nlohmann::json to_json() const;
};

MetricReport evaluate_alignment(const vae::Model& model, const std::filesystem::path& dataset_dir,
                                double prune_threshold, const std::string& split = "test",
                                const MicOptions& options = {});
MetricReport evaluate_alignment(const Alignment& alignment, const vae::Model& model,
                                const std::vector<std::vector<bool>>& true_graph, double prune_threshold,
                                const MicOptions& options = {});

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;  // sample standard deviation / sqrt(count); 0 for a single value
};

MeanSe mean_se(const std::vector<double>& values);

struct SeedSummary {
  std::vector<std::string> concepts;
  std::vector<MeanSe> mic;  // per concept
  std::vector<MeanSe> tic;
  MeanSe mean_mic;
  MeanSe mean_tic;
  MeanSe shd;

  nlohmann::json to_json() const;
};

SeedSummary summarize_seeds(const std::vector<MetricReport>& reports);

// Writes "concept,u,z" rows, one per sample and concept.
void export_alignment_scatter(const Alignment& alignment, const std::filesystem::path& path);

}  // namespace causalvae::evaluation
