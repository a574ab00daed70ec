#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "causalvae/autodiff.hpp"

// Linear causal layer, per-concept mask layer and the graph constraints.
//
// Adjacency convention: A[j][i] is the causal strength from concept j to
// concept i, so column i holds the parents of i.
namespace causalvae::scm {

using ad::Tensor;

// (I - A^T)^-1
Tensor causal_matrix(const Tensor& adjacency);

// z = (I - A^T)^-1 eps for eps of shape [B, n, k]; each of the k
// sub-dimensions is mixed independently along the concept axis.
Tensor causal_layer(const Tensor& eps, const Tensor& adjacency);

// Parameters of the n per-concept maps g_i : R^{n k} -> R^k, each an
// affine(nk -> hidden) -> tanh -> affine(hidden -> k) stack.
struct MaskParams {
  std::size_t n = 0;
  std::size_t k = 0;
  std::size_t hidden = 0;
  std::vector<Tensor> w1;  // [n k, hidden]
  std::vector<Tensor> b1;  // [hidden]
  std::vector<Tensor> w2;  // [hidden, k]
  std::vector<Tensor> b2;  // [k]

  // Starts near g_i(m) = sum over parents j of m[j][:]: the first k hidden
  // units read one sub-dimension each with gain `gain` and the output layer
  // undoes it; remaining weights are N(0, noise^2).
  static MaskParams init(std::size_t n, std::size_t k, std::size_t hidden, std::mt19937_64& rng,
                         double gain = 0.1, double noise = 0.01);

  std::vector<Tensor> parameters() const;
};

// g_i(A_i o z) for one concept; z is [B, n, k], result [B, k].
Tensor mask_concept(const Tensor& z, const Tensor& adjacency, const MaskParams& mask, std::size_t i);

// All concepts stacked to [B, n, k]. The exogenous residual is not added.
Tensor mask_layer(const Tensor& z, const Tensor& adjacency, const MaskParams& mask);

// H(A) = tr((I + (c/n) A o A)^n) - n
Tensor dag_constraint(const Tensor& adjacency, double c = 1.0);

// Batch mean of ||u - sigma(A^T u)||^2 (or ||u - A^T u||^2); u is [B, n].
Tensor label_constraint_lu(const Tensor& adjacency, const Tensor& labels, bool use_sigmoid);

// Batch mean of sum_i ||z_i - zhat_i||^2.
Tensor mask_constraint_lm(const Tensor& z, const Tensor& z_hat);

// Discrete graph helpers over |A| >= threshold.
using Edge = std::pair<std::size_t, std::size_t>;  // (from, to)

struct WeightedEdge {
  std::size_t from;
  std::size_t to;
  double weight;
};

std::vector<WeightedEdge> pruned_edges(const Tensor& adjacency, double threshold);
std::vector<std::vector<bool>> pruned_mask(const Tensor& adjacency, double threshold);
// Kahn order; nullopt when the graph has a directed cycle.
std::optional<std::vector<std::size_t>> topological_order(const std::vector<std::vector<bool>>& graph);
// Concepts reachable from `source` by a directed path (excluding source).
std::vector<bool> descendants(const std::vector<std::vector<bool>>& graph, std::size_t source);

}  // namespace causalvae::scm
