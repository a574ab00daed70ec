#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "causalvae/autodiff.hpp"
#include "causalvae/vae.hpp"

// do-operations on the latent concepts of a trained model.
//
// A request clamps z_i to a value and pushes the change through the mask
// layer to the descendants of i in the pruned graph, one concept at a time in
// topological order. Each descendant keeps its own exogenous residual: it
// moves by g_j(after) - g_j(before), so concepts off the affected paths are
// left bit-for-bit untouched and clamping z_i to its current value is a no-op.
namespace causalvae::intervention {

using ad::Tensor;

class InterventionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DoRequest {
  std::size_t concept_index = 0;
  // Either one scalar (broadcast over the k sub-dimensions) or k values.
  std::vector<double> value;
  // Use the posterior mean; otherwise sample with the variance rescaled.
  bool deterministic = true;
  double variance_scale = 0.1;
  std::uint64_t seed = 0;
};

// The pruned graph that drives propagation.
struct PrunedGraph {
  Tensor adjacency;  // effective A with entries below the threshold zeroed
  std::vector<std::vector<bool>> edges;
  std::vector<std::size_t> order;  // topological
};

// Throws InterventionError when the pruned graph has a directed cycle.
PrunedGraph prune_graph(const vae::Model& model, double threshold);

// Latents for one sample: x is [1, D], u is [1, n]; returns z of shape [1, n, k].
Tensor infer_latents(const vae::Model& model, const Tensor& x, const Tensor& u, const DoRequest& request);

// Applies do(z_i := v) to z of shape [1, n, k] and returns the new latents.
Tensor apply_do(const vae::Model& model, const PrunedGraph& graph, const Tensor& z, std::size_t concept_index,
                const std::vector<double>& value);

struct Counterfactual {
  Tensor image;           // [1, D], decoded from z_after
  Tensor reconstruction;  // [1, D], decoded from z_before
  Tensor z_before;        // [1, n, k]
  Tensor z_after;         // [1, n, k]
  std::vector<bool> affected;  // concepts that may differ: the target and its descendants
};

Counterfactual intervene(const vae::Model& model, double threshold, const Tensor& x, const Tensor& u,
                         const DoRequest& request);

// One decoded image per value, in order; the other request fields are shared.
std::vector<Tensor> traverse(const vae::Model& model, double threshold, const Tensor& x, const Tensor& u,
                             const DoRequest& request, const std::vector<std::vector<double>>& values);

}  // namespace causalvae::intervention
