#include "causalvae/intervention.hpp"

#include <cmath>
#include <string>

#include "causalvae/rng.hpp"
#include "causalvae/scm.hpp"

namespace causalvae::intervention {

namespace {

constexpr std::uint64_t kSamplingStream = 7;

void check_request(const vae::ModelConfig& c, std::size_t concept_index, const std::vector<double>& value) {
  if (concept_index >= c.n) {
    throw InterventionError("concept index " + std::to_string(concept_index) + " out of range for " +
                            std::to_string(c.n) + " concepts");
  }
  if (value.size() != 1 && value.size() != c.k) {
    throw InterventionError("intervention value needs 1 or " + std::to_string(c.k) + " entries, got " +
                            std::to_string(value.size()));
  }
  for (double v : value) {
    if (!std::isfinite(v)) throw InterventionError("intervention value must be finite");
  }
}

}  // namespace

PrunedGraph prune_graph(const vae::Model& model, double threshold) {
  if (!(threshold >= 0.0)) throw InterventionError("prune threshold must be non-negative");
  PrunedGraph g;
  const Tensor a = model.effective_adjacency().detach();
  const std::size_t n = a.dim(0);
  g.edges = scm::pruned_mask(a, threshold);
  std::vector<double> kept(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      if (g.edges[j][i]) kept[j * n + i] = a.at(j * n + i);
    }
  }
  g.adjacency = Tensor::from({n, n}, std::move(kept));
  auto order = scm::topological_order(g.edges);
  if (!order) throw InterventionError("pruned causal graph has a directed cycle; no intervention order exists");
  g.order = std::move(*order);
  return g;
}

Tensor infer_latents(const vae::Model& model, const Tensor& x, const Tensor& u, const DoRequest& request) {
  if (x.rank() != 2 || x.dim(0) != 1) throw InterventionError("intervene expects a single image of shape [1, D]");
  if (!(request.variance_scale >= 0.0)) throw InterventionError("variance scale must be non-negative");
  ad::NoGradGuard guard;
  const vae::Encoding enc = vae::encode(model, x, u);
  Tensor eps = enc.mu;
  if (!request.deterministic) {
    auto rng = stream_rng(request.seed, kSamplingStream);
    // variance * s  <=>  logvar + log s
    const Tensor scaled = request.variance_scale > 0.0 ? ad::add_scalar(enc.logvar, std::log(request.variance_scale))
                                                       : Tensor::full(enc.logvar.shape(), -INFINITY);
    eps = vae::reparameterize(enc.mu, scaled, rng);
  }
  return scm::causal_layer(eps, model.effective_adjacency());
}

Tensor apply_do(const vae::Model& model, const PrunedGraph& graph, const Tensor& z, std::size_t concept_index,
                const std::vector<double>& value) {
  const vae::ModelConfig& c = model.config;
  check_request(c, concept_index, value);
  if (z.rank() != 3 || z.dim(0) != 1 || z.dim(1) != c.n || z.dim(2) != c.k) {
    throw InterventionError("latents must have shape [1, " + std::to_string(c.n) + ", " + std::to_string(c.k) + "]");
  }
  ad::NoGradGuard guard;
  const std::size_t k = c.k;
  std::vector<double> after(z.values().begin(), z.values().end());
  for (std::size_t s = 0; s < k; ++s) after[concept_index * k + s] = value.size() == 1 ? value[0] : value[s];

  const std::vector<bool> downstream = scm::descendants(graph.edges, concept_index);
  for (std::size_t j : graph.order) {
    if (!downstream[j]) continue;
    const Tensor current = Tensor::from(z.shape(), after);
    const Tensor moved = scm::mask_concept(current, graph.adjacency, model.mask, j);
    const Tensor before = scm::mask_concept(z, graph.adjacency, model.mask, j);
    for (std::size_t s = 0; s < k; ++s) after[j * k + s] = z.at(j * k + s) + (moved.at(s) - before.at(s));
  }
  return Tensor::from(z.shape(), std::move(after));
}

Counterfactual intervene(const vae::Model& model, double threshold, const Tensor& x, const Tensor& u,
                         const DoRequest& request) {
  check_request(model.config, request.concept_index, request.value);
  const PrunedGraph graph = prune_graph(model, threshold);
  ad::NoGradGuard guard;
  Counterfactual cf;
  cf.z_before = infer_latents(model, x, u, request);
  cf.z_after = apply_do(model, graph, cf.z_before, request.concept_index, request.value);
  cf.reconstruction = vae::decode(model, cf.z_before);
  cf.image = vae::decode(model, cf.z_after);
  cf.affected = scm::descendants(graph.edges, request.concept_index);
  cf.affected[request.concept_index] = true;
  return cf;
}

std::vector<Tensor> traverse(const vae::Model& model, double threshold, const Tensor& x, const Tensor& u,
                             const DoRequest& request, const std::vector<std::vector<double>>& values) {
  check_request(model.config, request.concept_index, values.empty() ? std::vector<double>{0.0} : values.front());
  const PrunedGraph graph = prune_graph(model, threshold);
  std::vector<Tensor> strip;
  if (values.empty()) return strip;
  ad::NoGradGuard guard;
  const Tensor z = infer_latents(model, x, u, request);
  strip.reserve(values.size());
  for (const auto& v : values) strip.push_back(vae::decode(model, apply_do(model, graph, z, request.concept_index, v)));
  return strip;
}

}  // namespace causalvae::intervention
