#include "causalvae/scm.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace causalvae::scm {

using ad::Shape;

namespace {

void require_adjacency(const char* op, const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw ad::ShapeError(std::string(op) + ": adjacency must be square, got " + ad::to_string(a.shape()));
  }
}

Tensor normal_tensor(Shape shape, std::mt19937_64& rng, double sd) {
  std::normal_distribution<double> dist(0.0, sd);
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = sd > 0.0 ? dist(rng) : 0.0;
  return Tensor::parameter(std::move(shape), std::move(v));
}

}  // namespace

Tensor causal_matrix(const Tensor& adjacency) {
  require_adjacency("causal_layer", adjacency);
  const std::size_t n = adjacency.dim(0);
  try {
    return ad::inverse(ad::sub(Tensor::eye(n), ad::transpose(adjacency)));
  } catch (const ad::SingularMatrixError& e) {
    double h = 0.0;
    {
      ad::NoGradGuard no_grad;
      h = dag_constraint(adjacency).item();
    }
    std::ostringstream os;
    os << "causal_layer: I - A^T is singular (|det| = " << e.abs_det() << ", H(A) = " << h << ")";
    throw ad::SingularMatrixError(os.str(), e.abs_det());
  }
}

Tensor causal_layer(const Tensor& eps, const Tensor& adjacency) {
  require_adjacency("causal_layer", adjacency);
  if (eps.rank() != 3 || eps.dim(1) != adjacency.dim(0)) {
    throw ad::ShapeError("causal_layer: eps " + ad::to_string(eps.shape()) + " does not match adjacency " +
                         ad::to_string(adjacency.shape()));
  }
  return ad::matmul(causal_matrix(adjacency), eps);
}

MaskParams MaskParams::init(std::size_t n, std::size_t k, std::size_t hidden, std::mt19937_64& rng,
                            double gain, double noise) {
  if (hidden < k) throw std::invalid_argument("MaskParams: hidden width must be at least k");
  MaskParams p;
  p.n = n;
  p.k = k;
  p.hidden = hidden;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor w1 = normal_tensor({n * k, hidden}, rng, noise);
    Tensor w2 = normal_tensor({hidden, k}, rng, noise);
    auto w1v = w1.mutable_values();
    auto w2v = w2.mutable_values();
    for (std::size_t s = 0; s < k; ++s) {
      for (std::size_t j = 0; j < n; ++j) w1v[(j * k + s) * hidden + s] = gain;
      w2v[s * k + s] = 1.0 / gain;
    }
    p.w1.push_back(std::move(w1));
    p.b1.push_back(Tensor::parameter({hidden}, std::vector<double>(hidden, 0.0)));
    p.w2.push_back(std::move(w2));
    p.b2.push_back(Tensor::parameter({k}, std::vector<double>(k, 0.0)));
  }
  return p;
}

std::vector<Tensor> MaskParams::parameters() const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(w1[i]);
    out.push_back(b1[i]);
    out.push_back(w2[i]);
    out.push_back(b2[i]);
  }
  return out;
}

Tensor mask_concept(const Tensor& z, const Tensor& adjacency, const MaskParams& mask, std::size_t i) {
  require_adjacency("mask_layer", adjacency);
  const std::size_t n = adjacency.dim(0);
  if (z.rank() != 3 || z.dim(1) != n || n != mask.n || z.dim(2) != mask.k) {
    throw ad::ShapeError("mask_layer: z " + ad::to_string(z.shape()) + " inconsistent with adjacency " +
                         ad::to_string(adjacency.shape()) + " and k = " + std::to_string(mask.k));
  }
  if (i >= n) throw std::out_of_range("mask_layer: concept index out of range");
  Tensor parents = ad::reshape(ad::select(adjacency, 1, i), {n, 1});
  Tensor masked = ad::flatten(ad::mul(z, parents), 1);
  Tensor hidden = ad::tanh(ad::add(ad::matmul(masked, mask.w1[i]), mask.b1[i]));
  return ad::add(ad::matmul(hidden, mask.w2[i]), mask.b2[i]);
}

Tensor mask_layer(const Tensor& z, const Tensor& adjacency, const MaskParams& mask) {
  std::vector<Tensor> parts;
  parts.reserve(mask.n);
  for (std::size_t i = 0; i < mask.n; ++i) {
    Tensor zi = mask_concept(z, adjacency, mask, i);
    parts.push_back(ad::reshape(zi, {zi.dim(0), 1, mask.k}));
  }
  return ad::concat(parts, 1);
}

Tensor dag_constraint(const Tensor& adjacency, double c) {
  require_adjacency("dag_constraint", adjacency);
  const std::size_t n = adjacency.dim(0);
  Tensor m = ad::add(Tensor::eye(n), ad::scale(ad::square(adjacency), c / static_cast<double>(n)));
  Tensor power = m;
  for (std::size_t p = 1; p < n; ++p) power = ad::matmul(power, m);
  return ad::add_scalar(ad::trace(power), -static_cast<double>(n));
}

Tensor label_constraint_lu(const Tensor& adjacency, const Tensor& labels, bool use_sigmoid) {
  require_adjacency("label_constraint_lu", adjacency);
  if (labels.rank() != 2 || labels.dim(1) != adjacency.dim(0)) {
    throw ad::ShapeError("label_constraint_lu: labels " + ad::to_string(labels.shape()) +
                         " do not match adjacency " + ad::to_string(adjacency.shape()));
  }
  Tensor pred = ad::matmul(labels, adjacency);  // row b: (A^T u_b)^T
  if (use_sigmoid) pred = ad::sigmoid(pred);
  return ad::scale(ad::sum(ad::square(ad::sub(labels, pred))), 1.0 / static_cast<double>(labels.dim(0)));
}

Tensor mask_constraint_lm(const Tensor& z, const Tensor& z_hat) {
  if (z.shape() != z_hat.shape() || z.rank() == 0) {
    throw ad::ShapeError("mask_constraint_lm: shapes " + ad::to_string(z.shape()) + " and " +
                         ad::to_string(z_hat.shape()));
  }
  return ad::scale(ad::sum(ad::square(ad::sub(z, z_hat))), 1.0 / static_cast<double>(z.dim(0)));
}

std::vector<WeightedEdge> pruned_edges(const Tensor& adjacency, double threshold) {
  require_adjacency("pruned_edges", adjacency);
  const std::size_t n = adjacency.dim(0);
  std::vector<WeightedEdge> edges;
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      const double w = adjacency.at(j * n + i);
      if (i != j && std::abs(w) >= threshold) edges.push_back({j, i, w});
    }
  }
  return edges;
}

std::vector<std::vector<bool>> pruned_mask(const Tensor& adjacency, double threshold) {
  const std::size_t n = adjacency.dim(0);
  std::vector<std::vector<bool>> graph(n, std::vector<bool>(n, false));
  for (const auto& e : pruned_edges(adjacency, threshold)) graph[e.from][e.to] = true;
  return graph;
}

std::optional<std::vector<std::size_t>> topological_order(const std::vector<std::vector<bool>>& graph) {
  const std::size_t n = graph.size();
  std::vector<std::size_t> indegree(n, 0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < n; ++i) indegree[i] += graph[j][i] ? 1 : 0;
  }
  std::vector<std::size_t> order;
  std::vector<bool> done(n, false);
  while (order.size() < n) {
    bool progressed = false;
    for (std::size_t v = 0; v < n; ++v) {
      if (done[v] || indegree[v] != 0) continue;
      done[v] = true;
      order.push_back(v);
      for (std::size_t i = 0; i < n; ++i) indegree[i] -= graph[v][i] ? 1 : 0;
      progressed = true;
      break;
    }
    if (!progressed) return std::nullopt;
  }
  return order;
}

std::vector<bool> descendants(const std::vector<std::vector<bool>>& graph, std::size_t source) {
  const std::size_t n = graph.size();
  std::vector<bool> reached(n, false);
  std::vector<std::size_t> stack{source};
  while (!stack.empty()) {
    const std::size_t v = stack.back();
    stack.pop_back();
    for (std::size_t i = 0; i < n; ++i) {
      if (graph[v][i] && !reached[i] && i != source) {
        reached[i] = true;
        stack.push_back(i);
      }
    }
  }
  return reached;
}

}  // namespace causalvae::scm
