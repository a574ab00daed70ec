#include "causalvae/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace causalvae::ad {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw ShapeError(op + ": " + detail);
}

std::string shapes_str(const Shape& a, const Shape& b) {
  return to_string(a) + " and " + to_string(b);
}

Tensor make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    shape_error("tensor", "shape " + to_string(shape) + " needs " + std::to_string(numel(shape)) +
                              " values, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<Node>();
  node->op = "leaf";
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor make_result(std::string op, Shape shape, std::vector<double> value,
                   std::vector<NodePtr> inputs, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) track = track || in->requires_grad;
  }
  if (track) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

// Maps an output flat index to the flat index of a broadcast input.
class BroadcastMap {
 public:
  BroadcastMap(const Shape& in, const Shape& out) {
    const std::size_t n_in = numel(in);
    if (in == out) {
      kind_ = Kind::kSame;
    } else if (n_in == 1) {
      kind_ = Kind::kScalar;
    } else if (in.size() <= out.size() &&
               std::equal(in.begin(), in.end(), out.end() - static_cast<long>(in.size()))) {
      kind_ = Kind::kSuffix;
      period_ = n_in;
    } else {
      kind_ = Kind::kGeneral;
      const std::size_t n_out = numel(out);
      index_.resize(n_out);
      const std::size_t offset = out.size() - in.size();
      std::vector<std::size_t> in_strides(in.size(), 1);
      for (std::size_t d = in.size(); d-- > 1;) in_strides[d - 1] = in_strides[d] * in[d];
      std::vector<std::size_t> coord(out.size(), 0);
      for (std::size_t i = 0; i < n_out; ++i) {
        std::size_t idx = 0;
        for (std::size_t d = 0; d < in.size(); ++d) {
          if (in[d] != 1) idx += coord[d + offset] * in_strides[d];
        }
        index_[i] = idx;
        for (std::size_t d = out.size(); d-- > 0;) {
          if (++coord[d] < out[d]) break;
          coord[d] = 0;
        }
      }
    }
  }

  std::size_t operator()(std::size_t i) const {
    switch (kind_) {
      case Kind::kSame:
        return i;
      case Kind::kScalar:
        return 0;
      case Kind::kSuffix:
        return i % period_;
      case Kind::kGeneral:
        break;
    }
    return index_[i];
  }

 private:
  enum class Kind { kSame, kScalar, kSuffix, kGeneral };
  Kind kind_ = Kind::kSame;
  std::size_t period_ = 1;
  std::vector<std::size_t> index_;
};

Shape broadcast_shape(const std::string& op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) shape_error(op, "cannot broadcast " + shapes_str(a, b));
    out[i] = std::max(da, db);
  }
  return out;
}

template <typename Fwd, typename DA, typename DB>
Tensor binary(const std::string& op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  Shape out_shape = broadcast_shape(op, a.shape(), b.shape());
  const std::size_t n = numel(out_shape);
  auto map_a = std::make_shared<BroadcastMap>(a.shape(), out_shape);
  auto map_b = std::make_shared<BroadcastMap>(b.shape(), out_shape);
  std::vector<double> out(n);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[(*map_a)(i)], bv[(*map_b)(i)]);
  return make_result(op, std::move(out_shape), std::move(out), {a.node(), b.node()},
                     [map_a, map_b, da, db](Node& self) {
                       Node& na = *self.inputs[0];
                       Node& nb = *self.inputs[1];
                       const std::size_t n = self.value.size();
                       if (na.requires_grad) {
                         auto& ga = na.ensure_grad();
                         for (std::size_t i = 0; i < n; ++i) {
                           const std::size_t ia = (*map_a)(i);
                           ga[ia] += self.grad[i] * da(na.value[ia], nb.value[(*map_b)(i)]);
                         }
                       }
                       if (nb.requires_grad) {
                         auto& gb = nb.ensure_grad();
                         for (std::size_t i = 0; i < n; ++i) {
                           const std::size_t ib = (*map_b)(i);
                           gb[ib] += self.grad[i] * db(na.value[(*map_a)(i)], nb.value[ib]);
                         }
                       }
                     });
}

// Unary op whose derivative is expressed through input x and output y.
template <typename Fwd, typename Deriv>
Tensor unary(const std::string& op, const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(op, x.shape(), std::move(out), {x.node()}, [deriv](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * deriv(in.value[i], self.value[i]);
    }
  });
}

// c = op(a) * op(b) + beta * c for row-major buffers; op(a) is m x k, op(b) is k x n.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double beta, double* c) {
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const RowMajor>;
  const auto rows = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  Eigen::Map<RowMajor> out(c, rows(m), rows(n));
  const ConstMap ma(a, rows(trans_a ? k : m), rows(trans_a ? m : k));
  const ConstMap mb(b, rows(trans_b ? n : k), rows(trans_b ? k : n));
  if (beta == 0.0) {
    out.setZero();
  } else if (beta != 1.0) {
    out *= beta;
  }
  if (trans_a && trans_b) {
    out.noalias() += ma.transpose() * mb.transpose();
  } else if (trans_a) {
    out.noalias() += ma.transpose() * mb;
  } else if (trans_b) {
    out.noalias() += ma * mb.transpose();
  } else {
    out.noalias() += ma * mb;
  }
}

struct GaussJordan {
  std::vector<double> inverse;
  double det = 1.0;
};

GaussJordan gauss_jordan(const std::vector<double>& m, std::size_t n) {
  std::vector<double> a = m;
  GaussJordan out;
  out.inverse.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) out.inverse[i * n + i] = 1.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a[r * n + col]) > std::abs(a[pivot * n + col])) pivot = r;
    }
    if (pivot != col) {
      for (std::size_t j = 0; j < n; ++j) {
        std::swap(a[col * n + j], a[pivot * n + j]);
        std::swap(out.inverse[col * n + j], out.inverse[pivot * n + j]);
      }
      out.det = -out.det;
    }
    const double p = a[col * n + col];
    out.det *= p;
    if (p == 0.0) return out;
    for (std::size_t j = 0; j < n; ++j) {
      a[col * n + j] /= p;
      out.inverse[col * n + j] /= p;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a[r * n + col];
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        a[r * n + j] -= f * a[col * n + j];
        out.inverse[r * n + j] -= f * out.inverse[col * n + j];
      }
    }
  }
  return out;
}

void require_square(const std::string& op, const Tensor& m, std::size_t max_n) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) shape_error(op, "expected square matrix, got " + to_string(m.shape()));
  if (m.dim(0) > max_n) shape_error(op, "matrix larger than " + std::to_string(max_n) + "x" + std::to_string(max_n));
}

GaussJordan checked_inverse(const std::string& op, const Tensor& m) {
  const std::size_t n = m.dim(0);
  GaussJordan gj = gauss_jordan(std::vector<double>(m.values().begin(), m.values().end()), n);
  if (!(std::abs(gj.det) >= 1e-12)) {
    std::ostringstream os;
    os << op << ": singular matrix (|det| = " << std::abs(gj.det) << ")";
    throw SingularMatrixError(os.str(), std::abs(gj.det));
  }
  return gj;
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  return make_leaf(std::move(shape), std::move(values), false);
}
Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = numel(shape);
  return make_leaf(std::move(shape), std::vector<double>(n, value), false);
}
Tensor Tensor::scalar(double value) { return make_leaf({}, {value}, false); }
Tensor Tensor::eye(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return make_leaf({n, n}, std::move(v), false);
}
Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  return make_leaf(std::move(shape), std::move(values), true);
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  return node_->value[0];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  return *this;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return make_leaf(shape(), node_->value, false); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double factor) {
  return unary(
      "scale", x, [factor](double v) { return factor * v; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary(
      "add_scalar", x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Tensor elu(const Tensor& x) {
  return unary(
      "elu", x, [](double v) { return v > 0.0 ? v : std::expm1(v); },
      [](double v, double y) { return v > 0.0 ? 1.0 : y + 1.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0.0)) throw std::domain_error("log: non-positive input " + std::to_string(v));
  }
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
  return unary(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor sum(const Tensor& x) {
  const auto v = x.values();
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  return make_result("sum", {}, {total}, {x.node()}, [](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (double& gi : g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) shape_error("mean", "empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) shape_error("sum", "axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
  const Shape& s = x.shape();
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
  const std::size_t len = s[axis];
  const std::size_t inner = numel(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  std::vector<double> out(outer * inner, 0.0);
  const auto v = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      const double* src = v.data() + (o * len + l) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  return make_result("sum_axis", std::move(out_shape), std::move(out), {x.node()},
                     [outer, len, inner](Node& self) {
                       auto& g = self.inputs[0]->ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t l = 0; l < len; ++l) {
                           for (std::size_t i = 0; i < inner; ++i) {
                             g[(o * len + l) * inner + i] += self.grad[o * inner + i];
                           }
                         }
                       }
                     });
}

Tensor mean(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank() || x.dim(axis) == 0) shape_error("mean", "bad axis for " + to_string(x.shape()));
  return scale(sum(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool batched_a = a.rank() == 3;
  const bool batched_b = b.rank() == 3;
  if ((a.rank() != 2 && !batched_a) || (b.rank() != 2 && !batched_b)) {
    shape_error("matmul", "unsupported ranks " + shapes_str(a.shape(), b.shape()));
  }
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2);
  const std::size_t n = b.dim(b.rank() - 1);
  if (k != kb) shape_error("matmul", "inner dimensions differ " + shapes_str(a.shape(), b.shape()));
  std::size_t batch = 1;
  if (batched_a && batched_b && a.dim(0) != b.dim(0)) {
    shape_error("matmul", "batch sizes differ " + shapes_str(a.shape(), b.shape()));
  }
  if (batched_a) batch = a.dim(0);
  if (batched_b) batch = b.dim(0);

  Shape out_shape = (batched_a || batched_b) ? Shape{batch, m, n} : Shape{m, n};
  std::vector<double> out(batch * m * n);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  if (batched_a && !batched_b) {
    gemm(false, false, batch * m, n, k, av, bv, 0.0, out.data());
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      gemm(false, false, m, n, k, av + (batched_a ? i * m * k : 0), bv + (batched_b ? i * k * n : 0),
           0.0, out.data() + i * m * n);
    }
  }
  return make_result(
      "matmul", std::move(out_shape), std::move(out), {a.node(), b.node()},
      [batch, m, n, k, batched_a, batched_b](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        const double* g = self.grad.data();
        if (na.requires_grad) {
          auto& ga = na.ensure_grad();
          if (batched_a && !batched_b) {
            gemm(false, true, batch * m, k, n, g, nb.value.data(), 1.0, ga.data());
          } else {
            for (std::size_t i = 0; i < batch; ++i) {
              gemm(false, true, m, k, n, g + i * m * n, nb.value.data() + (batched_b ? i * k * n : 0),
                   1.0, ga.data() + (batched_a ? i * m * k : 0));
            }
          }
        }
        if (nb.requires_grad) {
          auto& gb = nb.ensure_grad();
          if (batched_a && !batched_b) {
            gemm(true, false, k, n, batch * m, na.value.data(), g, 1.0, gb.data());
          } else {
            for (std::size_t i = 0; i < batch; ++i) {
              gemm(true, false, k, n, m, na.value.data() + (batched_a ? i * m * k : 0), g + i * m * n,
                   1.0, gb.data() + (batched_b ? i * k * n : 0));
            }
          }
        }
      });
}

Tensor transpose(const Tensor& m) {
  if (m.rank() != 2) shape_error("transpose", "expected matrix, got " + to_string(m.shape()));
  const std::size_t r = m.dim(0);
  const std::size_t c = m.dim(1);
  std::vector<double> out(r * c);
  const auto v = m.values();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  }
  return make_result("transpose", {c, r}, std::move(out), {m.node()}, [r, c](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    }
  });
}

Tensor trace(const Tensor& m) {
  require_square("trace", m, static_cast<std::size_t>(-1));
  const std::size_t n = m.dim(0);
  double t = 0.0;
  for (std::size_t i = 0; i < n; ++i) t += m.values()[i * n + i];
  return make_result("trace", {}, {t}, {m.node()}, [n](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) g[i * n + i] += self.grad[0];
  });
}

Tensor inverse(const Tensor& m) {
  require_square("inverse", m, 8);
  const std::size_t n = m.dim(0);
  GaussJordan gj = checked_inverse("inverse", m);
  return make_result("inverse", {n, n}, std::move(gj.inverse), {m.node()}, [n](Node& self) {
    // dM = -C^T G C^T
    const double* c = self.value.data();
    std::vector<double> tmp(n * n);
    gemm(true, false, n, n, n, c, self.grad.data(), 0.0, tmp.data());
    auto& g = self.inputs[0]->ensure_grad();
    std::vector<double> d(n * n);
    gemm(false, true, n, n, n, tmp.data(), c, 0.0, d.data());
    for (std::size_t i = 0; i < n * n; ++i) g[i] -= d[i];
  });
}

Tensor log_abs_det(const Tensor& m) {
  require_square("log_abs_det", m, 8);
  const std::size_t n = m.dim(0);
  GaussJordan gj = checked_inverse("log_abs_det", m);
  auto inv = std::make_shared<std::vector<double>>(std::move(gj.inverse));
  return make_result("log_abs_det", {}, {std::log(std::abs(gj.det))}, {m.node()},
                     [n, inv](Node& self) {
                       auto& g = self.inputs[0]->ensure_grad();
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[0] * (*inv)[j * n + i];
                       }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    shape_error("reshape", "cannot reshape " + shapes_str(x.shape(), shape));
  }
  return make_result("reshape", std::move(shape), std::vector<double>(x.values().begin(), x.values().end()),
                     {x.node()}, [](Node& self) {
                       auto& g = self.inputs[0]->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                     });
}

Tensor flatten(const Tensor& x, std::size_t start_axis) {
  if (start_axis >= x.rank()) shape_error("flatten", "start axis out of range for " + to_string(x.shape()));
  Shape s(x.shape().begin(), x.shape().begin() + static_cast<long>(start_axis));
  s.push_back(numel(Shape(x.shape().begin() + static_cast<long>(start_axis), x.shape().end())));
  return reshape(x, std::move(s));
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) shape_error("concat", "axis out of range for " + to_string(first));
  std::vector<std::size_t> lens;
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) shape_error("concat", "incompatible " + shapes_str(first, s));
    lens.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = numel(Shape(first.begin(), first.begin() + static_cast<long>(axis)));
  const std::size_t inner = numel(Shape(first.begin() + static_cast<long>(axis) + 1, first.end()));
  const std::size_t total = out_shape[axis];
  std::vector<double> out(outer * total * inner);
  std::vector<NodePtr> inputs;
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].values();
    const std::size_t chunk = lens[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data() + o * chunk, chunk, out.data() + (o * total + offset) * inner);
    }
    offset += lens[p];
    inputs.push_back(parts[p].node());
  }
  return make_result("concat", std::move(out_shape), std::move(out), std::move(inputs),
                     [outer, inner, total, lens](Node& self) {
                       std::size_t offset = 0;
                       for (std::size_t p = 0; p < self.inputs.size(); ++p) {
                         Node& in = *self.inputs[p];
                         const std::size_t chunk = lens[p] * inner;
                         if (in.requires_grad) {
                           auto& g = in.ensure_grad();
                           for (std::size_t o = 0; o < outer; ++o) {
                             const double* src = self.grad.data() + (o * total + offset) * inner;
                             for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += src[i];
                           }
                         }
                         offset += lens[p];
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    shape_error("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                             std::to_string(axis) + " of " + to_string(s));
  }
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
  const std::size_t inner = numel(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
  const std::size_t len = s[axis];
  const std::size_t width = end - begin;
  Shape out_shape = s;
  out_shape[axis] = width;
  std::vector<double> out(outer * width * inner);
  const auto v = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(v.data() + (o * len + begin) * inner, width * inner, out.data() + o * width * inner);
  }
  return make_result("slice", std::move(out_shape), std::move(out), {x.node()},
                     [outer, inner, len, begin, width](Node& self) {
                       auto& g = self.inputs[0]->ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o) {
                         const double* src = self.grad.data() + o * width * inner;
                         double* dst = g.data() + (o * len + begin) * inner;
                         for (std::size_t i = 0; i < width * inner; ++i) dst[i] += src[i];
                       }
                     });
}

Tensor select(const Tensor& x, std::size_t axis, std::size_t index) {
  Tensor s = slice(x, axis, index, index + 1);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<long>(axis));
  return reshape(s, std::move(shape));
}

void backward(const Tensor& root) {
  if (!root.defined() || root.size() != 1) {
    throw ShapeError("backward: root must be a scalar, got " +
                     (root.defined() ? to_string(root.shape()) : std::string("undefined")));
  }
  if (!root.requires_grad()) return;

  // Post-order DFS gives inputs before consumers.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* node : order) {
    if (!node->is_leaf()) node->grad.assign(node->value.size(), 0.0);
  }
  root.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->is_leaf()) continue;
    node->backward_fn(*node);
    std::vector<double>().swap(node->grad);
  }
}

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                  const std::vector<Tensor>& point, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  std::vector<Tensor> params;
  params.reserve(point.size());
  for (const auto& p : point) {
    params.push_back(Tensor::parameter(p.shape(), std::vector<double>(p.values().begin(), p.values().end())));
  }
  const Tensor out = fn(params);
  if (!std::isfinite(out.item())) throw std::domain_error("grad_check: non-finite function value");
  backward(out);

  NoGradGuard no_grad;
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<double> analytic(p.size(), 0.0);
    if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());
    auto values = p.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + step;
      const double up = fn(params).item();
      values[i] = original - step;
      const double down = fn(params).item();
      values[i] = original;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw std::domain_error("grad_check: non-finite function value");
      }
      const double numeric = (up - down) / (2.0 * step);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
    }
  }
  return worst;
}

}  // namespace causalvae::ad
