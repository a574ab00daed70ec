#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// Minimal reverse-mode differentiation over dense row-major double arrays.
//
// Every op returns a new Tensor. When any input requires a gradient the
// result records its inputs and a backward rule, so the graph is rebuilt on
// each forward pass and discarded with the last Tensor that references it.
namespace causalvae::ad {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class SingularMatrixError : public std::runtime_error {
 public:
  SingularMatrixError(const std::string& what, double abs_det)
      : std::runtime_error(what), abs_det_(abs_det) {}
  double abs_det() const { return abs_det_; }

 private:
  double abs_det_;
};

struct Node {
  std::string op;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until backward touches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return inputs.empty(); }
  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor eye(std::size_t n);
  // Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  const std::string& op() const { return node_->op; }

  std::span<const double> values() const { return node_->value; }
  // Writes bypass the graph; only meaningful on leaves.
  std::span<double> mutable_values() { return node_->value; }
  double item() const;
  double at(std::size_t flat_index) const { return node_->value.at(flat_index); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad();

  // Same values, no history.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// Elementwise binary ops broadcast numpy-style (trailing axes aligned).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);

Tensor elu(const Tensor& x);  // alpha = 1
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis);

// [m,k]x[k,n], [m,k]x[B,k,n], [B,m,k]x[k,n], [B,m,k]x[B,k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& m);
Tensor trace(const Tensor& m);
// Gauss-Jordan with partial pivoting; throws SingularMatrixError when
// |det| < 1e-12. Square matrices up to 8x8.
Tensor inverse(const Tensor& m);
Tensor log_abs_det(const Tensor& m);

Tensor reshape(const Tensor& x, Shape shape);
Tensor flatten(const Tensor& x, std::size_t start_axis = 1);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
// Removes `axis`.
Tensor select(const Tensor& x, std::size_t axis, std::size_t index);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }
inline Tensor operator*(const Tensor& x, double c) { return scale(x, c); }
inline Tensor operator+(const Tensor& x, double c) { return add_scalar(x, c); }

// Fills grad of every tracked leaf reachable from `root` with d root / d leaf,
// adding to whatever the leaf already holds.
void backward(const Tensor& root);

// max_i |analytic_i - central_i| / max(1, |analytic_i|) over every coordinate
// of every tensor in `point`.
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                  const std::vector<Tensor>& point, double step);

}  // namespace causalvae::ad
