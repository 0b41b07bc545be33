#pragma once

// Dense reverse-mode automatic differentiation.
//
// A Tensor is a handle to a graph node holding row-major double values.
// Operations on tensors that require gradients record a backward rule;
// backward() on a scalar walks the recorded graph in reverse topological
// order and accumulates gradients into the leaves.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sfpose {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b);
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grad.
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Mutable access to a leaf's values (parameter updates, finite differences).
  // Throws for interior nodes: tracked intermediates are immutable.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat) const { return node_->value[flat]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const { return node_->is_leaf; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->grad.empty(); }
  std::span<const double> grad() const;
  void zero_grad();
  const char* op_name() const { return node_->op; }

  // Copy of the values with no graph history.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// While alive, operations on this thread record no graph (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// Runs the reverse pass from a scalar tensor. Leaf gradients accumulate
// across calls; intermediate gradients are recomputed each call.
void backward(const Tensor& loss);

// ---- elementwise ---------------------------------------------------------
// Binary ops broadcast numpy-style over trailing dimensions.
enum class BinaryOp { add, sub, mul, div };
enum class UnaryOp { neg, exp, log, relu, sigmoid, softplus, sqrt, square, sin, cos, abs };

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(UnaryOp op, const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
// max(a, lo); gradient passes only where a > lo.
Tensor clamp_min(const Tensor& a, double lo);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }

// ---- linear algebra ------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // 2-D only

// ---- reductions ----------------------------------------------------------
enum class ReduceOp { sum, mean, weighted_sum };

// Reduces over `axes` (all axes when empty), removing them from the shape.
// weighted_sum requires `weights` broadcastable to `a`.
Tensor reduce(ReduceOp op, const Tensor& a, std::vector<std::size_t> axes = {},
              const Tensor* weights = nullptr);
Tensor sum(const Tensor& a, std::vector<std::size_t> axes = {});
Tensor mean(const Tensor& a, std::vector<std::size_t> axes = {});
Tensor weighted_sum(const Tensor& a, const Tensor& w, std::vector<std::size_t> axes = {});

// Cumulative sum along `axis`; exclusive shifts by one (first entry 0).
Tensor cumsum(const Tensor& a, std::size_t axis, bool exclusive);

// ---- shape manipulation --------------------------------------------------
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
// Selects entries along axis 0.
Tensor index_select(const Tensor& a, std::span<const std::size_t> rows);
// Stacks equal-shape tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& parts);

// ---- image ops -----------------------------------------------------------
// Bilinear lookup into an H x W x C map at N x 2 pixel coordinates (x, y).
// Integer coordinates address pixel centers; coordinates outside the map
// clamp to the border and receive zero coordinate gradient on that axis.
Tensor bilinear_sample(const Tensor& feature_map, const Tensor& coords);

// Patch unfolding for convolution: H x W x C -> (Ho*Wo) x (k*k*C), zero
// padded by `pad`, sampled with `stride`.
Tensor unfold(const Tensor& image, std::size_t kernel, std::size_t stride, std::size_t pad);

// ---- 3x3 SVD -------------------------------------------------------------
struct Svd3 {
  Tensor u;  // 3x3, columns are left singular vectors
  Tensor s;  // {3}, descending
  Tensor v;  // 3x3
};
// Differentiable SVD of a 3x3 matrix. Backward uses the closed-form rule;
// singular-value pairs closer than `gap_floor` contribute no gradient.
Svd3 svd3(const Tensor& a, double gap_floor = 1e-6);

// ---- testing hooks -------------------------------------------------------
namespace testing {
// Flips the sign of the named op's backward rule (mutation testing of the
// gradient checker). Empty string disables.
void inject_backward_sign_error(const std::string& op);
const std::string& injected_backward_sign_error();
}  // namespace testing

}  // namespace sfpose
