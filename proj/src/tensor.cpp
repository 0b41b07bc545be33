#include "sfpose/tensor.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace sfpose {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b)) {}

namespace testing {
namespace {
std::string& fault_slot() {
  static std::string op;
  return op;
}
}  // namespace
void inject_backward_sign_error(const std::string& op) { fault_slot() = op; }
const std::string& injected_backward_sign_error() { return fault_slot(); }
}  // namespace testing

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

namespace {

NodePtr make_leaf(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (numel_of(n->shape) != n->value.size()) {
    throw ShapeError("tensor: shape " + shape_str(n->shape) + " does not match " +
                     std::to_string(n->value.size()) + " values");
  }
  return n;
}

// Builds an op result. Graph edges are recorded only when some parent
// participates in differentiation.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<NodePtr> parents, std::function<void(Node&)> bw) {
  auto n = make_leaf(std::move(shape), std::move(value));
  n->op = op;
  n->is_leaf = false;
  const bool track = g_grad_enabled && std::any_of(parents.begin(), parents.end(),
                                 [](const NodePtr& p) { return p->requires_grad; });
  if (track) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    if (!testing::injected_backward_sign_error().empty() &&
        testing::injected_backward_sign_error() == op) {
      n->backward = [bw = std::move(bw)](Node& self) {
        std::vector<std::vector<double>> before;
        for (auto& p : self.parents) before.push_back(p->grad_buffer());
        bw(self);
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          auto& g = self.parents[k]->grad;
          for (std::size_t i = 0; i < g.size(); ++i) g[i] = before[k][i] - (g[i] - before[k][i]);
        }
      };
    } else {
      n->backward = std::move(bw);
    }
  }
  return Tensor(std::move(n));
}

// Index maps from each output element to the contributing input elements.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> ia, ib;
  bool same = false;
};

Broadcast broadcast(const char* op, const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t nd = std::max(a.size(), b.size());
  Shape pa(nd, 1), pb(nd, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(nd - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(nd - b.size()));
  bc.out.resize(nd);
  for (std::size_t d = 0; d < nd; ++d) {
    if (pa[d] == pb[d] || pb[d] == 1) {
      bc.out[d] = pa[d];
    } else if (pa[d] == 1) {
      bc.out[d] = pb[d];
    } else {
      throw ShapeError(op, a, b);
    }
  }
  std::vector<std::size_t> sa(nd, 0), sb(nd, 0);
  std::size_t ka = 1, kb = 1;
  for (std::size_t d = nd; d-- > 0;) {
    sa[d] = pa[d] == 1 ? 0 : ka;
    sb[d] = pb[d] == 1 ? 0 : kb;
    ka *= pa[d];
    kb *= pb[d];
  }
  const std::size_t n = numel_of(bc.out);
  bc.ia.resize(n);
  bc.ib.resize(n);
  std::vector<std::size_t> idx(nd, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t k = 0; k < n; ++k) {
    bc.ia[k] = oa;
    bc.ib[k] = ob;
    for (std::size_t d = nd; d-- > 0;) {
      if (++idx[d] < bc.out[d]) {
        oa += sa[d];
        ob += sb[d];
        break;
      }
      oa -= sa[d] * (bc.out[d] - 1);
      ob -= sb[d] * (bc.out[d] - 1);
      idx[d] = 0;
    }
  }
  return bc;
}

const char* binary_name(BinaryOp op) {
  switch (op) {
    case BinaryOp::add: return "add";
    case BinaryOp::sub: return "sub";
    case BinaryOp::mul: return "mul";
    case BinaryOp::div: return "div";
  }
  return "?";
}

const char* unary_name(UnaryOp op) {
  switch (op) {
    case UnaryOp::neg: return "neg";
    case UnaryOp::exp: return "exp";
    case UnaryOp::log: return "log";
    case UnaryOp::relu: return "relu";
    case UnaryOp::sigmoid: return "sigmoid";
    case UnaryOp::softplus: return "softplus";
    case UnaryOp::sqrt: return "sqrt";
    case UnaryOp::square: return "square";
    case UnaryOp::sin: return "sin";
    case UnaryOp::cos: return "cos";
    case UnaryOp::abs: return "abs";
  }
  return "?";
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_scalar(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace

// ---- Tensor --------------------------------------------------------------

Tensor::Tensor() : node_(make_leaf({0}, {})) {}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }
Tensor Tensor::full(Shape shape, double v) {
  const std::size_t n = numel_of(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, v)));
}
Tensor Tensor::scalar(double v) { return Tensor(make_leaf({}, {v})); }
Tensor Tensor::from(Shape shape, std::vector<double> values) {
  return Tensor(make_leaf(std::move(shape), std::move(values)));
}
Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(make_leaf({values.size()}, std::vector<double>(values)));
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= node_->shape.size()) {
    throw ShapeError("dim: axis " + std::to_string(i) + " out of range for " + shape_str(node_->shape));
  }
  return node_->shape[i];
}

std::span<double> Tensor::mutable_data() {
  if (!node_->is_leaf) throw std::logic_error("mutable_data: tensor is not a leaf");
  return node_->value;
}

double Tensor::item() const {
  if (node_->value.size() != 1) throw ShapeError("item: tensor " + shape_str(node_->shape) + " is not a scalar");
  return node_->value[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_->is_leaf) throw std::logic_error("set_requires_grad: only leaves can be marked");
  node_->requires_grad = on;
  return *this;
}

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("grad: no gradient accumulated");
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(make_leaf(node_->shape, node_->value)); }

void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw std::logic_error("backward: loss is not connected to any requires_grad leaf");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (!n->is_leaf) n->grad.assign(n->value.size(), 0.0);
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

// ---- elementwise ---------------------------------------------------------

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  const char* name = binary_name(op);
  const auto& an = a.node();
  const auto& bn = b.node();
  Broadcast bc = broadcast(name, an->shape, bn->shape);
  const std::size_t n = numel_of(bc.out);
  std::vector<double> out(n);
  const auto& av = an->value;
  const auto& bv = bn->value;
  auto ai = [&](std::size_t k) { return bc.same ? k : bc.ia[k]; };
  auto bi = [&](std::size_t k) { return bc.same ? k : bc.ib[k]; };
  switch (op) {
    case BinaryOp::add: for (std::size_t k = 0; k < n; ++k) out[k] = av[ai(k)] + bv[bi(k)]; break;
    case BinaryOp::sub: for (std::size_t k = 0; k < n; ++k) out[k] = av[ai(k)] - bv[bi(k)]; break;
    case BinaryOp::mul: for (std::size_t k = 0; k < n; ++k) out[k] = av[ai(k)] * bv[bi(k)]; break;
    case BinaryOp::div: for (std::size_t k = 0; k < n; ++k) out[k] = av[ai(k)] / bv[bi(k)]; break;
  }
  Shape out_shape = bc.out;
  return make_result(name, std::move(out_shape), std::move(out), {an, bn},
                     [op, bc = std::move(bc)](Node& self) {
                       Node& A = *self.parents[0];
                       Node& B = *self.parents[1];
                       const auto& g = self.grad;
                       const std::size_t n = g.size();
                       auto ai = [&](std::size_t k) { return bc.same ? k : bc.ia[k]; };
                       auto bi = [&](std::size_t k) { return bc.same ? k : bc.ib[k]; };
                       if (A.requires_grad) {
                         auto& ga = A.grad_buffer();
                         switch (op) {
                           case BinaryOp::add:
                           case BinaryOp::sub: for (std::size_t k = 0; k < n; ++k) ga[ai(k)] += g[k]; break;
                           case BinaryOp::mul: for (std::size_t k = 0; k < n; ++k) ga[ai(k)] += g[k] * B.value[bi(k)]; break;
                           case BinaryOp::div: for (std::size_t k = 0; k < n; ++k) ga[ai(k)] += g[k] / B.value[bi(k)]; break;
                         }
                       }
                       if (B.requires_grad) {
                         auto& gb = B.grad_buffer();
                         switch (op) {
                           case BinaryOp::add: for (std::size_t k = 0; k < n; ++k) gb[bi(k)] += g[k]; break;
                           case BinaryOp::sub: for (std::size_t k = 0; k < n; ++k) gb[bi(k)] -= g[k]; break;
                           case BinaryOp::mul: for (std::size_t k = 0; k < n; ++k) gb[bi(k)] += g[k] * A.value[ai(k)]; break;
                           case BinaryOp::div:
                             for (std::size_t k = 0; k < n; ++k) {
                               const double bv = B.value[bi(k)];
                               gb[bi(k)] -= g[k] * A.value[ai(k)] / (bv * bv);
                             }
                             break;
                         }
                       }
                     });
}

Tensor elementwise(UnaryOp op, const Tensor& a) {
  const auto& an = a.node();
  const auto& x = an->value;
  const std::size_t n = x.size();
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    switch (op) {
      case UnaryOp::neg: y[i] = -v; break;
      case UnaryOp::exp: y[i] = std::exp(v); break;
      case UnaryOp::log: y[i] = std::log(v); break;
      case UnaryOp::relu: y[i] = v > 0 ? v : 0.0; break;
      case UnaryOp::sigmoid: y[i] = sigmoid_scalar(v); break;
      case UnaryOp::softplus: y[i] = softplus_scalar(v); break;
      case UnaryOp::sqrt: y[i] = std::sqrt(v); break;
      case UnaryOp::square: y[i] = v * v; break;
      case UnaryOp::sin: y[i] = std::sin(v); break;
      case UnaryOp::cos: y[i] = std::cos(v); break;
      case UnaryOp::abs: y[i] = std::abs(v); break;
    }
  }
  return make_result(unary_name(op), an->shape, std::move(y), {an}, [op](Node& self) {
    Node& A = *self.parents[0];
    auto& ga = A.grad_buffer();
    const auto& g = self.grad;
    const auto& x = A.value;
    const auto& y = self.value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = 0.0;
      switch (op) {
        case UnaryOp::neg: d = -1.0; break;
        case UnaryOp::exp: d = y[i]; break;
        case UnaryOp::log: d = 1.0 / x[i]; break;
        case UnaryOp::relu: d = x[i] > 0 ? 1.0 : 0.0; break;
        case UnaryOp::sigmoid: d = y[i] * (1.0 - y[i]); break;
        case UnaryOp::softplus: d = sigmoid_scalar(x[i]); break;
        case UnaryOp::sqrt: d = 0.5 / y[i]; break;
        case UnaryOp::square: d = 2.0 * x[i]; break;
        case UnaryOp::sin: d = std::cos(x[i]); break;
        case UnaryOp::cos: d = -std::sin(x[i]); break;
        case UnaryOp::abs: d = x[i] > 0 ? 1.0 : (x[i] < 0 ? -1.0 : 0.0); break;
      }
      ga[i] += g[i] * d;
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::div, a, b); }
Tensor neg(const Tensor& a) { return elementwise(UnaryOp::neg, a); }
Tensor exp(const Tensor& a) { return elementwise(UnaryOp::exp, a); }
Tensor log(const Tensor& a) { return elementwise(UnaryOp::log, a); }
Tensor relu(const Tensor& a) { return elementwise(UnaryOp::relu, a); }
Tensor sigmoid(const Tensor& a) { return elementwise(UnaryOp::sigmoid, a); }
Tensor softplus(const Tensor& a) { return elementwise(UnaryOp::softplus, a); }
Tensor sqrt(const Tensor& a) { return elementwise(UnaryOp::sqrt, a); }
Tensor square(const Tensor& a) { return elementwise(UnaryOp::square, a); }
Tensor sin(const Tensor& a) { return elementwise(UnaryOp::sin, a); }
Tensor cos(const Tensor& a) { return elementwise(UnaryOp::cos, a); }
Tensor abs(const Tensor& a) { return elementwise(UnaryOp::abs, a); }

Tensor scale(const Tensor& a, double s) {
  const auto& an = a.node();
  std::vector<double> y(an->value);
  for (double& v : y) v *= s;
  return make_result("scale", an->shape, std::move(y), {an}, [s](Node& self) {
    auto& ga = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  const auto& an = a.node();
  std::vector<double> y(an->value);
  for (double& v : y) v += s;
  return make_result("add_scalar", an->shape, std::move(y), {an}, [](Node& self) {
    auto& ga = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor clamp_min(const Tensor& a, double lo) {
  const auto& an = a.node();
  std::vector<double> y(an->value);
  for (double& v : y) v = std::max(v, lo);
  return make_result("clamp_min", an->shape, std::move(y), {an}, [lo](Node& self) {
    Node& A = *self.parents[0];
    auto& ga = A.grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (A.value[i] > lo) ga[i] += self.grad[i];
    }
  });
}

// ---- linear algebra ------------------------------------------------------

namespace {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& an = a.node();
  const auto& bn = b.node();
  if (an->shape.size() != 2 || bn->shape.size() != 2 || an->shape[1] != bn->shape[0]) {
    throw ShapeError("matmul", an->shape, bn->shape);
  }
  const auto m = static_cast<Eigen::Index>(an->shape[0]);
  const auto k = static_cast<Eigen::Index>(an->shape[1]);
  const auto n = static_cast<Eigen::Index>(bn->shape[1]);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MapM(out.data(), m, n).noalias() = MapC(an->value.data(), m, k) * MapC(bn->value.data(), k, n);
  return make_result("matmul", {an->shape[0], bn->shape[1]}, std::move(out), {an, bn},
                     [m, k, n](Node& self) {
                       Node& A = *self.parents[0];
                       Node& B = *self.parents[1];
                       MapC g(self.grad.data(), m, n);
                       if (A.requires_grad) {
                         MapM(A.grad_buffer().data(), m, k).noalias() += g * MapC(B.value.data(), k, n).transpose();
                       }
                       if (B.requires_grad) {
                         MapM(B.grad_buffer().data(), k, n).noalias() += MapC(A.value.data(), m, k).transpose() * g;
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  const auto& an = a.node();
  if (an->shape.size() != 2) throw ShapeError("transpose: expected 2-D tensor, got " + shape_str(an->shape));
  const std::size_t r = an->shape[0], c = an->shape[1];
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = an->value[i * c + j];
  return make_result("transpose", {c, r}, std::move(out), {an}, [r, c](Node& self) {
    auto& ga = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
  });
}

// ---- reductions ----------------------------------------------------------

namespace {

struct ReducePlan {
  Shape out;
  std::vector<std::size_t> target;  // input flat index -> output flat index
  std::size_t count = 1;            // inputs per output
};

ReducePlan plan_reduce(const Shape& in, std::vector<std::size_t> axes) {
  if (axes.empty()) {
    axes.resize(in.size());
    std::iota(axes.begin(), axes.end(), 0);
  }
  std::vector<bool> reduced(in.size(), false);
  for (auto ax : axes) {
    if (ax >= in.size()) {
      throw ShapeError("reduce: invalid axis " + std::to_string(ax) + " for shape " + shape_str(in));
    }
    reduced[ax] = true;
  }
  ReducePlan plan;
  std::vector<std::size_t> out_stride(in.size(), 0);
  std::size_t s = 1;
  for (std::size_t d = in.size(); d-- > 0;) {
    if (reduced[d]) {
      plan.count *= in[d];
    } else {
      out_stride[d] = s;
      s *= in[d];
    }
  }
  for (std::size_t d = 0; d < in.size(); ++d)
    if (!reduced[d]) plan.out.push_back(in[d]);
  const std::size_t n = numel_of(in);
  plan.target.resize(n);
  std::vector<std::size_t> idx(in.size(), 0);
  std::size_t o = 0;
  for (std::size_t k = 0; k < n; ++k) {
    plan.target[k] = o;
    for (std::size_t d = in.size(); d-- > 0;) {
      if (++idx[d] < in[d]) {
        o += out_stride[d];
        break;
      }
      o -= out_stride[d] * (in[d] - 1);
      idx[d] = 0;
    }
  }
  return plan;
}

}  // namespace

Tensor reduce(ReduceOp op, const Tensor& a, std::vector<std::size_t> axes, const Tensor* weights) {
  if (op == ReduceOp::weighted_sum) {
    if (weights == nullptr) throw std::invalid_argument("reduce: weighted_sum requires weights");
    return reduce(ReduceOp::sum, mul(a, *weights), std::move(axes));
  }
  const auto& an = a.node();
  ReducePlan plan = plan_reduce(an->shape, std::move(axes));
  std::vector<double> out(numel_of(plan.out), 0.0);
  for (std::size_t k = 0; k < plan.target.size(); ++k) out[plan.target[k]] += an->value[k];
  const double f = op == ReduceOp::mean ? 1.0 / static_cast<double>(std::max<std::size_t>(plan.count, 1)) : 1.0;
  if (op == ReduceOp::mean)
    for (double& v : out) v *= f;
  Shape out_shape = plan.out;
  return make_result(op == ReduceOp::mean ? "mean" : "sum", std::move(out_shape), std::move(out), {an},
                     [plan = std::move(plan), f](Node& self) {
                       auto& ga = self.parents[0]->grad_buffer();
                       for (std::size_t k = 0; k < plan.target.size(); ++k) ga[k] += f * self.grad[plan.target[k]];
                     });
}

Tensor sum(const Tensor& a, std::vector<std::size_t> axes) { return reduce(ReduceOp::sum, a, std::move(axes)); }
Tensor mean(const Tensor& a, std::vector<std::size_t> axes) { return reduce(ReduceOp::mean, a, std::move(axes)); }
Tensor weighted_sum(const Tensor& a, const Tensor& w, std::vector<std::size_t> axes) {
  return reduce(ReduceOp::weighted_sum, a, std::move(axes), &w);
}

Tensor cumsum(const Tensor& a, std::size_t axis, bool exclusive) {
  const auto& an = a.node();
  if (axis >= an->shape.size()) throw ShapeError("cumsum: invalid axis for shape " + shape_str(an->shape));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= an->shape[d];
  for (std::size_t d = axis + 1; d < an->shape.size(); ++d) inner *= an->shape[d];
  const std::size_t len = an->shape[axis];
  std::vector<double> out(an->value.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      double acc = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const std::size_t k = (o * len + l) * inner + i;
        if (exclusive) {
          out[k] = acc;
          acc += an->value[k];
        } else {
          acc += an->value[k];
          out[k] = acc;
        }
      }
    }
  return make_result("cumsum", an->shape, std::move(out), {an},
                     [outer, inner, len, exclusive](Node& self) {
                       auto& ga = self.parents[0]->grad_buffer();
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t i = 0; i < inner; ++i) {
                           double acc = 0.0;  // suffix sum of output gradients
                           for (std::size_t l = len; l-- > 0;) {
                             const std::size_t k = (o * len + l) * inner + i;
                             if (exclusive) {
                               ga[k] += acc;
                               acc += self.grad[k];
                             } else {
                               acc += self.grad[k];
                               ga[k] += acc;
                             }
                           }
                         }
                     });
}

// ---- shape manipulation --------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  const auto& an = a.node();
  if (numel_of(shape) != an->value.size()) throw ShapeError("reshape", an->shape, shape);
  return make_result("reshape", std::move(shape), an->value, {an}, [](Node& self) {
    auto& ga = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: invalid axis for shape " + shape_str(s0));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d)
      if (d != axis && s[d] != s0[d]) ok = false;
    if (!ok) throw ShapeError("concat", s0, s);
    widths.push_back(s[axis] * inner);
    total += s[axis];
    nodes.push_back(p.node());
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  const std::size_t row = total * inner;
  std::vector<double> out(outer * row);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = nodes[k]->value;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(o * row + off));
    off += widths[k];
  }
  return make_result("concat", std::move(out_shape), std::move(out), nodes,
                     [widths, outer, row](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < self.parents.size(); ++k) {
                         Node& P = *self.parents[k];
                         if (P.requires_grad) {
                           auto& gp = P.grad_buffer();
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < widths[k]; ++i) gp[o * widths[k] + i] += self.grad[o * row + off + i];
                         }
                         off += widths[k];
                       }
                     });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto& an = a.node();
  if (axis >= an->shape.size() || begin > end || end > an->shape[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for " + shape_str(an->shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= an->shape[d];
  for (std::size_t d = axis + 1; d < an->shape.size(); ++d) inner *= an->shape[d];
  const std::size_t in_row = an->shape[axis] * inner;
  const std::size_t w = (end - begin) * inner;
  const std::size_t off = begin * inner;
  Shape out_shape = an->shape;
  out_shape[axis] = end - begin;
  std::vector<double> out(outer * w);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(an->value.begin() + static_cast<std::ptrdiff_t>(o * in_row + off), w,
                out.begin() + static_cast<std::ptrdiff_t>(o * w));
  return make_result("slice", std::move(out_shape), std::move(out), {an}, [outer, in_row, w, off](Node& self) {
    auto& ga = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < w; ++i) ga[o * in_row + off + i] += self.grad[o * w + i];
  });
}

Tensor index_select(const Tensor& a, std::span<const std::size_t> rows) {
  const auto& an = a.node();
  if (an->shape.empty()) throw ShapeError("index_select: scalar input");
  const std::size_t row = an->value.size() / std::max<std::size_t>(an->shape[0], 1);
  Shape out_shape = an->shape;
  out_shape[0] = rows.size();
  std::vector<double> out(rows.size() * row);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= an->shape[0]) {
      throw ShapeError("index_select: row " + std::to_string(idx[r]) + " out of range for " + shape_str(an->shape));
    }
    std::copy_n(an->value.begin() + static_cast<std::ptrdiff_t>(idx[r] * row), row,
                out.begin() + static_cast<std::ptrdiff_t>(r * row));
  }
  return make_result("index_select", std::move(out_shape), std::move(out), {an},
                     [idx = std::move(idx), row](Node& self) {
                       auto& ga = self.parents[0]->grad_buffer();
                       for (std::size_t r = 0; r < idx.size(); ++r)
                         for (std::size_t i = 0; i < row; ++i) ga[idx[r] * row + i] += self.grad[r * row + i];
                     });
}

Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack: no inputs");
  std::vector<Tensor> lifted;
  lifted.reserve(parts.size());
  for (const auto& p : parts) {
    Shape s = p.shape();
    s.insert(s.begin(), 1);
    lifted.push_back(reshape(p, s));
  }
  return concat(lifted, 0);
}

// ---- image ops -----------------------------------------------------------

namespace {

struct Tap {
  std::size_t x0, x1;
  double fx;
  bool live;  // coordinate not clamped on this axis
};

Tap make_tap(double x, std::size_t extent) {
  Tap t{0, 0, 0.0, false};
  if (extent <= 1 || !std::isfinite(x)) {
    t.x1 = extent > 1 ? 1 : 0;
    return t;
  }
  const double hi = static_cast<double>(extent - 1);
  if (x <= 0.0) {
    t.live = x == 0.0;
    t.x1 = 1;
    return t;
  }
  if (x >= hi) {
    t.live = x == hi;
    t.x0 = extent - 2;
    t.x1 = extent - 1;
    t.fx = 1.0;
    return t;
  }
  t.x0 = static_cast<std::size_t>(std::floor(x));
  t.x1 = t.x0 + 1;
  t.fx = x - static_cast<double>(t.x0);
  t.live = true;
  return t;
}

}  // namespace

Tensor bilinear_sample(const Tensor& feature_map, const Tensor& coords) {
  const auto& fn = feature_map.node();
  const auto& cn = coords.node();
  if (fn->shape.size() != 3) throw ShapeError("bilinear_sample: feature map must be HxWxC, got " + shape_str(fn->shape));
  if (cn->shape.size() != 2 || cn->shape[1] != 2) throw ShapeError("bilinear_sample", fn->shape, cn->shape);
  const std::size_t H = fn->shape[0], W = fn->shape[1], C = fn->shape[2], N = cn->shape[0];
  std::vector<Tap> tx(N), ty(N);
  std::vector<double> out(N * C);
  const auto& f = fn->value;
  for (std::size_t n = 0; n < N; ++n) {
    tx[n] = make_tap(cn->value[2 * n], W);
    ty[n] = make_tap(cn->value[2 * n + 1], H);
    const Tap& X = tx[n];
    const Tap& Y = ty[n];
    const double w00 = (1 - X.fx) * (1 - Y.fx), w01 = X.fx * (1 - Y.fx);
    const double w10 = (1 - X.fx) * Y.fx, w11 = X.fx * Y.fx;
    const double* p00 = &f[(Y.x0 * W + X.x0) * C];
    const double* p01 = &f[(Y.x0 * W + X.x1) * C];
    const double* p10 = &f[(Y.x1 * W + X.x0) * C];
    const double* p11 = &f[(Y.x1 * W + X.x1) * C];
    for (std::size_t c = 0; c < C; ++c) out[n * C + c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
  }
  return make_result("bilinear_sample", {N, C}, std::move(out), {fn, cn},
                     [tx = std::move(tx), ty = std::move(ty), W, C, N](Node& self) {
                       Node& F = *self.parents[0];
                       Node& P = *self.parents[1];
                       const auto& g = self.grad;
                       if (F.requires_grad) {
                         auto& gf = F.grad_buffer();
                         for (std::size_t n = 0; n < N; ++n) {
                           const Tap& X = tx[n];
                           const Tap& Y = ty[n];
                           const double w00 = (1 - X.fx) * (1 - Y.fx), w01 = X.fx * (1 - Y.fx);
                           const double w10 = (1 - X.fx) * Y.fx, w11 = X.fx * Y.fx;
                           for (std::size_t c = 0; c < C; ++c) {
                             const double gc = g[n * C + c];
                             gf[(Y.x0 * W + X.x0) * C + c] += w00 * gc;
                             gf[(Y.x0 * W + X.x1) * C + c] += w01 * gc;
                             gf[(Y.x1 * W + X.x0) * C + c] += w10 * gc;
                             gf[(Y.x1 * W + X.x1) * C + c] += w11 * gc;
                           }
                         }
                       }
                       if (P.requires_grad) {
                         auto& gp = P.grad_buffer();
                         const auto& f = F.value;
                         for (std::size_t n = 0; n < N; ++n) {
                           const Tap& X = tx[n];
                           const Tap& Y = ty[n];
                           double dx = 0.0, dy = 0.0;
                           for (std::size_t c = 0; c < C; ++c) {
                             const double f00 = f[(Y.x0 * W + X.x0) * C + c], f01 = f[(Y.x0 * W + X.x1) * C + c];
                             const double f10 = f[(Y.x1 * W + X.x0) * C + c], f11 = f[(Y.x1 * W + X.x1) * C + c];
                             const double gc = g[n * C + c];
                             dx += gc * ((1 - Y.fx) * (f01 - f00) + Y.fx * (f11 - f10));
                             dy += gc * ((1 - X.fx) * (f10 - f00) + X.fx * (f11 - f01));
                           }
                           if (X.live && X.x1 != X.x0) gp[2 * n] += dx;
                           if (Y.live && Y.x1 != Y.x0) gp[2 * n + 1] += dy;
                         }
                       }
                     });
}

Tensor unfold(const Tensor& image, std::size_t kernel, std::size_t stride, std::size_t pad) {
  const auto& in = image.node();
  if (in->shape.size() != 3) throw ShapeError("unfold: expected HxWxC, got " + shape_str(in->shape));
  if (kernel == 0 || stride == 0) throw std::invalid_argument("unfold: kernel and stride must be positive");
  const std::size_t H = in->shape[0], W = in->shape[1], C = in->shape[2];
  if (H + 2 * pad < kernel || W + 2 * pad < kernel) throw ShapeError("unfold: kernel larger than padded input " + shape_str(in->shape));
  const std::size_t Ho = (H + 2 * pad - kernel) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kernel) / stride + 1;
  const std::size_t cols = kernel * kernel * C;
  // src[k] = flat input index feeding output k, or npos for padding.
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> src(Ho * Wo * cols, npos);
  for (std::size_t oy = 0; oy < Ho; ++oy)
    for (std::size_t ox = 0; ox < Wo; ++ox)
      for (std::size_t ky = 0; ky < kernel; ++ky)
        for (std::size_t kx = 0; kx < kernel; ++kx) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(H) || ix >= static_cast<std::ptrdiff_t>(W)) continue;
          for (std::size_t c = 0; c < C; ++c) {
            src[((oy * Wo + ox) * kernel * kernel + ky * kernel + kx) * C + c] =
                (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * C + c;
          }
        }
  std::vector<double> out(src.size(), 0.0);
  for (std::size_t k = 0; k < src.size(); ++k)
    if (src[k] != npos) out[k] = in->value[src[k]];
  return make_result("unfold", {Ho * Wo, cols}, std::move(out), {in}, [src = std::move(src)](Node& self) {
    auto& ga = self.parents[0]->grad_buffer();
    for (std::size_t k = 0; k < src.size(); ++k)
      if (src[k] != static_cast<std::size_t>(-1)) ga[src[k]] += self.grad[k];
  });
}

// ---- 3x3 SVD -------------------------------------------------------------

Svd3 svd3(const Tensor& a, double gap_floor) {
  const auto& an = a.node();
  if (an->shape != Shape{3, 3}) throw ShapeError("svd3: expected 3x3, got " + shape_str(an->shape));
  const Eigen::Matrix3d A = Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(an->value.data());
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(A, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d U = svd.matrixU();
  const Eigen::Matrix3d V = svd.matrixV();
  const Eigen::Vector3d S = svd.singularValues();
  std::vector<double> packed(21);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      packed[static_cast<std::size_t>(i * 3 + j)] = U(i, j);
      packed[static_cast<std::size_t>(12 + i * 3 + j)] = V(i, j);
    }
  for (int i = 0; i < 3; ++i) packed[static_cast<std::size_t>(9 + i)] = S(i);

  Tensor all = make_result("svd3", {21}, std::move(packed), {an}, [U, V, S, gap_floor](Node& self) {
    Eigen::Matrix3d gU, gV;
    Eigen::Vector3d gS;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        gU(i, j) = self.grad[static_cast<std::size_t>(i * 3 + j)];
        gV(i, j) = self.grad[static_cast<std::size_t>(12 + i * 3 + j)];
      }
    for (int i = 0; i < 3; ++i) gS(i) = self.grad[static_cast<std::size_t>(9 + i)];
    Eigen::Matrix3d F = Eigen::Matrix3d::Zero();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        if (i == j || std::abs(S(i) - S(j)) < gap_floor) continue;
        F(i, j) = 1.0 / (S(j) * S(j) - S(i) * S(i));
      }
    const Eigen::Matrix3d Sd = S.asDiagonal();
    const Eigen::Matrix3d J = F.cwiseProduct(U.transpose() * gU - gU.transpose() * U);
    const Eigen::Matrix3d K = F.cwiseProduct(V.transpose() * gV - gV.transpose() * V);
    const Eigen::Matrix3d inner = J * Sd + Eigen::Matrix3d(gS.asDiagonal()) + Sd * K;
    const Eigen::Matrix3d gA = U * inner * V.transpose();
    auto& ga = self.parents[0]->grad_buffer();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) ga[static_cast<std::size_t>(i * 3 + j)] += gA(i, j);
  });
  return Svd3{reshape(slice(all, 0, 0, 9), {3, 3}), slice(all, 0, 9, 12), reshape(slice(all, 0, 12, 21), {3, 3})};
}

}  // namespace sfpose
