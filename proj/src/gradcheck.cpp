#include "sfpose/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace sfpose {

std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                     std::vector<double> x, double step) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + step;
    const double fp = f(x);
    x[i] = x0 - step;
    const double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2 * step);
  }
  return g;
}

GradCheckResult gradcheck(const GradFn& fn, const std::vector<Tensor>& inputs, const GradCheckOptions& opts) {
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const auto& in : inputs) {
    Tensor t = Tensor::from(in.shape(), std::vector<double>(in.data().begin(), in.data().end()));
    t.set_requires_grad(true);
    leaves.push_back(t);
  }

  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> unit(0.5, 1.5);

  Tensor probe = fn(leaves);
  std::vector<double> proj(probe.numel());
  for (double& p : proj) p = unit(rng) * ((rng() & 1U) ? 1.0 : -1.0);
  const Tensor projection = Tensor::from(probe.shape(), proj);
  auto scalarize = [&](const Tensor& out) { return out.numel() == 1 ? sum(out) : sum(mul(out, projection)); };

  Tensor loss = scalarize(probe);
  backward(loss);

  auto evaluate = [&]() {
    // Fresh graph; values only.
    const Tensor out = fn(leaves);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) acc += out[i] * (out.numel() == 1 ? 1.0 : proj[i]);
    return acc;
  };

  GradCheckResult res;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    Tensor& leaf = leaves[k];
    const std::size_t n = leaf.numel();
    std::vector<double> analytic = leaf.has_grad() ? std::vector<double>(leaf.grad().begin(), leaf.grad().end())
                                                   : std::vector<double>(n, 0.0);
    std::vector<std::size_t> entries(n);
    std::iota(entries.begin(), entries.end(), 0);
    if (n > opts.max_entries_per_input) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(opts.max_entries_per_input);
    }
    auto values = leaf.mutable_data();
    for (std::size_t e : entries) {
      const double x0 = values[e];
      values[e] = x0 + opts.step;
      const double fp = evaluate();
      values[e] = x0 - opts.step;
      const double fm = evaluate();
      values[e] = x0;
      const double numeric = (fp - fm) / (2 * opts.step);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[e]), opts.floor});
      const double err = std::abs(numeric - analytic[e]) / denom;
      ++res.entries_checked;
      if (!(err <= res.max_rel_error)) {
        res.max_rel_error = err;
        res.worst_input = k;
        res.worst_entry = e;
        res.analytic = analytic[e];
        res.numeric = numeric;
      }
    }
  }
  res.ok = std::isfinite(res.max_rel_error) && res.max_rel_error < opts.rel_tol;
  return res;
}

GradCheckResult gradcheck_leaves(const std::function<Tensor()>& loss, const std::vector<Tensor>& leaves,
                                 const GradCheckOptions& opts) {
  for (const auto& l : leaves) {
    if (!l.is_leaf() || !l.requires_grad()) throw std::invalid_argument("gradcheck_leaves: inputs must be grad leaves");
    l.node()->grad.clear();
  }
  const Tensor out = loss();
  if (out.numel() != 1) throw std::invalid_argument("gradcheck_leaves: loss must be scalar");
  backward(out);

  auto evaluate = [&]() {
    NoGradGuard no_grad;
    return loss().item();
  };

  std::mt19937_64 rng(opts.seed);
  GradCheckResult res;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    Tensor leaf = leaves[k];
    const std::size_t n = leaf.numel();
    std::vector<double> analytic = leaf.has_grad() ? std::vector<double>(leaf.grad().begin(), leaf.grad().end())
                                                   : std::vector<double>(n, 0.0);
    leaf.node()->grad.clear();
    std::vector<std::size_t> entries(n);
    std::iota(entries.begin(), entries.end(), 0);
    if (n > opts.max_entries_per_input) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(opts.max_entries_per_input);
    }
    auto values = leaf.mutable_data();
    for (std::size_t e : entries) {
      const double x0 = values[e];
      values[e] = x0 + opts.step;
      const double fp = evaluate();
      values[e] = x0 - opts.step;
      const double fm = evaluate();
      values[e] = x0;
      const double numeric = (fp - fm) / (2 * opts.step);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[e]), opts.floor});
      const double err = std::abs(numeric - analytic[e]) / denom;
      ++res.entries_checked;
      if (!(err <= res.max_rel_error)) {
        res.max_rel_error = err;
        res.worst_input = k;
        res.worst_entry = e;
        res.analytic = analytic[e];
        res.numeric = numeric;
      }
    }
  }
  res.ok = std::isfinite(res.max_rel_error) && res.max_rel_error < opts.rel_tol;
  return res;
}

}  // namespace sfpose
