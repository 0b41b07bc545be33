#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sfpose/tensor.hpp"

namespace sfpose {

struct GradCheckOptions {
  double step = 1e-5;
  double rel_tol = 1e-4;
  // Denominator floor for the relative error, so entries with vanishing
  // gradient are compared absolutely.
  double floor = 1e-3;
  // Per-input cap on checked entries; larger inputs are subsampled.
  std::size_t max_entries_per_input = 64;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  bool ok = true;
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_entry = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t entries_checked = 0;
};

using GradFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares backward() gradients of `fn` against central differences.
// Non-scalar outputs are contracted with a fixed random projection.
// `inputs` are copied into fresh leaves; the originals are untouched.
GradCheckResult gradcheck(const GradFn& fn, const std::vector<Tensor>& inputs, const GradCheckOptions& opts = {});

// Same comparison for a closure over existing leaf tensors (model
// parameters), perturbed in place and restored afterwards.
GradCheckResult gradcheck_leaves(const std::function<Tensor()>& loss, const std::vector<Tensor>& leaves,
                                 const GradCheckOptions& opts = {});

// Central finite-difference gradient of a scalar function of one flat vector.
std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                     std::vector<double> x, double step);

}  // namespace sfpose
