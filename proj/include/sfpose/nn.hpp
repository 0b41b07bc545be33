#pragma once

// Small neural-network building blocks on top of the autodiff tensors.

#include <string>
#include <utility>
#include <vector>

#include "sfpose/random.hpp"
#include "sfpose/tensor.hpp"

namespace sfpose {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedTensor>;

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // {out}

  Linear() = default;
  // He-uniform initialization; `zero` gives an all-zero layer.
  Linear(std::size_t in, std::size_t out, Rng& rng, bool zero = false);

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }
  void collect(const std::string& prefix, ParameterList& out) const;
};

// 2-D convolution over H x W x C maps, implemented as unfold + matmul.
struct Conv2d {
  Linear proj;  // (k*k*in) x out
  std::size_t kernel = 3;
  std::size_t stride = 1;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

// sin/cos features at octave frequencies, concatenated after the raw input.
// x: N x D -> N x (D + 2 * D * octaves)
Tensor positional_encoding(const Tensor& x, std::size_t octaves, double base_frequency);

}  // namespace sfpose
