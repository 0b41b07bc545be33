#include "sfpose/nn.hpp"

#include <cmath>

namespace sfpose {

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool zero) {
  std::vector<double> w(in * out, 0.0);
  if (!zero) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    for (double& v : w) v = rng.uniform(-bound, bound);
  }
  weight = Tensor::from({in, out}, std::move(w));
  bias = Tensor::zeros({out});
  weight.set_requires_grad(true);
  bias.set_requires_grad(true);
}

void Linear::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t kernel_size, std::size_t stride_, Rng& rng)
    : proj(kernel_size * kernel_size * in, out, rng), kernel(kernel_size), stride(stride_) {}

Tensor Conv2d::operator()(const Tensor& x) const {
  const std::size_t pad = kernel / 2;
  const std::size_t h = x.dim(0), w = x.dim(1);
  const std::size_t ho = (h + 2 * pad - kernel) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kernel) / stride + 1;
  return reshape(proj(unfold(x, kernel, stride, pad)), {ho, wo, proj.out_features()});
}

void Conv2d::collect(const std::string& prefix, ParameterList& out) const { proj.collect(prefix, out); }

Tensor positional_encoding(const Tensor& x, std::size_t octaves, double base_frequency) {
  std::vector<Tensor> parts{x};
  double f = base_frequency;
  for (std::size_t k = 0; k < octaves; ++k, f *= 2.0) {
    const Tensor s = scale(x, f);
    parts.push_back(sin(s));
    parts.push_back(cos(s));
  }
  return concat(parts, 1);
}

}  // namespace sfpose
