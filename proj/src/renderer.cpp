#include "sfpose/renderer.hpp"

#include "sfpose/parallel.hpp"
#include "sfpose/random.hpp"

#include <stdexcept>

namespace sfpose {

namespace {

void sample_depths(double near, double far, std::size_t n, bool stratified, std::uint64_t seed, double* t,
                   double* deltas) {
  const double bin = (far - near) / static_cast<double>(n);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = stratified ? rng.uniform() : 0.5;
    t[i] = near + (static_cast<double>(i) + u) * bin;
  }
  for (std::size_t i = 0; i + 1 < n; ++i) deltas[i] = t[i + 1] - t[i];
  deltas[n - 1] = far - t[n - 1];
}

std::uint64_t ray_seed(std::uint64_t seed, std::size_t ray) {
  return seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(ray) * 0xd1b54a32d192ed03ULL + 1;
}

}  // namespace

RaySamples sample_ray(const Ray& ray, std::size_t n, bool stratified, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("sample_ray: need at least 2 samples, got " + std::to_string(n));
  if (!(ray.near < ray.far)) throw std::invalid_argument("sample_ray: near must be < far");
  RaySamples s;
  s.t.resize(n);
  s.deltas.resize(n);
  sample_depths(ray.near, ray.far, n, stratified, seed, s.t.data(), s.deltas.data());
  s.positions.reserve(n);
  for (double t : s.t) s.positions.push_back(ray.at(t));
  return s;
}

RenderOutput composite(const Tensor& sigma, const Tensor& color, const Tensor& positions, const Tensor& t,
                       const Tensor& deltas) {
  if (sigma.ndim() != 2) throw ShapeError("composite: sigma must be R x n, got " + shape_str(sigma.shape()));
  const std::size_t r = sigma.dim(0), n = sigma.dim(1);
  const Shape rn3{r, n, 3};
  if (color.shape() != rn3) throw ShapeError("composite(color)", sigma.shape(), color.shape());
  if (positions.shape() != rn3) throw ShapeError("composite(positions)", sigma.shape(), positions.shape());
  if (t.shape() != sigma.shape()) throw ShapeError("composite(t)", sigma.shape(), t.shape());
  if (deltas.shape() != sigma.shape()) throw ShapeError("composite(deltas)", sigma.shape(), deltas.shape());

  const Tensor tau = mul(sigma, deltas);
  const Tensor transmittance = exp(neg(cumsum(tau, 1, true)));
  const Tensor alpha = add_scalar(neg(exp(neg(tau))), 1.0);
  const Tensor w = mul(transmittance, alpha);
  const Tensor w3 = reshape(w, {r, n, 1});
  RenderOutput out;
  out.weights = w;
  out.color = sum(mul(w3, color), {1});
  out.surface = sum(mul(w3, positions), {1});
  out.opacity = sum(w, {1});
  out.depth = sum(mul(w, t), {1});
  return out;
}

RenderOutput composite(const RaySamples& samples, const std::vector<RadianceSample>& radiance) {
  const std::size_t n = samples.t.size();
  if (radiance.size() != n || samples.deltas.size() != n || samples.positions.size() != n) {
    throw std::invalid_argument("composite: " + std::to_string(n) + " samples but " +
                                std::to_string(radiance.size()) + " radiance values");
  }
  std::vector<double> sigma(n), color(3 * n), pos(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    sigma[i] = radiance[i].sigma;
    for (int c = 0; c < 3; ++c) {
      color[3 * i + c] = radiance[i].color(c);
      pos[3 * i + c] = samples.positions[i](c);
    }
  }
  return composite(Tensor::from({1, n}, std::move(sigma)), Tensor::from({1, n, 3}, std::move(color)),
                   Tensor::from({1, n, 3}, std::move(pos)), Tensor::from({1, n}, samples.t),
                   Tensor::from({1, n}, samples.deltas));
}

namespace {

RenderOutput render_chunk(const RadianceFn& field, const Tensor& origins, const Tensor& directions,
                          const RenderOptions& opts, std::size_t first_ray) {
  const std::size_t r = origins.dim(0), n = opts.n_samples;
  std::vector<double> t(r * n), deltas(r * n);
  for (std::size_t i = 0; i < r; ++i) {
    sample_depths(opts.near, opts.far, n, opts.stratified, ray_seed(opts.seed, first_ray + i), &t[i * n],
                  &deltas[i * n]);
  }
  const Tensor tt = Tensor::from({r, n}, std::move(t));
  const Tensor dt = Tensor::from({r, n}, std::move(deltas));
  const Tensor positions =
      add(reshape(origins, {r, 1, 3}), mul(reshape(tt, {r, n, 1}), reshape(directions, {r, 1, 3})));
  const FieldOutput f = field(reshape(positions, {r * n, 3}));
  if (f.sigma.numel() != r * n || f.color.numel() != r * n * 3) {
    throw ShapeError("render: field returned sigma " + shape_str(f.sigma.shape()) + ", color " +
                     shape_str(f.color.shape()) + " for " + std::to_string(r * n) + " points");
  }
  return composite(reshape(f.sigma, {r, n}), reshape(f.color, {r, n, 3}), positions, tt, dt);
}

RenderOutput concat_outputs(const std::vector<RenderOutput>& parts) {
  if (parts.size() == 1) return parts.front();
  std::vector<Tensor> c, s, o, d, w;
  for (const auto& p : parts) {
    c.push_back(p.color);
    s.push_back(p.surface);
    o.push_back(p.opacity);
    d.push_back(p.depth);
    w.push_back(p.weights);
  }
  return {concat(c, 0), concat(s, 0), concat(o, 0), concat(d, 0), concat(w, 0)};
}

}  // namespace

RenderOutput render_rays(const RadianceFn& field, const Tensor& origins, const Tensor& directions,
                         const RenderOptions& opts) {
  if (opts.n_samples < 2) throw std::invalid_argument("render: need at least 2 samples per ray");
  if (!(opts.near < opts.far)) throw std::invalid_argument("render: near must be < far");
  if (origins.ndim() != 2 || origins.dim(1) != 3 || origins.shape() != directions.shape()) {
    throw ShapeError("render_rays", origins.shape(), directions.shape());
  }
  const std::size_t r = origins.dim(0);
  const std::size_t chunk = std::max<std::size_t>(1, opts.chunk);
  const std::size_t chunks = (r + chunk - 1) / chunk;
  if (chunks <= 1) return render_chunk(field, origins, directions, opts, 0);

  std::vector<RenderOutput> parts(chunks);
  auto one = [&](std::size_t c) {
    const std::size_t b = c * chunk, e = std::min(r, b + chunk);
    parts[c] = render_chunk(field, slice(origins, 0, b, e), slice(directions, 0, b, e), opts, b);
  };
  if (grad_enabled()) {
    for (std::size_t c = 0; c < chunks; ++c) one(c);
  } else {
    parallel_for(chunks, [&](std::size_t c) {
      NoGradGuard guard;
      one(c);
    });
  }
  return concat_outputs(parts);
}

Tensor pixel_directions(const Intrinsics& k, const std::vector<Vec2>& pixels) {
  std::vector<double> d(3 * pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const Vec3 v = pixel_to_ray(k, pixels[i]).direction;
    for (int c = 0; c < 3; ++c) d[3 * i + c] = v(c);
  }
  return Tensor::from({pixels.size(), 3}, std::move(d));
}

std::vector<Vec2> pixel_grid(const Intrinsics& k) {
  std::vector<Vec2> px;
  px.reserve(k.width * k.height);
  for (std::size_t y = 0; y < k.height; ++y)
    for (std::size_t x = 0; x < k.width; ++x) px.emplace_back(static_cast<double>(x), static_cast<double>(y));
  return px;
}

RenderOutput render_pixels(const RadianceFn& field, const TensorPose& camera, const Intrinsics& k,
                           const std::vector<Vec2>& pixels, const RenderOptions& opts) {
  const std::size_t r = pixels.size();
  const Tensor dirs = matmul(pixel_directions(k, pixels), transpose(camera.rotation));
  const Tensor origins = add(Tensor::zeros({r, 3}), camera.translation);
  return render_rays(field, origins, dirs, opts);
}

ImageRender render_image(const RadianceFn& field, const TensorPose& camera, const Intrinsics& k,
                         const RenderOptions& opts) {
  k.validate();
  const std::size_t h = k.height, w = k.width;
  const RenderOutput out = render_pixels(field, camera, k, pixel_grid(k), opts);
  return {reshape(out.color, {h, w, 3}), reshape(out.surface, {h, w, 3}), reshape(out.depth, {h, w}),
          reshape(out.opacity, {h, w})};
}

}  // namespace sfpose
