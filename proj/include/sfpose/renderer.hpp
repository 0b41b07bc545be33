#pragma once

// Differentiable volume rendering by quadrature along camera rays.
//
// With per-sample optical depth tau_i = sigma_i * delta_i, transmittance
// T_i = exp(-sum_{j<i} tau_j) and weight w_i = T_i (1 - exp(-tau_i)):
//   color   = sum w_i c_i
//   surface = sum w_i x_i   (expected ray termination, not renormalized)
//   depth   = sum w_i t_i
//   opacity = sum w_i
// Rays that hit nothing composite to black at the origin.

#include <cstdint>
#include <vector>

#include "sfpose/fields.hpp"
#include "sfpose/geometry.hpp"
#include "sfpose/tensor.hpp"

namespace sfpose {

struct RaySamples {
  std::vector<double> t;       // strictly increasing, inside [near, far]
  std::vector<double> deltas;  // t_{i+1} - t_i; the last sample runs to far
  std::vector<Vec3> positions;
};

// Bin-centered samples; stratified draws one uniform offset per bin.
RaySamples sample_ray(const Ray& ray, std::size_t n, bool stratified = false, std::uint64_t seed = 0);

struct RenderOutput {
  Tensor color;    // R x 3
  Tensor surface;  // R x 3
  Tensor opacity;  // {R}
  Tensor depth;    // {R}
  Tensor weights;  // R x n
};

// Batched compositing over R rays of n samples.
// sigma, t, deltas: R x n; color, positions: R x n x 3.
RenderOutput composite(const Tensor& sigma, const Tensor& color, const Tensor& positions, const Tensor& t,
                       const Tensor& deltas);
// Single ray from explicit samples and field values.
RenderOutput composite(const RaySamples& samples, const std::vector<RadianceSample>& radiance);

struct RenderOptions {
  std::size_t n_samples = 64;
  double near = 0.1;
  double far = 6.0;
  bool stratified = false;
  std::uint64_t seed = 0;
  // Rays per field call. Without gradient tracking, chunks run in parallel.
  std::size_t chunk = 2048;
};

// Opacity below this marks a pixel invalid for pose estimation.
inline constexpr double kMinValidOpacity = 0.5;

// Renders rays with origins/directions (R x 3, query frame). Directions
// must be unit length; they may carry gradients.
RenderOutput render_rays(const RadianceFn& field, const Tensor& origins, const Tensor& directions,
                         const RenderOptions& opts);

// Camera-frame unit ray directions through the given pixels, R x 3.
Tensor pixel_directions(const Intrinsics& k, const std::vector<Vec2>& pixels);
// Row-major pixel-center grid of the full image.
std::vector<Vec2> pixel_grid(const Intrinsics& k);

// Renders the given pixels of a camera whose pose maps camera coordinates
// into the field's query frame.
RenderOutput render_pixels(const RadianceFn& field, const TensorPose& camera, const Intrinsics& k,
                           const std::vector<Vec2>& pixels, const RenderOptions& opts);

struct ImageRender {
  Tensor color;    // H x W x 3
  Tensor surface;  // H x W x 3, query frame
  Tensor depth;    // H x W, expected distance along the unit ray
  Tensor opacity;  // H x W
};

ImageRender render_image(const RadianceFn& field, const TensorPose& camera, const Intrinsics& k,
                         const RenderOptions& opts);

}  // namespace sfpose
