#pragma once

// Scene flow from optical flow, and the rigid motion that explains it.
//
// Backward flow maps pixel p of frame t to p' = p + V(p) in frame t-1.
// Each frame contributes a surface map (camera-frame expected termination
// points); pairing X = S_t(p) with X' = S_{t-1}(p') gives a weighted point
// correspondence, and the weighted Procrustes solve returns the pose that
// maps frame-(t-1) camera coordinates to frame-t camera coordinates:
//   X ~= R X' + t.

#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

#include "sfpose/fields.hpp"
#include "sfpose/geometry.hpp"
#include "sfpose/nn.hpp"
#include "sfpose/renderer.hpp"
#include "sfpose/tensor.hpp"

namespace sfpose {

class DegenerateGeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FlowField {
  std::size_t width = 0, height = 0;
  std::vector<double> uv;          // H*W*2, interleaved (u, v)
  std::vector<std::uint8_t> valid;  // H*W; empty means all valid

  static FlowField zeros(std::size_t width, std::size_t height);
  Vec2 at(std::size_t x, std::size_t y) const;
  void set(std::size_t x, std::size_t y, const Vec2& v);
  bool is_valid(std::size_t x, std::size_t y) const;
  std::size_t size() const { return width * height; }
};

// Per-frame quantities needed for lifting: a surface lookup at arbitrary
// subpixel positions plus the image and (optional) feature map used by the
// confidence network.
class SurfaceSource {
 public:
  virtual ~SurfaceSource() = default;

  struct Lookup {
    Tensor points;   // N x 3, camera frame
    Tensor opacity;  // {N}
  };
  // coords: N x 2 pixel positions (x, y), inside the image.
  virtual Lookup lookup(const Tensor& coords) const = 0;
  virtual const Tensor& image() const = 0;     // H x W x 3
  virtual const Tensor& features() const = 0;  // H x W x C, or empty
  std::size_t width() const { return image().dim(1); }
  std::size_t height() const { return image().dim(0); }
};

// Surface from a single-context render: bilinear lookups into the rendered
// surface and opacity maps (differentiable).
class RenderedSurface final : public SurfaceSource {
 public:
  RenderedSurface(ImageRender render, Tensor image, Tensor features);
  Lookup lookup(const Tensor& coords) const override;
  const Tensor& image() const override { return image_; }
  const Tensor& features() const override { return features_; }
  const ImageRender& render() const { return render_; }

 private:
  ImageRender render_;
  Tensor opacity3_;  // H x W x 1 view of the opacity map
  Tensor image_, features_;
};

// Exact ground-truth geometry: every lookup raycasts the analytic scene
// from the frame's true camera, so subpixel positions carry no
// interpolation error. Opacity is 1 on a hit and 0 otherwise.
class AnalyticSurface final : public SurfaceSource {
 public:
  AnalyticSurface(std::shared_ptr<const AnalyticScene> scene, const SE3Pose& camera_to_world, const Intrinsics& k,
                  Tensor image);
  Lookup lookup(const Tensor& coords) const override;
  const Tensor& image() const override { return image_; }
  const Tensor& features() const override { return features_; }

 private:
  std::shared_ptr<const AnalyticScene> scene_;
  SE3Pose camera_to_world_;
  Intrinsics k_;
  Tensor image_, features_;
};

struct Correspondences {
  Tensor x;       // N x 3, frame t
  Tensor x_prev;  // N x 3, frame t-1
  std::vector<std::size_t> pixel_index;  // flat y*W + x of p in frame t
  Tensor coords;       // N x 2, p
  Tensor coords_prev;  // N x 2, p'
  Tensor opacity;      // {N}, frame t at p
  Tensor opacity_prev; // {N}, frame t-1 at p'
  std::size_t size() const { return pixel_index.size(); }
};

struct LiftOptions {
  double min_opacity = kMinValidOpacity;
  std::size_t max_points = 0;  // 0 keeps every valid pixel
  std::uint64_t seed = 0;
};

// Pairs S_t(p) with S_{t-1}(p + V(p)) over pixels whose flow is valid, whose
// target lies inside frame t-1, and whose opacity is valid on both ends.
Correspondences lift_correspondences(const SurfaceSource& frame, const SurfaceSource& prev, const FlowField& flow,
                                     const LiftOptions& opts = {});

// Confidence network: an MLP on the features at p and p', the photometric
// residual |I_t(p) - I_{t-1}(p')| and both opacities, ending in a sigmoid.
// The last layer starts at zero, so an untrained network outputs 0.5.
class ConfidenceNet {
 public:
  ConfidenceNet() = default;
  ConfidenceNet(std::size_t feature_channels, std::size_t hidden, std::uint64_t seed);

  std::size_t feature_channels() const { return feature_channels_; }
  Tensor operator()(const SurfaceSource& frame, const SurfaceSource& prev, const Correspondences& c) const;
  void collect(const std::string& prefix, ParameterList& out) const;

 private:
  std::size_t feature_channels_ = 0;
  Linear l1_, l2_, out_;
};

// Closed-form minimizer over SE(3) of sum_i w_i |x_i - (R x'_i + t)|^2.
// Weights are normalized internally. Differentiable through the SVD.
TensorPose solve_weighted_procrustes(const Tensor& x, const Tensor& x_prev, const Tensor& w);
SE3Pose solve_weighted_procrustes(const std::vector<Vec3>& x, const std::vector<Vec3>& x_prev,
                                  const std::vector<double>& w);

enum class Weighting { uniform, confidence };

struct PairOptions {
  LiftOptions lift;
  Weighting weighting = Weighting::uniform;
  const ConfidenceNet* confidence = nullptr;  // required for Weighting::confidence
  // Optional per-pixel weight override (H*W), multiplied into the weights;
  // used to give known outliers exactly zero weight.
  const std::vector<double>* pixel_weights = nullptr;
};

struct PairResult {
  TensorPose pose;  // frame t-1 camera -> frame t camera
  Correspondences correspondences;
  Tensor weights;   // {N}
};

PairResult pose_from_frame_pair(const SurfaceSource& frame, const SurfaceSource& prev, const FlowField& flow,
                                const PairOptions& opts = {});

}  // namespace sfpose
