#pragma once

// Self-supervision signals: photometric re-rendering (multi-context and
// single-context) and the pose-induced flow loss.

#include <memory>
#include <vector>

#include "sfpose/fields.hpp"
#include "sfpose/geometry.hpp"
#include "sfpose/renderer.hpp"
#include "sfpose/sceneflow_pose.hpp"
#include "sfpose/tensor.hpp"

namespace sfpose {

// Radiance fields conditioned on frames of one sequence.
class FieldProvider {
 public:
  virtual ~FieldProvider() = default;
  // Field in frame t's camera coordinates, conditioned on frame t alone.
  virtual RadianceFn single(std::size_t t) const = 0;
  // Field in the first frame's camera coordinates, conditioned on the
  // given frames; poses[i] maps camera contexts[i] into that frame.
  virtual RadianceFn multi(const std::vector<std::size_t>& contexts, const std::vector<TensorPose>& poses) const = 0;
};

// Ground-truth scene seen from known cameras (camera-to-world). Context
// poses are ignored: the oracle field is already fully determined.
class AnalyticProvider final : public FieldProvider {
 public:
  AnalyticProvider(std::shared_ptr<const AnalyticScene> scene, std::vector<SE3Pose> cameras);
  RadianceFn single(std::size_t t) const override;
  RadianceFn multi(const std::vector<std::size_t>& contexts, const std::vector<TensorPose>& poses) const override;

 private:
  std::shared_ptr<const AnalyticScene> scene_;
  std::vector<SE3Pose> cameras_;
};

// The learnable field with per-frame encoded features.
class LearnedProvider final : public FieldProvider {
 public:
  LearnedProvider(const ConditionedField& field, std::vector<Tensor> features, const Intrinsics& k);
  RadianceFn single(std::size_t t) const override;
  RadianceFn multi(const std::vector<std::size_t>& contexts, const std::vector<TensorPose>& poses) const override;
  const Tensor& features(std::size_t t) const { return features_.at(t); }

 private:
  const ConditionedField* field_;
  std::vector<Tensor> features_;
  Intrinsics k_;
};

// Context set: first, middle and last frame (deduplicated).
std::vector<std::size_t> default_contexts(std::size_t frames);

struct PhotometricOptions {
  RenderOptions render;
  // Pixels per frame for the multi-context term; 0 renders every pixel.
  std::size_t pixels_per_frame = 0;
  std::uint64_t seed = 0;
};

struct PhotometricTerms {
  Tensor multi;   // scalar
  Tensor single;  // scalar
};

// Mean squared RGB error over frames and pixels. `poses` are the estimated
// camera-to-first-frame poses. `single_renders`, when given, are reused as
// the single-context renders (they are needed for pose estimation anyway).
PhotometricTerms photometric_loss(const std::vector<Tensor>& frames, const std::vector<TensorPose>& poses,
                                  const FieldProvider& fields, const Intrinsics& k,
                                  const std::vector<std::size_t>& contexts, const PhotometricOptions& opts,
                                  const std::vector<ImageRender>* single_renders = nullptr);

// Surface map of one frame with its validity signal.
struct SurfaceMap {
  Tensor points;   // H x W x 3, camera frame
  Tensor opacity;  // H x W
};

// flows[t] is the backward flow from frame t+1 to frame t. For every pixel
// of frame t+1 with valid flow and opacity, the surface point is moved into
// frame t by P_t^-1 P_{t+1} and projected; the squared difference between
// the induced flow and the input flow is averaged over pixels kept (in
// bounds and in front of the camera) and then over pairs.
Tensor pose_flow_loss(const std::vector<FlowField>& flows, const std::vector<TensorPose>& poses,
                      const std::vector<SurfaceMap>& surfaces, const Intrinsics& k,
                      double min_opacity = kMinValidOpacity);

}  // namespace sfpose
