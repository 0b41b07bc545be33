#pragma once

// Rigid poses, pinhole cameras, rays and trajectory alignment.
//
// Camera frames follow the pinhole convention: x right, y down, z along the
// optical axis. Integer pixel coordinates address pixel centers.

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "sfpose/tensor.hpp"

namespace sfpose {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

class BehindCameraError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Projection onto SO(3) in the Frobenius sense.
Mat3 nearest_rotation(const Mat3& m);
Mat3 rotation_from_axis_angle(const Vec3& omega);
Vec3 axis_angle_from_rotation(const Mat3& r);
// Geodesic angle between two rotations, radians.
double rotation_distance(const Mat3& a, const Mat3& b);
double orthogonality_residual(const Mat3& r);

class SE3Pose {
 public:
  SE3Pose() = default;
  // Re-orthonormalizes `rotation` when its residual exceeds kOrthoTolerance.
  SE3Pose(const Mat3& rotation, const Vec3& translation);

  static SE3Pose identity() { return {}; }
  static SE3Pose from_matrix(const Mat4& m);
  // Left-perturbation exponential: rotation exp([omega]x), translation t.
  static SE3Pose from_axis_angle(const Vec3& omega, const Vec3& translation);
  // Camera-to-world pose looking from `eye` toward `target`; `up` is the
  // approximate world direction of -y in the camera frame.
  static SE3Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up);

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }
  Mat4 matrix() const;

  Vec3 apply(const Vec3& x) const { return rotation_ * x + translation_; }
  SE3Pose inverse() const;

  static constexpr double kOrthoTolerance = 1e-9;

 private:
  Mat3 rotation_ = Mat3::Identity();
  Vec3 translation_ = Vec3::Zero();
};

// a * b: apply b first, then a.
SE3Pose compose(const SE3Pose& a, const SE3Pose& b);
inline SE3Pose operator*(const SE3Pose& a, const SE3Pose& b) { return compose(a, b); }
inline SE3Pose inverse(const SE3Pose& p) { return p.inverse(); }

struct Intrinsics {
  double fx = 1.0, fy = 1.0;
  double cx = 0.5, cy = 0.5;
  std::size_t width = 1, height = 1;

  // Square pixels, principal point at the image center, horizontal field of view in degrees.
  static Intrinsics from_fov(std::size_t width, std::size_t height, double hfov_deg);
  void validate() const;
  Mat3 matrix() const;
  Intrinsics scaled(double factor) const;
  bool operator==(const Intrinsics&) const = default;
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double near = 0.0;
  double far = 1.0;

  Vec3 at(double t) const { return origin + t * direction; }
};

// Camera-frame ray through pixel `p` (K^-1 p~, normalized).
Ray pixel_to_ray(const Intrinsics& k, const Vec2& p, double near = 0.0, double far = 1.0);
// Pinhole projection; throws BehindCameraError for z <= kMinDepth.
Vec2 project(const Intrinsics& k, const Vec3& x);
inline constexpr double kMinDepth = 1e-9;

struct TimedPose {
  double timestamp = 0.0;
  SE3Pose pose;  // camera-to-world
};

class Trajectory {
 public:
  Trajectory() = default;
  explicit Trajectory(std::vector<TimedPose> poses);

  std::size_t size() const { return poses_.size(); }
  bool empty() const { return poses_.empty(); }
  const TimedPose& operator[](std::size_t i) const { return poses_[i]; }
  const std::vector<TimedPose>& poses() const { return poses_; }
  void push_back(const TimedPose& p);

  // Re-expresses every pose relative to the first, so the first is identity.
  Trajectory normalized() const;
  // Applies `g` on the left of every pose.
  Trajectory transformed(const SE3Pose& g) const;
  std::vector<Vec3> positions() const;

 private:
  std::vector<TimedPose> poses_;
};

struct Similarity {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& x) const { return scale * (rotation * x) + translation; }
};

struct AlignmentResult {
  Trajectory aligned;
  Similarity transform;
  double ate = 0.0;  // RMSE of aligned translation residuals
};

// Least-squares alignment of `estimated` positions onto `ground_truth`
// (similarity when with_scale, rigid otherwise). Timestamps must match.
AlignmentResult align_trajectories(const Trajectory& estimated, const Trajectory& ground_truth, bool with_scale = true);

// Umeyama closed form on raw point lists.
Similarity umeyama(const std::vector<Vec3>& source, const std::vector<Vec3>& target, bool with_scale);

// ---- differentiable poses --------------------------------------------------

// SE(3) pose held as tensors (rotation 3x3, translation 1x3) so that
// gradients flow through composition and point transforms.
struct TensorPose {
  Tensor rotation;
  Tensor translation;

  static TensorPose constant(const SE3Pose& p);
  static TensorPose identity() { return constant(SE3Pose::identity()); }
  SE3Pose value() const;
  // points: N x 3 row vectors.
  Tensor apply(const Tensor& points) const;
  TensorPose inverse() const;
};

TensorPose compose(const TensorPose& a, const TensorPose& b);

// Differentiable pinhole projection of N x 3 camera-frame points to N x 2
// pixels; depths are clamped to `min_depth` (callers mask those points).
Tensor project_points(const Intrinsics& k, const Tensor& points, double min_depth = 1e-6);

}  // namespace sfpose
