#include "sfpose/geometry.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>

namespace sfpose {

Mat3 nearest_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  const double d = (u * v.transpose()).determinant() < 0 ? -1.0 : 1.0;
  return u * Eigen::Vector3d(1.0, 1.0, d).asDiagonal() * v.transpose();
}

Mat3 rotation_from_axis_angle(const Vec3& omega) {
  const double theta = omega.norm();
  if (theta < 1e-15) return Mat3::Identity();
  return Eigen::AngleAxisd(theta, omega / theta).toRotationMatrix();
}

Vec3 axis_angle_from_rotation(const Mat3& r) {
  const Eigen::AngleAxisd aa(r);
  return aa.angle() * aa.axis();
}

double rotation_distance(const Mat3& a, const Mat3& b) {
  // atan2 form stays accurate for tiny angles where acos((tr-1)/2) does not.
  const Mat3 d = a.transpose() * b;
  const Vec3 w(d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1));
  return std::atan2(0.5 * w.norm(), 0.5 * (d.trace() - 1.0));
}

double orthogonality_residual(const Mat3& r) {
  return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
}

SE3Pose::SE3Pose(const Mat3& rotation, const Vec3& translation)
    : rotation_(rotation), translation_(translation) {
  if (orthogonality_residual(rotation_) > kOrthoTolerance) rotation_ = nearest_rotation(rotation_);
}

SE3Pose SE3Pose::from_matrix(const Mat4& m) {
  return SE3Pose(m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>());
}

SE3Pose SE3Pose::from_axis_angle(const Vec3& omega, const Vec3& translation) {
  return SE3Pose(rotation_from_axis_angle(omega), translation);
}

SE3Pose SE3Pose::look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = (-up).cross(z);
  if (x.norm() < 1e-12) throw std::invalid_argument("look_at: up vector parallel to viewing direction");
  x.normalize();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  return SE3Pose(r, eye);
}

Mat4 SE3Pose::matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = rotation_;
  m.topRightCorner<3, 1>() = translation_;
  return m;
}

SE3Pose SE3Pose::inverse() const {
  const Mat3 rt = rotation_.transpose();
  return SE3Pose(rt, -(rt * translation_));
}

SE3Pose compose(const SE3Pose& a, const SE3Pose& b) {
  return SE3Pose(a.rotation() * b.rotation(), a.rotation() * b.translation() + a.translation());
}

// ---- Intrinsics / rays -----------------------------------------------------

Intrinsics Intrinsics::from_fov(std::size_t width, std::size_t height, double hfov_deg) {
  Intrinsics k;
  k.width = width;
  k.height = height;
  k.fx = 0.5 * static_cast<double>(width) / std::tan(0.5 * hfov_deg * M_PI / 180.0);
  k.fy = k.fx;
  k.cx = 0.5 * static_cast<double>(width - 1);
  k.cy = 0.5 * static_cast<double>(height - 1);
  k.validate();
  return k;
}

void Intrinsics::validate() const {
  if (!(fx > 0 && fy > 0)) throw std::invalid_argument("intrinsics: focal lengths must be positive");
  if (width == 0 || height == 0) throw std::invalid_argument("intrinsics: empty image");
  if (!(cx > 0 && cx < static_cast<double>(width) && cy > 0 && cy < static_cast<double>(height))) {
    throw std::invalid_argument("intrinsics: principal point outside the image");
  }
}

Mat3 Intrinsics::matrix() const {
  Mat3 k = Mat3::Identity();
  k(0, 0) = fx;
  k(1, 1) = fy;
  k(0, 2) = cx;
  k(1, 2) = cy;
  return k;
}

Intrinsics Intrinsics::scaled(double factor) const {
  // Pixel-center convention: x' + 0.5 = factor * (x + 0.5).
  Intrinsics k;
  k.width = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(width) * factor)));
  k.height = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(height) * factor)));
  k.fx = fx * factor;
  k.fy = fy * factor;
  k.cx = (cx + 0.5) * factor - 0.5;
  k.cy = (cy + 0.5) * factor - 0.5;
  return k;
}

Ray pixel_to_ray(const Intrinsics& k, const Vec2& p, double near, double far) {
  Ray r;
  r.direction = Vec3((p.x() - k.cx) / k.fx, (p.y() - k.cy) / k.fy, 1.0).normalized();
  r.near = near;
  r.far = far;
  return r;
}

Vec2 project(const Intrinsics& k, const Vec3& x) {
  if (!(x.z() > kMinDepth)) {
    throw BehindCameraError("project: point at depth " + std::to_string(x.z()) + " is behind or on the camera plane");
  }
  return {k.fx * x.x() / x.z() + k.cx, k.fy * x.y() / x.z() + k.cy};
}

// ---- Trajectory ------------------------------------------------------------

Trajectory::Trajectory(std::vector<TimedPose> poses) {
  for (const auto& p : poses) push_back(p);
}

void Trajectory::push_back(const TimedPose& p) {
  if (!poses_.empty() && !(p.timestamp > poses_.back().timestamp)) {
    throw std::invalid_argument("trajectory: timestamps must be strictly increasing");
  }
  poses_.push_back(p);
}

Trajectory Trajectory::normalized() const {
  if (poses_.empty()) return {};
  return transformed(poses_.front().pose.inverse());
}

Trajectory Trajectory::transformed(const SE3Pose& g) const {
  Trajectory out;
  for (const auto& p : poses_) out.push_back({p.timestamp, g * p.pose});
  return out;
}

std::vector<Vec3> Trajectory::positions() const {
  std::vector<Vec3> out;
  out.reserve(poses_.size());
  for (const auto& p : poses_) out.push_back(p.pose.translation());
  return out;
}

Similarity umeyama(const std::vector<Vec3>& source, const std::vector<Vec3>& target, bool with_scale) {
  const std::size_t n = source.size();
  Vec3 mu_s = Vec3::Zero(), mu_t = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    mu_s += source[i];
    mu_t += target[i];
  }
  mu_s /= static_cast<double>(n);
  mu_t /= static_cast<double>(n);
  Mat3 cov = Mat3::Zero();
  double var_s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (target[i] - mu_t) * (source[i] - mu_s).transpose();
    var_s += (source[i] - mu_s).squaredNorm();
  }
  cov /= static_cast<double>(n);
  var_s /= static_cast<double>(n);

  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 d(1.0, 1.0, 1.0);
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) d(2) = -1.0;
  Similarity s;
  s.rotation = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  s.scale = with_scale && var_s > 0 ? svd.singularValues().dot(d) / var_s : 1.0;
  s.translation = mu_t - s.scale * s.rotation * mu_s;
  return s;
}

AlignmentResult align_trajectories(const Trajectory& estimated, const Trajectory& ground_truth, bool with_scale) {
  if (estimated.size() != ground_truth.size()) {
    throw std::invalid_argument("align_trajectories: length mismatch (" + std::to_string(estimated.size()) + " vs " +
                                std::to_string(ground_truth.size()) + ")");
  }
  if (estimated.size() < 3) throw std::invalid_argument("align_trajectories: need at least 3 poses");
  for (std::size_t i = 0; i < estimated.size(); ++i) {
    const double a = estimated[i].timestamp, b = ground_truth[i].timestamp;
    if (std::abs(a - b) > 1e-9 * std::max(1.0, std::abs(b))) {
      throw std::invalid_argument("align_trajectories: timestamp mismatch at index " + std::to_string(i));
    }
  }
  const auto src = estimated.positions();
  const auto dst = ground_truth.positions();
  AlignmentResult res;
  res.transform = umeyama(src, dst, with_scale);
  double sq = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Vec3 p = res.transform.apply(src[i]);
    sq += (p - dst[i]).squaredNorm();
    res.aligned.push_back({estimated[i].timestamp, SE3Pose(res.transform.rotation * estimated[i].pose.rotation(), p)});
  }
  res.ate = std::sqrt(sq / static_cast<double>(src.size()));
  return res;
}

// ---- differentiable poses --------------------------------------------------

TensorPose TensorPose::constant(const SE3Pose& p) {
  std::vector<double> r(9), t(3);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) r[static_cast<std::size_t>(i * 3 + j)] = p.rotation()(i, j);
    t[static_cast<std::size_t>(i)] = p.translation()(i);
  }
  return {Tensor::from({3, 3}, std::move(r)), Tensor::from({1, 3}, std::move(t))};
}

SE3Pose TensorPose::value() const {
  Mat3 r;
  Vec3 t;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) r(i, j) = rotation[static_cast<std::size_t>(i * 3 + j)];
    t(i) = translation[static_cast<std::size_t>(i)];
  }
  return SE3Pose(r, t);
}

Tensor TensorPose::apply(const Tensor& points) const {
  return add(matmul(points, transpose(rotation)), translation);
}

TensorPose TensorPose::inverse() const {
  // R^T, -R^T t  (row form: -t R)
  return {transpose(rotation), neg(matmul(translation, rotation))};
}

TensorPose compose(const TensorPose& a, const TensorPose& b) {
  return {matmul(a.rotation, b.rotation), add(matmul(b.translation, transpose(a.rotation)), a.translation)};
}

Tensor project_points(const Intrinsics& k, const Tensor& points, double min_depth) {
  if (points.ndim() != 2 || points.dim(1) != 3) throw ShapeError("project_points: expected Nx3, got " + shape_str(points.shape()));
  const Tensor xy = slice(points, 1, 0, 2);
  const Tensor z = clamp_min(slice(points, 1, 2, 3), min_depth);
  const Tensor focal = Tensor::from({1, 2}, {k.fx, k.fy});
  const Tensor center = Tensor::from({1, 2}, {k.cx, k.cy});
  return add(mul(div(xy, z), focal), center);
}

}  // namespace sfpose
