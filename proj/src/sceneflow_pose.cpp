#include "sfpose/sceneflow_pose.hpp"

#include "sfpose/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sfpose {

// ---- FlowField ---------------------------------------------------------------

FlowField FlowField::zeros(std::size_t width, std::size_t height) {
  FlowField f;
  f.width = width;
  f.height = height;
  f.uv.assign(width * height * 2, 0.0);
  return f;
}

Vec2 FlowField::at(std::size_t x, std::size_t y) const {
  const std::size_t i = 2 * (y * width + x);
  return {uv[i], uv[i + 1]};
}

void FlowField::set(std::size_t x, std::size_t y, const Vec2& v) {
  const std::size_t i = 2 * (y * width + x);
  uv[i] = v.x();
  uv[i + 1] = v.y();
}

bool FlowField::is_valid(std::size_t x, std::size_t y) const {
  if (!valid.empty() && !valid[y * width + x]) return false;
  const Vec2 v = at(x, y);
  return std::isfinite(v.x()) && std::isfinite(v.y());
}

// ---- surface sources -------------------------------------------------------------

RenderedSurface::RenderedSurface(ImageRender render, Tensor image, Tensor features)
    : render_(std::move(render)), image_(std::move(image)), features_(std::move(features)) {
  const Shape& s = render_.opacity.shape();
  opacity3_ = reshape(render_.opacity, {s[0], s[1], 1});
}

SurfaceSource::Lookup RenderedSurface::lookup(const Tensor& coords) const {
  const std::size_t n = coords.dim(0);
  return {bilinear_sample(render_.surface, coords), reshape(bilinear_sample(opacity3_, coords), {n})};
}

AnalyticSurface::AnalyticSurface(std::shared_ptr<const AnalyticScene> scene, const SE3Pose& camera_to_world,
                                 const Intrinsics& k, Tensor image)
    : scene_(std::move(scene)), camera_to_world_(camera_to_world), k_(k), image_(std::move(image)) {}

SurfaceSource::Lookup AnalyticSurface::lookup(const Tensor& coords) const {
  const std::size_t n = coords.dim(0);
  const auto c = coords.data();
  std::vector<double> pts(3 * n, 0.0), op(n, 0.0);
  const Mat3& r = camera_to_world_.rotation();
  for (std::size_t i = 0; i < n; ++i) {
    const Ray ray = pixel_to_ray(k_, Vec2(c[2 * i], c[2 * i + 1]));
    const auto hit = scene_->intersect(camera_to_world_.translation(), r * ray.direction);
    if (!hit) continue;
    const Vec3 local = ray.direction * hit->t;
    for (int a = 0; a < 3; ++a) pts[3 * i + a] = local(a);
    op[i] = 1.0;
  }
  return {Tensor::from({n, 3}, std::move(pts)), Tensor::from({n}, std::move(op))};
}

// ---- lifting ---------------------------------------------------------------------

Correspondences lift_correspondences(const SurfaceSource& frame, const SurfaceSource& prev, const FlowField& flow,
                                     const LiftOptions& opts) {
  const std::size_t w = frame.width(), h = frame.height();
  if (flow.width != w || flow.height != h || prev.width() != w || prev.height() != h) {
    throw ShapeError("lift_correspondences: frame " + std::to_string(w) + "x" + std::to_string(h) + ", previous " +
                     std::to_string(prev.width()) + "x" + std::to_string(prev.height()) + ", flow " +
                     std::to_string(flow.width) + "x" + std::to_string(flow.height));
  }
  // Geometric screening on values only.
  std::vector<std::size_t> cand;
  std::vector<double> p, pp;
  const double xmax = static_cast<double>(w - 1), ymax = static_cast<double>(h - 1);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (!flow.is_valid(x, y)) continue;
      const Vec2 v = flow.at(x, y);
      const double tx = static_cast<double>(x) + v.x(), ty = static_cast<double>(y) + v.y();
      if (tx < 0 || ty < 0 || tx > xmax || ty > ymax) continue;
      cand.push_back(y * w + x);
      p.insert(p.end(), {static_cast<double>(x), static_cast<double>(y)});
      pp.insert(pp.end(), {tx, ty});
    }
  if (cand.size() < 3) {
    throw DegenerateGeometryError("lift_correspondences: only " + std::to_string(cand.size()) +
                                  " pixels have valid in-bounds flow (need 3)");
  }
  Tensor coords = Tensor::from({cand.size(), 2}, std::move(p));
  Tensor coords_prev = Tensor::from({cand.size(), 2}, std::move(pp));
  const auto here = frame.lookup(coords);
  const auto there = prev.lookup(coords_prev);

  std::vector<std::size_t> keep;
  const auto oa = here.opacity.data(), ob = there.opacity.data();
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (oa[i] >= opts.min_opacity && ob[i] >= opts.min_opacity) keep.push_back(i);
  }
  if (keep.size() < 3) {
    throw DegenerateGeometryError("lift_correspondences: only " + std::to_string(keep.size()) +
                                  " correspondences survive the opacity mask (need 3)");
  }
  if (opts.max_points > 0 && keep.size() > opts.max_points) {
    Rng rng(opts.seed);
    std::shuffle(keep.begin(), keep.end(), rng.engine());
    keep.resize(opts.max_points);
    std::sort(keep.begin(), keep.end());
  }
  Correspondences c;
  c.x = index_select(here.points, keep);
  c.x_prev = index_select(there.points, keep);
  c.coords = index_select(coords, keep);
  c.coords_prev = index_select(coords_prev, keep);
  c.opacity = index_select(here.opacity, keep);
  c.opacity_prev = index_select(there.opacity, keep);
  c.pixel_index.reserve(keep.size());
  for (std::size_t i : keep) c.pixel_index.push_back(cand[i]);
  return c;
}

// ---- confidence network ---------------------------------------------------------

ConfidenceNet::ConfidenceNet(std::size_t feature_channels, std::size_t hidden, std::uint64_t seed)
    : feature_channels_(feature_channels) {
  Rng rng(seed);
  l1_ = Linear(2 * feature_channels + 3 + 2, hidden, rng);
  l2_ = Linear(hidden, hidden, rng);
  out_ = Linear(hidden, 1, rng, /*zero=*/true);
}

Tensor ConfidenceNet::operator()(const SurfaceSource& frame, const SurfaceSource& prev,
                                 const Correspondences& c) const {
  if (frame.features().numel() == 0 || frame.features().dim(2) != feature_channels_ ||
      prev.features().numel() == 0 || prev.features().dim(2) != feature_channels_) {
    throw ShapeError("confidence: sources must carry " + std::to_string(feature_channels_) + "-channel features");
  }
  const std::size_t n = c.size();
  const Tensor fa = bilinear_sample(frame.features(), c.coords);
  const Tensor fb = bilinear_sample(prev.features(), c.coords_prev);
  const Tensor residual =
      abs(sub(bilinear_sample(frame.image(), c.coords), bilinear_sample(prev.image(), c.coords_prev)));
  const Tensor in = concat({fa, fb, residual, reshape(c.opacity, {n, 1}), reshape(c.opacity_prev, {n, 1})}, 1);
  const Tensor hidden = relu(l2_(relu(l1_(in))));
  return reshape(sigmoid(out_(hidden)), {n});
}

void ConfidenceNet::collect(const std::string& prefix, ParameterList& out) const {
  l1_.collect(prefix + ".l1", out);
  l2_.collect(prefix + ".l2", out);
  out_.collect(prefix + ".out", out);
}

// ---- Procrustes --------------------------------------------------------------------

namespace {

// Rank test on the weighted covariance of one point cloud.
void check_spread(const Eigen::Matrix3d& cov, const char* which) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov, Eigen::EigenvaluesOnly);
  const Eigen::Vector3d ev = es.eigenvalues();  // ascending
  const double top = ev(2);
  if (!(top > 1e-300) || ev(1) <= 1e-12 * top) {
    throw DegenerateGeometryError(std::string("procrustes: weighted ") + which +
                                  " points are collinear or coincident (covariance rank < 2)");
  }
}

struct Moments {
  Vec3 mu = Vec3::Zero(), mu_prev = Vec3::Zero();
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero(), cov_prev = Eigen::Matrix3d::Zero();
};

Moments weighted_moments(std::span<const double> x, std::span<const double> xp, std::span<const double> w) {
  const std::size_t n = w.size();
  double total = 0.0;
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("procrustes: weights must be finite and >= 0");
    total += v;
  }
  if (!(total > 0.0)) throw DegenerateGeometryError("procrustes: weights sum to zero");
  Moments m;
  for (std::size_t i = 0; i < n; ++i) {
    const double wi = w[i] / total;
    m.mu += wi * Vec3(x[3 * i], x[3 * i + 1], x[3 * i + 2]);
    m.mu_prev += wi * Vec3(xp[3 * i], xp[3 * i + 1], xp[3 * i + 2]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double wi = w[i] / total;
    const Vec3 a = Vec3(x[3 * i], x[3 * i + 1], x[3 * i + 2]) - m.mu;
    const Vec3 b = Vec3(xp[3 * i], xp[3 * i + 1], xp[3 * i + 2]) - m.mu_prev;
    m.cov += wi * a * a.transpose();
    m.cov_prev += wi * b * b.transpose();
  }
  return m;
}

void check_inputs(std::size_t n, std::size_t np, std::size_t nw) {
  if (n != np || n != nw) {
    throw std::invalid_argument("procrustes: " + std::to_string(n) + " points, " + std::to_string(np) +
                                " previous points, " + std::to_string(nw) + " weights");
  }
  if (n < 3) throw DegenerateGeometryError("procrustes: need at least 3 correspondences, got " + std::to_string(n));
}

}  // namespace

TensorPose solve_weighted_procrustes(const Tensor& x, const Tensor& x_prev, const Tensor& w) {
  if (x.ndim() != 2 || x.dim(1) != 3) throw ShapeError("procrustes: expected N x 3 points, got " + shape_str(x.shape()));
  if (x_prev.shape() != x.shape()) throw ShapeError("procrustes", x.shape(), x_prev.shape());
  const std::size_t n = x.dim(0);
  check_inputs(n, x_prev.dim(0), w.numel());
  const Moments m = weighted_moments(x.data(), x_prev.data(), w.data());
  check_spread(m.cov, "current");
  check_spread(m.cov_prev, "previous");

  const Tensor wn = div(reshape(w, {n, 1}), sum(w));
  const Tensor wrow = transpose(wn);
  const Tensor mu = matmul(wrow, x);            // 1 x 3
  const Tensor mu_prev = matmul(wrow, x_prev);  // 1 x 3
  const Tensor xc = sub(x, mu);
  const Tensor xpc = sub(x_prev, mu_prev);
  const Tensor cross = matmul(transpose(mul(xc, wn)), xpc);  // (X - mu)^T W (X' - mu')
  const Svd3 svd = svd3(cross);
  // Reflection guard: flip the weakest direction when U V^T is improper.
  Eigen::Matrix3d uv;
  {
    Eigen::Matrix3d um, vm;
    const auto ud = svd.u.data(), vd = svd.v.data();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        um(i, j) = ud[static_cast<std::size_t>(3 * i + j)];
        vm(i, j) = vd[static_cast<std::size_t>(3 * i + j)];
      }
    uv = um * vm.transpose();
  }
  const double d = uv.determinant() < 0 ? -1.0 : 1.0;
  const Tensor diag = Tensor::from({1, 3}, {1.0, 1.0, d});
  const Tensor r = matmul(mul(svd.u, diag), transpose(svd.v));
  const Tensor t = sub(mu, matmul(mu_prev, transpose(r)));
  return {r, t};
}

SE3Pose solve_weighted_procrustes(const std::vector<Vec3>& x, const std::vector<Vec3>& x_prev,
                                  const std::vector<double>& w) {
  check_inputs(x.size(), x_prev.size(), w.size());
  const std::span<const double> xs(x.front().data(), 3 * x.size());
  const std::span<const double> xps(x_prev.front().data(), 3 * x_prev.size());
  const Moments m = weighted_moments(xs, xps, w);
  check_spread(m.cov, "current");
  check_spread(m.cov_prev, "previous");
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  Eigen::Matrix3d cross = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < x.size(); ++i) {
    cross += (w[i] / total) * (x[i] - m.mu) * (x_prev[i] - m.mu_prev).transpose();
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 u = svd.matrixU(), v = svd.matrixV();
  Eigen::Vector3d s(1.0, 1.0, (u * v.transpose()).determinant() < 0 ? -1.0 : 1.0);
  const Mat3 r = u * s.asDiagonal() * v.transpose();
  return SE3Pose(r, m.mu - r * m.mu_prev);
}

// ---- frame pair ----------------------------------------------------------------------

PairResult pose_from_frame_pair(const SurfaceSource& frame, const SurfaceSource& prev, const FlowField& flow,
                                const PairOptions& opts) {
  PairResult out;
  out.correspondences = lift_correspondences(frame, prev, flow, opts.lift);
  const Correspondences& c = out.correspondences;
  const std::size_t n = c.size();
  if (opts.weighting == Weighting::confidence) {
    if (!opts.confidence) throw std::invalid_argument("pose_from_frame_pair: confidence weighting needs a network");
    out.weights = (*opts.confidence)(frame, prev, c);
  } else {
    out.weights = Tensor::ones({n});
  }
  if (opts.pixel_weights) {
    if (opts.pixel_weights->size() != flow.size()) {
      throw ShapeError("pose_from_frame_pair: pixel weight map has " + std::to_string(opts.pixel_weights->size()) +
                       " entries for a " + std::to_string(flow.size()) + "-pixel frame");
    }
    std::vector<double> m(n);
    for (std::size_t i = 0; i < n; ++i) m[i] = (*opts.pixel_weights)[c.pixel_index[i]];
    out.weights = mul(out.weights, Tensor::from({n}, std::move(m)));
  }
  out.pose = solve_weighted_procrustes(c.x, c.x_prev, out.weights);
  return out;
}

}  // namespace sfpose
