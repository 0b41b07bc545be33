#include "sfpose/verify.hpp"

#include "sfpose/fields.hpp"
#include "sfpose/gradcheck.hpp"
#include "sfpose/random.hpp"
#include "sfpose/renderer.hpp"
#include "sfpose/sceneflow_pose.hpp"
#include "sfpose/synth.hpp"
#include "sfpose/training.hpp"

#include <Eigen/SVD>

#include <chrono>
#include <cmath>
#include <sstream>

namespace sfpose {

bool SuiteReport::pass() const {
  for (const auto& c : checks)
    if (!c.pass) return false;
  return !checks.empty();
}

std::string SuiteReport::format() const {
  std::ostringstream s;
  for (const auto& c : checks) s << (c.pass ? "PASS " : "FAIL ") << suite << '/' << c.name << ": " << c.detail << '\n';
  s << (pass() ? "PASS " : "FAIL ") << suite << " (" << checks.size() << " checks, " << seconds << " s)\n";
  return s.str();
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

Mat3 random_rotation(Rng& rng, double max_angle) {
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  return rotation_from_axis_angle(axis * rng.uniform(0.0, max_angle));
}

Vec3 random_vec(Rng& rng, double scale) { return Vec3(rng.normal(), rng.normal(), rng.normal()) * scale; }

double weighted_objective(const std::vector<Vec3>& x, const std::vector<Vec3>& xp, const std::vector<double>& w,
                          const Mat3& r, const Vec3& t) {
  double f = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) f += w[i] * (x[i] - (r * xp[i] + t)).squaredNorm();
  return f;
}

// Gauss-Newton on (omega, t) with R = exp(omega) R0, starting from identity.
// Shares nothing with the closed form beyond the objective itself.
SE3Pose minimize_directly(const std::vector<Vec3>& x, const std::vector<Vec3>& xp, const std::vector<double>& w) {
  Mat3 r = Mat3::Identity();
  Vec3 t = Vec3::Zero();
  for (int iter = 0; iter < 200; ++iter) {
    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const Vec3 q = r * xp[i];
      const Vec3 res = x[i] - (q + t);
      // d res / d omega = [q]x, d res / d t = -I
      Eigen::Matrix<double, 3, 6> j;
      j << 0, -q.z(), q.y(), -1, 0, 0,  //
          q.z(), 0, -q.x(), 0, -1, 0,   //
          -q.y(), q.x(), 0, 0, 0, -1;
      h += w[i] * j.transpose() * j;
      g += w[i] * j.transpose() * res;
    }
    const Eigen::Matrix<double, 6, 1> step = -h.ldlt().solve(g);
    // Backtrack so the objective never increases.
    const double f0 = weighted_objective(x, xp, w, r, t);
    double a = 1.0;
    for (int k = 0; k < 30; ++k, a *= 0.5) {
      const Mat3 r1 = rotation_from_axis_angle(a * step.head<3>()) * r;
      const Vec3 t1 = t + a * step.tail<3>();
      if (weighted_objective(x, xp, w, r1, t1) <= f0) {
        r = r1;
        t = t1;
        break;
      }
    }
    if (a * step.norm() < 1e-14) break;
  }
  return SE3Pose(r, t);
}

}  // namespace

CheckResult check_procrustes_exact(std::size_t instances, std::size_t points, std::uint64_t seed) {
  CheckResult c{"exact_recovery", true, ""};
  Rng rng(seed);
  double worst_r = 0.0, worst_t = 0.0, elapsed = 0.0;
  std::size_t ok = 0;
  for (std::size_t k = 0; k < instances; ++k) {
    const Mat3 r = random_rotation(rng, 30.0 * M_PI / 180.0);
    const Vec3 t = random_vec(rng, 1.0);
    std::vector<Vec3> x(points), xp(points);
    std::vector<double> w(points);
    for (std::size_t i = 0; i < points; ++i) {
      xp[i] = random_vec(rng, 1.0);
      x[i] = r * xp[i] + t;
      w[i] = rng.uniform(0.05, 1.0);
    }
    const auto t0 = Clock::now();
    const SE3Pose p = solve_weighted_procrustes(x, xp, w);
    elapsed += seconds_since(t0);
    const double er = rotation_distance(p.rotation(), r), et = (p.translation() - t).norm();
    worst_r = std::max(worst_r, er);
    worst_t = std::max(worst_t, et);
    if (er <= 1e-9 && et <= 1e-9) ++ok;
  }
  c.pass = ok == instances && elapsed < 1.0;
  c.detail = std::to_string(ok) + "/" + std::to_string(instances) + " within 1e-9; worst rotation " + fmt(worst_r) +
             " rad, translation " + fmt(worst_t) + "; solve time " + fmt(elapsed) + " s (limit 1 s)";
  return c;
}

CheckResult check_procrustes_vs_minimizer(std::size_t instances, std::uint64_t seed) {
  CheckResult c{"closed_form_vs_minimizer", true, ""};
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t k = 0; k < instances; ++k) {
    const std::size_t n = 50 + rng.index(200);
    const Mat3 r = random_rotation(rng, 30.0 * M_PI / 180.0);
    const Vec3 t = random_vec(rng, 1.0);
    std::vector<Vec3> x(n), xp(n);
    std::vector<double> w(n);
    // Noise and unequal weights make the weighted centering matter.
    for (std::size_t i = 0; i < n; ++i) {
      xp[i] = random_vec(rng, 1.0) + Vec3(2.0, 0.0, 0.0);
      x[i] = r * xp[i] + t + random_vec(rng, 0.05);
      w[i] = rng.uniform() < 0.3 ? rng.uniform(2.0, 5.0) : rng.uniform(0.01, 0.5);
    }
    const SE3Pose closed = solve_weighted_procrustes(x, xp, w);
    const SE3Pose direct = minimize_directly(x, xp, w);
    const double d = std::max(rotation_distance(closed.rotation(), direct.rotation()),
                              (closed.translation() - direct.translation()).norm());
    worst = std::max(worst, d);
  }
  c.pass = worst <= 1e-4;
  c.detail = "max pose difference " + fmt(worst) + " over " + std::to_string(instances) + " instances (limit 1e-4)";
  return c;
}

CheckResult check_reflection_guard(std::size_t instances, std::uint64_t seed) {
  CheckResult c{"reflection_guard", true, ""};
  Rng rng(seed);
  std::size_t proper = 0, would_reflect = 0;
  for (std::size_t k = 0; k < instances; ++k) {
    const std::size_t n = 40;
    const Mat3 r = random_rotation(rng, M_PI);
    const Vec3 t = random_vec(rng, 1.0);
    std::vector<Vec3> x(n), xp(n);
    std::vector<double> w(n, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      xp[i] = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), 1e-3 * rng.normal());
      x[i] = r * xp[i] + t + random_vec(rng, 0.05);
    }
    // Mirror half the targets across an in-plane axis: with flat clouds the
    // unguarded SVD solution then often comes out as a reflection.
    if (k % 2 == 1) {
      const Vec3 nrm = r.col(0);
      Vec3 mu = Vec3::Zero();
      for (const auto& p : x) mu += p / static_cast<double>(n);
      for (auto& p : x) p -= 2.0 * (p - mu).dot(nrm) * nrm;
    }
    const SE3Pose p = solve_weighted_procrustes(x, xp, w);
    const double det = p.rotation().determinant();
    if (std::abs(det - 1.0) < 1e-9 && orthogonality_residual(p.rotation()) < 1e-9) ++proper;

    Vec3 mx = Vec3::Zero(), mxp = Vec3::Zero();
    for (std::size_t i = 0; i < n; ++i) {
      mx += x[i] / static_cast<double>(n);
      mxp += xp[i] / static_cast<double>(n);
    }
    Mat3 cov = Mat3::Zero();
    for (std::size_t i = 0; i < n; ++i) cov += (x[i] - mx) * (xp[i] - mxp).transpose();
    Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) ++would_reflect;
  }
  c.pass = proper == instances;
  c.detail = std::to_string(proper) + "/" + std::to_string(instances) + " proper rotations; " +
             std::to_string(would_reflect) + " instances would reflect without the guard";
  return c;
}

// ---- renderer --------------------------------------------------------------------

namespace {

RenderOutput render_one(const AnalyticScene& scene, const Vec3& dir, std::size_t n, double near, double far) {
  RenderOptions o;
  o.n_samples = n;
  o.near = near;
  o.far = far;
  const Vec3 d = dir.normalized();
  return render_rays(scene.as_field(), Tensor::zeros({1, 3}), Tensor::from({1, 3}, {d.x(), d.y(), d.z()}), o);
}

// Medium filling the whole segment [near, far] along +z.
double medium_error(std::size_t n, double a, double near, double far) {
  AnalyticScene scene;
  Primitive m;
  m.kind = PrimitiveKind::medium;
  m.pose = SE3Pose(Mat3::Identity(), Vec3(0, 0, 0.5 * (near + far)));
  m.extent = Vec3(10, 10, far - near);
  m.amplitude = a;
  scene.add(m);
  const double expected = 1.0 - std::exp(-a * (far - near));
  return std::abs(render_one(scene, Vec3::UnitZ(), n, near, far).opacity[0] - expected);
}

struct PlaneRay {
  Vec3 dir;
  Primitive plane;
};

// Plane facing the origin, tilted up to 30 degrees from the ray.
std::vector<PlaneRay> plane_rays(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PlaneRay> out;
  for (std::size_t i = 0; i < count; ++i) {
    PlaneRay pr;
    pr.dir = Vec3(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 1.0).normalized();
    const Mat3 tilt = random_rotation(rng, 30.0 * M_PI / 180.0);
    // Local +z (into the slab) points away from the camera.
    const Vec3 anchor = pr.dir * rng.uniform(2.0, 4.0);
    pr.plane.kind = PrimitiveKind::plane;
    pr.plane.pose = SE3Pose(tilt, anchor);
    pr.plane.extent = Vec3(5, 5, 1);
    pr.plane.amplitude = 1e6;
    out.push_back(pr);
  }
  return out;
}

}  // namespace

std::vector<CheckResult> renderer_checks() {
  std::vector<CheckResult> out;
  const double near = 1.0, far = 6.0, a = 0.2;  // A*L = 1

  const double e256 = medium_error(256, a, near, far);
  out.push_back({"medium_opacity", e256 <= 1e-3,
                 "|opacity - (1 - exp(-A L))| = " + fmt(e256) + " at n=256 (limit 1e-3)"});

  // Hard surface: shell of half a sample spacing along the ray.
  {
    const std::size_t n = 64;
    const double spacing = (far - near) / static_cast<double>(n);
    double worst = 0.0;
    for (auto& pr : plane_rays(200, 5)) {
      const Vec3 normal = pr.plane.pose.rotation().col(2);
      pr.plane.softness = 0.5 * spacing * std::abs(normal.dot(pr.dir));
      AnalyticScene scene;
      scene.add(pr.plane);
      const auto hit = scene.intersect(Vec3::Zero(), pr.dir);
      if (!hit) continue;
      const double depth = render_one(scene, pr.dir, n, near, far).depth[0];
      worst = std::max(worst, std::abs(depth - hit->t) / spacing);
    }
    out.push_back({"hard_surface_termination", worst <= 0.5,
                   "max |S(r) - t_hit| = " + fmt(worst) + " sample spacings (limit 0.5)"});
  }

  // Convergence when n doubles: medium opacity and a zero-softness surface.
  {
    std::vector<double> med, surf;
    const auto rays = plane_rays(200, 9);
    for (std::size_t n : {32u, 64u, 128u, 256u}) {
      med.push_back(medium_error(n, a, near, far));
      double sum = 0.0;
      for (const auto& pr : rays) {
        AnalyticScene scene;
        scene.add(pr.plane);
        const auto hit = scene.intersect(Vec3::Zero(), pr.dir);
        sum += std::abs(render_one(scene, pr.dir, n, near, far).depth[0] - hit->t);
      }
      surf.push_back(sum / static_cast<double>(rays.size()));
    }
    bool ok = true;
    std::string detail = "error ratio per doubling (limit 0.75): medium";
    for (std::size_t i = 0; i + 1 < med.size(); ++i) {
      ok = ok && med[i + 1] <= 0.75 * med[i];
      detail += " " + fmt(med[i + 1] / med[i]);
    }
    detail += "; surface";
    for (std::size_t i = 0; i + 1 < surf.size(); ++i) {
      ok = ok && surf[i + 1] <= 0.75 * surf[i];
      detail += " " + fmt(surf[i + 1] / surf[i]);
    }
    out.push_back({"convergence", ok, detail});
  }
  return out;
}

// ---- gradients -----------------------------------------------------------------------

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

// Values bounded away from zero, random sign (kinks of relu/abs/clamp).
Tensor signed_tensor(Rng& rng, Shape shape) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.uniform(0.2, 1.5) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  return Tensor::from(std::move(shape), std::move(v));
}

CheckResult grad_result(const std::string& name, const GradCheckResult& r, double tol) {
  return {name, r.ok,
          "max rel error " + fmt(r.max_rel_error) + " over " + std::to_string(r.entries_checked) +
              " entries (limit " + fmt(tol) + ")" +
              (r.ok ? "" : "; input " + std::to_string(r.worst_input) + " entry " + std::to_string(r.worst_entry) +
                               " analytic " + fmt(r.analytic) + " numeric " + fmt(r.numeric))};
}

}  // namespace

std::vector<CheckResult> gradient_checks(bool pipeline) {
  std::vector<CheckResult> out;
  GradCheckOptions opts;
  Rng rng(17);
  auto check = [&](const std::string& name, const GradFn& fn, const std::vector<Tensor>& inputs) {
    out.push_back(grad_result(name, gradcheck(fn, inputs, opts), opts.rel_tol));
  };

  const Tensor a = signed_tensor(rng, {3, 4});
  const Tensor b = signed_tensor(rng, {3, 4});
  const Tensor row = signed_tensor(rng, {4});
  const Tensor pos = random_tensor(rng, {3, 4}, 0.3, 2.0);

  check("add", [](const auto& v) { return add(v[0], v[1]); }, {a, row});
  check("sub", [](const auto& v) { return sub(v[0], v[1]); }, {a, b});
  check("mul", [](const auto& v) { return mul(v[0], v[1]); }, {a, row});
  check("div", [](const auto& v) { return div(v[0], v[1]); }, {a, pos});
  check("neg", [](const auto& v) { return neg(v[0]); }, {a});
  check("exp", [](const auto& v) { return exp(v[0]); }, {a});
  check("log", [](const auto& v) { return log(v[0]); }, {pos});
  check("relu", [](const auto& v) { return relu(v[0]); }, {a});
  check("sigmoid", [](const auto& v) { return sigmoid(v[0]); }, {a});
  check("softplus", [](const auto& v) { return softplus(v[0]); }, {a});
  check("sqrt", [](const auto& v) { return sqrt(v[0]); }, {pos});
  check("square", [](const auto& v) { return square(v[0]); }, {a});
  check("sin", [](const auto& v) { return sin(v[0]); }, {a});
  check("cos", [](const auto& v) { return cos(v[0]); }, {a});
  check("abs", [](const auto& v) { return abs(v[0]); }, {a});
  check("scale", [](const auto& v) { return scale(v[0], -1.7); }, {a});
  check("add_scalar", [](const auto& v) { return add_scalar(v[0], 0.3); }, {a});
  check("clamp_min", [](const auto& v) { return clamp_min(v[0], 0.05); }, {a});
  check("matmul", [](const auto& v) { return matmul(v[0], v[1]); }, {a, signed_tensor(rng, {4, 2})});
  check("transpose", [](const auto& v) { return transpose(v[0]); }, {a});
  check("sum", [](const auto& v) { return sum(v[0], {1}); }, {a});
  check("mean", [](const auto& v) { return mean(v[0], {0}); }, {a});
  check("weighted_sum", [](const auto& v) { return weighted_sum(v[0], v[1], {1}); }, {a, b});
  check("cumsum", [](const auto& v) { return add(cumsum(v[0], 1, true), cumsum(v[0], 0, false)); }, {a});
  check("reshape", [](const auto& v) { return reshape(v[0], {2, 6}); }, {a});
  check("concat", [](const auto& v) { return concat({v[0], v[1]}, 1); }, {a, b});
  check("slice", [](const auto& v) { return slice(v[0], 1, 1, 3); }, {a});
  check("index_select",
        [](const auto& v) {
          const std::vector<std::size_t> rows{2, 0, 2};
          return index_select(v[0], rows);
        },
        {a});
  check("stack", [](const auto& v) { return stack({v[0], v[1]}); }, {a, b});

  {
    const Tensor fmap = random_tensor(rng, {5, 6, 3}, -1.0, 1.0);
    std::vector<double> xy;
    for (int i = 0; i < 7; ++i) {
      // Keep away from integer coordinates where the sampler is not smooth.
      xy.push_back(0.3 + 0.6 * i + 0.11);
      xy.push_back(0.25 + 0.5 * i);
    }
    check("bilinear_sample", [](const auto& v) { return bilinear_sample(v[0], v[1]); },
          {fmap, Tensor::from({7, 2}, xy)});
  }
  check("unfold", [](const auto& v) { return unfold(v[0], 3, 2, 1); }, {random_tensor(rng, {5, 4, 2}, -1, 1)});
  {
    const Tensor m = Tensor::from({3, 3}, {2.0, 0.3, -0.4, 0.1, 1.2, 0.5, -0.3, 0.2, 0.6});
    check("svd3", [](const auto& v) {
      const Svd3 s = svd3(v[0]);
      return concat({reshape(s.u, {9}), s.s, reshape(s.v, {9})}, 0);
    }, {m});
  }
  {
    const std::size_t r = 3, n = 6;
    const Tensor sigma = random_tensor(rng, {r, n}, 0.1, 2.0);
    const Tensor color = random_tensor(rng, {r, n, 3}, 0.0, 1.0);
    const Tensor positions = random_tensor(rng, {r, n, 3}, -1.0, 1.0);
    std::vector<double> tv, dv;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        tv.push_back(1.0 + 0.5 * static_cast<double>(j));
        dv.push_back(0.5);
      }
    const Tensor t = Tensor::from({r, n}, tv), d = Tensor::from({r, n}, dv);
    check("composite", [t, d](const auto& v) {
      const RenderOutput o = composite(v[0], v[1], v[2], t, d);
      return concat({o.color, o.surface, reshape(o.opacity, {3, 1}), reshape(o.depth, {3, 1})}, 1);
    }, {sigma, color, positions});
  }
  {
    // Rotation from the weighted Procrustes solve (sign-invariant in the SVD).
    const Tensor xp = random_tensor(rng, {8, 3}, -1, 1);
    const Tensor x = random_tensor(rng, {8, 3}, -1, 1);
    const Tensor w = random_tensor(rng, {8}, 0.2, 1.0);
    check("procrustes", [](const auto& v) {
      const TensorPose p = solve_weighted_procrustes(v[0], v[1], v[2]);
      return concat({reshape(p.rotation, {9}), reshape(p.translation, {3})}, 0);
    }, {x, xp, w});
  }

  if (pipeline) {
    const auto t0 = Clock::now();
    TrainConfig cfg;
    cfg.field.encoder_channels = 4;
    cfg.field.hidden = 8;
    cfg.field.pe_octaves = 2;
    cfg.psi_hidden = 8;
    cfg.n_samples = 8;
    cfg.photometric_pixels = 16;
    cfg.max_points = 0;
    cfg.window = 3;
    Model model(cfg);
    TrajectorySpec spec;
    spec.frames = 3;
    spec.step = 3.0;
    const auto scene = std::make_shared<AnalyticScene>(demo_scene(0));
    const SyntheticBundle bundle = generate_bundle(scene, spec, Intrinsics::from_fov(8, 8, 60.0));
    const TrainingWindow window = make_window(bundle, 0, 3);
    std::vector<Tensor> leaves;
    for (const auto& p : model.parameters()) leaves.push_back(p.tensor);
    GradCheckOptions po;
    po.rel_tol = 1e-3;
    po.max_entries_per_input = 12;
    const GradCheckResult r =
        gradcheck_leaves([&] { return forward_window(model, window, cfg, 5).total; }, leaves, po);
    CheckResult c = grad_result("end_to_end_loss", r, po.rel_tol);
    c.detail += "; " + fmt(seconds_since(t0)) + " s";
    out.push_back(c);
  }
  return out;
}

// ---- suites ----------------------------------------------------------------------------

const std::vector<std::string>& verify_suite_names() {
  static const std::vector<std::string> names{"gradcheck", "procrustes", "renderer"};
  return names;
}

std::vector<SuiteReport> run_verify(const std::string& suite) {
  if (suite == "all") {
    std::vector<SuiteReport> out;
    for (const auto& n : verify_suite_names()) out.push_back(run_verify(n).front());
    return out;
  }
  SuiteReport r;
  r.suite = suite;
  const auto t0 = Clock::now();
  if (suite == "gradcheck") {
    r.checks = gradient_checks(true);
  } else if (suite == "procrustes") {
    r.checks = {check_procrustes_exact(), check_procrustes_vs_minimizer(), check_reflection_guard()};
  } else if (suite == "renderer") {
    r.checks = renderer_checks();
  } else {
    throw std::invalid_argument("unknown verify suite '" + suite + "' (expected gradcheck, procrustes, renderer or all)");
  }
  r.seconds = seconds_since(t0);
  return {r};
}

}  // namespace sfpose
