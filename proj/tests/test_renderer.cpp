#include <gtest/gtest.h>

#include <cmath>

#include "sfpose/gradcheck.hpp"
#include "sfpose/random.hpp"
#include "sfpose/renderer.hpp"
#include "sfpose/verify.hpp"

using namespace sfpose;

namespace {

Primitive medium_box(double z0, double z1, double amp) {
  Primitive p;
  p.kind = PrimitiveKind::medium;
  p.pose = SE3Pose(Mat3::Identity(), Vec3(0, 0, 0.5 * (z0 + z1)));
  p.extent = Vec3(10, 10, 0.5 * (z1 - z0));
  p.amplitude = amp;
  return p;
}

// Slab whose textured face sits at distance d along the normal n from the origin.
Primitive wall(const Vec3& normal, double d, double amp, double softness = 0.0) {
  Primitive p;
  p.softness = softness;
  p.kind = PrimitiveKind::plane;
  // Local +z maps to the world normal (pointing away from the camera).
  const Vec3 z = normal.normalized();
  const Vec3 x = (std::abs(z.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY()).cross(z).normalized();
  Mat3 r;
  r.col(0) = x;
  r.col(1) = z.cross(x);
  r.col(2) = z;
  p.pose = SE3Pose(r, d * z);
  p.extent = Vec3(50, 50, 1.0);
  p.amplitude = amp;
  return p;
}

RenderOutput render_one(const AnalyticScene& scene, const Ray& ray, std::size_t n) {
  const RaySamples s = sample_ray(ray, n);
  return composite(s, scene.query(s.positions));
}

double medium_error(std::size_t n, double amp, double near, double far) {
  const AnalyticScene scene({medium_box(near, far, amp)});
  Ray ray;
  ray.near = near;
  ray.far = far;
  const double opacity = render_one(scene, ray, n).opacity.item();
  return std::abs(opacity - (1.0 - std::exp(-amp * (far - near))));
}

}  // namespace

TEST(SampleRay, TwoBinCenters) {
  Ray r;
  r.near = 0.0;
  r.far = 1.0;
  const RaySamples s = sample_ray(r, 2);
  ASSERT_EQ(s.t.size(), 2u);
  EXPECT_EQ(s.t[0], 0.25);
  EXPECT_EQ(s.t[1], 0.75);
  EXPECT_EQ(s.deltas[0], 0.5);
  EXPECT_EQ(s.deltas[1], 0.25);
}

TEST(SampleRay, SameSeedSameSamples) {
  Ray r;
  r.near = 0.5;
  r.far = 4.0;
  const RaySamples a = sample_ray(r, 32, true, 9), b = sample_ray(r, 32, true, 9);
  EXPECT_EQ(a.t, b.t);
}

TEST(SampleRay, StratifiedStaysInsideBins) {
  Ray r;
  r.near = 1.0;
  r.far = 3.0;
  const std::size_t n = 16;
  const double bin = (r.far - r.near) / n;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const RaySamples s = sample_ray(r, n, true, seed);
    for (std::size_t i = 0; i < n; ++i) {
      ASSERT_GE(s.t[i], r.near + bin * i);
      ASSERT_LE(s.t[i], r.near + bin * (i + 1));
      ASSERT_GT(s.deltas[i], 0.0);
    }
  }
}

TEST(SampleRay, TooFewSamplesThrows) {
  Ray r;
  EXPECT_ANY_THROW(sample_ray(r, 1));
}

TEST(Composite, ZeroDensityIsBlackAtOrigin) {
  Ray r;
  r.origin = Vec3(1, 2, 3);
  r.near = 0.1;
  r.far = 5.0;
  const RenderOutput out = render_one(AnalyticScene(), r, 16);
  EXPECT_EQ(out.opacity.item(), 0.0);
  for (double v : out.color.data()) EXPECT_EQ(v, 0.0);
  for (double v : out.surface.data()) EXPECT_EQ(v, 0.0);
}

TEST(Composite, ConstantMediumTransmittance) {
  EXPECT_LT(medium_error(256, 0.2, 1.0, 6.0), 1e-3);
  EXPECT_LT(medium_error(256, 1.5, 0.5, 2.5), 1e-3);
}

TEST(Composite, MediumErrorHalvesWhenSamplesDouble) {
  for (std::size_t n = 32; n <= 128; n *= 2) {
    const double ratio = medium_error(2 * n, 0.2, 1.0, 6.0) / medium_error(n, 0.2, 1.0, 6.0);
    EXPECT_GT(ratio, 0.5 / 1.5) << n;
    EXPECT_LT(ratio, 0.5 * 1.5) << n;
  }
}

TEST(Composite, HardPlaneTerminatesWithinHalfSpacing) {
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const double d = rng.uniform(2.0, 4.0);
    Ray ray;
    ray.near = 1.0;
    ray.far = 6.0;
    const std::size_t n = 64;
    const double spacing = (ray.far - ray.near) / n;
    // A hard face is only seen by the first sample behind it; a shell of
    // half a spacing centers the termination on the face.
    const AnalyticScene scene({wall(Vec3::UnitZ(), d, 1e6, 0.5 * spacing)});
    const RenderOutput out = render_one(scene, ray, n);
    EXPECT_GT(out.opacity.item(), 0.999);
    EXPECT_LE(std::abs(out.surface[2] - d), 0.5 * spacing + 1e-12);
  }
}

TEST(Composite, WeightsNeverExceedOne) {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = 24;
    std::vector<double> sigma(n), color(3 * n), pos(3 * n, 0.0), t(n), deltas(n);
    for (std::size_t j = 0; j < n; ++j) {
      sigma[j] = std::exp(rng.uniform(-5, 5));
      t[j] = 0.1 * j;
      deltas[j] = 0.1;
    }
    for (auto& c : color) c = rng.uniform();
    const RenderOutput out = composite(Tensor::from({1, n}, sigma), Tensor::from({1, n, 3}, color),
                                       Tensor::from({1, n, 3}, pos), Tensor::from({1, n}, t), Tensor::from({1, n}, deltas));
    double total = 0.0;
    for (double w : out.weights.data()) {
      ASSERT_GE(w, 0.0);
      ASSERT_LE(w, 1.0);
      total += w;
    }
    ASSERT_LE(total, 1.0 + 1e-12);
    ASSERT_NEAR(out.opacity.item(), total, 1e-12);
  }
}

TEST(Composite, LengthMismatchThrows) {
  Ray r;
  r.far = 2.0;
  const RaySamples s = sample_ray(r, 8);
  EXPECT_ANY_THROW(composite(s, std::vector<RadianceSample>(7)));
}

TEST(Composite, SurfaceIndependentOfFarBeyondSurface) {
  // Same spacing, far plane pushed out by whole bins: samples in front of
  // the surface coincide, so S(r) may only move by the transmitted residue.
  const AnalyticScene scene({wall(Vec3::UnitZ(), 3.1, 1e6)});
  Ray a;
  a.near = 1.0;
  a.far = 7.0;
  Ray b = a;
  b.far = 10.0;
  const RenderOutput ra = render_one(scene, a, 64), rb = render_one(scene, b, 96);
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(ra.surface[c], rb.surface[c], 1e-6);
}

TEST(Composite, GradientsWrtSigmaColorPositions) {
  Rng rng(3);
  const std::size_t r = 2, n = 6;
  auto rnd = [&](Shape s, double lo, double hi) {
    std::vector<double> v(numel_of(s));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::from(s, v);
  };
  const Tensor t = rnd({r, n}, 1.0, 2.0), d = rnd({r, n}, 0.1, 0.3);
  auto fn = [&](const std::vector<Tensor>& in) {
    const RenderOutput o = composite(in[0], in[1], in[2], t, d);
    return concat({reshape(o.color, {r * 3}), reshape(o.surface, {r * 3}), o.opacity, o.depth}, 0);
  };
  auto res = gradcheck(fn, {rnd({r, n}, 0.0, 3.0), rnd({r, n, 3}, 0.0, 1.0), rnd({r, n, 3}, -1.0, 1.0)});
  EXPECT_TRUE(res.ok) << res.max_rel_error;
}

TEST(RenderImage, TexturedPlaneMatchesAlbedo) {
  Primitive p = wall(Vec3::UnitZ(), 3.0, 1e4);
  p.albedo.kind = Albedo::Kind::noise;
  p.albedo.color_a = Vec3(0.9, 0.6, 0.2);
  p.albedo.color_b = Vec3(0.1, 0.3, 0.7);
  p.albedo.scale = 0.5;
  const AnalyticScene scene({p});
  const Intrinsics k = Intrinsics::from_fov(32, 24, 60.0);
  RenderOptions opts;
  opts.n_samples = 128;
  opts.near = 1.0;
  opts.far = 6.0;
  const ImageRender img = render_image(scene.as_field(), TensorPose::identity(), k, opts);
  double mae = 0.0;
  std::size_t count = 0;
  for (std::size_t y = 0; y < k.height; ++y)
    for (std::size_t x = 0; x < k.width; ++x) {
      const Ray ray = pixel_to_ray(k, Vec2(x, y));
      const auto hit = scene.intersect(ray.origin, ray.direction);
      ASSERT_TRUE(hit.has_value());
      const Vec3 expect = scene.surface_color(*hit);
      for (int c = 0; c < 3; ++c) {
        mae += std::abs(img.color[(y * k.width + x) * 3 + c] - expect(c));
        ++count;
      }
    }
  EXPECT_LT(mae / count, 2e-2);
}

TEST(RenderImage, EmptySceneHasZeroOpacity) {
  const Intrinsics k = Intrinsics::from_fov(8, 6, 60.0);
  const ImageRender img = render_image(AnalyticScene().as_field(), TensorPose::identity(), k, {});
  for (double v : img.opacity.data()) EXPECT_EQ(v, 0.0);
}

TEST(RenderImage, GradcheckMeanColorWrtDecoderWeight) {
  FieldConfig fc;
  fc.encoder_channels = 4;
  fc.hidden = 8;
  fc.pe_octaves = 2;
  ConditionedField field(fc);
  const Intrinsics k = Intrinsics::from_fov(4, 4, 60.0);
  Rng rng(4);
  std::vector<double> px(4 * 4 * 3);
  for (auto& v : px) v = rng.uniform();
  const Tensor features = field.encode(Tensor::from({4, 4, 3}, px)).detach();
  ParameterList params;
  field.collect("field", params);
  std::vector<Tensor> head;
  for (auto& p : params)
    if (p.name.find("head") != std::string::npos && p.name.find("weight") != std::string::npos) head.push_back(p.tensor);
  ASSERT_FALSE(head.empty());
  RenderOptions opts;
  opts.n_samples = 8;
  opts.near = 1.0;
  opts.far = 4.0;
  GradCheckOptions gopts;
  gopts.max_entries_per_input = 8;
  auto r = gradcheck_leaves(
      [&] {
        const ImageRender img = render_image(field.bind({{features, TensorPose::identity()}}, k),
                                             TensorPose::identity(), k, opts);
        return mean(img.color);
      },
      head, gopts);
  EXPECT_TRUE(r.ok) << r.max_rel_error;
}

TEST(RendererSuite, AllChecksPass) {
  for (const auto& c : renderer_checks()) EXPECT_TRUE(c.pass) << c.name << ": " << c.detail;
}
