#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "sfpose/random.hpp"
#include "sfpose/synth.hpp"

using namespace sfpose;
namespace fs = std::filesystem;

namespace {

std::shared_ptr<const AnalyticScene> demo(std::size_t v = 0) {
  return std::make_shared<const AnalyticScene>(demo_scene(v));
}

SyntheticBundle orbit(std::size_t frames, double step, std::size_t w = 24, std::size_t h = 18) {
  TrajectorySpec spec;
  spec.frames = frames;
  spec.step = step;
  return generate_bundle(demo(), spec, Intrinsics::from_fov(w, h, 60.0));
}

// Fronto-parallel textured plane at world z = d.
std::shared_ptr<const AnalyticScene> plane_at(double d) {
  Primitive p;
  p.kind = PrimitiveKind::plane;
  p.pose = SE3Pose(Mat3::Identity(), Vec3(0, 0, d));
  p.extent = Vec3(50, 50, 1.0);
  p.amplitude = 40.0;
  p.albedo.kind = Albedo::Kind::noise;
  return std::make_shared<const AnalyticScene>(AnalyticScene({p}));
}

Vec3 pixel_point(const Intrinsics& k, std::size_t x, std::size_t y, double zdepth) {
  const Ray r = pixel_to_ray(k, Vec2(static_cast<double>(x), static_cast<double>(y)));
  return r.direction * (zdepth / r.direction.z());
}

}  // namespace

TEST(Synth, StaticCameraHasZeroFlowAndNoOcclusion) {
  TrajectorySpec spec;
  spec.kind = TrajectoryKind::static_camera;
  spec.frames = 4;
  const SyntheticBundle b = generate_bundle(demo(), spec, Intrinsics::from_fov(20, 16, 60.0));
  ASSERT_EQ(b.flows.size(), 3u);
  for (std::size_t i = 0; i < b.flows.size(); ++i) {
    for (std::size_t p = 0; p < b.flows[i].size(); ++p) {
      if (!b.flows[i].valid[p]) continue;
      EXPECT_LT(std::abs(b.flows[i].uv[2 * p]), 1e-9);
      EXPECT_LT(std::abs(b.flows[i].uv[2 * p + 1]), 1e-9);
      EXPECT_EQ(b.occlusion[i][p], 0);
    }
  }
}

TEST(Synth, DollyTowardPlaneMatchesClosedForm) {
  const double d = 5.0, dz = 0.2;
  std::vector<TimedPose> cams;
  for (int i = 0; i < 3; ++i) cams.push_back({double(i), SE3Pose(Mat3::Identity(), Vec3(0, 0, dz * i))});
  const Intrinsics k = Intrinsics::from_fov(21, 15, 60.0);
  const SyntheticBundle b = generate_bundle(plane_at(d), Trajectory(cams), k);
  for (std::size_t t = 1; t < 3; ++t) {
    // A pixel at z-depth z in frame t sits at z + dz in frame t-1.
    const double z = d - dz * static_cast<double>(t);
    for (std::size_t y = 0; y < k.height; ++y)
      for (std::size_t x = 0; x < k.width; ++x) {
        const std::size_t i = y * k.width + x;
        ASSERT_TRUE(b.flows[t - 1].valid[i]);
        EXPECT_NEAR(b.depth[t][i], z, 1e-9);
        const Vec2 f = b.flows[t - 1].at(x, y);
        EXPECT_NEAR(f.x(), -(double(x) - k.cx) * dz / (z + dz), 1e-6);
        EXPECT_NEAR(f.y(), -(double(y) - k.cy) * dz / (z + dz), 1e-6);
      }
  }
}

TEST(Synth, SphereOrbitNearestDepth) {
  const double r = 0.7, radius = 3.0;
  Primitive s;
  s.kind = PrimitiveKind::sphere;
  s.extent = Vec3(r, 0, 0);
  s.amplitude = 30.0;
  TrajectorySpec spec;
  spec.frames = 5;
  spec.radius = radius;
  spec.height = 0.0;
  spec.step = 7.0;
  const SyntheticBundle b = generate_bundle(std::make_shared<const AnalyticScene>(AnalyticScene({s})), spec,
                                            Intrinsics::from_fov(31, 23, 60.0));
  for (const auto& depth : b.depth) {
    double m = 1e30;
    for (double z : depth)
      if (z > 0) m = std::min(m, z);
    EXPECT_NEAR(m, radius - r, 1e-9);
  }
}

TEST(Synth, FlowReprojectsSurfacePoints) {
  const SyntheticBundle b = orbit(4, 3.0);
  const Intrinsics& k = b.k;
  std::size_t checked = 0;
  for (std::size_t t = 1; t < b.frames.size(); ++t) {
    const SE3Pose& cam = b.trajectory[t].pose;
    const SE3Pose prev_inv = b.trajectory[t - 1].pose.inverse();
    for (std::size_t y = 0; y < k.height; ++y)
      for (std::size_t x = 0; x < k.width; ++x) {
        const std::size_t i = y * k.width + x;
        if (!b.flows[t - 1].valid[i]) continue;
        // Independent world point from a fresh raycast.
        const Ray ray = pixel_to_ray(k, Vec2(double(x), double(y)));
        const auto hit = b.scene->intersect(cam.translation(), cam.rotation() * ray.direction);
        ASSERT_TRUE(hit.has_value());
        const Vec2 expect = project(k, prev_inv.apply(hit->point));
        const Vec2 got = Vec2(double(x), double(y)) + b.flows[t - 1].at(x, y);
        ASSERT_LT((got - expect).norm(), 1e-9);
        ++checked;
      }
  }
  EXPECT_GT(checked, 100u);
}

TEST(Synth, VisiblePixelsShowSameColorInPreviousFrame) {
  const SyntheticBundle b = orbit(4, 3.0);
  const Intrinsics& k = b.k;
  std::size_t visible = 0;
  for (std::size_t t = 1; t < b.frames.size(); ++t) {
    const SE3Pose& prev = b.trajectory[t - 1].pose;
    for (std::size_t y = 0; y < k.height; ++y)
      for (std::size_t x = 0; x < k.width; ++x) {
        const std::size_t i = y * k.width + x;
        if (!b.flows[t - 1].valid[i] || b.occlusion[t - 1][i]) continue;
        const Vec2 pp = Vec2(double(x), double(y)) + b.flows[t - 1].at(x, y);
        const Ray ray = pixel_to_ray(k, pp);
        const auto hit = b.scene->intersect(prev.translation(), prev.rotation() * ray.direction);
        ASSERT_TRUE(hit.has_value());
        const Vec3 seen = b.scene->surface_color(*hit);
        for (int c = 0; c < 3; ++c) ASSERT_NEAR(seen(c), b.frames[t][i * 3 + c], 1e-3);
        ++visible;
      }
  }
  EXPECT_GT(visible, 100u);
}

TEST(Synth, GroundTruthFlowGivesExactRelativePose) {
  const SyntheticBundle b = orbit(3, 4.0);
  const Intrinsics& k = b.k;
  for (std::size_t t = 1; t < b.frames.size(); ++t) {
    const SE3Pose prev = b.trajectory[t - 1].pose;
    std::vector<Vec3> x, xp;
    std::vector<double> w;
    for (std::size_t y = 0; y < k.height; ++y)
      for (std::size_t px = 0; px < k.width; ++px) {
        const std::size_t i = y * k.width + px;
        if (!b.flows[t - 1].valid[i] || b.occlusion[t - 1][i]) continue;
        const Vec2 pp = Vec2(double(px), double(y)) + b.flows[t - 1].at(px, y);
        const Ray ray = pixel_to_ray(k, pp);
        const auto hit = b.scene->intersect(prev.translation(), prev.rotation() * ray.direction);
        ASSERT_TRUE(hit.has_value());
        x.push_back(pixel_point(k, px, y, b.depth[t][i]));
        xp.push_back(prev.inverse().apply(hit->point));
        w.push_back(1.0);
      }
    const SE3Pose got = solve_weighted_procrustes(x, xp, w);
    const SE3Pose expect = b.trajectory[t].pose.inverse() * prev;
    EXPECT_LT(rotation_distance(got.rotation(), expect.rotation()), 1e-6);
    EXPECT_LT((got.translation() - expect.translation()).norm(), 1e-6);
  }
}

TEST(Corrupt, ZeroFractionLeavesFlowUnchanged) {
  const SyntheticBundle b = orbit(3, 2.0);
  const SyntheticBundle c = corrupt_flow(b, 0.0, 5.0, 1);
  for (std::size_t i = 0; i < b.flows.size(); ++i) {
    EXPECT_EQ(c.flows[i].uv, b.flows[i].uv);
    for (auto m : c.outliers[i]) EXPECT_EQ(m, 0);
  }
}

TEST(Corrupt, ZeroMagnitudeLeavesFlowUnchanged) {
  const SyntheticBundle b = orbit(3, 2.0);
  const SyntheticBundle c = corrupt_flow(b, 1.0, 0.0, 1);
  for (std::size_t i = 0; i < b.flows.size(); ++i) EXPECT_EQ(c.flows[i].uv, b.flows[i].uv);
}

TEST(Corrupt, FlagsExactlyTheRequestedCount) {
  const SyntheticBundle b = orbit(4, 2.0, 32, 24);
  const double mag = 2.0;
  const SyntheticBundle c = corrupt_flow(b, 0.2, mag, 7);
  for (std::size_t i = 0; i < b.flows.size(); ++i) {
    std::size_t valid = 0, flagged = 0;
    for (std::size_t p = 0; p < b.flows[i].size(); ++p) {
      if (b.flows[i].valid[p]) ++valid;
      if (c.outliers[i][p]) {
        ++flagged;
        ASSERT_TRUE(b.flows[i].valid[p]);
        ASSERT_LE(std::abs(c.flows[i].uv[2 * p] - b.flows[i].uv[2 * p]), mag);
        ASSERT_LE(std::abs(c.flows[i].uv[2 * p + 1] - b.flows[i].uv[2 * p + 1]), mag);
      } else {
        ASSERT_EQ(c.flows[i].uv[2 * p], b.flows[i].uv[2 * p]);
        ASSERT_EQ(c.flows[i].uv[2 * p + 1], b.flows[i].uv[2 * p + 1]);
      }
    }
    EXPECT_EQ(flagged, static_cast<std::size_t>(std::floor(0.2 * double(valid))));
  }
  // Inlier weights drop the flagged pixels.
  const auto w = c.inlier_weights();
  for (std::size_t i = 0; i < w.size(); ++i)
    for (std::size_t p = 0; p < w[i].size(); ++p)
      if (c.outliers[i][p]) EXPECT_EQ(w[i][p], 0.0);
}

TEST(Corrupt, RejectsBadArguments) {
  const SyntheticBundle b = orbit(2, 2.0, 8, 6);
  EXPECT_ANY_THROW(corrupt_flow(b, 1.5, 1.0, 0));
  EXPECT_ANY_THROW(corrupt_flow(b, 0.5, -1.0, 0));
}

TEST(Synth, SameSpecSameBundle) {
  TrajectorySpec spec;
  spec.kind = TrajectoryKind::random_smooth;
  spec.frames = 5;
  spec.jitter = 0.05;
  spec.seed = 4;
  const Intrinsics k = Intrinsics::from_fov(16, 12, 60.0);
  const SyntheticBundle a = generate_bundle(demo(1), spec, k), b = generate_bundle(demo(1), spec, k);
  for (std::size_t i = 0; i < a.frames.size(); ++i) {
    EXPECT_TRUE(std::ranges::equal(a.frames[i].data(), b.frames[i].data()));
    EXPECT_EQ(a.depth[i], b.depth[i]);
  }
  for (std::size_t i = 0; i < a.flows.size(); ++i) EXPECT_EQ(a.flows[i].uv, b.flows[i].uv);
}

TEST(Synth, CameraInsideSolidThrows) {
  std::vector<TimedPose> cams = {{0.0, SE3Pose(Mat3::Identity(), Vec3(-0.5, 0.1, 0.3))}};  // ball center
  EXPECT_THROW(generate_bundle(demo(), Trajectory(cams), Intrinsics::from_fov(8, 6, 60.0)), std::invalid_argument);
}

TEST(Synth, RotationStepBoundIsEnforced) {
  TrajectorySpec spec;
  spec.frames = 3;
  spec.step = 20.0;
  EXPECT_THROW(generate_trajectory(spec), std::invalid_argument);
  spec.max_rotation_step_deg = 25.0;
  EXPECT_NO_THROW(generate_trajectory(spec));
}

TEST(Synth, UnknownKindNamesChoices) {
  try {
    trajectory_kind_from_string("spiral");
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("orbit"), std::string::npos);
  }
}

TEST(Bundle, SaveLoadRoundTrip) {
  const fs::path dir = fs::temp_directory_path() / "sfpose_bundle_roundtrip";
  fs::remove_all(dir);
  const SyntheticBundle b = corrupt_flow(orbit(3, 2.0, 16, 12), 0.2, 1.0, 3);
  save_bundle(b, dir, {{"test", true}});
  const SyntheticBundle r = load_bundle(dir);
  ASSERT_EQ(r.frames.size(), b.frames.size());
  ASSERT_EQ(r.flows.size(), b.flows.size());
  EXPECT_EQ(r.k.fx, b.k.fx);
  EXPECT_EQ(r.k.width, b.k.width);
  for (std::size_t i = 0; i < b.frames.size(); ++i) {
    for (std::size_t p = 0; p < b.frames[i].numel(); ++p) ASSERT_NEAR(r.frames[i][p], b.frames[i][p], 0.5 / 255 + 1e-12);
    for (std::size_t p = 0; p < b.depth[i].size(); ++p) ASSERT_NEAR(r.depth[i][p], b.depth[i][p], 1e-6 * b.depth[i][p]);
    EXPECT_LT(rotation_distance(r.trajectory[i].pose.rotation(), b.trajectory[i].pose.rotation()), 1e-6);
    EXPECT_LT((r.trajectory[i].pose.translation() - b.trajectory[i].pose.translation()).norm(), 1e-6);
  }
  for (std::size_t i = 0; i < b.flows.size(); ++i) {
    EXPECT_EQ(r.occlusion[i], b.occlusion[i]);
    EXPECT_EQ(r.outliers[i], b.outliers[i]);
    for (std::size_t p = 0; p < b.flows[i].size(); ++p) {
      ASSERT_EQ(r.flows[i].is_valid(p % 16, p / 16), b.flows[i].valid[p] != 0);
      if (!b.flows[i].valid[p]) continue;
      ASSERT_NEAR(r.flows[i].uv[2 * p], b.flows[i].uv[2 * p], 1e-5);
      ASSERT_NEAR(r.flows[i].uv[2 * p + 1], b.flows[i].uv[2 * p + 1], 1e-5);
    }
  }
  ASSERT_TRUE(r.scene);
  // Rotations pass through axis-angle text, so compare the fields themselves.
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const Vec3 x(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-1, 3));
    ASSERT_NEAR(r.scene->query(x).sigma, b.scene->query(x).sigma, 1e-9);
  }
  fs::remove_all(dir);
}
