#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "sfpose/odometry.hpp"
#include "sfpose/synth.hpp"

using namespace sfpose;

namespace {

SourceFactory oracle(const SyntheticBundle& b) {
  return [&b](const VideoSequence& s, std::size_t i) -> std::unique_ptr<SurfaceSource> {
    return std::make_unique<AnalyticSurface>(b.scene, b.trajectory[i].pose, s.k, s.frames[i]);
  };
}

SyntheticBundle make_bundle(TrajectoryKind kind, std::size_t frames, double step, std::size_t w = 32,
                            std::size_t h = 24) {
  TrajectorySpec spec;
  spec.kind = kind;
  spec.frames = frames;
  spec.step = step;
  spec.seed = 5;
  return generate_bundle(std::make_shared<const AnalyticScene>(demo_scene(0)), spec,
                         Intrinsics::from_fov(w, h, 60.0));
}

struct Oracle {
  const SyntheticBundle& b;
  std::vector<std::vector<double>> weights = b.inlier_weights();
  OdometryOptions opts() const {
    OdometryOptions o;
    o.pixel_weights = &weights;
    return o;
  }
};

double gap(const SE3Pose& a, const SE3Pose& b) {
  return std::max(rotation_distance(a.rotation(), b.rotation()), (a.translation() - b.translation()).norm());
}

double max_gap(const Trajectory& a, const Trajectory& b) {
  EXPECT_EQ(a.size(), b.size());
  double g = 0.0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) g = std::max(g, gap(a[i].pose, b[i].pose));
  return g;
}

}  // namespace

TEST(Window, StaticCameraGivesIdentities) {
  const SyntheticBundle b = make_bundle(TrajectoryKind::static_camera, 6, 0.0);
  Oracle o{b};
  const Trajectory t = estimate_window(b.sequence(), oracle(b), o.opts());
  ASSERT_EQ(t.size(), 6u);
  for (const auto& p : t.poses()) EXPECT_LT(gap(p.pose, SE3Pose::identity()), 1e-12);
}

TEST(Window, OrbitAteBelowOneMillimetre) {
  const SyntheticBundle b = make_bundle(TrajectoryKind::orbit, 15, 2.0);
  Oracle o{b};
  const Trajectory t = estimate_window(b.sequence(), oracle(b), o.opts());
  EXPECT_LT(gap(t[0].pose, SE3Pose::identity()), 1e-15);
  EXPECT_LT(align_trajectories(t, b.trajectory, true).ate, 1e-3);
}

TEST(Window, RecoversMetricTrajectoryWithoutAlignment) {
  // Oracle geometry is metric, so even rigid alignment is near exact.
  const SyntheticBundle b = make_bundle(TrajectoryKind::dolly, 10, 0.05);
  Oracle o{b};
  const Trajectory t = estimate_window(b.sequence(), oracle(b), o.opts());
  EXPECT_LT(max_gap(t, b.trajectory.normalized()), 1e-6);
}

TEST(Window, ReversedSequenceInvertsRelativePoses) {
  const SyntheticBundle fwd = make_bundle(TrajectoryKind::orbit, 8, 2.5);
  std::vector<TimedPose> rev;
  for (std::size_t i = 0; i < fwd.trajectory.size(); ++i)
    rev.push_back({static_cast<double>(i), fwd.trajectory[fwd.trajectory.size() - 1 - i].pose});
  // Regenerating along the reversed cameras yields the inverted flows.
  const SyntheticBundle bwd = generate_bundle(fwd.scene, Trajectory(rev), fwd.k);
  Oracle of{fwd}, ob{bwd};
  const auto a = relative_poses(fwd.sequence(), 0, 7, oracle(fwd), of.opts());
  const auto r = relative_poses(bwd.sequence(), 0, 7, oracle(bwd), ob.opts());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LT(gap(r[a.size() - 1 - i], a[i].inverse()), 1e-6) << i;
}

TEST(Window, DegenerateErrorNamesFramePair) {
  SyntheticBundle b = make_bundle(TrajectoryKind::orbit, 4, 2.0, 16, 12);
  VideoSequence seq = b.sequence();
  seq.flows[1].valid.assign(seq.flows[1].size(), 0);
  try {
    estimate_window(seq, oracle(b));
    FAIL() << "expected DegenerateGeometryError";
  } catch (const DegenerateGeometryError& e) {
    EXPECT_NE(std::string(e.what()).find("frames 1->2"), std::string::npos) << e.what();
  }
}

TEST(Long, WindowLargerThanSequenceIsSingleWindow) {
  const SyntheticBundle b = make_bundle(TrajectoryKind::orbit, 10, 2.0);
  Oracle o{b};
  const auto seq = b.sequence();
  const Trajectory one = estimate_window(seq, oracle(b), o.opts());
  for (std::size_t w : {10u, 11u, 50u}) EXPECT_EQ(max_gap(estimate_long(seq, w, oracle(b), o.opts()), one), 0.0);
}

TEST(Long, SplittingDoesNotChangeTrajectory) {
  const SyntheticBundle b = make_bundle(TrajectoryKind::orbit, 30, 1.5, 24, 18);
  Oracle o{b};
  const auto seq = b.sequence();
  const Trajectory one = estimate_window(seq, oracle(b), o.opts());
  for (std::size_t w : {15u, 7u, 2u}) EXPECT_LT(max_gap(estimate_long(seq, w, oracle(b), o.opts()), one), 1e-9) << w;
}

TEST(Long, TrailingSingleFrameWindow) {
  const SyntheticBundle b = make_bundle(TrajectoryKind::orbit, 11, 2.0, 24, 18);
  Oracle o{b};
  const auto seq = b.sequence();
  const Trajectory t = estimate_long(seq, 5, oracle(b), o.opts());
  ASSERT_EQ(t.size(), 11u);
  EXPECT_LT(max_gap(t, estimate_window(seq, oracle(b), o.opts())), 1e-9);
}

TEST(Long, LongOrbitDriftCharacterization) {
  const SyntheticBundle b = make_bundle(TrajectoryKind::orbit, 200, 0.45, 16, 12);
  Oracle o{b};
  const auto seq = b.sequence();
  double previous = -1.0;
  for (std::size_t w : {200u, 50u, 15u, 5u}) {
    const Trajectory t = estimate_long(seq, w, oracle(b), o.opts());
    ASSERT_EQ(t.size(), 200u);
    const double ate = align_trajectories(t, b.trajectory, true).ate;
    RecordProperty("ate_window_" + std::to_string(w), std::to_string(ate));
    EXPECT_LT(ate, 1e-3);
    if (previous >= 0) EXPECT_NEAR(ate, previous, 1e-9);
    previous = ate;
  }
}

TEST(Compose, GroupingDoesNotMatter) {
  const SyntheticBundle b = make_bundle(TrajectoryKind::random_smooth, 12, 2.0, 24, 18);
  Oracle o{b};
  const auto rel = relative_poses(b.sequence(), 0, 11, oracle(b), o.opts());
  // Left fold versus a balanced tree of products, both for the terminal
  // camera-to-first-frame pose.
  SE3Pose left;
  for (const auto& r : rel) left = left * r.inverse();
  std::function<SE3Pose(std::size_t, std::size_t)> tree = [&](std::size_t lo, std::size_t hi) {
    if (hi - lo == 1) return rel[lo].inverse();
    const std::size_t mid = (lo + hi) / 2;
    return tree(lo, mid) * tree(mid, hi);
  };
  EXPECT_LT(gap(left, tree(0, rel.size())), 1e-9);
  std::vector<double> ts;
  for (std::size_t i = 0; i <= rel.size(); ++i) ts.push_back(static_cast<double>(i));
  const Trajectory t = compose_trajectory(rel, ts);
  EXPECT_LT(gap(t[t.size() - 1].pose, left), 1e-12);
}

TEST(Sequence, ValidationCatchesFlowCount) {
  const SyntheticBundle b = make_bundle(TrajectoryKind::orbit, 4, 2.0, 16, 12);
  VideoSequence seq = b.sequence();
  seq.flows.pop_back();
  EXPECT_ANY_THROW(seq.validate());
}
