#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <limits>

#include "sfpose/gradcheck.hpp"
#include "sfpose/io_formats.hpp"
#include "sfpose/losses.hpp"
#include "sfpose/training.hpp"

using namespace sfpose;
namespace fs = std::filesystem;

namespace {

SyntheticBundle orbit(std::size_t frames, std::size_t w, std::size_t h, double step = 3.0) {
  TrajectorySpec spec;
  spec.frames = frames;
  spec.step = step;
  return generate_bundle(std::make_shared<const AnalyticScene>(demo_scene(0)), spec, Intrinsics::from_fov(w, h, 60.0));
}

std::vector<TensorPose> gt_poses(const SyntheticBundle& b) {
  const Trajectory n = b.trajectory.normalized();
  std::vector<TensorPose> out;
  for (const auto& p : n.poses()) out.push_back(TensorPose::constant(p.pose));
  return out;
}

// Exact surface maps from the bundle's z-depth.
std::vector<SurfaceMap> exact_surfaces(const SyntheticBundle& b) {
  std::vector<SurfaceMap> out;
  const Intrinsics& k = b.k;
  for (const auto& depth : b.depth) {
    std::vector<double> pts(k.width * k.height * 3, 0.0), op(k.width * k.height, 0.0);
    for (std::size_t y = 0; y < k.height; ++y)
      for (std::size_t x = 0; x < k.width; ++x) {
        const std::size_t i = y * k.width + x;
        if (depth[i] <= 0) continue;
        const Ray r = pixel_to_ray(k, Vec2(double(x), double(y)));
        const Vec3 p = r.direction * (depth[i] / r.direction.z());
        for (int c = 0; c < 3; ++c) pts[3 * i + c] = p(c);
        op[i] = 1.0;
      }
    out.push_back({Tensor::from({k.height, k.width, 3}, pts), Tensor::from({k.height, k.width}, op)});
  }
  return out;
}

// Independent evaluation of the pose-induced flow loss in plain doubles.
double pose_loss_oracle(const SyntheticBundle& b, const std::vector<SE3Pose>& poses) {
  const Intrinsics& k = b.k;
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t t = 0; t + 1 < poses.size(); ++t) {
    const SE3Pose rel = poses[t].inverse() * poses[t + 1];
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t y = 0; y < k.height; ++y)
      for (std::size_t x = 0; x < k.width; ++x) {
        const std::size_t i = y * k.width + x;
        if (!b.flows[t].is_valid(x, y) || b.depth[t + 1][i] <= 0) continue;
        const Ray r = pixel_to_ray(k, Vec2(double(x), double(y)));
        const Vec3 q = rel.apply(r.direction * (b.depth[t + 1][i] / r.direction.z()));
        if (q.z() <= 1e-6) continue;
        const Vec2 p = project(k, q);
        if (p.x() < 0 || p.y() < 0 || p.x() > k.width - 1.0 || p.y() > k.height - 1.0) continue;
        s += (b.flows[t].at(x, y) - (p - Vec2(double(x), double(y)))).squaredNorm();
        ++n;
      }
    if (n) {
      total += s / double(n);
      ++pairs;
    }
  }
  return pairs ? total / double(pairs) : 0.0;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.field.encoder_channels = 4;
  c.field.hidden = 8;
  c.field.pe_octaves = 2;
  c.psi_hidden = 8;
  c.window = 3;
  c.n_samples = 8;
  c.photometric_pixels = 16;
  c.near = 1.0;
  c.far = 8.0;
  return c;
}

std::vector<std::vector<double>> snapshot(const Model& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

}  // namespace

TEST(Photometric, OracleFieldAtTruePosesIsNearZero) {
  const SyntheticBundle b = orbit(3, 16, 12);
  std::vector<SE3Pose> cams;
  for (const auto& p : b.trajectory.poses()) cams.push_back(p.pose);
  AnalyticProvider provider(b.scene, cams);
  PhotometricOptions opts;
  opts.render.n_samples = 512;
  opts.render.near = 1.0;
  opts.render.far = 12.0;
  const PhotometricTerms t = photometric_loss(b.frames, gt_poses(b), provider, b.k, default_contexts(3), opts);
  EXPECT_LT(t.multi.item(), 1e-3);
  EXPECT_LT(t.single.item(), 1e-3);
}

TEST(Photometric, EmptyFieldWithBlackFramesIsZero) {
  const Intrinsics k = Intrinsics::from_fov(8, 6, 60.0);
  std::vector<Tensor> frames(3, Tensor::zeros({6, 8, 3}));
  AnalyticProvider provider(std::make_shared<const AnalyticScene>(), std::vector<SE3Pose>(3));
  const PhotometricTerms t =
      photometric_loss(frames, std::vector<TensorPose>(3, TensorPose::identity()), provider, k, {0, 2}, {});
  EXPECT_EQ(t.multi.item(), 0.0);
  EXPECT_EQ(t.single.item(), 0.0);
}

TEST(Photometric, DefaultContextsAreFirstMiddleLast) {
  EXPECT_EQ(default_contexts(5), (std::vector<std::size_t>{0, 2, 4}));
  EXPECT_EQ(default_contexts(2), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(default_contexts(1), (std::vector<std::size_t>{0}));
}

TEST(PoseLoss, GroundTruthEverythingIsZero) {
  const SyntheticBundle b = orbit(4, 24, 18);
  const double l = pose_flow_loss(b.flows, gt_poses(b), exact_surfaces(b), b.k).item();
  EXPECT_LE(l, 1e-6);
}

TEST(PoseLoss, IdentityPosesWithZeroFlowIsZero) {
  const SyntheticBundle b = orbit(3, 12, 9);
  std::vector<FlowField> flows(2, FlowField::zeros(12, 9));
  const auto s = exact_surfaces(b);
  // Zero up to the rounding of unprojecting and reprojecting a pixel.
  EXPECT_LT(pose_flow_loss(flows, std::vector<TensorPose>(3, TensorPose::identity()), {s[0], s[0], s[0]}, b.k).item(),
            1e-24);
}

TEST(PoseLoss, MatchesOracleAwayFromTruth) {
  const SyntheticBundle b = orbit(4, 20, 15);
  std::vector<SE3Pose> poses;
  const Trajectory traj = b.trajectory.normalized();
  for (const auto& p : traj.poses()) poses.push_back(p.pose);
  poses[2] = poses[2] * SE3Pose::from_axis_angle(Vec3(0.01, -0.02, 0.005), Vec3(0.03, 0.0, -0.02));
  std::vector<TensorPose> tp;
  for (const auto& p : poses) tp.push_back(TensorPose::constant(p));
  const double got = pose_flow_loss(b.flows, tp, exact_surfaces(b), b.k).item();
  EXPECT_GT(got, 1e-3);
  EXPECT_NEAR(got, pose_loss_oracle(b, poses), 1e-10 * std::max(1.0, got));
}

TEST(PoseLoss, GradcheckWrtPoseAndPoints) {
  const SyntheticBundle b = orbit(3, 10, 8);
  auto poses = gt_poses(b);
  poses[1] = TensorPose::constant(poses[1].value() * SE3Pose::from_axis_angle(Vec3(0, 0.01, 0), Vec3(0.02, 0, 0)));
  const auto surfaces = exact_surfaces(b);
  auto fn = [&](const std::vector<Tensor>& in) {
    std::vector<TensorPose> p = poses;
    p[1].translation = in[0];
    std::vector<SurfaceMap> s = surfaces;
    s[2].points = in[1];
    return pose_flow_loss(b.flows, p, s, b.k);
  };
  auto r = gradcheck(fn, {poses[1].translation.detach(), surfaces[2].points});
  EXPECT_TRUE(r.ok) << r.max_rel_error;
}

TEST(PoseLoss, CountMismatchThrows) {
  const SyntheticBundle b = orbit(3, 8, 6);
  EXPECT_THROW(pose_flow_loss(b.flows, gt_poses(b), {}, b.k), std::invalid_argument);
}

TEST(Training, TotalIsWeightedSumOfTerms) {
  const SyntheticBundle b = orbit(4, 12, 9);
  TrainConfig c = tiny_config();
  c.weights = {0.5, 2.0, 3.0};
  Model m(c);
  const ForwardPass fp = forward_window(m, make_window(b, 0, 3), c, 1);
  const LossReport& r = fp.report;
  EXPECT_NEAR(r.total, 0.5 * r.l_rgb_multi + 2.0 * r.l_rgb_single + 3.0 * r.l_pose, 1e-12);
  EXPECT_EQ(fp.poses.size(), 3u);
  EXPECT_EQ(fp.pairs.size(), 2u);
  EXPECT_EQ(fp.poses[0].value().matrix(), Mat4::Identity());
}

TEST(Training, NonFiniteLossAbortsWithReport) {
  const SyntheticBundle b = orbit(4, 12, 9);
  TrainConfig c = tiny_config();
  c.weights.pose = std::numeric_limits<double>::infinity();
  Model m(c);
  Adam opt(m.parameters(), c.lr, c.clip);
  const auto before = snapshot(m);
  try {
    train_step(m, opt, {make_window(b, 0, 3)}, c, 4);
    FAIL() << "expected NonFiniteLossError";
  } catch (const NonFiniteLossError& e) {
    EXPECT_EQ(e.report().step, 4u);
    EXPECT_NE(std::string(e.what()).find("l_pose"), std::string::npos);
  }
  EXPECT_EQ(snapshot(m), before);
}

TEST(Training, SameSeedSameRun) {
  const SyntheticBundle b = orbit(5, 12, 9);
  const TrainConfig c = tiny_config();
  auto run = [&] {
    Model m(c);
    Adam opt(m.parameters(), c.lr, c.clip);
    Trainer t(m, opt, {b}, c);
    std::vector<double> totals;
    for (int i = 0; i < 2; ++i) totals.push_back(t.step().total);
    return std::make_pair(totals, snapshot(m));
  };
  const auto a = run(), r = run();
  EXPECT_EQ(a.first, r.first);
  EXPECT_EQ(a.second, r.second);
}

TEST(Training, ZeroLearningRateLeavesParameters) {
  const SyntheticBundle b = orbit(4, 12, 9);
  TrainConfig c = tiny_config();
  c.lr = 0.0;
  Model m(c);
  Adam opt(m.parameters(), c.lr, c.clip);
  const auto before = snapshot(m);
  Trainer t(m, opt, {b}, c);
  t.step();
  EXPECT_EQ(snapshot(m), before);
}

TEST(Training, StepChangesParameters) {
  const SyntheticBundle b = orbit(4, 12, 9);
  const TrainConfig c = tiny_config();
  Model m(c);
  Adam opt(m.parameters(), c.lr, c.clip);
  const auto before = snapshot(m);
  Trainer t(m, opt, {b}, c);
  t.step();
  EXPECT_NE(snapshot(m), before);
  EXPECT_EQ(t.next_step(), 1u);
}

TEST(Training, ZeroAdaptStepsLeavesModel) {
  const SyntheticBundle b = orbit(4, 12, 9);
  const TrainConfig c = tiny_config();
  Model m(c);
  Adam opt(m.parameters(), c.lr, c.clip);
  const auto before = snapshot(m);
  EXPECT_TRUE(adapt(m, opt, b, c, 0).empty());
  EXPECT_EQ(snapshot(m), before);
  EXPECT_EQ(opt.t, 0u);
}

TEST(Training, WindowLongerThanBundleIsRejected) {
  const SyntheticBundle b = orbit(2, 8, 6);
  const TrainConfig c = tiny_config();
  Model m(c);
  Adam opt(m.parameters(), c.lr, c.clip);
  EXPECT_THROW(Trainer(m, opt, {b}, c), std::invalid_argument);
  EXPECT_THROW(make_window(b, 1, 2), std::invalid_argument);
}

TEST(Adam, ClipBoundsTheUpdate) {
  // A first Adam step moves every coordinate by lr against its gradient sign.
  Tensor w = Tensor::from({3}, {1.0, 2.0, 3.0});
  w.set_requires_grad(true);
  ParameterList p{{"w", w}};
  Adam opt(p, 0.1, 1.0);
  backward(sum(scale(w, 100.0)));
  const double norm = opt.step(p);
  EXPECT_NEAR(norm, 100.0 * std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(w[0], 0.9, 1e-6);
  EXPECT_NEAR(w[2], 2.9, 1e-6);
}

TEST(Config, RoundTripAndUnknownKeys) {
  TrainConfig c = tiny_config();
  c.lr = 1e-3;
  c.weights.pose = 4.0;
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  nlohmann::json j = c.to_json();
  j["learning_rate"] = 0.1;
  try {
    TrainConfig::from_json(j);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
  nlohmann::json nested = c.to_json();
  nested["field"]["width"] = 3;
  EXPECT_THROW(TrainConfig::from_json(nested), std::invalid_argument);
  nlohmann::json bad = c.to_json();
  bad["window"] = 1;
  EXPECT_THROW(TrainConfig::from_json(bad), std::invalid_argument);
}

TEST(Checkpoint, RoundTripAndResumeMatchesContinuousRun) {
  const fs::path dir = fs::temp_directory_path() / "sfpose_ckpt_test";
  fs::create_directories(dir);
  const SyntheticBundle b = orbit(5, 12, 9);
  const TrainConfig c = tiny_config();

  Model full(c);
  Adam full_opt(full.parameters(), c.lr, c.clip);
  Trainer ft(full, full_opt, {b}, c);
  for (int i = 0; i < 3; ++i) ft.step();

  Model part(c);
  Adam part_opt(part.parameters(), c.lr, c.clip);
  Trainer pt(part, part_opt, {b}, c);
  for (int i = 0; i < 2; ++i) pt.step();
  save_checkpoint(dir / "ck.bin", part, part_opt, c, pt.next_step());

  const Checkpoint ck = load_checkpoint(dir / "ck.bin");
  EXPECT_EQ(ck.step, 2u);
  EXPECT_EQ(ck.config.to_json(), c.to_json());
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.optimizer->t, 2u);
  Model resumed(ck.config);
  restore(resumed, ck);
  EXPECT_EQ(snapshot(resumed), snapshot(part));
  Adam ropt(resumed.parameters(), ck.config.lr, ck.config.clip);
  ropt.t = ck.optimizer->t;
  ropt.m = ck.optimizer->m;
  ropt.v = ck.optimizer->v;
  Trainer rt(resumed, ropt, {b}, ck.config, ck.step);
  rt.step();
  EXPECT_EQ(snapshot(resumed), snapshot(full));

  // Truncated or foreign files are parse errors, not crashes.
  Bytes bytes = read_file(dir / "ck.bin");
  bytes.resize(bytes.size() / 2);
  write_file(dir / "bad.bin", bytes);
  EXPECT_THROW(load_checkpoint(dir / "bad.bin"), ParseError);
  write_file(dir / "bad.bin", Bytes(64, 0x41));
  EXPECT_THROW(load_checkpoint(dir / "bad.bin"), ParseError);
  fs::remove_all(dir);
}
