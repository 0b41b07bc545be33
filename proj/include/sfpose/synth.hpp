#pragma once

// Synthetic worlds with exact ground truth: analytic scenes seen along
// generated camera trajectories, rendered by closed-form raycasting.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sfpose/fields.hpp"
#include "sfpose/geometry.hpp"
#include "sfpose/odometry.hpp"
#include "sfpose/sceneflow_pose.hpp"

namespace sfpose {

enum class TrajectoryKind { static_camera, orbit, dolly, rotation, random_smooth };

std::string to_string(TrajectoryKind kind);
TrajectoryKind trajectory_kind_from_string(const std::string& s);

struct TrajectorySpec {
  TrajectoryKind kind = TrajectoryKind::orbit;
  std::size_t frames = 15;
  Vec3 target = Vec3::Zero();  // orbit/rotation look-at point; dolly start offset
  double radius = 4.0;         // orbit radius, dolly start distance from target
  double height = 0.5;         // camera height above the target (world -y is up)
  double step = 2.0;           // degrees per frame (orbit, rotation) or world units (dolly)
  double jitter = 0.0;         // random-smooth: translation step scale, world units
  double max_rotation_step_deg = 10.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static TrajectorySpec from_json(const nlohmann::json& j);
};

// Camera-to-world poses, one per frame, timestamps 0, 1, 2, ...
Trajectory generate_trajectory(const TrajectorySpec& spec);

struct SyntheticBundle {
  Intrinsics k;
  std::vector<Tensor> frames;                       // H x W x 3
  Trajectory trajectory;                            // ground truth camera-to-world
  std::vector<std::vector<double>> depth;           // z-depth per pixel, 0 where nothing is hit
  std::vector<FlowField> flows;                     // flows[i]: frame i+1 -> frame i
  std::vector<std::vector<std::uint8_t>> occlusion; // per flow: 1 where the reprojected point is hidden or unverifiable
  std::vector<std::vector<std::uint8_t>> outliers;  // per flow: 1 where corrupt_flow perturbed the flow
  std::shared_ptr<const AnalyticScene> scene;
  TrajectorySpec spec;

  VideoSequence sequence() const;
  // 1 - occlusion - outliers, per flow, for oracle weighting.
  std::vector<std::vector<double>> inlier_weights() const;
};

struct SynthOptions {
  double occlusion_tolerance = 0.01;  // relative depth disagreement
};

// Throws if a camera lies inside a solid primitive.
SyntheticBundle generate_bundle(std::shared_ptr<const AnalyticScene> scene, const Trajectory& cameras,
                                const Intrinsics& k, const SynthOptions& opts = {});
SyntheticBundle generate_bundle(std::shared_ptr<const AnalyticScene> scene, const TrajectorySpec& spec,
                                const Intrinsics& k, const SynthOptions& opts = {});

// Exact closed-form render of one camera: color, z-depth (0 on miss).
struct ExactView {
  Tensor color;
  std::vector<double> depth;
  std::vector<std::uint8_t> hit;
};
ExactView raycast_view(const AnalyticScene& scene, const SE3Pose& camera_to_world, const Intrinsics& k);

// Adds uniform noise in [-magnitude, magnitude] to both components of
// exactly floor(fraction * N) flow vectors per flow field, N being the
// number of valid flow pixels; records them in `outliers`.
SyntheticBundle corrupt_flow(const SyntheticBundle& bundle, double fraction, double magnitude, std::uint64_t seed);

// Directory layout: manifest.json, scene.json, poses.tum,
// frames/NNNN.png, depth/NNNN.pfm, flow/NNNN.flo (backward flow of frame
// NNNN), masks/occlusion_NNNN.png, masks/outlier_NNNN.png.
void save_bundle(const SyntheticBundle& bundle, const std::filesystem::path& dir, const nlohmann::json& generator);
SyntheticBundle load_bundle(const std::filesystem::path& dir);

// Built-in scenes used by tests, the CLI and training.
AnalyticScene demo_scene(std::size_t variant);

}  // namespace sfpose
