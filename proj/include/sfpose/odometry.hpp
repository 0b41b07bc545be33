#pragma once

// Sequence-level pose estimation: frame-pair solves composed into
// camera-to-first-frame trajectories, with non-overlapping windows for
// long videos.

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "sfpose/geometry.hpp"
#include "sfpose/sceneflow_pose.hpp"

namespace sfpose {

struct VideoSequence {
  std::vector<Tensor> frames;   // H x W x 3
  std::vector<FlowField> flows; // flows[i]: backward flow from frame i+1 to frame i
  Intrinsics k;
  std::vector<double> timestamps;  // empty means 0, 1, 2, ...
  std::optional<Trajectory> ground_truth;

  std::size_t size() const { return frames.size(); }
  double timestamp(std::size_t i) const { return timestamps.empty() ? static_cast<double>(i) : timestamps[i]; }
  void validate() const;
};

// Builds the surface source for frame i of the sequence.
using SourceFactory = std::function<std::unique_ptr<SurfaceSource>(const VideoSequence&, std::size_t)>;

struct OdometryOptions {
  PairOptions pair;
  // Optional per-pair pixel weight maps, indexed like `flows`.
  const std::vector<std::vector<double>>* pixel_weights = nullptr;
};

// Relative pose mapping frame-(i) camera coordinates to frame-(i+1)
// camera coordinates, for each adjacent pair i in [first, last).
std::vector<SE3Pose> relative_poses(const VideoSequence& seq, std::size_t first, std::size_t last,
                                    const SourceFactory& sources, const OdometryOptions& opts = {});

// Composes relative poses into a camera-to-first-frame trajectory.
Trajectory compose_trajectory(const std::vector<SE3Pose>& relative, const std::vector<double>& timestamps);

// Frames [first, last] as one window; the result starts at identity.
Trajectory estimate_window(const VideoSequence& seq, std::size_t first, std::size_t last,
                           const SourceFactory& sources, const OdometryOptions& opts = {});
Trajectory estimate_window(const VideoSequence& seq, const SourceFactory& sources, const OdometryOptions& opts = {});

// Non-overlapping windows of `window_size` frames. Each window is solved
// independently; consecutive windows are joined by solving the pair (last
// frame of window k, first frame of window k+1).
Trajectory estimate_long(const VideoSequence& seq, std::size_t window_size, const SourceFactory& sources,
                         const OdometryOptions& opts = {});

}  // namespace sfpose
