#include "sfpose/odometry.hpp"

#include "sfpose/parallel.hpp"

#include <stdexcept>
#include <string>

namespace sfpose {

void VideoSequence::validate() const {
  if (frames.size() < 2) throw std::invalid_argument("sequence: need at least 2 frames, got " + std::to_string(frames.size()));
  if (flows.size() + 1 != frames.size()) {
    throw std::invalid_argument("sequence: " + std::to_string(frames.size()) + " frames need " +
                                std::to_string(frames.size() - 1) + " flows, got " + std::to_string(flows.size()));
  }
  if (!timestamps.empty() && timestamps.size() != frames.size()) {
    throw std::invalid_argument("sequence: timestamp count does not match frame count");
  }
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].shape() != Shape{k.height, k.width, 3}) {
      throw ShapeError("sequence: frame " + std::to_string(i) + " has shape " + shape_str(frames[i].shape()) +
                       ", intrinsics say " + std::to_string(k.height) + "x" + std::to_string(k.width) + "x3");
    }
  }
  for (std::size_t i = 0; i < flows.size(); ++i) {
    if (flows[i].width != k.width || flows[i].height != k.height) {
      throw ShapeError("sequence: flow " + std::to_string(i) + " size does not match the frames");
    }
  }
}

namespace {

SE3Pose solve_pair(const VideoSequence& seq, std::size_t i, const SurfaceSource& frame, const SurfaceSource& prev,
                   const OdometryOptions& opts) {
  PairOptions po = opts.pair;
  if (opts.pixel_weights) po.pixel_weights = &opts.pixel_weights->at(i);
  try {
    return pose_from_frame_pair(frame, prev, seq.flows[i], po).pose.value();
  } catch (const DegenerateGeometryError& e) {
    throw DegenerateGeometryError("frames " + std::to_string(i) + "->" + std::to_string(i + 1) + ": " + e.what());
  }
}

}  // namespace

std::vector<SE3Pose> relative_poses(const VideoSequence& seq, std::size_t first, std::size_t last,
                                    const SourceFactory& sources, const OdometryOptions& opts) {
  if (last >= seq.size() || first >= last) {
    throw std::invalid_argument("window [" + std::to_string(first) + ", " + std::to_string(last) +
                                "] is not a range of at least 2 frames in a " + std::to_string(seq.size()) +
                                "-frame sequence");
  }
  NoGradGuard no_grad;
  std::vector<std::unique_ptr<SurfaceSource>> src(last - first + 1);
  parallel_for(src.size(), [&](std::size_t j) {
    NoGradGuard guard;
    src[j] = sources(seq, first + j);
  });
  std::vector<SE3Pose> rel(last - first);
  parallel_for(rel.size(), [&](std::size_t j) {
    NoGradGuard guard;
    rel[j] = solve_pair(seq, first + j, *src[j + 1], *src[j], opts);
  });
  return rel;
}

Trajectory compose_trajectory(const std::vector<SE3Pose>& relative, const std::vector<double>& timestamps) {
  if (timestamps.size() != relative.size() + 1) throw std::invalid_argument("compose_trajectory: timestamp count mismatch");
  std::vector<TimedPose> poses;
  poses.reserve(timestamps.size());
  SE3Pose c = SE3Pose::identity();
  poses.push_back({timestamps[0], c});
  for (std::size_t i = 0; i < relative.size(); ++i) {
    // relative[i] maps camera i into camera i+1; camera i+1 -> first frame.
    c = c * relative[i].inverse();
    poses.push_back({timestamps[i + 1], c});
  }
  return Trajectory(std::move(poses));
}

Trajectory estimate_window(const VideoSequence& seq, std::size_t first, std::size_t last,
                           const SourceFactory& sources, const OdometryOptions& opts) {
  seq.validate();
  std::vector<double> ts;
  for (std::size_t i = first; i <= last; ++i) ts.push_back(seq.timestamp(i));
  return compose_trajectory(relative_poses(seq, first, last, sources, opts), ts);
}

Trajectory estimate_window(const VideoSequence& seq, const SourceFactory& sources, const OdometryOptions& opts) {
  return estimate_window(seq, 0, seq.size() - 1, sources, opts);
}

Trajectory estimate_long(const VideoSequence& seq, std::size_t window_size, const SourceFactory& sources,
                         const OdometryOptions& opts) {
  seq.validate();
  if (window_size < 2) throw std::invalid_argument("estimate_long: window size must be at least 2");
  const std::size_t n = seq.size();
  if (window_size >= n) return estimate_window(seq, sources, opts);

  std::vector<std::pair<std::size_t, std::size_t>> windows;
  for (std::size_t b = 0; b < n; b += window_size) windows.emplace_back(b, std::min(n, b + window_size) - 1);

  // Per-window local trajectories; a trailing single-frame window has none.
  std::vector<Trajectory> local(windows.size());
  std::vector<SE3Pose> junction(windows.size());  // junction[k]: window k-1 last -> window k first
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto [b, e] = windows[w];
    if (e > b) local[w] = estimate_window(seq, b, e, sources, opts);
    if (w > 0) junction[w] = relative_poses(seq, b - 1, b, sources, opts).front();
  }

  std::vector<TimedPose> out;
  SE3Pose base = SE3Pose::identity();  // window start camera -> first frame
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto [b, e] = windows[w];
    if (w > 0) base = out.back().pose * junction[w].inverse();
    if (e == b) {
      out.push_back({seq.timestamp(b), base});
      continue;
    }
    for (const auto& p : local[w].poses()) out.push_back({p.timestamp, base * p.pose});
  }
  return Trajectory(std::move(out));
}

}  // namespace sfpose
