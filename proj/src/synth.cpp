#include "sfpose/synth.hpp"

#include "sfpose/io_formats.hpp"
#include "sfpose/parallel.hpp"
#include "sfpose/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace sfpose {

namespace {
constexpr double kDeg = M_PI / 180.0;
const Vec3 kWorldUp(0.0, -1.0, 0.0);  // world y points down, like the camera's
}  // namespace

std::string to_string(TrajectoryKind kind) {
  switch (kind) {
    case TrajectoryKind::static_camera: return "static";
    case TrajectoryKind::orbit: return "orbit";
    case TrajectoryKind::dolly: return "dolly";
    case TrajectoryKind::rotation: return "rotation";
    case TrajectoryKind::random_smooth: return "random-smooth";
  }
  return "orbit";
}

TrajectoryKind trajectory_kind_from_string(const std::string& s) {
  if (s == "static") return TrajectoryKind::static_camera;
  if (s == "orbit") return TrajectoryKind::orbit;
  if (s == "dolly" || s == "forward-dolly") return TrajectoryKind::dolly;
  if (s == "rotation" || s == "rotation-dominant") return TrajectoryKind::rotation;
  if (s == "random-smooth" || s == "random") return TrajectoryKind::random_smooth;
  throw std::invalid_argument("unknown trajectory kind '" + s + "' (static, orbit, dolly, rotation, random-smooth)");
}

nlohmann::json TrajectorySpec::to_json() const {
  return {{"kind", to_string(kind)},
          {"frames", frames},
          {"target", {target.x(), target.y(), target.z()}},
          {"radius", radius},
          {"height", height},
          {"step", step},
          {"jitter", jitter},
          {"max_rotation_step_deg", max_rotation_step_deg},
          {"seed", seed}};
}

TrajectorySpec TrajectorySpec::from_json(const nlohmann::json& j) {
  TrajectorySpec s;
  s.kind = trajectory_kind_from_string(j.value("kind", std::string("orbit")));
  s.frames = j.value("frames", s.frames);
  if (j.contains("target")) {
    const auto& t = j.at("target");
    s.target = Vec3(t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>());
  }
  s.radius = j.value("radius", s.radius);
  s.height = j.value("height", s.height);
  s.step = j.value("step", s.step);
  s.jitter = j.value("jitter", s.jitter);
  s.max_rotation_step_deg = j.value("max_rotation_step_deg", s.max_rotation_step_deg);
  s.seed = j.value("seed", s.seed);
  return s;
}

Trajectory generate_trajectory(const TrajectorySpec& spec) {
  if (spec.frames < 1) throw std::invalid_argument("trajectory: need at least one frame");
  std::vector<TimedPose> poses;
  const Vec3 start = spec.target + Vec3(0.0, -spec.height, -spec.radius);
  const SE3Pose base = SE3Pose::look_at(start, spec.target, kWorldUp);
  Rng rng(spec.seed);
  Vec3 omega = Vec3::Zero(), velocity = Vec3::Zero();
  SE3Pose walker = base;
  for (std::size_t i = 0; i < spec.frames; ++i) {
    const double s = static_cast<double>(i);
    SE3Pose p;
    switch (spec.kind) {
      case TrajectoryKind::static_camera:
        p = base;
        break;
      case TrajectoryKind::orbit: {
        const double th = s * spec.step * kDeg;
        const Vec3 eye = spec.target + Vec3(spec.radius * std::sin(th), -spec.height, -spec.radius * std::cos(th));
        p = SE3Pose::look_at(eye, spec.target, kWorldUp);
        break;
      }
      case TrajectoryKind::dolly: {
        const Vec3 forward = base.rotation().col(2);
        p = SE3Pose(base.rotation(), start + s * spec.step * forward);
        break;
      }
      case TrajectoryKind::rotation: {
        const Mat3 yaw = rotation_from_axis_angle(Vec3(0.0, s * spec.step * kDeg, 0.0));
        const Mat3 pitch = rotation_from_axis_angle(Vec3(0.3 * s * spec.step * kDeg, 0.0, 0.0));
        p = SE3Pose(yaw * base.rotation() * pitch, start + Vec3(0.01 * s, 0.0, 0.0));
        break;
      }
      case TrajectoryKind::random_smooth: {
        if (i > 0) {
          Vec3 dw(rng.normal(), rng.normal(), 0.3 * rng.normal());
          Vec3 dv(rng.normal(), 0.3 * rng.normal(), rng.normal());
          omega = 0.8 * omega + 0.2 * spec.step * kDeg * dw;
          velocity = 0.8 * velocity + 0.2 * spec.jitter * dv;
          const double cap = spec.max_rotation_step_deg * kDeg;
          if (omega.norm() > cap) omega *= cap / omega.norm();
          walker = SE3Pose(walker.rotation() * rotation_from_axis_angle(omega),
                           walker.translation() + walker.rotation() * velocity);
        }
        p = walker;
        break;
      }
    }
    poses.push_back({s, p});
  }
  for (std::size_t i = 1; i < poses.size(); ++i) {
    const double step = rotation_distance(poses[i - 1].pose.rotation(), poses[i].pose.rotation());
    if (step > spec.max_rotation_step_deg * kDeg + 1e-12) {
      throw std::invalid_argument("trajectory: rotation between frames " + std::to_string(i - 1) + " and " +
                                  std::to_string(i) + " is " + std::to_string(step / kDeg) +
                                  " deg, above the configured bound");
    }
  }
  return Trajectory(std::move(poses));
}

// ---- rendering ------------------------------------------------------------------------

ExactView raycast_view(const AnalyticScene& scene, const SE3Pose& camera_to_world, const Intrinsics& k) {
  const std::size_t w = k.width, h = k.height;
  ExactView v;
  std::vector<double> color(h * w * 3, 0.0);
  v.depth.assign(h * w, 0.0);
  v.hit.assign(h * w, 0);
  parallel_for(h, [&](std::size_t y) {
    for (std::size_t x = 0; x < w; ++x) {
      const Ray r = pixel_to_ray(k, Vec2(static_cast<double>(x), static_cast<double>(y)));
      const Vec3 dir = camera_to_world.rotation() * r.direction;
      const auto hit = scene.intersect(camera_to_world.translation(), dir);
      if (!hit) continue;
      const std::size_t i = y * w + x;
      const Vec3 c = scene.surface_color(*hit);
      for (int a = 0; a < 3; ++a) color[3 * i + static_cast<std::size_t>(a)] = c(a);
      v.depth[i] = hit->t * r.direction.z();
      v.hit[i] = 1;
    }
  });
  v.color = Tensor::from({h, w, 3}, std::move(color));
  return v;
}

SyntheticBundle generate_bundle(std::shared_ptr<const AnalyticScene> scene, const Trajectory& cameras,
                                const Intrinsics& k, const SynthOptions& opts) {
  k.validate();
  if (cameras.empty()) throw std::invalid_argument("generate_bundle: empty trajectory");
  for (std::size_t i = 0; i < cameras.size(); ++i) {
    if (scene->inside_solid(cameras[i].pose.translation())) {
      throw std::invalid_argument("generate_bundle: camera " + std::to_string(i) + " is inside a solid primitive");
    }
  }
  SyntheticBundle b;
  b.k = k;
  b.scene = scene;
  b.trajectory = cameras;
  std::vector<ExactView> views(cameras.size());
  for (std::size_t i = 0; i < cameras.size(); ++i) views[i] = raycast_view(*scene, cameras[i].pose, k);
  for (auto& v : views) {
    b.frames.push_back(v.color);
    b.depth.push_back(v.depth);
  }
  const std::size_t w = k.width, h = k.height;
  for (std::size_t t = 1; t < cameras.size(); ++t) {
    FlowField f = FlowField::zeros(w, h);
    f.valid.assign(w * h, 0);
    std::vector<std::uint8_t> occ(w * h, 0);
    const SE3Pose& cam = cameras[t].pose;
    const SE3Pose prev_inv = cameras[t - 1].pose.inverse();
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = y * w + x;
        if (!views[t].hit[i]) continue;
        const Ray r = pixel_to_ray(k, Vec2(static_cast<double>(x), static_cast<double>(y)));
        const Vec3 local = r.direction * (views[t].depth[i] / r.direction.z());
        const Vec3 in_prev = prev_inv.apply(cam.apply(local));
        if (in_prev.z() <= kMinDepth) {
          occ[i] = 1;
          continue;
        }
        const Vec2 pp = project(k, in_prev);
        f.set(x, y, pp - Vec2(static_cast<double>(x), static_cast<double>(y)));
        f.valid[i] = 1;
        // Visibility check against an exact raycast from the previous camera.
        if (pp.x() < 0 || pp.y() < 0 || pp.x() > static_cast<double>(w - 1) || pp.y() > static_cast<double>(h - 1)) {
          occ[i] = 1;
          continue;
        }
        const Ray rp = pixel_to_ray(k, pp);
        const auto hit = scene->intersect(cameras[t - 1].pose.translation(), cameras[t - 1].pose.rotation() * rp.direction);
        const double seen = hit ? hit->t * rp.direction.z() : 0.0;
        if (!hit || std::abs(seen - in_prev.z()) > opts.occlusion_tolerance * in_prev.z()) {
          occ[i] = 1;
          continue;
        }
        // Near edges and where solids meet, another face can cover the point
        // within the depth tolerance; exact geometry lets us demand the very
        // same surface point.
        const Vec3 world = cam.apply(local);
        if ((hit->point - world).norm() > 1e-6 * in_prev.z()) occ[i] = 1;
      }
    b.flows.push_back(std::move(f));
    b.occlusion.push_back(std::move(occ));
    b.outliers.emplace_back(w * h, 0);
  }
  return b;
}

SyntheticBundle generate_bundle(std::shared_ptr<const AnalyticScene> scene, const TrajectorySpec& spec,
                                const Intrinsics& k, const SynthOptions& opts) {
  SyntheticBundle b = generate_bundle(std::move(scene), generate_trajectory(spec), k, opts);
  b.spec = spec;
  return b;
}

VideoSequence SyntheticBundle::sequence() const {
  VideoSequence s;
  s.frames = frames;
  s.flows = flows;
  s.k = k;
  for (const auto& p : trajectory.poses()) s.timestamps.push_back(p.timestamp);
  s.ground_truth = trajectory;
  return s;
}

std::vector<std::vector<double>> SyntheticBundle::inlier_weights() const {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < flows.size(); ++i) {
    std::vector<double> w(flows[i].size(), 1.0);
    for (std::size_t p = 0; p < w.size(); ++p) {
      if ((i < occlusion.size() && occlusion[i][p]) || (i < outliers.size() && outliers[i][p])) w[p] = 0.0;
    }
    out.push_back(std::move(w));
  }
  return out;
}

SyntheticBundle corrupt_flow(const SyntheticBundle& bundle, double fraction, double magnitude, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("corrupt_flow: fraction must be in [0, 1]");
  if (!(magnitude >= 0.0)) throw std::invalid_argument("corrupt_flow: magnitude must be >= 0");
  SyntheticBundle out = bundle;
  Rng rng(seed);
  for (std::size_t i = 0; i < out.flows.size(); ++i) {
    FlowField& f = out.flows[i];
    std::vector<std::size_t> valid;
    for (std::size_t y = 0; y < f.height; ++y)
      for (std::size_t x = 0; x < f.width; ++x)
        if (f.is_valid(x, y)) valid.push_back(y * f.width + x);
    const auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(valid.size())));
    std::shuffle(valid.begin(), valid.end(), rng.engine());
    auto& mask = out.outliers[i];
    mask.assign(f.size(), 0);
    for (std::size_t j = 0; j < count; ++j) {
      const std::size_t p = valid[j];
      mask[p] = 1;
      f.uv[2 * p] += rng.uniform(-magnitude, magnitude);
      f.uv[2 * p + 1] += rng.uniform(-magnitude, magnitude);
    }
  }
  return out;
}

// ---- serialization ---------------------------------------------------------------------

namespace {

std::string indexed(const char* dir, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s/%04zu%s", dir, i, ext);
  return buf;
}

std::string indexed_mask(const char* kind, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "masks/%s_%04zu.png", kind, i);
  return buf;
}

Image8 mask_image(const std::vector<std::uint8_t>& m, std::size_t w, std::size_t h) {
  Image8 img{w, h, 1, {}};
  img.pixels.resize(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) img.pixels[i] = m[i] ? 255 : 0;
  return img;
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  write_file(p, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

}  // namespace

void save_bundle(const SyntheticBundle& b, const std::filesystem::path& dir, const nlohmann::json& generator) {
  namespace fs = std::filesystem;
  for (const char* sub : {"frames", "depth", "flow", "masks"}) fs::create_directories(dir / sub);
  const std::size_t w = b.k.width, h = b.k.height;
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < b.frames.size(); ++i) {
    nlohmann::json entry{{"index", i}, {"timestamp", b.trajectory[i].timestamp}};
    const std::string frame = indexed("frames", i, ".png"), depth = indexed("depth", i, ".pfm");
    write_png(dir / frame, image_from_tensor(b.frames[i]));
    PfmImage d{w, h, 1, std::vector<float>(b.depth[i].begin(), b.depth[i].end())};
    write_pfm(dir / depth, d);
    entry["frame"] = frame;
    entry["depth"] = depth;
    if (i > 0) {
      const std::string flow = indexed("flow", i, ".flo");
      write_flo(dir / flow, b.flows[i - 1]);
      entry["flow"] = flow;
      const std::string occ = indexed_mask("occlusion", i), out = indexed_mask("outlier", i);
      write_png(dir / occ, mask_image(b.occlusion[i - 1], w, h));
      write_png(dir / out, mask_image(b.outliers[i - 1], w, h));
      entry["occlusion"] = occ;
      entry["outliers"] = out;
    }
    files.push_back(entry);
  }
  write_tum(dir / "poses.tum", b.trajectory);
  nlohmann::json manifest{
      {"format", "sfpose-bundle"},
      {"version", 1},
      {"intrinsics", {{"fx", b.k.fx}, {"fy", b.k.fy}, {"cx", b.k.cx}, {"cy", b.k.cy}, {"width", w}, {"height", h}}},
      {"frames", files},
      {"poses", "poses.tum"},
      {"depth_convention", "z-depth, 0 where no surface"},
      {"flow_convention", "backward: pixel p of frame i maps to p + V(p) in frame i-1"},
      {"trajectory", b.spec.to_json()},
      {"generator", generator}};
  if (b.scene) {
    write_text(dir / "scene.json", b.scene->to_json().dump(2) + "\n");
    manifest["scene"] = "scene.json";
  }
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

SyntheticBundle load_bundle(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open bundle manifest " + manifest_path.string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("bundle manifest " + manifest_path.string() + ": " + e.what());
  }
  SyntheticBundle b;
  const auto& k = m.at("intrinsics");
  b.k.fx = k.at("fx");
  b.k.fy = k.at("fy");
  b.k.cx = k.at("cx");
  b.k.cy = k.at("cy");
  b.k.width = k.at("width");
  b.k.height = k.at("height");
  b.k.validate();
  const std::size_t w = b.k.width, h = b.k.height;
  auto mask = [&](const std::string& rel) {
    const Image8 img = read_png(dir / rel);
    if (img.width != w || img.height != h || img.channels != 1) throw std::invalid_argument("bundle: bad mask " + rel);
    std::vector<std::uint8_t> out(img.pixels.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = img.pixels[i] > 127;
    return out;
  };
  for (const auto& e : m.at("frames")) {
    const Tensor frame = tensor_from_image(read_png(dir / e.at("frame").get<std::string>()));
    if (frame.shape() != Shape{h, w, 3}) throw std::invalid_argument("bundle: frame size does not match intrinsics");
    b.frames.push_back(frame);
    if (e.contains("depth")) {
      const PfmImage d = read_pfm(dir / e.at("depth").get<std::string>());
      b.depth.emplace_back(d.data.begin(), d.data.end());
    }
    if (e.contains("flow")) {
      b.flows.push_back(read_flo(dir / e.at("flow").get<std::string>()));
      b.occlusion.push_back(e.contains("occlusion") ? mask(e.at("occlusion")) : std::vector<std::uint8_t>(w * h, 0));
      b.outliers.push_back(e.contains("outliers") ? mask(e.at("outliers")) : std::vector<std::uint8_t>(w * h, 0));
    }
  }
  if (m.contains("poses") && std::filesystem::exists(dir / m.at("poses").get<std::string>())) {
    b.trajectory = read_tum(dir / m.at("poses").get<std::string>());
  } else {
    std::vector<TimedPose> ts;
    for (std::size_t i = 0; i < b.frames.size(); ++i) ts.push_back({static_cast<double>(i), SE3Pose::identity()});
    b.trajectory = Trajectory(std::move(ts));
  }
  if (m.contains("scene") && std::filesystem::exists(dir / m.at("scene").get<std::string>())) {
    b.scene = std::make_shared<AnalyticScene>(AnalyticScene::load((dir / m.at("scene").get<std::string>()).string()));
  }
  if (m.contains("trajectory")) b.spec = TrajectorySpec::from_json(m.at("trajectory"));
  return b;
}

// ---- demo scenes -------------------------------------------------------------------------

AnalyticScene demo_scene(std::size_t variant) {
  const double shift = 0.35 * static_cast<double>(variant % 4) - 0.5;
  const std::uint64_t seed = 11 + 7 * variant;
  AnalyticScene s;

  Primitive back;
  back.kind = PrimitiveKind::plane;
  back.pose = SE3Pose(Mat3::Identity(), Vec3(0.0, 0.0, 2.5));
  back.extent = Vec3(6.0, 6.0, 0.2);
  back.amplitude = 40.0;
  back.albedo = {Albedo::Kind::noise, Vec3(0.9, 0.75, 0.3), Vec3(0.1, 0.2, 0.6), 0.45, seed};
  s.add(back);

  Primitive ball;
  ball.kind = PrimitiveKind::sphere;
  ball.pose = SE3Pose(Mat3::Identity(), Vec3(shift, 0.1, 0.3));
  ball.extent = Vec3(0.8, 0.0, 0.0);
  ball.amplitude = 40.0;
  ball.albedo = {Albedo::Kind::noise, Vec3(0.95, 0.3, 0.25), Vec3(0.2, 0.8, 0.4), 0.3, seed + 1};
  s.add(ball);

  Primitive box;
  box.kind = PrimitiveKind::box;
  box.pose = SE3Pose::from_axis_angle(Vec3(0.0, 0.5 + 0.2 * static_cast<double>(variant), 0.0),
                                      Vec3(-shift - 0.2, 0.4, 1.3));
  box.extent = Vec3(0.45, 0.45, 0.45);
  box.amplitude = 40.0;
  box.albedo = {Albedo::Kind::checker, Vec3(0.95, 0.95, 0.9), Vec3(0.15, 0.15, 0.2), 0.3, seed + 2};
  s.add(box);
  return s;
}

}  // namespace sfpose
