// Acceptance gate: one PASS/FAIL line per criterion.

#include "sfpose/io_formats.hpp"
#include "sfpose/odometry.hpp"
#include "sfpose/parallel.hpp"
#include "sfpose/random.hpp"
#include "sfpose/synth.hpp"
#include "sfpose/training.hpp"
#include "sfpose/verify.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iostream>
#include <set>
#include <sstream>

using namespace sfpose;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

Outcome from_checks(const std::vector<CheckResult>& checks) {
  Outcome o{true, ""};
  for (const auto& c : checks) {
    o.pass = o.pass && c.pass;
    if (!o.detail.empty()) o.detail += " | ";
    o.detail += (c.pass ? "" : "FAILED ") + c.name + ": " + c.detail;
  }
  return o;
}

// ---- 6: oracle odometry --------------------------------------------------------------

SourceFactory oracle_sources(const SyntheticBundle& b) {
  return [&b](const VideoSequence& s, std::size_t i) -> std::unique_ptr<SurfaceSource> {
    return std::make_unique<AnalyticSurface>(b.scene, b.trajectory[i].pose, s.k, s.frames[i]);
  };
}

double oracle_ate(const SyntheticBundle& b) {
  const auto weights = b.inlier_weights();
  OdometryOptions opts;
  opts.pixel_weights = &weights;
  const Trajectory est = estimate_window(b.sequence(), oracle_sources(b), opts);
  return align_trajectories(est, b.trajectory, true).ate;
}

Outcome criterion6() {
  const auto scene = std::make_shared<AnalyticScene>(demo_scene(0));
  const Intrinsics k = Intrinsics::from_fov(48, 36, 60.0);
  TrajectorySpec orbit;
  orbit.kind = TrajectoryKind::orbit;
  orbit.frames = 30;
  orbit.step = 2.0;
  TrajectorySpec dolly;
  dolly.kind = TrajectoryKind::dolly;
  dolly.frames = 30;
  dolly.step = 0.05;
  const double ate_orbit = oracle_ate(generate_bundle(scene, orbit, k));
  const double ate_dolly = oracle_ate(generate_bundle(scene, dolly, k));

  // Long sequence through sliding windows.
  TrajectorySpec longer;
  longer.kind = TrajectoryKind::orbit;
  longer.frames = 200;
  longer.step = 0.45;
  const SyntheticBundle lb = generate_bundle(scene, longer, Intrinsics::from_fov(32, 24, 60.0));
  const auto weights = lb.inlier_weights();
  OdometryOptions opts;
  opts.pixel_weights = &weights;
  const VideoSequence seq = lb.sequence();
  const std::size_t window = 15;
  const Trajectory est = estimate_long(seq, window, oracle_sources(lb), opts);
  // At each boundary the composed trajectory must reproduce the pair
  // solution joining the two windows, and each window its own estimate.
  double boundary = 0.0;
  for (std::size_t b = window; b < seq.size(); b += window) {
    const SE3Pose pair = relative_poses(seq, b - 1, b, oracle_sources(lb), opts).front();
    const SE3Pose composed = est[b].pose.inverse() * est[b - 1].pose;
    boundary = std::max({boundary, rotation_distance(pair.rotation(), composed.rotation()),
                         (pair.translation() - composed.translation()).norm()});
    const std::size_t e = std::min(seq.size(), b + window) - 1;
    if (e > b) {
      const Trajectory local = estimate_window(seq, b, e, oracle_sources(lb), opts);
      for (std::size_t i = b; i <= e; ++i) {
        const SE3Pose rel = est[b].pose.inverse() * est[i].pose;
        boundary = std::max({boundary, rotation_distance(rel.rotation(), local[i - b].pose.rotation()),
                             (rel.translation() - local[i - b].pose.translation()).norm()});
      }
    }
  }
  const double ate_long = align_trajectories(est, lb.trajectory, true).ate;
  Outcome o;
  o.pass = ate_orbit < 1e-3 && ate_dolly < 1e-3 && est.size() == 200 && boundary <= 1e-9;
  o.detail = "ATE orbit " + fmt(ate_orbit) + ", dolly " + fmt(ate_dolly) + " (limit 1e-3); 200 frames in " +
             std::to_string((seq.size() + window - 1) / window) + " windows, boundary consistency " + fmt(boundary) +
             " (limit 1e-9), ATE " + fmt(ate_long);
  return o;
}

// ---- 7: outlier down-weighting --------------------------------------------------------

Outcome criterion7() {
  const auto scene = std::make_shared<AnalyticScene>(demo_scene(1));
  TrajectorySpec spec;
  spec.kind = TrajectoryKind::orbit;
  spec.frames = 8;
  spec.step = 3.0;
  const SyntheticBundle clean = generate_bundle(scene, spec, Intrinsics::from_fov(48, 36, 60.0));
  const SyntheticBundle bad = corrupt_flow(clean, 0.2, 5.0, 7);
  const VideoSequence seq = bad.sequence();

  // Oracle: zero weight on corrupted (and occluded) pixels.
  const auto oracle_w = bad.inlier_weights();
  // Uniform: every pixel weighs the same; occlusion stays masked so the
  // corrupted flow is the only difference.
  SyntheticBundle occl_only = bad;
  for (auto& m : occl_only.outliers) std::fill(m.begin(), m.end(), 0);
  const auto uniform_w = occl_only.inlier_weights();

  double oracle_err = 0.0, uniform_min = 1e9;
  for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
    const SE3Pose gt = bad.trajectory[t + 1].pose.inverse() * bad.trajectory[t].pose;
    OdometryOptions o1;
    o1.pixel_weights = &oracle_w;
    const SE3Pose a = relative_poses(seq, t, t + 1, oracle_sources(bad), o1).front();
    OdometryOptions o2;
    o2.pixel_weights = &uniform_w;
    const SE3Pose b = relative_poses(seq, t, t + 1, oracle_sources(bad), o2).front();
    oracle_err = std::max({oracle_err, rotation_distance(a.rotation(), gt.rotation()),
                           (a.translation() - gt.translation()).norm()});
    uniform_min = std::min(uniform_min, rotation_distance(b.rotation(), gt.rotation()));
  }
  Outcome o;
  o.pass = oracle_err <= 1e-9 && uniform_min > 1e-3;
  o.detail = "oracle weights: max pose error " + fmt(oracle_err) + " (limit 1e-9); uniform weights: min rotation error " +
             fmt(uniform_min) + " rad over " + std::to_string(seq.size() - 1) + " pairs (must exceed 1e-3)";
  return o;
}

// ---- 8, 9: learning ---------------------------------------------------------------------

struct LearningSetup {
  std::size_t steps = 1200;
  std::size_t adapt_steps = 150;
  std::size_t width = 24, height = 18;
  double corrupt_magnitude = 2.0;
  std::uint64_t seed = 1;
  bool verbose = false;
};

SyntheticBundle make_scene(std::size_t variant, TrajectoryKind kind, double step, std::uint64_t seed,
                           const LearningSetup& s, double corrupt) {
  TrajectorySpec spec;
  spec.kind = kind;
  spec.frames = 15;
  spec.step = step;
  spec.jitter = 0.04;
  spec.seed = seed;
  const auto scene = std::make_shared<AnalyticScene>(demo_scene(variant));
  SyntheticBundle b = generate_bundle(scene, spec, Intrinsics::from_fov(s.width, s.height, 60.0));
  if (corrupt > 0) b = corrupt_flow(b, corrupt, s.corrupt_magnitude, seed + 100);
  return b;
}

double smoothed(const std::vector<LossReport>& r, std::size_t begin, std::size_t end) {
  double sum = 0.0;
  for (std::size_t i = begin; i < end; ++i) sum += r[i].total;
  return sum / static_cast<double>(end - begin);
}

struct LearningOutcome {
  Outcome c8, c9;
};

LearningOutcome criteria8and9(const LearningSetup& s) {
  const auto t0 = Clock::now();
  std::vector<SyntheticBundle> train{
      make_scene(0, TrajectoryKind::orbit, 3.0, 11, s, 0.2),
      make_scene(1, TrajectoryKind::random_smooth, 2.0, 12, s, 0.2),
      make_scene(2, TrajectoryKind::dolly, 0.08, 13, s, 0.2),
      make_scene(3, TrajectoryKind::orbit, -3.0, 14, s, 0.2),
  };
  const SyntheticBundle held = make_scene(5, TrajectoryKind::orbit, 2.5, 21, s, 0.2);
  const SyntheticBundle adapt_scene = make_scene(6, TrajectoryKind::random_smooth, 2.0, 31, s, 0.0);

  TrainConfig cfg;
  cfg.seed = s.seed;
  cfg.steps = s.steps;
  cfg.max_points = 0;
  Model model(cfg);
  Adam opt(model.parameters(), cfg.lr, cfg.clip);

  const double ate_untrained = evaluate_window(model, held, 0, held.frames.size(), cfg).ate;
  const ConfidenceStats psi_untrained = confidence_stats(model, held, cfg);

  Trainer trainer(model, opt, train, cfg);
  std::vector<LossReport> reports;
  for (std::size_t i = 0; i < s.steps; ++i) {
    reports.push_back(trainer.step());
    if (s.verbose && (i + 1) % 50 == 0) std::cerr << reports.back().describe() << " [" << fmt(since(t0)) << " s]\n";
  }
  const double train_seconds = since(t0);
  const std::size_t win = std::clamp<std::size_t>(s.steps / 2, 1, 50);  // 50-step windows
  const double first = smoothed(reports, 0, win), last = smoothed(reports, s.steps - win, s.steps);
  const double reduction = 1.0 - last / first;

  const double ate_trained = evaluate_window(model, held, 0, held.frames.size(), cfg).ate;
  const ConfidenceStats psi = confidence_stats(model, held, cfg);
  const double gap = psi.mean_inlier - psi.mean_outlier;

  LearningOutcome out;
  out.c8.pass = reduction >= 0.5 && ate_trained < ate_untrained && gap >= 0.1 && s.steps <= 2000 &&
                train_seconds <= 1800;
  out.c8.detail = std::to_string(s.steps) + " steps in " + fmt(train_seconds) + " s (limit 2000 steps, 1800 s); " +
                  "smoothed total loss " + fmt(first) + " -> " + fmt(last) + " (reduction " + fmt(100 * reduction) +
                  "%, need 50%); held-out ATE untrained " + fmt(ate_untrained) + " -> trained " + fmt(ate_trained) +
                  "; mean psi clean " + fmt(psi.mean_inlier) + " vs corrupted " + fmt(psi.mean_outlier) + " (gap " +
                  fmt(gap) + ", need 0.1; untrained gap " + fmt(psi_untrained.mean_inlier - psi_untrained.mean_outlier) +
                  ")";

  // Adaptation: continue training on the unseen video only (no labels).
  const double zero_shot = evaluate_window(model, adapt_scene, 0, adapt_scene.frames.size(), cfg).ate;
  adapt(model, opt, adapt_scene, cfg, s.adapt_steps, trainer.next_step());
  const double adapted = evaluate_window(model, adapt_scene, 0, adapt_scene.frames.size(), cfg).ate;
  out.c9.pass = adapted < zero_shot;
  out.c9.detail = "held-out scene ATE zero-shot " + fmt(zero_shot) + " -> after " + std::to_string(s.adapt_steps) +
                  " adaptation steps " + fmt(adapted);
  return out;
}

// ---- 10: formats ---------------------------------------------------------------------------

template <typename Parse>
std::pair<std::size_t, std::string> fuzz(Parse parse, const std::vector<Bytes>& seeds, std::size_t count,
                                         std::uint64_t seed) {
  Rng rng(seed);
  std::size_t unstructured = 0;
  std::string first;
  for (std::size_t i = 0; i < count; ++i) {
    Bytes buf;
    if (i % 2 == 0 || seeds.empty()) {
      buf.resize(rng.index(256));
      for (auto& b : buf) b = static_cast<std::uint8_t>(rng.bits());
    } else {
      // Mutated valid file: truncation and byte flips.
      buf = seeds[rng.index(seeds.size())];
      if (rng.uniform() < 0.5) buf.resize(rng.index(buf.size() + 1));
      const std::size_t flips = 1 + rng.index(8);
      for (std::size_t f = 0; f < flips && !buf.empty(); ++f) buf[rng.index(buf.size())] = static_cast<std::uint8_t>(rng.bits());
    }
    try {
      parse(buf);
    } catch (const ParseError&) {
    } catch (const std::exception& e) {
      if (unstructured++ == 0) first = e.what();
    }
  }
  return {unstructured, first};
}

Outcome criterion10() {
  Rng rng(99);
  bool ok = true;
  std::string detail;

  FlowField flow = FlowField::zeros(37, 23);
  for (auto& v : flow.uv) v = static_cast<float>(rng.uniform(-50, 50));
  flow.valid.assign(flow.size(), 1);
  for (std::size_t i = 0; i < flow.size(); i += 7) flow.valid[i] = 0;
  const Bytes flo = encode_flo(flow);
  const bool flo_ok = encode_flo(parse_flo(flo)) == flo;

  PfmImage pfm{29, 17, 3, {}};
  for (std::size_t i = 0; i < 29 * 17 * 3; ++i) pfm.data.push_back(static_cast<float>(rng.normal() * 1e3));
  const Bytes pfm_bytes = encode_pfm(pfm);
  const PfmImage pfm_back = parse_pfm(pfm_bytes);
  const bool pfm_ok = encode_pfm(pfm_back) == pfm_bytes &&
                      std::memcmp(pfm_back.data.data(), pfm.data.data(), pfm.data.size() * sizeof(float)) == 0;

  std::vector<TimedPose> poses;
  double stamp = 1.7e9;
  for (int i = 0; i < 40; ++i) {
    stamp += rng.uniform(0.01, 0.1);
    poses.push_back({stamp, SE3Pose::from_axis_angle(Vec3(rng.normal(), rng.normal(), rng.normal()),
                                                                        Vec3(rng.normal(), rng.normal(), rng.normal()))});
  }
  const std::vector<TumRecord> recs = to_tum(Trajectory(poses));
  const std::string tum = encode_tum(recs);
  const std::vector<TumRecord> recs_back = parse_tum(tum);
  bool tum_ok = encode_tum(recs_back) == tum && recs_back.size() == recs.size();
  for (std::size_t i = 0; tum_ok && i < recs.size(); ++i) {
    tum_ok = recs[i].timestamp == recs_back[i].timestamp && recs[i].translation == recs_back[i].translation &&
             recs[i].rotation.coeffs() == recs_back[i].rotation.coeffs();
  }
  ok = flo_ok && pfm_ok && tum_ok;
  detail = std::string("round-trips flo ") + (flo_ok ? "exact" : "DIFFER") + ", pfm " + (pfm_ok ? "exact" : "DIFFER") +
           ", tum " + (tum_ok ? "exact" : "DIFFER");

  const std::size_t n = 10000;
  const Bytes tum_bytes(tum.begin(), tum.end());
  Image8 img{9, 7, 3, std::vector<std::uint8_t>(9 * 7 * 3, 77)};
  const Bytes png = encode_png(img);
  struct Target {
    const char* name;
    std::pair<std::size_t, std::string> r;
  };
  const std::vector<Target> targets{
      {"flo", fuzz([](const Bytes& b) { parse_flo(b); }, {flo}, n, 1)},
      {"pfm", fuzz([](const Bytes& b) { parse_pfm(b); }, {pfm_bytes}, n, 2)},
      {"tum", fuzz([](const Bytes& b) { parse_tum(std::string_view(reinterpret_cast<const char*>(b.data()), b.size())); },
                   {tum_bytes}, n, 3)},
      {"png", fuzz([](const Bytes& b) { decode_png(b); }, {png}, n, 4)},
  };
  detail += "; fuzzing " + std::to_string(n) + " buffers per parser, no crashes;";
  for (const auto& t : targets) {
    detail += std::string(" ") + t.name + " " + std::to_string(t.r.first) + " unstructured errors";
    if (t.r.first) detail += " (" + t.r.second + ")";
    ok = ok && t.r.first == 0;
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance gate"};
  std::string only;
  std::size_t threads = 0;
  LearningSetup ls;
  app.add_option("--only", only, "Comma-separated criteria to run (default all)");
  app.add_option("--threads", threads);
  app.add_option("--train-steps", ls.steps)->capture_default_str();
  app.add_option("--adapt-steps", ls.adapt_steps)->capture_default_str();
  app.add_option("--train-width", ls.width)->capture_default_str();
  app.add_option("--train-height", ls.height)->capture_default_str();
  app.add_option("--corrupt-magnitude", ls.corrupt_magnitude)->capture_default_str();
  app.add_option("--seed", ls.seed)->capture_default_str();
  app.add_flag("--verbose", ls.verbose);
  CLI11_PARSE(app, argc, argv);
  set_max_threads(threads);

  std::set<int> selected;
  if (!only.empty()) {
    std::stringstream ss(only);
    std::string item;
    while (std::getline(ss, item, ',')) selected.insert(std::stoi(item));
  }
  auto want = [&](int c) { return selected.empty() || selected.count(c); };

  int failed = 0;
  auto report = [&](int n, const std::string& title, const Outcome& o, double seconds) {
    std::cout << "CRITERION " << n << " " << (o.pass ? "PASS" : "FAIL") << " [" << title << "] " << o.detail << " ("
              << fmt(seconds) << " s)" << std::endl;
    if (!o.pass) ++failed;
  };
  auto run = [&](int n, const std::string& title, auto&& fn) {
    if (!want(n)) return;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    report(n, title, o, since(t0));
  };

  run(1, "procrustes exactness", [] { return from_checks({check_procrustes_exact(100, 500)}); });
  run(2, "closed form vs direct minimization", [] { return from_checks({check_procrustes_vs_minimizer(20)}); });
  run(3, "reflection guard", [] { return from_checks({check_reflection_guard(50)}); });
  run(4, "renderer vs analytic oracle", [] { return from_checks(renderer_checks()); });
  run(5, "gradient integrity", [] {
    const auto t0 = Clock::now();
    Outcome o = from_checks(gradient_checks(true));
    const double s = since(t0);
    o.pass = o.pass && s < 300.0;
    o.detail += " | total " + fmt(s) + " s (limit 300 s)";
    return o;
  });
  run(6, "oracle odometry", criterion6);
  run(7, "outlier down-weighting", criterion7);
  if (want(8) || want(9)) {
    const auto t0 = Clock::now();
    LearningOutcome lo;
    try {
      lo = criteria8and9(ls);
    } catch (const std::exception& e) {
      lo.c8 = lo.c9 = {false, std::string("exception: ") + e.what()};
    }
    const double s = since(t0);
    if (want(8)) report(8, "learned end-to-end", lo.c8, s);
    if (want(9)) report(9, "test-time adaptation", lo.c9, s);
  }
  run(10, "format fidelity", criterion10);

  std::cout << (failed ? "ACCEPTANCE: " + std::to_string(failed) + " criteria failed" : std::string("ACCEPTANCE: all passed"))
            << std::endl;
  return failed ? 1 : 0;
}
