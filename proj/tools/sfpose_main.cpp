// sfpose: synthetic data, training, odometry, rendering and self-checks.

#include "sfpose/fields.hpp"
#include "sfpose/io_formats.hpp"
#include "sfpose/odometry.hpp"
#include "sfpose/parallel.hpp"
#include "sfpose/plot.hpp"
#include "sfpose/synth.hpp"
#include "sfpose/training.hpp"
#include "sfpose/verify.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sfpose;

namespace {

// Bad flags, missing or malformed inputs: exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_json(const fs::path& p, const json& j) {
  const std::string s = j.dump(2) + "\n";
  write_file(p, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw UsageError(what + " not found: " + p.string());
}

SyntheticBundle load_sequence(const fs::path& dir) {
  require_exists(dir / "manifest.json", "sequence manifest");
  return load_bundle(dir);
}

// "demo:N" selects a built-in scene; anything else is a JSON scene file.
std::shared_ptr<AnalyticScene> load_scene(const std::string& spec) {
  if (spec.rfind("demo:", 0) == 0) {
    try {
      return std::make_shared<AnalyticScene>(demo_scene(std::stoul(spec.substr(5))));
    } catch (const std::logic_error&) {
      throw UsageError("bad demo scene '" + spec + "' (expected demo:N)");
    }
  }
  require_exists(spec, "scene file");
  return std::make_shared<AnalyticScene>(AnalyticScene::load(spec));
}

std::vector<std::size_t> parse_indices(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoul(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw UsageError("bad index list '" + s + "'");
    }
  }
  if (out.empty()) throw UsageError("empty index list");
  return out;
}

// ---- synth ------------------------------------------------------------------------

struct SynthArgs {
  std::string scene = "demo:0";
  std::string kind = "orbit";
  std::size_t frames = 15, width = 64, height = 48;
  double fov = 60.0, radius = 4.0, cam_height = 0.5, step = 2.0, jitter = 0.0;
  std::uint64_t seed = 0;
  double corrupt_fraction = 0.0, corrupt_magnitude = 0.0;
  std::string out;
};

int run_synth(const SynthArgs& a) {
  const auto scene = load_scene(a.scene);
  TrajectorySpec spec;
  try {
    spec.kind = trajectory_kind_from_string(a.kind);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  spec.frames = a.frames;
  spec.radius = a.radius;
  spec.height = a.cam_height;
  spec.step = a.step;
  spec.jitter = a.jitter;
  spec.seed = a.seed;
  if (!(a.corrupt_fraction >= 0 && a.corrupt_fraction <= 1)) throw UsageError("--corrupt-fraction must be in [0, 1]");
  const Intrinsics k = Intrinsics::from_fov(a.width, a.height, a.fov);
  SyntheticBundle b = generate_bundle(scene, spec, k);
  if (a.corrupt_fraction > 0) b = corrupt_flow(b, a.corrupt_fraction, a.corrupt_magnitude, a.seed + 1);

  json generator = {{"command", "synth"},
                    {"scene", a.scene},
                    {"width", a.width},
                    {"height", a.height},
                    {"hfov_deg", a.fov},
                    {"seed", a.seed},
                    {"corrupt_fraction", a.corrupt_fraction},
                    {"corrupt_magnitude", a.corrupt_magnitude},
                    {"trajectory", spec.to_json()}};
  fs::create_directories(a.out);
  save_bundle(b, a.out, generator);
  write_json(fs::path(a.out) / "config.json", generator);
  std::cout << "wrote " << b.frames.size() << " frames to " << a.out << "\n";
  return 0;
}

// ---- train ------------------------------------------------------------------------

struct TrainArgs {
  std::vector<std::string> data;
  std::string config, resume, out;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  std::size_t checkpoint_every = 0;
};

std::vector<LossReport> read_loss_csv(const fs::path& p) {
  std::vector<LossReport> out;
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    LossReport r;
    char c;
    std::istringstream ss(line);
    if (ss >> r.step >> c >> r.l_rgb_multi >> c >> r.l_rgb_single >> c >> r.l_pose >> c >> r.total) out.push_back(r);
  }
  return out;
}

int run_train(const TrainArgs& a) {
  TrainConfig cfg;
  std::optional<Checkpoint> ckpt;
  if (!a.resume.empty()) {
    require_exists(a.resume, "checkpoint");
    ckpt = load_checkpoint(a.resume);
    cfg = ckpt->config;
  }
  if (!a.config.empty()) {
    require_exists(a.config, "config file");
    cfg = TrainConfig::load(a.config);
  }
  if (a.steps) cfg.steps = *a.steps;
  if (a.seed) cfg.seed = *a.seed;
  if (a.lr) cfg.lr = *a.lr;

  std::vector<SyntheticBundle> bundles;
  for (const auto& d : a.data) bundles.push_back(load_sequence(d));

  Model model(cfg);
  Adam opt(model.parameters(), cfg.lr, cfg.clip);
  std::size_t first_step = 0;
  if (ckpt) {
    restore(model, *ckpt);
    if (ckpt->optimizer) {
      opt.t = ckpt->optimizer->t;
      opt.m = ckpt->optimizer->m;
      opt.v = ckpt->optimizer->v;
    }
    first_step = ckpt->step;
  }

  const fs::path out(a.out);
  fs::create_directories(out);
  json resolved = cfg.to_json();
  write_json(out / "config.json", {{"command", "train"},
                                   {"data", a.data},
                                   {"resume", a.resume},
                                   {"first_step", first_step},
                                   {"checkpoint_every", a.checkpoint_every},
                                   {"config", resolved}});

  const fs::path csv = out / "loss.csv";
  const bool append = ckpt && fs::exists(csv);
  std::ofstream log(csv, append ? std::ios::app : std::ios::trunc);
  if (!append) log << LossReport::csv_header() << "\n";

  Trainer trainer(model, opt, std::move(bundles), cfg, first_step);
  for (std::size_t i = 0; i < cfg.steps; ++i) {
    const LossReport r = trainer.step();
    log << r.csv_row() << "\n" << std::flush;
    if ((i + 1) % 10 == 0 || i + 1 == cfg.steps) std::cout << r.describe() << "\n" << std::flush;
    if (a.checkpoint_every && (i + 1) % a.checkpoint_every == 0) {
      save_checkpoint(out / "checkpoint.bin", model, opt, cfg, trainer.next_step());
    }
  }
  log.close();
  save_checkpoint(out / "checkpoint.bin", model, opt, cfg, trainer.next_step());
  write_png(out / "loss.png", plot_loss_curves(read_loss_csv(csv)));
  std::cout << "checkpoint " << (out / "checkpoint.bin").string() << " at step " << trainer.next_step() << "\n";
  return 0;
}

// ---- odometry ----------------------------------------------------------------------

struct OdometryArgs {
  std::string sequence, checkpoint, out;
  bool oracle_depth = false, oracle_weights = false;
  std::size_t window = 0;  // 0: whole sequence
};

int run_odometry(const OdometryArgs& a) {
  if (a.oracle_depth == !a.checkpoint.empty()) throw UsageError("give exactly one of --oracle-depth or --checkpoint");
  const SyntheticBundle b = load_sequence(a.sequence);
  const fs::path seq_dir(a.sequence);
  const bool has_gt = fs::exists(seq_dir / "poses.tum");
  VideoSequence seq = b.sequence();
  if (!has_gt) seq.ground_truth.reset();

  OdometryOptions opts;
  SourceFactory factory;
  std::optional<Model> model;
  std::vector<std::vector<double>> weights;
  json mode;
  if (a.oracle_depth) {
    // Exact geometry: the bundle's scene seen from its recorded cameras.
    if (!b.scene) throw UsageError("--oracle-depth needs scene.json in " + a.sequence);
    if (!has_gt) throw UsageError("--oracle-depth needs poses.tum in " + a.sequence);
    factory = [&b](const VideoSequence& s, std::size_t i) -> std::unique_ptr<SurfaceSource> {
      return std::make_unique<AnalyticSurface>(b.scene, b.trajectory[i].pose, s.k, s.frames[i]);
    };
    // Occluded pixels have geometrically correct flow that lands on another
    // surface; ground-truth geometry also says which pixels those are.
    SyntheticBundle masked = b;
    if (!a.oracle_weights) {
      for (auto& m : masked.outliers) std::fill(m.begin(), m.end(), 0);
    }
    weights = masked.inlier_weights();
    opts.pixel_weights = &weights;
    mode = {{"surfaces", "oracle-depth"}, {"weights", a.oracle_weights ? "oracle" : "occlusion-masked uniform"}};
  } else {
    require_exists(a.checkpoint, "checkpoint");
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    model.emplace(ck.config);
    restore(*model, ck);
    factory = model->sources(ck.config.render_options());
    opts.pair.weighting = Weighting::confidence;
    opts.pair.confidence = &model->psi;
    if (a.oracle_weights) {
      weights = b.inlier_weights();
      opts.pixel_weights = &weights;
    }
    mode = {{"surfaces", "learned"}, {"checkpoint", a.checkpoint}, {"weights", "confidence"}};
  }

  const std::size_t window = a.window == 0 ? seq.size() : a.window;
  if (window < 2) throw UsageError("--window must be at least 2");
  const Trajectory est = estimate_long(seq, window, factory, opts);

  const fs::path out(a.out);
  fs::create_directories(out);
  write_tum(out / "trajectory.tum", est);
  json report = {{"frames", est.size()}, {"window", std::min(window, seq.size())}};
  if (has_gt) {
    const AlignmentResult al = align_trajectories(est, b.trajectory, true);
    const AlignmentResult rigid = align_trajectories(est, b.trajectory, false);
    report["ate"] = {{"sim3", al.ate}, {"se3", rigid.ate}, {"scale", al.transform.scale}};
    write_png(out / "trajectory.png", plot_trajectory_topdown(al.aligned, &b.trajectory));
    std::cout << "ATE (similarity aligned): " << al.ate << "\n";
  } else {
    report["ate"] = nullptr;
    report["ate_note"] = "absent: sequence has no ground-truth poses";
    write_png(out / "trajectory.png", plot_trajectory_topdown(est, nullptr));
    std::cout << "ATE: absent (no ground truth)\n";
  }
  write_json(out / "ate.json", report);
  write_json(out / "config.json", {{"command", "odometry"},
                                   {"sequence", a.sequence},
                                   {"window", window},
                                   {"mode", mode}});
  return 0;
}

// ---- render ---------------------------------------------------------------------------

struct RenderArgs {
  std::string sequence, checkpoint, contexts, poses, out;
  bool oracle_field = false;
  std::size_t n_samples = 0;
};

int run_render(const RenderArgs& a) {
  if (a.oracle_field == !a.checkpoint.empty()) throw UsageError("give exactly one of --oracle-field or --checkpoint");
  const SyntheticBundle b = load_sequence(a.sequence);
  const std::size_t n = b.frames.size();
  const std::vector<std::size_t> contexts =
      a.contexts.empty() ? default_contexts(n) : parse_indices(a.contexts);
  for (std::size_t c : contexts) {
    if (c >= n) {
      throw UsageError("context index " + std::to_string(c) + " out of range (sequence has " + std::to_string(n) +
                       " frames)");
    }
  }
  Trajectory targets = b.trajectory;
  if (!a.poses.empty()) {
    require_exists(a.poses, "target pose file");
    targets = read_tum(a.poses);
  }
  // Query frame: camera of the first context.
  const SE3Pose world_to_query = b.trajectory[contexts.front()].pose.inverse();

  std::optional<Model> model;
  RenderOptions ro;
  RadianceFn field;
  json mode;
  std::vector<Tensor> features;
  if (a.oracle_field) {
    if (!b.scene) throw UsageError("--oracle-field needs scene.json in " + a.sequence);
    field = b.scene->as_field(b.trajectory[contexts.front()].pose);
    ro.n_samples = 128;
    ro.near = 0.1;
    ro.far = 12.0;
    mode = {{"field", "oracle"}};
  } else {
    require_exists(a.checkpoint, "checkpoint");
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    model.emplace(ck.config);
    restore(*model, ck);
    ro = ck.config.render_options();
    std::vector<ContextView> views;
    for (std::size_t c : contexts) {
      views.push_back({model->field.encode(b.frames[c]), TensorPose::constant(world_to_query * b.trajectory[c].pose)});
    }
    field = model->field.bind(std::move(views), b.k);
    mode = {{"field", "learned"}, {"checkpoint", a.checkpoint}};
  }
  if (a.n_samples) ro.n_samples = a.n_samples;

  NoGradGuard no_grad;
  const fs::path out(a.out);
  fs::create_directories(out);
  double mae_sum = 0.0;
  std::size_t compared = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const TensorPose cam = TensorPose::constant(world_to_query * targets[i].pose);
    const ImageRender r = render_image(field, cam, b.k, ro);
    char name[32];
    std::snprintf(name, sizeof name, "%04zu", i);
    write_png(out / (std::string(name) + ".png"), image_from_tensor(r.color));
    // z-depth, like the bundle depth maps.
    const Tensor dirs = pixel_directions(b.k, pixel_grid(b.k));
    std::vector<double> z(r.depth.numel());
    for (std::size_t p = 0; p < z.size(); ++p) z[p] = r.depth[p] * dirs[3 * p + 2];
    write_pfm(out / (std::string(name) + "_depth.pfm"), pfm_from_tensor(Tensor::from({b.k.height, b.k.width}, z)));
    if (a.poses.empty()) {
      double s = 0.0;
      for (std::size_t p = 0; p < r.color.numel(); ++p) s += std::abs(r.color[p] - b.frames[i][p]);
      mae_sum += s / static_cast<double>(r.color.numel());
      ++compared;
    }
  }
  json report = {{"views", targets.size()}, {"contexts", contexts}};
  if (compared) {
    report["mae_vs_frames"] = mae_sum / static_cast<double>(compared);
    std::cout << "mean absolute error vs recorded frames: " << mae_sum / static_cast<double>(compared) << "\n";
  }
  write_json(out / "report.json", report);
  write_json(out / "config.json", {{"command", "render"},
                                   {"sequence", a.sequence},
                                   {"contexts", contexts},
                                   {"poses", a.poses},
                                   {"n_samples", ro.n_samples},
                                   {"near", ro.near},
                                   {"far", ro.far},
                                   {"mode", mode}});
  return 0;
}

// ---- verify -----------------------------------------------------------------------------

int run_verify_cmd(const std::string& suite, const std::string& mutate) {
  if (suite != "all" && std::find(verify_suite_names().begin(), verify_suite_names().end(), suite) ==
                            verify_suite_names().end()) {
    throw UsageError("unknown verify suite '" + suite + "' (expected gradcheck, procrustes, renderer or all)");
  }
  if (!mutate.empty()) testing::inject_backward_sign_error(mutate);
  bool ok = true;
  for (const auto& r : run_verify(suite)) {
    std::cout << r.format();
    ok = ok && r.pass();
  }
  std::cout << (ok ? "verify: all checks passed\n" : "verify: FAILED\n");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sfpose: pose estimation from scene flow through a conditioned radiance field"};
  app.require_subcommand(1);
  std::size_t threads = 0;
  app.add_option("--threads", threads, "Cap on worker threads (0 = all cores)");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic sequence with ground truth");
  synth->add_option("--scene", sa.scene, "Scene JSON file, or demo:N")->capture_default_str();
  synth->add_option("--kind", sa.kind, "static|orbit|dolly|rotation|random-smooth")->capture_default_str();
  synth->add_option("--frames", sa.frames)->capture_default_str();
  synth->add_option("--width", sa.width)->capture_default_str();
  synth->add_option("--height", sa.height)->capture_default_str();
  synth->add_option("--fov", sa.fov, "Horizontal field of view, degrees")->capture_default_str();
  synth->add_option("--radius", sa.radius)->capture_default_str();
  synth->add_option("--camera-height", sa.cam_height)->capture_default_str();
  synth->add_option("--step", sa.step, "Degrees or world units per frame")->capture_default_str();
  synth->add_option("--jitter", sa.jitter)->capture_default_str();
  synth->add_option("--seed", sa.seed)->capture_default_str();
  synth->add_option("--corrupt-fraction", sa.corrupt_fraction)->capture_default_str();
  synth->add_option("--corrupt-magnitude", sa.corrupt_magnitude, "Pixels")->capture_default_str();
  synth->add_option("--out", sa.out)->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train the field and confidence network");
  train->add_option("--data", ta.data, "Sequence directories")->required()->expected(1, -1);
  train->add_option("--config", ta.config, "JSON training config");
  train->add_option("--resume", ta.resume, "Checkpoint to continue from");
  train->add_option("--steps", ta.steps, "Steps to run in this invocation");
  train->add_option("--seed", ta.seed);
  train->add_option("--lr", ta.lr);
  train->add_option("--checkpoint-every", ta.checkpoint_every);
  train->add_option("--out", ta.out)->required();

  OdometryArgs oa;
  auto* odo = app.add_subcommand("odometry", "Estimate a camera trajectory");
  odo->add_option("--sequence", oa.sequence)->required();
  odo->add_option("--checkpoint", oa.checkpoint);
  odo->add_flag("--oracle-depth", oa.oracle_depth, "Use the ground-truth scene geometry");
  odo->add_flag("--oracle-weights", oa.oracle_weights, "Zero weight on known occluded or corrupted flow");
  odo->add_option("--window", oa.window, "Frames per window (0 = whole sequence)")->capture_default_str();
  odo->add_option("--out", oa.out)->required();

  RenderArgs ra;
  auto* render = app.add_subcommand("render", "Render novel views from context frames");
  render->add_option("--sequence", ra.sequence)->required();
  render->add_option("--checkpoint", ra.checkpoint);
  render->add_flag("--oracle-field", ra.oracle_field, "Render the ground-truth scene");
  render->add_option("--contexts", ra.contexts, "Comma-separated frame indices (default first,middle,last)");
  render->add_option("--poses", ra.poses, "TUM file of target poses (default: the sequence's poses)");
  render->add_option("--samples", ra.n_samples, "Samples per ray");
  render->add_option("--out", ra.out)->required();

  std::string suite = "all", mutate;
  auto* verify = app.add_subcommand("verify", "Run self-check suites");
  verify->add_option("suite", suite, "gradcheck|procrustes|renderer|all")->capture_default_str();
  verify->add_option("--inject-sign-error", mutate, "Flip the backward rule of an op (mutation test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    set_max_threads(threads);
    if (*synth) return run_synth(sa);
    if (*train) return run_train(ta);
    if (*odo) return run_odometry(oa);
    if (*render) return run_render(ra);
    if (*verify) return run_verify_cmd(suite, mutate);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const sfpose::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
