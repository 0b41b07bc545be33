#include "sfpose/training.hpp"

#include "sfpose/io_formats.hpp"
#include "sfpose/random.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace sfpose {

// ---- config ------------------------------------------------------------------------

nlohmann::json TrainConfig::to_json() const {
  return {{"seed", seed},
          {"lr", lr},
          {"clip", clip},
          {"weights", {{"multi", weights.multi}, {"single", weights.single}, {"pose", weights.pose}}},
          {"window", window},
          {"batch", batch},
          {"steps", steps},
          {"n_samples", n_samples},
          {"near", near},
          {"far", far},
          {"photometric_pixels", photometric_pixels},
          {"max_points", max_points},
          {"odometry_window", odometry_window},
          {"field",
           {{"encoder_channels", field.encoder_channels},
            {"hidden", field.hidden},
            {"pe_octaves", field.pe_octaves},
            {"pe_base_frequency", field.pe_base_frequency},
            {"density_bias", field.density_bias},
            {"image_skip", field.image_skip},
            {"seed", field.seed}}},
          {"psi_hidden", psi_hidden}};
}

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("config: unknown key '" + key + "' in " + where);
  }
}

}  // namespace

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  reject_unknown(j, {"seed", "lr", "clip", "weights", "window", "batch", "steps", "n_samples", "near", "far",
                     "photometric_pixels", "max_points", "odometry_window", "field", "psi_hidden"},
                 "config");
  TrainConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.lr = j.value("lr", c.lr);
    c.clip = j.value("clip", c.clip);
    if (j.contains("weights")) {
      const auto& w = j.at("weights");
      reject_unknown(w, {"multi", "single", "pose"}, "weights");
      c.weights.multi = w.value("multi", c.weights.multi);
      c.weights.single = w.value("single", c.weights.single);
      c.weights.pose = w.value("pose", c.weights.pose);
    }
    c.window = j.value("window", c.window);
    c.batch = j.value("batch", c.batch);
    c.steps = j.value("steps", c.steps);
    c.n_samples = j.value("n_samples", c.n_samples);
    c.near = j.value("near", c.near);
    c.far = j.value("far", c.far);
    c.photometric_pixels = j.value("photometric_pixels", c.photometric_pixels);
    c.max_points = j.value("max_points", c.max_points);
    c.odometry_window = j.value("odometry_window", c.odometry_window);
    c.psi_hidden = j.value("psi_hidden", c.psi_hidden);
    if (j.contains("field")) {
      const auto& f = j.at("field");
      reject_unknown(f, {"encoder_channels", "hidden", "pe_octaves", "pe_base_frequency", "density_bias",
                         "image_skip", "seed"},
                     "field");
      c.field.encoder_channels = f.value("encoder_channels", c.field.encoder_channels);
      c.field.hidden = f.value("hidden", c.field.hidden);
      c.field.pe_octaves = f.value("pe_octaves", c.field.pe_octaves);
      c.field.pe_base_frequency = f.value("pe_base_frequency", c.field.pe_base_frequency);
      c.field.density_bias = f.value("density_bias", c.field.density_bias);
      c.field.image_skip = f.value("image_skip", c.field.image_skip);
      c.field.seed = f.value("seed", c.field.seed);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  if (c.window < 2) throw std::invalid_argument("config: window must be at least 2");
  if (c.batch < 1) throw std::invalid_argument("config: batch must be at least 1");
  if (c.n_samples < 2) throw std::invalid_argument("config: n_samples must be at least 2");
  if (!(c.near > 0 && c.near < c.far)) throw std::invalid_argument("config: need 0 < near < far");
  if (!(c.lr >= 0)) throw std::invalid_argument("config: lr must be >= 0");
  if (c.weights.multi < 0 || c.weights.single < 0 || c.weights.pose < 0) {
    throw std::invalid_argument("config: loss weights must be >= 0");
  }
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

RenderOptions TrainConfig::render_options() const {
  RenderOptions r;
  r.n_samples = n_samples;
  r.near = near;
  r.far = far;
  return r;
}

// ---- reports ----------------------------------------------------------------------

std::string LossReport::csv_header() { return "step,l_rgb_multi,l_rgb_single,l_pose,total"; }

std::string LossReport::csv_row() const {
  std::ostringstream s;
  s.precision(17);
  s << step << ',' << l_rgb_multi << ',' << l_rgb_single << ',' << l_pose << ',' << total;
  return s.str();
}

std::string LossReport::describe() const {
  std::ostringstream s;
  s << "step " << step << ": l_rgb_multi=" << l_rgb_multi << " (w " << weights.multi << "), l_rgb_single=" << l_rgb_single
    << " (w " << weights.single << "), l_pose=" << l_pose << " (w " << weights.pose << "), total=" << total;
  return s.str();
}

NonFiniteLossError::NonFiniteLossError(const LossReport& r)
    : std::runtime_error("non-finite loss, aborting: " + r.describe()), report_(r) {}

// ---- model --------------------------------------------------------------------------

Model::Model(const TrainConfig& config)
    : field(config.field), psi(field.feature_channels(), config.psi_hidden, config.field.seed + 1000) {}

ParameterList Model::parameters() const {
  ParameterList p;
  field.collect("field", p);
  psi.collect("psi", p);
  return p;
}

SourceFactory Model::sources(const RenderOptions& opts) const {
  return [this, opts](const VideoSequence& seq, std::size_t i) -> std::unique_ptr<SurfaceSource> {
    NoGradGuard no_grad;
    const Tensor& frame = seq.frames.at(i);
    Tensor features = field.encode(frame);
    ImageRender r = render_image(field.bind({ContextView{features, TensorPose::identity()}}, seq.k),
                                 TensorPose::identity(), seq.k, opts);
    return std::make_unique<RenderedSurface>(std::move(r), frame, std::move(features));
  };
}

// ---- optimizer ------------------------------------------------------------------------

Adam::Adam(const ParameterList& params, double lr, double clip) : lr_(lr), clip_(clip) {
  for (const auto& p : params) {
    m.emplace_back(p.tensor.numel(), 0.0);
    v.emplace_back(p.tensor.numel(), 0.0);
  }
}

double Adam::step(const ParameterList& params) {
  if (params.size() != m.size()) throw std::logic_error("adam: parameter list changed");
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double factor = (clip_ > 0 && norm > clip_) ? clip_ / norm : 1.0;
  ++t;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor w = params[i].tensor;
    if (w.numel() != m[i].size()) throw std::logic_error("adam: parameter shape changed: " + params[i].name);
    if (!w.has_grad()) continue;
    const auto g = w.grad();
    auto x = w.mutable_data();
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double gj = g[j] * factor;
      m[i][j] = beta1_ * m[i][j] + (1 - beta1_) * gj;
      v[i][j] = beta2_ * v[i][j] + (1 - beta2_) * gj * gj;
      x[j] -= lr_ * (m[i][j] / bc1) / (std::sqrt(v[i][j] / bc2) + eps_);
    }
    w.zero_grad();
  }
  return norm;
}

// ---- forward / step -------------------------------------------------------------------

TrainingWindow make_window(const SyntheticBundle& bundle, std::size_t first, std::size_t length) {
  if (length < 2 || first + length > bundle.frames.size()) {
    throw std::invalid_argument("make_window: frames [" + std::to_string(first) + ", " +
                                std::to_string(first + length) + ") outside a " +
                                std::to_string(bundle.frames.size()) + "-frame bundle");
  }
  TrainingWindow w;
  w.k = bundle.k;
  for (std::size_t i = first; i < first + length; ++i) w.frames.push_back(bundle.frames[i]);
  for (std::size_t i = first; i + 1 < first + length; ++i) {
    w.flows.push_back(bundle.flows[i]);
    w.outliers.push_back(i < bundle.outliers.size() ? bundle.outliers[i] : std::vector<std::uint8_t>());
  }
  return w;
}

ForwardPass forward_window(const Model& model, const TrainingWindow& window, const TrainConfig& config,
                           std::uint64_t seed) {
  const std::size_t n = window.frames.size();
  const RenderOptions ro = config.render_options();
  std::vector<Tensor> features;
  for (const auto& f : window.frames) features.push_back(model.field.encode(f));
  LearnedProvider provider(model.field, features, window.k);

  std::vector<ImageRender> renders;
  std::vector<RenderedSurface> sources;
  renders.reserve(n);
  sources.reserve(n);
  for (std::size_t t = 0; t < n; ++t) {
    renders.push_back(render_image(provider.single(t), TensorPose::identity(), window.k, ro));
    sources.emplace_back(renders.back(), window.frames[t], features[t]);
  }

  ForwardPass out;
  out.poses.push_back(TensorPose::identity());
  for (std::size_t t = 0; t + 1 < n; ++t) {
    PairOptions po;
    po.lift.max_points = config.max_points;
    po.lift.seed = seed + 31 * t;
    po.weighting = Weighting::confidence;
    po.confidence = &model.psi;
    try {
      out.pairs.push_back(pose_from_frame_pair(sources[t + 1], sources[t], window.flows[t], po));
    } catch (const DegenerateGeometryError& e) {
      throw DegenerateGeometryError("frames " + std::to_string(t) + "->" + std::to_string(t + 1) + ": " + e.what());
    }
    out.poses.push_back(compose(out.poses.back(), out.pairs.back().pose.inverse()));
  }

  PhotometricOptions popt;
  popt.render = ro;
  popt.pixels_per_frame = config.photometric_pixels;
  popt.seed = seed;
  const PhotometricTerms photo =
      photometric_loss(window.frames, out.poses, provider, window.k, default_contexts(n), popt, &renders);
  std::vector<SurfaceMap> surfaces;
  for (const auto& r : renders) surfaces.push_back({r.surface, r.opacity});
  const Tensor l_pose = pose_flow_loss(window.flows, out.poses, surfaces, window.k);

  const LossWeights& w = config.weights;
  out.total = add(add(scale(photo.multi, w.multi), scale(photo.single, w.single)), scale(l_pose, w.pose));
  LossReport& r = out.report;
  r.l_rgb_multi = photo.multi.item();
  r.l_rgb_single = photo.single.item();
  r.l_pose = l_pose.item();
  r.total = out.total.item();
  r.weights = w;
  return out;
}

namespace {

void check_report(const LossReport& r) {
  if (!std::isfinite(r.total) || !std::isfinite(r.l_rgb_multi) || !std::isfinite(r.l_rgb_single) ||
      !std::isfinite(r.l_pose)) {
    throw NonFiniteLossError(r);
  }
  if (r.l_rgb_multi < 0 || r.l_rgb_single < 0 || r.l_pose < 0) throw std::logic_error("negative loss term: " + r.describe());
  const double expect = r.weights.multi * r.l_rgb_multi + r.weights.single * r.l_rgb_single + r.weights.pose * r.l_pose;
  if (std::abs(expect - r.total) > 1e-9 * std::max(1.0, std::abs(expect))) {
    throw std::logic_error("total loss is not the weighted sum of its terms: " + r.describe());
  }
}

std::uint64_t step_seed(std::uint64_t seed, std::size_t step, std::size_t item) {
  return seed * 1000003ULL + static_cast<std::uint64_t>(step) * 7919ULL + item * 104729ULL;
}

}  // namespace

LossReport train_step(Model& model, Adam& optimizer, const std::vector<TrainingWindow>& batch,
                      const TrainConfig& config, std::size_t step) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const ParameterList params = model.parameters();
  for (const auto& p : params) p.tensor.node()->grad.clear();
  LossReport mean_report;
  mean_report.step = step;
  mean_report.weights = config.weights;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    ForwardPass fp = forward_window(model, batch[b], config, step_seed(config.seed, step, b));
    fp.report.step = step;
    check_report(fp.report);
    backward(scale(fp.total, inv));
    mean_report.l_rgb_multi += inv * fp.report.l_rgb_multi;
    mean_report.l_rgb_single += inv * fp.report.l_rgb_single;
    mean_report.l_pose += inv * fp.report.l_pose;
    mean_report.total += inv * fp.report.total;
  }
  optimizer.step(params);
  return mean_report;
}

Trainer::Trainer(Model& model, Adam& optimizer, std::vector<SyntheticBundle> bundles, TrainConfig config,
                 std::size_t first_step)
    : model_(&model), optimizer_(&optimizer), bundles_(std::move(bundles)), config_(std::move(config)),
      next_step_(first_step) {
  if (bundles_.empty()) throw std::invalid_argument("trainer: no training bundles");
  for (const auto& b : bundles_) {
    if (b.frames.size() < config_.window) {
      throw std::invalid_argument("trainer: bundle with " + std::to_string(b.frames.size()) +
                                  " frames is shorter than the training window");
    }
  }
}

LossReport Trainer::step() {
  const std::size_t step = next_step_++;
  Rng rng(step_seed(config_.seed, step, 977));
  // A window can leave too few valid correspondences (e.g. a collapsed
  // density early in training); draw another one a few times before giving up.
  constexpr int kAttempts = 5;
  for (int attempt = 1;; ++attempt) {
    std::vector<TrainingWindow> batch;
    for (std::size_t b = 0; b < config_.batch; ++b) {
      const SyntheticBundle& bundle = bundles_[rng.index(bundles_.size())];
      const std::size_t first = rng.index(bundle.frames.size() - config_.window + 1);
      batch.push_back(make_window(bundle, first, config_.window));
    }
    try {
      return train_step(*model_, *optimizer_, batch, config_, step);
    } catch (const DegenerateGeometryError&) {
      if (attempt == kAttempts) throw;
    }
  }
}

std::vector<LossReport> adapt(Model& model, Adam& optimizer, const SyntheticBundle& video, const TrainConfig& config,
                              std::size_t steps, std::size_t first_step) {
  std::vector<LossReport> out;
  if (steps == 0) return out;
  Trainer trainer(model, optimizer, {video}, config, first_step);
  for (std::size_t i = 0; i < steps; ++i) out.push_back(trainer.step());
  return out;
}

// ---- evaluation ----------------------------------------------------------------------

WindowEvaluation evaluate_window(const Model& model, const SyntheticBundle& bundle, std::size_t first,
                                 std::size_t length, const TrainConfig& config) {
  const VideoSequence seq = bundle.sequence();
  OdometryOptions opts;
  opts.pair.weighting = Weighting::confidence;
  opts.pair.confidence = &model.psi;
  WindowEvaluation e;
  e.estimated = estimate_window(seq, first, first + length - 1, model.sources(config.render_options()), opts);
  std::vector<TimedPose> gt(bundle.trajectory.poses().begin() + static_cast<std::ptrdiff_t>(first),
                            bundle.trajectory.poses().begin() + static_cast<std::ptrdiff_t>(first + length));
  e.ate = align_trajectories(e.estimated, Trajectory(std::move(gt)), true).ate;
  return e;
}

ConfidenceStats confidence_stats(const Model& model, const SyntheticBundle& bundle, const TrainConfig& config) {
  NoGradGuard no_grad;
  const VideoSequence seq = bundle.sequence();
  const auto factory = model.sources(config.render_options());
  ConfidenceStats s;
  double sum_out = 0.0, sum_in = 0.0;
  std::unique_ptr<SurfaceSource> prev = factory(seq, 0);
  for (std::size_t t = 1; t < seq.size(); ++t) {
    std::unique_ptr<SurfaceSource> cur = factory(seq, t);
    const Correspondences c = lift_correspondences(*cur, *prev, seq.flows[t - 1]);
    const Tensor w = model.psi(*cur, *prev, c);
    const auto& mask = bundle.outliers.at(t - 1);
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (mask[c.pixel_index[i]]) {
        sum_out += w[i];
        ++s.outliers;
      } else {
        sum_in += w[i];
        ++s.inliers;
      }
    }
    prev = std::move(cur);
  }
  s.mean_outlier = s.outliers ? sum_out / static_cast<double>(s.outliers) : 0.0;
  s.mean_inlier = s.inliers ? sum_in / static_cast<double>(s.inliers) : 0.0;
  return s;
}

// ---- checkpoints --------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[8] = {'S', 'F', 'P', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void doubles(std::span<const double> v) {
    u64(v.size());
    for (double d : v) f64(d);
  }
  Bytes out;
};

class Reader {
 public:
  explicit Reader(const Bytes& b) : b_(b) {}
  void need(std::size_t n) {
    if (b_.size() - pos_ < n) throw ParseError("checkpoint", b_.size(), "truncated (need " + std::to_string(n) + " more bytes)");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<double> doubles() {
    const std::size_t at = pos_;
    const std::uint64_t n = u64();
    if (n > (b_.size() - pos_) / 8) throw ParseError("checkpoint", at, "array length exceeds file size");
    std::vector<double> v(n);
    for (auto& d : v) d = f64();
    return v;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  const Bytes& b_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Adam& optimizer,
                     const TrainConfig& config, std::size_t step) {
  Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u64(step);
  w.str(config.to_json().dump());
  const ParameterList params = model.parameters();
  w.u64(params.size());
  for (const auto& p : params) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.ndim()));
    for (std::size_t d : p.tensor.shape()) w.u64(d);
    w.doubles(p.tensor.data());
  }
  const bool has_opt = optimizer.m.size() == params.size();
  w.u32(has_opt ? 1 : 0);
  if (has_opt) {
    w.f64(optimizer.lr());
    w.u64(optimizer.t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      w.doubles(optimizer.m[i]);
      w.doubles(optimizer.v[i]);
    }
  }
  write_file(path, w.out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const Bytes bytes = read_file(path);
  if (bytes.size() < sizeof kCheckpointMagic) throw ParseError("checkpoint", bytes.size(), "truncated header");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw ParseError("checkpoint", 0, "bad magic (not an sfpose checkpoint)");
  }
  Reader body(bytes);
  body.u64();  // magic, checked above
  const std::size_t vpos = body.pos();
  const std::uint32_t version = body.u32();
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint", vpos, "unsupported version " + std::to_string(version));
  }
  Checkpoint c;
  c.step = body.u64();
  const std::size_t cpos = body.pos();
  try {
    c.config = TrainConfig::from_json(nlohmann::json::parse(body.str()));
  } catch (const std::exception& e) {
    throw ParseError("checkpoint", cpos, std::string("bad embedded config: ") + e.what());
  }
  const std::uint64_t count = body.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name = body.str();
    const std::uint32_t nd = body.u32();
    if (nd > 8) throw ParseError("checkpoint", body.pos(), "implausible tensor rank");
    Shape shape(nd);
    for (auto& d : shape) d = body.u64();
    const std::size_t at = body.pos();
    std::vector<double> values = body.doubles();
    if (values.size() != numel_of(shape)) throw ParseError("checkpoint", at, "tensor '" + nt.name + "' size mismatch");
    nt.tensor = Tensor::from(shape, std::move(values));
    c.parameters.push_back(std::move(nt));
  }
  if (body.u32() == 1) {
    Adam a;
    a.set_lr(body.f64());
    a.t = body.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
      a.m.push_back(body.doubles());
      a.v.push_back(body.doubles());
    }
    c.optimizer = std::move(a);
  }
  if (!body.done()) throw ParseError("checkpoint", body.pos(), "trailing bytes");
  return c;
}

void restore(Model& model, const Checkpoint& checkpoint) {
  const ParameterList params = model.parameters();
  if (params.size() != checkpoint.parameters.size()) {
    throw std::invalid_argument("restore: checkpoint has " + std::to_string(checkpoint.parameters.size()) +
                                " tensors, model has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = checkpoint.parameters[i];
    if (src.name != params[i].name || src.tensor.shape() != params[i].tensor.shape()) {
      throw std::invalid_argument("restore: tensor '" + src.name + "' does not match model tensor '" +
                                  params[i].name + "'");
    }
    Tensor dst = params[i].tensor;
    std::copy(src.tensor.data().begin(), src.tensor.data().end(), dst.mutable_data().begin());
  }
}

}  // namespace sfpose
