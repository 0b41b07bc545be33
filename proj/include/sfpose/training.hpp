#pragma once

// End-to-end training of the conditioned field and the confidence network.
// Poses are never free variables: every step re-estimates them with the
// weighted Procrustes solver and backpropagates through it.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sfpose/fields.hpp"
#include "sfpose/losses.hpp"
#include "sfpose/odometry.hpp"
#include "sfpose/sceneflow_pose.hpp"
#include "sfpose/synth.hpp"

namespace sfpose {

struct LossWeights {
  double multi = 1.0;
  double single = 1.0;
  double pose = 10.0;
};

struct TrainConfig {
  std::uint64_t seed = 1;
  double lr = 5e-4;
  double clip = 1.0;  // global gradient-norm cap; <= 0 disables
  LossWeights weights;
  std::size_t window = 5;  // frames per training window
  std::size_t batch = 1;   // windows per step
  std::size_t steps = 500;
  std::size_t n_samples = 32;
  double near = 1.0;
  double far = 8.0;
  std::size_t photometric_pixels = 64;  // multi-context pixels per frame; 0 = all
  std::size_t max_points = 4096;        // correspondences per pair
  std::size_t odometry_window = 15;
  FieldConfig field;
  std::size_t psi_hidden = 32;

  nlohmann::json to_json() const;
  // Missing keys keep defaults; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::filesystem::path& path);
  RenderOptions render_options() const;
};

struct LossReport {
  std::size_t step = 0;
  double l_rgb_multi = 0.0;
  double l_rgb_single = 0.0;
  double l_pose = 0.0;
  double total = 0.0;
  LossWeights weights;

  static std::string csv_header();
  std::string csv_row() const;
  std::string describe() const;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  explicit NonFiniteLossError(const LossReport& r);
  const LossReport& report() const { return report_; }

 private:
  LossReport report_;
};

class Model {
 public:
  explicit Model(const TrainConfig& config);

  ConditionedField field;
  ConfidenceNet psi;

  ParameterList parameters() const;
  // Single-context renders of each frame at identity pose, without gradients.
  SourceFactory sources(const RenderOptions& opts) const;
};

class Adam {
 public:
  Adam() = default;
  Adam(const ParameterList& params, double lr, double clip);

  // Applies one update from the parameters' accumulated gradients, then
  // clears them. Returns the pre-clip gradient norm.
  double step(const ParameterList& params);
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  std::size_t t = 0;
  std::vector<std::vector<double>> m, v;

 private:
  double lr_ = 5e-4, clip_ = 1.0;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
};

struct TrainingWindow {
  std::vector<Tensor> frames;
  std::vector<FlowField> flows;
  std::vector<std::vector<std::uint8_t>> outliers;  // per flow, for evaluation only
  Intrinsics k;
};

TrainingWindow make_window(const SyntheticBundle& bundle, std::size_t first, std::size_t length);

struct ForwardPass {
  std::vector<TensorPose> poses;  // camera -> first frame
  std::vector<PairResult> pairs;  // pairs[t]: frames t -> t+1
  Tensor total;
  LossReport report;
};

ForwardPass forward_window(const Model& model, const TrainingWindow& window, const TrainConfig& config,
                           std::uint64_t seed);

// Forward, backward and one Adam update over a batch of windows.
LossReport train_step(Model& model, Adam& optimizer, const std::vector<TrainingWindow>& batch,
                      const TrainConfig& config, std::size_t step);

// Samples random windows from a set of bundles and steps the optimizer.
class Trainer {
 public:
  Trainer(Model& model, Adam& optimizer, std::vector<SyntheticBundle> bundles, TrainConfig config,
          std::size_t first_step = 0);
  LossReport step();
  std::size_t next_step() const { return next_step_; }

 private:
  Model* model_;
  Adam* optimizer_;
  std::vector<SyntheticBundle> bundles_;
  TrainConfig config_;
  std::size_t next_step_;
};

// Test-time adaptation on subsequences of one video; zero steps leaves
// the model untouched.
std::vector<LossReport> adapt(Model& model, Adam& optimizer, const SyntheticBundle& video, const TrainConfig& config,
                              std::size_t steps, std::size_t first_step = 0);

// ---- evaluation --------------------------------------------------------------------

struct WindowEvaluation {
  Trajectory estimated;
  double ate = 0.0;
};

// Odometry with the learned model over frames [first, first+length) of a
// bundle, similarity-aligned to ground truth.
WindowEvaluation evaluate_window(const Model& model, const SyntheticBundle& bundle, std::size_t first,
                                 std::size_t length, const TrainConfig& config);

struct ConfidenceStats {
  double mean_outlier = 0.0;
  double mean_inlier = 0.0;
  std::size_t outliers = 0, inliers = 0;
};

// Mean confidence on corrupted vs clean correspondences of a bundle.
ConfidenceStats confidence_stats(const Model& model, const SyntheticBundle& bundle, const TrainConfig& config);

// ---- checkpoints ----------------------------------------------------------------------

struct Checkpoint {
  TrainConfig config;
  std::size_t step = 0;
  ParameterList parameters;
  std::optional<Adam> optimizer;
};

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Adam& optimizer,
                     const TrainConfig& config, std::size_t step);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Copies checkpoint values into a model built from the checkpoint's config.
void restore(Model& model, const Checkpoint& checkpoint);

}  // namespace sfpose
