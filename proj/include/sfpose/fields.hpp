#pragma once

// Radiance fields: point -> (density, color).
//
// AnalyticScene is a closed-form oracle built from simple primitives.
// ConditionedField is the learnable image-conditioned field: per-image
// convolutional features are sampled at each point's projection into every
// context view and decoded together with the point's camera-frame
// coordinates, averaging over context views.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sfpose/geometry.hpp"
#include "sfpose/nn.hpp"
#include "sfpose/tensor.hpp"

namespace sfpose {

struct RadianceSample {
  double sigma = 0.0;
  Vec3 color = Vec3::Zero();
};

// Batched field output for N query points.
struct FieldOutput {
  Tensor sigma;  // {N}
  Tensor color;  // N x 3
};

// points: N x 3 in the field's query frame.
using RadianceFn = std::function<FieldOutput(const Tensor& points)>;

// ---- analytic oracle ---------------------------------------------------------

struct Albedo {
  enum class Kind { constant, checker, noise };
  Kind kind = Kind::constant;
  Vec3 color_a = Vec3(0.8, 0.8, 0.8);
  Vec3 color_b = Vec3(0.2, 0.2, 0.2);
  double scale = 1.0;  // checker cell size / noise feature size (local units)
  std::uint64_t seed = 0;

  Vec3 eval(const Vec3& local) const;
};

enum class PrimitiveKind { sphere, box, plane, medium };

// Solid primitives (sphere, box, plane) carry `amplitude` density inside and
// ramp smoothly to zero across a shell of width `softness` outside their
// surface. A plane is a slab: local |x| <= e.x, |y| <= e.y, 0 <= z <= e.z,
// with its textured face at local z = 0. A medium is a box of constant
// density with no surface.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::sphere;
  SE3Pose pose;                  // local -> world
  Vec3 extent = Vec3::Ones();    // sphere: (radius, -, -); box/medium: half extents; plane: see above
  double amplitude = 1.0;
  double softness = 0.0;
  Albedo albedo;

  // Signed distance in world units, negative inside.
  double signed_distance(const Vec3& world) const;
  double density(const Vec3& world) const;
  bool solid() const { return kind != PrimitiveKind::medium; }
};

struct SurfaceHit {
  double t = 0.0;  // ray parameter
  Vec3 point = Vec3::Zero();
  std::size_t primitive = 0;
};

class AnalyticScene {
 public:
  AnalyticScene() = default;
  explicit AnalyticScene(std::vector<Primitive> primitives) : primitives_(std::move(primitives)) {}

  const std::vector<Primitive>& primitives() const { return primitives_; }
  void add(const Primitive& p) { primitives_.push_back(p); }

  RadianceSample query(const Vec3& x) const;
  std::vector<RadianceSample> query(const std::vector<Vec3>& xs) const;
  // Adapter for the renderer; `to_world` maps query-frame points to world.
  RadianceFn as_field(const SE3Pose& to_world = SE3Pose::identity()) const;

  // First intersection with a solid primitive's surface, t in [t_min, t_max].
  std::optional<SurfaceHit> intersect(const Vec3& origin, const Vec3& direction, double t_min = 0.0,
                                      double t_max = 1e30) const;
  // Albedo seen at a surface hit.
  Vec3 surface_color(const SurfaceHit& hit) const;
  bool inside_solid(const Vec3& x) const;
  // Closed-form integral of density along origin + t*dir, t in [t0, t1],
  // for media and hard (softness 0) solids.
  double optical_depth(const Vec3& origin, const Vec3& direction, double t0, double t1) const;

  nlohmann::json to_json() const;
  static AnalyticScene from_json(const nlohmann::json& j);
  static AnalyticScene load(const std::string& path);

 private:
  std::vector<Primitive> primitives_;
};

// Ray-segment interval [t_enter, t_exit] where the ray is inside the
// primitive's hard boundary, if any.
std::optional<std::pair<double, double>> ray_interval(const Primitive& p, const Vec3& origin, const Vec3& direction);

// ---- learnable image-conditioned field ----------------------------------------

struct FieldConfig {
  std::size_t encoder_channels = 16;
  std::size_t hidden = 32;
  std::size_t pe_octaves = 6;
  double pe_base_frequency = 0.5;  // radians per world unit at the lowest octave
  double density_bias = 0.0;
  bool image_skip = true;  // append the raw image to the feature map
  std::uint64_t seed = 1;
};

struct ContextView {
  Tensor features;  // H x W x C from ConditionedField::encode
  TensorPose pose;  // context camera -> query frame
};

class ConditionedField {
 public:
  explicit ConditionedField(const FieldConfig& config = {});

  const FieldConfig& config() const { return config_; }
  std::size_t feature_channels() const;

  // Image H x W x 3 in [0,1] -> pixel-aligned feature map H x W x C.
  Tensor encode(const Tensor& image) const;
  FieldOutput query(const std::vector<ContextView>& contexts, const Intrinsics& k, const Tensor& points) const;
  RadianceFn bind(std::vector<ContextView> contexts, const Intrinsics& k) const;

  void collect(const std::string& prefix, ParameterList& out) const;

 private:
  FieldConfig config_;
  Conv2d conv1_, conv2_, conv3_;
  Linear embed_, hidden_, head_hidden_, head_;
};

}  // namespace sfpose
