#include "sfpose/fields.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace sfpose {

namespace {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double lattice(std::int64_t x, std::int64_t y, std::int64_t z, std::uint64_t seed) {
  std::uint64_t h = mix64(seed);
  h = mix64(h ^ static_cast<std::uint64_t>(x));
  h = mix64(h ^ static_cast<std::uint64_t>(y));
  h = mix64(h ^ static_cast<std::uint64_t>(z));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(const Vec3& p, std::uint64_t seed) {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy), iz = static_cast<std::int64_t>(fz);
  const double tx = smooth(p.x() - fx), ty = smooth(p.y() - fy), tz = smooth(p.z() - fz);
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
        acc += w * lattice(ix + dx, iy + dy, iz + dz, seed);
      }
  return acc;
}

// Box signed distance, half extents h, box centered at the origin.
double box_sdf(const Vec3& p, const Vec3& h) {
  const Vec3 q = p.cwiseAbs() - h;
  return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
}

// Slab intersection with an axis-aligned box [lo, hi] in local coordinates.
std::optional<std::pair<double, double>> slab(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi) {
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d(a)) < 1e-300) {
      if (o(a) < lo(a) || o(a) > hi(a)) return std::nullopt;
      continue;
    }
    double ta = (lo(a) - o(a)) / d(a);
    double tb = (hi(a) - o(a)) / d(a);
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1) return std::nullopt;
  return std::make_pair(t0, t1);
}

Vec3 json_vec3(const nlohmann::json& j, const char* key, const Vec3& fallback) {
  if (!j.contains(key)) return fallback;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 3) throw std::invalid_argument(std::string("scene: '") + key + "' must be a 3-vector");
  return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

nlohmann::json vec3_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

}  // namespace

// ---- Albedo / primitives -----------------------------------------------------

Vec3 Albedo::eval(const Vec3& local) const {
  switch (kind) {
    case Kind::constant:
      return color_a;
    case Kind::checker: {
      const Vec3 c = local / scale;
      const auto parity = static_cast<std::int64_t>(std::floor(c.x()) + std::floor(c.y()) + std::floor(c.z()));
      return (parity & 1) ? color_b : color_a;
    }
    case Kind::noise: {
      const Vec3 c = local / scale;
      const double n = 0.65 * value_noise(c, seed) + 0.35 * value_noise(2.0 * c + Vec3(17.3, 5.1, 9.7), seed + 1);
      return color_a + n * (color_b - color_a);
    }
  }
  return color_a;
}

double Primitive::signed_distance(const Vec3& world) const {
  const Vec3 local = pose.inverse().apply(world);
  switch (kind) {
    case PrimitiveKind::sphere:
      return local.norm() - extent.x();
    case PrimitiveKind::box:
    case PrimitiveKind::medium:
      return box_sdf(local, extent);
    case PrimitiveKind::plane: {
      const Vec3 h(extent.x(), extent.y(), 0.5 * extent.z());
      return box_sdf(local - Vec3(0, 0, h.z()), h);
    }
  }
  return std::numeric_limits<double>::infinity();
}

double Primitive::density(const Vec3& world) const {
  const double sd = signed_distance(world);
  if (sd <= 0.0) return amplitude;
  if (softness > 0.0 && sd < softness) return amplitude * smooth(1.0 - sd / softness);
  return 0.0;
}

std::optional<std::pair<double, double>> ray_interval(const Primitive& p, const Vec3& origin, const Vec3& direction) {
  const SE3Pose inv = p.pose.inverse();
  const Vec3 o = inv.apply(origin);
  const Vec3 d = inv.rotation() * direction;
  switch (p.kind) {
    case PrimitiveKind::sphere: {
      const double r = p.extent.x();
      const double a = d.squaredNorm();
      const double b = o.dot(d);
      const double c = o.squaredNorm() - r * r;
      const double disc = b * b - a * c;
      if (disc < 0) return std::nullopt;
      const double s = std::sqrt(disc);
      // Stable root pair.
      const double q = -(b + std::copysign(s, b));
      double t0 = q / a, t1 = q != 0.0 ? c / q : -b / a;
      if (t0 > t1) std::swap(t0, t1);
      return std::make_pair(t0, t1);
    }
    case PrimitiveKind::box:
    case PrimitiveKind::medium:
      return slab(o, d, -p.extent, p.extent);
    case PrimitiveKind::plane:
      return slab(o, d, Vec3(-p.extent.x(), -p.extent.y(), 0.0), Vec3(p.extent.x(), p.extent.y(), p.extent.z()));
  }
  return std::nullopt;
}

// ---- AnalyticScene -------------------------------------------------------------

RadianceSample AnalyticScene::query(const Vec3& x) const {
  RadianceSample out;
  Vec3 weighted = Vec3::Zero();
  for (const auto& p : primitives_) {
    const double s = p.density(x);
    if (s <= 0.0) continue;
    out.sigma += s;
    weighted += s * p.albedo.eval(p.pose.inverse().apply(x));
  }
  if (out.sigma > 0.0) out.color = (weighted / out.sigma).cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

std::vector<RadianceSample> AnalyticScene::query(const std::vector<Vec3>& xs) const {
  std::vector<RadianceSample> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(query(x));
  return out;
}

RadianceFn AnalyticScene::as_field(const SE3Pose& to_world) const {
  return [scene = *this, to_world](const Tensor& points) {
    const std::size_t n = points.dim(0);
    std::vector<double> sigma(n), color(3 * n);
    const auto v = points.data();
    for (std::size_t i = 0; i < n; ++i) {
      const RadianceSample s = scene.query(to_world.apply(Vec3(v[3 * i], v[3 * i + 1], v[3 * i + 2])));
      sigma[i] = s.sigma;
      for (int c = 0; c < 3; ++c) color[3 * i + static_cast<std::size_t>(c)] = s.color(c);
    }
    return FieldOutput{Tensor::from({n}, std::move(sigma)), Tensor::from({n, 3}, std::move(color))};
  };
}

std::optional<SurfaceHit> AnalyticScene::intersect(const Vec3& origin, const Vec3& direction, double t_min,
                                                   double t_max) const {
  std::optional<SurfaceHit> best;
  for (std::size_t i = 0; i < primitives_.size(); ++i) {
    const auto& p = primitives_[i];
    if (!p.solid()) continue;
    const auto iv = ray_interval(p, origin, direction);
    if (!iv) continue;
    double t = iv->first;
    if (t < t_min) t = iv->second >= t_min ? t_min : std::numeric_limits<double>::infinity();
    if (t > t_max || !std::isfinite(t)) continue;
    if (!best || t < best->t) best = SurfaceHit{t, origin + t * direction, i};
  }
  return best;
}

Vec3 AnalyticScene::surface_color(const SurfaceHit& hit) const {
  const auto& p = primitives_.at(hit.primitive);
  return p.albedo.eval(p.pose.inverse().apply(hit.point)).cwiseMax(0.0).cwiseMin(1.0);
}

bool AnalyticScene::inside_solid(const Vec3& x) const {
  return std::any_of(primitives_.begin(), primitives_.end(),
                     [&](const Primitive& p) { return p.solid() && p.signed_distance(x) < 0.0; });
}

double AnalyticScene::optical_depth(const Vec3& origin, const Vec3& direction, double t0, double t1) const {
  double acc = 0.0;
  for (const auto& p : primitives_) {
    const auto iv = ray_interval(p, origin, direction);
    if (!iv) continue;
    const double a = std::max(iv->first, t0);
    const double b = std::min(iv->second, t1);
    if (b > a) acc += p.amplitude * (b - a) * direction.norm();
  }
  return acc;
}

nlohmann::json AnalyticScene::to_json() const {
  nlohmann::json prims = nlohmann::json::array();
  for (const auto& p : primitives_) {
    nlohmann::json j;
    switch (p.kind) {
      case PrimitiveKind::sphere: j["type"] = "sphere"; j["radius"] = p.extent.x(); break;
      case PrimitiveKind::box: j["type"] = "box"; j["half_extents"] = vec3_json(p.extent); break;
      case PrimitiveKind::medium: j["type"] = "medium"; j["half_extents"] = vec3_json(p.extent); break;
      case PrimitiveKind::plane:
        j["type"] = "plane";
        j["half_extents"] = nlohmann::json::array({p.extent.x(), p.extent.y()});
        j["thickness"] = p.extent.z();
        break;
    }
    j["center"] = vec3_json(p.pose.translation());
    j["rotation"] = vec3_json(axis_angle_from_rotation(p.pose.rotation()));
    j["amplitude"] = p.amplitude;
    j["softness"] = p.softness;
    nlohmann::json a;
    switch (p.albedo.kind) {
      case Albedo::Kind::constant: a["type"] = "constant"; break;
      case Albedo::Kind::checker: a["type"] = "checker"; break;
      case Albedo::Kind::noise: a["type"] = "noise"; break;
    }
    a["colors"] = nlohmann::json::array({vec3_json(p.albedo.color_a), vec3_json(p.albedo.color_b)});
    a["scale"] = p.albedo.scale;
    a["seed"] = p.albedo.seed;
    j["albedo"] = a;
    prims.push_back(j);
  }
  return nlohmann::json{{"primitives", prims}};
}

AnalyticScene AnalyticScene::from_json(const nlohmann::json& root) {
  if (!root.is_object() || !root.contains("primitives") || !root.at("primitives").is_array()) {
    throw std::invalid_argument("scene: expected an object with a 'primitives' array");
  }
  AnalyticScene scene;
  for (const auto& j : root.at("primitives")) {
    Primitive p;
    const std::string type = j.at("type").get<std::string>();
    if (type == "sphere") {
      p.kind = PrimitiveKind::sphere;
      p.extent = Vec3(j.at("radius").get<double>(), 0, 0);
    } else if (type == "box" || type == "medium") {
      p.kind = type == "box" ? PrimitiveKind::box : PrimitiveKind::medium;
      p.extent = json_vec3(j, "half_extents", Vec3::Ones());
    } else if (type == "plane") {
      p.kind = PrimitiveKind::plane;
      const auto& h = j.at("half_extents");
      p.extent = Vec3(h.at(0).get<double>(), h.at(1).get<double>(), j.value("thickness", 0.1));
    } else {
      throw std::invalid_argument("scene: unknown primitive type '" + type + "'");
    }
    p.pose = SE3Pose::from_axis_angle(json_vec3(j, "rotation", Vec3::Zero()), json_vec3(j, "center", Vec3::Zero()));
    p.amplitude = j.value("amplitude", 1.0);
    p.softness = j.value("softness", 0.0);
    if (p.amplitude < 0 || p.softness < 0) throw std::invalid_argument("scene: amplitude and softness must be >= 0");
    if (j.contains("albedo")) {
      const auto& a = j.at("albedo");
      const std::string kind = a.value("type", std::string("constant"));
      if (kind == "constant") p.albedo.kind = Albedo::Kind::constant;
      else if (kind == "checker") p.albedo.kind = Albedo::Kind::checker;
      else if (kind == "noise") p.albedo.kind = Albedo::Kind::noise;
      else throw std::invalid_argument("scene: unknown albedo type '" + kind + "'");
      if (a.contains("colors")) {
        const auto& c = a.at("colors");
        p.albedo.color_a = Vec3(c.at(0).at(0).get<double>(), c.at(0).at(1).get<double>(), c.at(0).at(2).get<double>());
        if (c.size() > 1)
          p.albedo.color_b = Vec3(c.at(1).at(0).get<double>(), c.at(1).at(1).get<double>(), c.at(1).at(2).get<double>());
      }
      p.albedo.scale = a.value("scale", 1.0);
      p.albedo.seed = a.value("seed", std::uint64_t{0});
      if (!(p.albedo.scale > 0)) throw std::invalid_argument("scene: albedo scale must be positive");
    }
    scene.add(p);
  }
  return scene;
}

AnalyticScene AnalyticScene::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scene file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("scene file " + path + ": " + e.what());
  }
  return from_json(j);
}

// ---- ConditionedField --------------------------------------------------------------

ConditionedField::ConditionedField(const FieldConfig& config) : config_(config) {
  Rng rng(config.seed);
  const std::size_t c = config.encoder_channels;
  conv1_ = Conv2d(3, c, 3, 2, rng);
  conv2_ = Conv2d(c, c, 3, 2, rng);
  conv3_ = Conv2d(c, c, 3, 1, rng);
  const std::size_t pe_dim = 3 + 6 * config.pe_octaves;
  embed_ = Linear(feature_channels() + pe_dim, config.hidden, rng);
  hidden_ = Linear(config.hidden, config.hidden, rng);
  head_hidden_ = Linear(config.hidden, config.hidden, rng);
  head_ = Linear(config.hidden, 4, rng);
}

std::size_t ConditionedField::feature_channels() const {
  return config_.encoder_channels + (config_.image_skip ? 3 : 0);
}

Tensor ConditionedField::encode(const Tensor& image) const {
  if (image.ndim() != 3 || image.dim(2) != 3) throw ShapeError("encode: expected HxWx3 image, got " + shape_str(image.shape()));
  const std::size_t h = image.dim(0), w = image.dim(1);
  const Tensor f1 = relu(conv1_(image));
  const Tensor f2 = relu(conv2_(f1));
  const Tensor f3 = conv3_(f2);
  // Two stride-2 stages: output cell j is centered on input pixel 4j.
  std::vector<double> grid(h * w * 2);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      grid[2 * (y * w + x)] = static_cast<double>(x) / 4.0;
      grid[2 * (y * w + x) + 1] = static_cast<double>(y) / 4.0;
    }
  Tensor up = reshape(bilinear_sample(f3, Tensor::from({h * w, 2}, std::move(grid))), {h, w, config_.encoder_channels});
  if (config_.image_skip) up = concat({up, image}, 2);
  return up;
}

FieldOutput ConditionedField::query(const std::vector<ContextView>& contexts, const Intrinsics& k,
                                    const Tensor& points) const {
  if (contexts.empty()) throw std::invalid_argument("query_conditioned: at least one context view required");
  Tensor pooled;
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    const ContextView& ctx = contexts[i];
    const Tensor local = ctx.pose.inverse().apply(points);
    const Tensor pix = project_points(k, local);
    const Tensor feats = bilinear_sample(ctx.features, pix);
    const Tensor in = concat({feats, positional_encoding(local, config_.pe_octaves, config_.pe_base_frequency)}, 1);
    const Tensor h = relu(hidden_(relu(embed_(in))));
    pooled = i == 0 ? h : add(pooled, h);
  }
  if (contexts.size() > 1) pooled = scale(pooled, 1.0 / static_cast<double>(contexts.size()));
  const Tensor out = head_(relu(head_hidden_(pooled)));
  const std::size_t n = points.dim(0);
  const Tensor sigma = softplus(add_scalar(reshape(slice(out, 1, 0, 1), {n}), config_.density_bias));
  const Tensor color = sigmoid(slice(out, 1, 1, 4));
  return {sigma, color};
}

RadianceFn ConditionedField::bind(std::vector<ContextView> contexts, const Intrinsics& k) const {
  return [this, contexts = std::move(contexts), k](const Tensor& points) { return query(contexts, k, points); };
}

void ConditionedField::collect(const std::string& prefix, ParameterList& out) const {
  conv1_.collect(prefix + ".conv1", out);
  conv2_.collect(prefix + ".conv2", out);
  conv3_.collect(prefix + ".conv3", out);
  embed_.collect(prefix + ".embed", out);
  hidden_.collect(prefix + ".hidden", out);
  head_hidden_.collect(prefix + ".head_hidden", out);
  head_.collect(prefix + ".head", out);
}

}  // namespace sfpose
