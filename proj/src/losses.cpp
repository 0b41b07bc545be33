#include "sfpose/losses.hpp"

#include "sfpose/random.hpp"

#include <algorithm>
#include <numeric>

namespace sfpose {

AnalyticProvider::AnalyticProvider(std::shared_ptr<const AnalyticScene> scene, std::vector<SE3Pose> cameras)
    : scene_(std::move(scene)), cameras_(std::move(cameras)) {}

RadianceFn AnalyticProvider::single(std::size_t t) const { return scene_->as_field(cameras_.at(t)); }

RadianceFn AnalyticProvider::multi(const std::vector<std::size_t>&, const std::vector<TensorPose>&) const {
  return scene_->as_field(cameras_.at(0));
}

LearnedProvider::LearnedProvider(const ConditionedField& field, std::vector<Tensor> features, const Intrinsics& k)
    : field_(&field), features_(std::move(features)), k_(k) {}

RadianceFn LearnedProvider::single(std::size_t t) const {
  return field_->bind({ContextView{features_.at(t), TensorPose::identity()}}, k_);
}

RadianceFn LearnedProvider::multi(const std::vector<std::size_t>& contexts, const std::vector<TensorPose>& poses) const {
  if (contexts.size() != poses.size()) throw std::invalid_argument("multi-context field: context/pose count mismatch");
  std::vector<ContextView> views;
  for (std::size_t i = 0; i < contexts.size(); ++i) views.push_back({features_.at(contexts[i]), poses[i]});
  return field_->bind(std::move(views), k_);
}

std::vector<std::size_t> default_contexts(std::size_t frames) {
  if (frames == 0) return {};
  std::vector<std::size_t> c{0, (frames - 1) / 2, frames - 1};
  c.erase(std::unique(c.begin(), c.end()), c.end());
  return c;
}

namespace {

Tensor gather_pixels(const Tensor& image, const std::vector<Vec2>& pixels) {
  const std::size_t w = image.dim(1);
  std::vector<std::size_t> rows;
  rows.reserve(pixels.size());
  for (const auto& p : pixels) rows.push_back(static_cast<std::size_t>(p.y()) * w + static_cast<std::size_t>(p.x()));
  return index_select(reshape(image, {image.dim(0) * w, image.dim(2)}), rows);
}

}  // namespace

PhotometricTerms photometric_loss(const std::vector<Tensor>& frames, const std::vector<TensorPose>& poses,
                                  const FieldProvider& fields, const Intrinsics& k,
                                  const std::vector<std::size_t>& contexts, const PhotometricOptions& opts,
                                  const std::vector<ImageRender>* single_renders) {
  const std::size_t n = frames.size();
  if (poses.size() != n) throw std::invalid_argument("photometric_loss: need one pose per frame");
  if (n == 0) return {Tensor::scalar(0.0), Tensor::scalar(0.0)};
  std::vector<TensorPose> context_poses;
  for (std::size_t j : contexts) context_poses.push_back(poses.at(j));
  const RadianceFn multi_field = fields.multi(contexts, context_poses);
  const std::vector<Vec2> grid = pixel_grid(k);

  Rng rng(opts.seed);
  std::vector<Tensor> multi_terms, single_terms;
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<Vec2> pixels;
    if (opts.pixels_per_frame == 0 || opts.pixels_per_frame >= grid.size()) {
      pixels = grid;
    } else {
      std::vector<std::size_t> idx(grid.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng.engine());
      idx.resize(opts.pixels_per_frame);
      std::sort(idx.begin(), idx.end());
      for (std::size_t i : idx) pixels.push_back(grid[i]);
    }
    RenderOptions ro = opts.render;
    ro.seed = opts.render.seed + 7919 * t;
    const RenderOutput m = render_pixels(multi_field, poses[t], k, pixels, ro);
    multi_terms.push_back(mean(square(sub(m.color, gather_pixels(frames[t], pixels)))));

    const Tensor single_color = single_renders
                                    ? single_renders->at(t).color
                                    : render_image(fields.single(t), TensorPose::identity(), k, ro).color;
    single_terms.push_back(mean(square(sub(single_color, frames[t]))));
  }
  const double inv = 1.0 / static_cast<double>(n);
  return {scale(sum(stack(multi_terms)), inv), scale(sum(stack(single_terms)), inv)};
}

Tensor pose_flow_loss(const std::vector<FlowField>& flows, const std::vector<TensorPose>& poses,
                      const std::vector<SurfaceMap>& surfaces, const Intrinsics& k, double min_opacity) {
  if (poses.size() != flows.size() + 1 || surfaces.size() != poses.size()) {
    throw std::invalid_argument("pose_flow_loss: need N poses and surfaces for N-1 flows");
  }
  const std::size_t w = k.width, h = k.height;
  std::vector<Tensor> terms;
  for (std::size_t t = 0; t < flows.size(); ++t) {
    const FlowField& flow = flows[t];
    if (flow.width != w || flow.height != h) throw ShapeError("pose_flow_loss: flow size does not match intrinsics");
    const TensorPose rel = compose(poses[t].inverse(), poses[t + 1]);  // frame t+1 camera -> frame t camera
    const Tensor pts = reshape(surfaces[t + 1].points, {w * h, 3});
    const Tensor moved = rel.apply(pts);
    const auto mv = moved.data();
    const auto op = surfaces[t + 1].opacity.data();

    std::vector<std::size_t> keep;
    std::vector<double> grid, target;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = y * w + x;
        if (!flow.is_valid(x, y) || op[i] < min_opacity) continue;
        const double z = mv[3 * i + 2];
        if (!(z > 1e-6)) continue;
        const double u = k.fx * mv[3 * i] / z + k.cx, v = k.fy * mv[3 * i + 1] / z + k.cy;
        if (!(u >= 0 && v >= 0 && u <= static_cast<double>(w - 1) && v <= static_cast<double>(h - 1))) continue;
        keep.push_back(i);
        grid.insert(grid.end(), {static_cast<double>(x), static_cast<double>(y)});
        const Vec2 f = flow.at(x, y);
        target.insert(target.end(), {f.x(), f.y()});
      }
    if (keep.empty()) continue;
    const std::size_t m = keep.size();
    const Tensor induced = sub(project_points(k, index_select(moved, keep)), Tensor::from({m, 2}, std::move(grid)));
    const Tensor diff = sub(Tensor::from({m, 2}, std::move(target)), induced);
    terms.push_back(scale(sum(square(diff)), 1.0 / static_cast<double>(m)));
  }
  if (terms.empty()) return Tensor::scalar(0.0);
  return scale(sum(stack(terms)), 1.0 / static_cast<double>(terms.size()));
}

}  // namespace sfpose
