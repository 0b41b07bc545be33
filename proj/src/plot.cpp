#include "sfpose/plot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sfpose {

namespace {

struct Canvas {
  Image8 img;

  Canvas(std::size_t w, std::size_t h) {
    img.width = w;
    img.height = h;
    img.channels = 3;
    img.pixels.assign(w * h * 3, 255);
  }

  void dot(long x, long y, const Rgb& c) {
    if (x < 0 || y < 0 || x >= static_cast<long>(img.width) || y >= static_cast<long>(img.height)) return;
    auto* p = &img.pixels[(static_cast<std::size_t>(y) * img.width + static_cast<std::size_t>(x)) * 3];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  }

  // Bresenham, two pixels thick.
  void line(double x0d, double y0d, double x1d, double y1d, const Rgb& c) {
    long x0 = std::lround(x0d), y0 = std::lround(y0d), x1 = std::lround(x1d), y1 = std::lround(y1d);
    const long dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const long dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    long err = dx + dy;
    for (;;) {
      dot(x0, y0, c);
      dot(x0 + 1, y0, c);
      dot(x0, y0 + 1, c);
      if (x0 == x1 && y0 == y1) break;
      const long e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
};

}  // namespace

Image8 plot_series(const std::vector<PlotSeries>& series, std::size_t width, std::size_t height, bool equal_axes) {
  Canvas canvas(width, height);
  double lo_x = std::numeric_limits<double>::infinity(), hi_x = -lo_x, lo_y = lo_x, hi_y = -lo_x;
  for (const auto& s : series)
    for (const auto& p : s.points) {
      if (!p.allFinite()) continue;
      lo_x = std::min(lo_x, p.x());
      hi_x = std::max(hi_x, p.x());
      lo_y = std::min(lo_y, p.y());
      hi_y = std::max(hi_y, p.y());
    }
  const double margin = 16.0;
  const double pw = static_cast<double>(width) - 2 * margin, ph = static_cast<double>(height) - 2 * margin;
  const Rgb axis{200, 200, 200};
  canvas.line(margin, margin, margin, margin + ph, axis);
  canvas.line(margin, margin + ph, margin + pw, margin + ph, axis);
  if (!(lo_x <= hi_x)) return std::move(canvas.img);

  double span_x = std::max(hi_x - lo_x, 1e-12), span_y = std::max(hi_y - lo_y, 1e-12);
  double sx = pw / span_x, sy = ph / span_y;
  if (equal_axes) sx = sy = std::min(sx, sy);
  const double ox = margin + 0.5 * (pw - sx * span_x), oy = margin + 0.5 * (ph - sy * span_y);
  auto px = [&](const Vec2& p) { return ox + (p.x() - lo_x) * sx; };
  // Image rows grow downward; plot y grows upward.
  auto py = [&](const Vec2& p) { return oy + sy * span_y - (p.y() - lo_y) * sy; };

  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.points.size(); ++i) {
      const Vec2& a = s.points[i];
      if (!a.allFinite()) continue;
      if (s.points.size() == 1) canvas.line(px(a), py(a), px(a), py(a), s.color);
      if (i + 1 < s.points.size() && s.points[i + 1].allFinite()) {
        canvas.line(px(a), py(a), px(s.points[i + 1]), py(s.points[i + 1]), s.color);
      }
    }
  }
  return std::move(canvas.img);
}

Image8 plot_trajectory_topdown(const Trajectory& estimated, const Trajectory* ground_truth, std::size_t size) {
  auto ground = [](const Trajectory& t) {
    std::vector<Vec2> out;
    for (const auto& p : t.positions()) out.emplace_back(p.x(), p.z());
    return out;
  };
  std::vector<PlotSeries> series;
  if (ground_truth) series.push_back({ground(*ground_truth), {0, 0, 0}});
  series.push_back({ground(estimated), {220, 30, 30}});
  return plot_series(series, size, size, true);
}

Image8 plot_loss_curves(const std::vector<LossReport>& reports, std::size_t width, std::size_t height) {
  PlotSeries total{{}, {0, 0, 0}}, multi{{}, {220, 30, 30}}, single{{}, {30, 60, 220}}, pose{{}, {30, 160, 60}};
  auto lg = [](double v) { return v > 0 ? std::log10(v) : std::numeric_limits<double>::quiet_NaN(); };
  for (const auto& r : reports) {
    const double s = static_cast<double>(r.step);
    total.points.emplace_back(s, lg(r.total));
    multi.points.emplace_back(s, lg(r.l_rgb_multi));
    single.points.emplace_back(s, lg(r.l_rgb_single));
    pose.points.emplace_back(s, lg(r.l_pose));
  }
  return plot_series({multi, single, pose, total}, width, height, false);
}

}  // namespace sfpose
