#pragma once

// Static diagnostic plots rasterized straight into RGB images. No text:
// curves are distinguished by color only (see README for the legend).

#include <array>
#include <vector>

#include "sfpose/geometry.hpp"
#include "sfpose/io_formats.hpp"
#include "sfpose/training.hpp"

namespace sfpose {

using Rgb = std::array<std::uint8_t, 3>;

struct PlotSeries {
  std::vector<Vec2> points;
  Rgb color{0, 0, 0};
};

// Lines through each series, scaled to fit with equal or free axes.
Image8 plot_series(const std::vector<PlotSeries>& series, std::size_t width, std::size_t height, bool equal_axes);

// Camera centers projected onto the ground (x, z) plane. Estimated is red,
// ground truth (if given) is black.
Image8 plot_trajectory_topdown(const Trajectory& estimated, const Trajectory* ground_truth, std::size_t size = 512);

// log10 of each loss term against step: total black, multi-context red,
// single-context blue, pose green.
Image8 plot_loss_curves(const std::vector<LossReport>& reports, std::size_t width = 640, std::size_t height = 400);

}  // namespace sfpose
