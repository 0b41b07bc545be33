#pragma once

// Readers and writers for the interchange formats: Middlebury .flo, PFM,
// TUM trajectories and 8-bit PNG. Parsers work on in-memory buffers and
// never trust header sizes beyond the bytes actually present.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Geometry>

#include "sfpose/geometry.hpp"
#include "sfpose/sceneflow_pose.hpp"
#include "sfpose/tensor.hpp"

namespace sfpose {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& format, std::size_t offset, const std::string& message);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

using Bytes = std::vector<std::uint8_t>;

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// ---- Middlebury .flo ------------------------------------------------------
// Float32 tag 202021.25, int32 width and height, then interleaved (u, v)
// float32 rows; little-endian. Components above 1e9 in magnitude mark
// unknown flow; such pixels read back as invalid.
inline constexpr float kFloMagic = 202021.25f;
inline constexpr float kFloUnknown = 1e10f;

FlowField parse_flo(std::span<const std::uint8_t> bytes);
Bytes encode_flo(const FlowField& flow);
FlowField read_flo(const std::filesystem::path& path);
void write_flo(const std::filesystem::path& path, const FlowField& flow);

// ---- PFM --------------------------------------------------------------------
struct PfmImage {
  std::size_t width = 0, height = 0, channels = 1;  // 1 (Pf) or 3 (PF)
  std::vector<float> data;  // top row first, channels interleaved

  float at(std::size_t x, std::size_t y, std::size_t c = 0) const { return data[(y * width + x) * channels + c]; }
};

// Reads either endianness; writes little-endian (negative scale).
PfmImage parse_pfm(std::span<const std::uint8_t> bytes);
Bytes encode_pfm(const PfmImage& image);
PfmImage read_pfm(const std::filesystem::path& path);
void write_pfm(const std::filesystem::path& path, const PfmImage& image);
PfmImage pfm_from_tensor(const Tensor& t);  // H x W or H x W x {1,3}

// ---- TUM trajectories -------------------------------------------------------
// "timestamp tx ty tz qx qy qz qw" per line; '#' starts a comment.
struct TumRecord {
  double timestamp = 0.0;
  Vec3 translation = Vec3::Zero();
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();  // as written, validated unit within 1e-6
};

inline constexpr double kQuaternionTolerance = 1e-6;

std::vector<TumRecord> parse_tum(std::string_view text);
std::string encode_tum(const std::vector<TumRecord>& records);
std::vector<TumRecord> to_tum(const Trajectory& trajectory);
// Normalizes quaternions.
Trajectory from_tum(const std::vector<TumRecord>& records);
Trajectory read_tum(const std::filesystem::path& path);
void write_tum(const std::filesystem::path& path, const Trajectory& trajectory);

// ---- PNG ----------------------------------------------------------------------
struct Image8 {
  std::size_t width = 0, height = 0, channels = 3;  // 1 or 3
  std::vector<std::uint8_t> pixels;                 // row-major, interleaved
};

Image8 decode_png(std::span<const std::uint8_t> bytes);
Bytes encode_png(const Image8& image);
Image8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);

// [0,1] tensors (H x W x 3 or H x W) <-> 8-bit images, rounding to nearest.
Image8 image_from_tensor(const Tensor& t);
Tensor tensor_from_image(const Image8& image);

}  // namespace sfpose
