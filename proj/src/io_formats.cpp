#include "sfpose/io_formats.hpp"

#include <png.h>

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sfpose {

ParseError::ParseError(const std::string& format, std::size_t offset, const std::string& message)
    : std::runtime_error(format + " parse error at byte " + std::to_string(offset) + ": " + message), offset_(offset) {}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

namespace {

std::uint32_t load_u32(const std::uint8_t* p, bool little) {
  if (little) return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
  return std::uint32_t(p[3]) | std::uint32_t(p[2]) << 8 | std::uint32_t(p[1]) << 16 | std::uint32_t(p[0]) << 24;
}

float load_f32(const std::uint8_t* p, bool little) { return std::bit_cast<float>(load_u32(p, little)); }

void store_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void store_f32(Bytes& out, float v) { store_u32(out, std::bit_cast<std::uint32_t>(v)); }

}  // namespace

// ---- .flo ------------------------------------------------------------------------

FlowField parse_flo(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12) throw ParseError("flo", bytes.size(), "truncated header (need 12 bytes)");
  const float magic = load_f32(bytes.data(), true);
  if (magic != kFloMagic) {
    throw ParseError("flo", 0, "bad magic (expected 202021.25, got " + std::to_string(magic) + ")");
  }
  const auto w = static_cast<std::int32_t>(load_u32(bytes.data() + 4, true));
  const auto h = static_cast<std::int32_t>(load_u32(bytes.data() + 8, true));
  if (w <= 0 || h <= 0) {
    throw ParseError("flo", w <= 0 ? 4 : 8, "non-positive dimensions " + std::to_string(w) + "x" + std::to_string(h));
  }
  const std::uint64_t count = std::uint64_t(w) * std::uint64_t(h) * 2;
  const std::uint64_t need = 12 + 4 * count;
  if (bytes.size() < need) {
    throw ParseError("flo", bytes.size(), "truncated data: " + std::to_string(w) + "x" + std::to_string(h) +
                                              " needs " + std::to_string(need) + " bytes");
  }
  if (bytes.size() > need) throw ParseError("flo", need, "trailing bytes after flow data");
  FlowField f;
  f.width = static_cast<std::size_t>(w);
  f.height = static_cast<std::size_t>(h);
  f.uv.resize(count);
  f.valid.assign(f.width * f.height, 1);
  for (std::size_t i = 0; i < count; ++i) {
    const float v = load_f32(bytes.data() + 12 + 4 * i, true);
    if (!std::isfinite(v)) throw ParseError("flo", 12 + 4 * i, "non-finite flow component");
    f.uv[i] = v;
    if (std::abs(v) > 1e9f) f.valid[i / 2] = 0;
  }
  return f;
}

Bytes encode_flo(const FlowField& flow) {
  if (flow.uv.size() != flow.width * flow.height * 2) throw std::invalid_argument("write_flo: flow size mismatch");
  Bytes out;
  out.reserve(12 + 4 * flow.uv.size());
  store_f32(out, kFloMagic);
  store_u32(out, static_cast<std::uint32_t>(flow.width));
  store_u32(out, static_cast<std::uint32_t>(flow.height));
  for (std::size_t i = 0; i < flow.uv.size(); ++i) {
    const bool valid = flow.valid.empty() || flow.valid[i / 2];
    const double v = flow.uv[i];
    if (valid && !std::isfinite(v)) throw std::invalid_argument("write_flo: non-finite flow at a valid pixel");
    store_f32(out, valid ? static_cast<float>(v) : (std::abs(v) > 1e9 && std::isfinite(v) ? static_cast<float>(v) : kFloUnknown));
  }
  return out;
}

FlowField read_flo(const std::filesystem::path& path) { return parse_flo(read_file(path)); }
void write_flo(const std::filesystem::path& path, const FlowField& flow) { write_file(path, encode_flo(flow)); }

// ---- PFM ------------------------------------------------------------------------------

namespace {

// Reads one whitespace-delimited header token, then skips exactly one
// whitespace byte (the separator before binary data for the last token).
std::string_view header_token(std::span<const std::uint8_t> b, std::size_t& pos) {
  while (pos < b.size() && std::isspace(b[pos])) ++pos;
  const std::size_t start = pos;
  while (pos < b.size() && !std::isspace(b[pos]) && pos - start < 64) ++pos;
  if (pos == start) throw ParseError("pfm", pos, "truncated header");
  if (pos >= b.size()) throw ParseError("pfm", pos, "header runs to end of file");
  if (!std::isspace(b[pos])) throw ParseError("pfm", pos, "header token too long");
  const std::string_view tok(reinterpret_cast<const char*>(b.data()) + start, pos - start);
  ++pos;
  return tok;
}

template <typename T>
T parse_number(std::string_view tok, const char* fmt, std::size_t offset, const char* what) {
  T v{};
  const auto [end, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || end != tok.data() + tok.size()) {
    throw ParseError(fmt, offset, std::string("bad ") + what + " '" + std::string(tok) + "'");
  }
  return v;
}

}  // namespace

PfmImage parse_pfm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  const auto magic = header_token(bytes, pos);
  PfmImage img;
  if (magic == "PF") img.channels = 3;
  else if (magic == "Pf") img.channels = 1;
  else throw ParseError("pfm", 0, "bad magic (expected PF or Pf)");
  std::size_t at = pos;
  const auto w = parse_number<long long>(header_token(bytes, pos), "pfm", at, "width");
  at = pos;
  const auto h = parse_number<long long>(header_token(bytes, pos), "pfm", at, "height");
  if (w <= 0 || h <= 0 || w > (1 << 24) || h > (1 << 24)) throw ParseError("pfm", at, "invalid dimensions");
  at = pos;
  const double scale = parse_number<double>(header_token(bytes, pos), "pfm", at, "scale");
  if (scale == 0.0 || !std::isfinite(scale)) throw ParseError("pfm", at, "scale must be finite and nonzero");
  const bool little = scale < 0;
  img.width = static_cast<std::size_t>(w);
  img.height = static_cast<std::size_t>(h);
  const std::uint64_t count = std::uint64_t(img.width) * img.height * img.channels;
  if (bytes.size() - pos < 4 * count) {
    throw ParseError("pfm", bytes.size(), "truncated data: expected " + std::to_string(4 * count) + " bytes of floats");
  }
  if (bytes.size() - pos > 4 * count) throw ParseError("pfm", pos + 4 * count, "trailing bytes after image data");
  img.data.resize(count);
  const std::size_t row = img.width * img.channels;
  for (std::size_t y = 0; y < img.height; ++y) {
    // Stored bottom row first.
    const std::size_t src_row = img.height - 1 - y;
    for (std::size_t i = 0; i < row; ++i) {
      const std::size_t off = pos + 4 * (src_row * row + i);
      const float v = load_f32(bytes.data() + off, little);
      if (!std::isfinite(v)) throw ParseError("pfm", off, "non-finite value");
      img.data[y * row + i] = v;
    }
  }
  return img;
}

Bytes encode_pfm(const PfmImage& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_pfm: channels must be 1 or 3");
  if (img.data.size() != img.width * img.height * img.channels) throw std::invalid_argument("write_pfm: size mismatch");
  const std::string header = std::string(img.channels == 3 ? "PF" : "Pf") + "\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n-1.0\n";
  Bytes out(header.begin(), header.end());
  out.reserve(out.size() + 4 * img.data.size());
  const std::size_t row = img.width * img.channels;
  for (std::size_t y = img.height; y-- > 0;)
    for (std::size_t i = 0; i < row; ++i) store_f32(out, img.data[y * row + i]);
  return out;
}

PfmImage read_pfm(const std::filesystem::path& path) { return parse_pfm(read_file(path)); }
void write_pfm(const std::filesystem::path& path, const PfmImage& image) { write_file(path, encode_pfm(image)); }

PfmImage pfm_from_tensor(const Tensor& t) {
  PfmImage img;
  if (t.ndim() == 2) {
    img.channels = 1;
  } else if (t.ndim() == 3 && (t.dim(2) == 1 || t.dim(2) == 3)) {
    img.channels = t.dim(2);
  } else {
    throw ShapeError("pfm_from_tensor: expected H x W or H x W x {1,3}, got " + shape_str(t.shape()));
  }
  img.height = t.dim(0);
  img.width = t.dim(1);
  img.data.assign(t.data().begin(), t.data().end());
  return img;
}

// ---- TUM ------------------------------------------------------------------------------

std::vector<TumRecord> parse_tum(std::string_view text) {
  std::vector<TumRecord> out;
  std::size_t line_start = 0;
  while (line_start < text.size()) {
    std::size_t line_end = text.find('\n', line_start);
    if (line_end == std::string_view::npos) line_end = text.size();
    std::string_view line = text.substr(line_start, line_end - line_start);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);

    double v[8];
    std::size_t count = 0, pos = 0;
    while (true) {
      while (pos < line.size() && (line[pos] == ' ' || line[pos] == '\t' || line[pos] == '\r' || line[pos] == ',')) ++pos;
      if (pos >= line.size()) break;
      std::size_t end = pos;
      while (end < line.size() && line[end] != ' ' && line[end] != '\t' && line[end] != '\r' && line[end] != ',') ++end;
      const std::size_t offset = line_start + pos;
      if (count == 8) throw ParseError("tum", offset, "more than 8 fields on a line");
      v[count] = parse_number<double>(line.substr(pos, end - pos), "tum", offset, "number");
      if (!std::isfinite(v[count])) throw ParseError("tum", offset, "non-finite value");
      ++count;
      pos = end;
    }
    if (count != 0 && count != 8) {
      throw ParseError("tum", line_start, "expected 8 fields (timestamp tx ty tz qx qy qz qw), got " + std::to_string(count));
    }
    if (count == 8) {
      TumRecord r;
      r.timestamp = v[0];
      r.translation = Vec3(v[1], v[2], v[3]);
      r.rotation = Eigen::Quaterniond(v[7], v[4], v[5], v[6]);
      const double norm = r.rotation.norm();
      if (std::abs(norm - 1.0) > kQuaternionTolerance) {
        throw ParseError("tum", line_start, "quaternion norm " + std::to_string(norm) + " is not within 1e-6 of 1");
      }
      out.push_back(r);
    }
    line_start = line_end + 1;
  }
  return out;
}

namespace {
void append_number(std::string& s, double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  s.append(buf, end);
}
}  // namespace

std::string encode_tum(const std::vector<TumRecord>& records) {
  std::string s = "# timestamp tx ty tz qx qy qz qw\n";
  for (const auto& r : records) {
    const double v[8] = {r.timestamp,        r.translation.x(), r.translation.y(), r.translation.z(),
                         r.rotation.x(),     r.rotation.y(),    r.rotation.z(),    r.rotation.w()};
    for (int i = 0; i < 8; ++i) {
      if (i) s += ' ';
      append_number(s, v[i]);
    }
    s += '\n';
  }
  return s;
}

std::vector<TumRecord> to_tum(const Trajectory& trajectory) {
  std::vector<TumRecord> out;
  for (const auto& p : trajectory.poses()) {
    Eigen::Quaterniond q(p.pose.rotation());
    q.normalize();
    if (q.w() < 0) q.coeffs() = -q.coeffs();
    out.push_back({p.timestamp, p.pose.translation(), q});
  }
  return out;
}

Trajectory from_tum(const std::vector<TumRecord>& records) {
  std::vector<TimedPose> poses;
  for (const auto& r : records) poses.push_back({r.timestamp, SE3Pose(r.rotation.normalized().toRotationMatrix(), r.translation)});
  return Trajectory(std::move(poses));
}

Trajectory read_tum(const std::filesystem::path& path) {
  const Bytes b = read_file(path);
  return from_tum(parse_tum(std::string_view(reinterpret_cast<const char*>(b.data()), b.size())));
}

void write_tum(const std::filesystem::path& path, const Trajectory& trajectory) {
  const std::string s = encode_tum(to_tum(trajectory));
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

// ---- PNG ------------------------------------------------------------------------------

Image8 decode_png(std::span<const std::uint8_t> bytes) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw ParseError("png", 0, msg);
  }
  Image8 out;
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  out.width = img.width;
  out.height = img.height;
  out.channels = gray ? 1 : 3;
  if (static_cast<std::uint64_t>(img.width) * img.height > (1ULL << 28)) {
    png_image_free(&img);
    throw ParseError("png", 16, "image dimensions too large");
  }
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw ParseError("png", 0, msg);
  }
  return out;
}

Bytes encode_png(const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw std::invalid_argument("write_png: channels must be 1 or 3");
  if (image.pixels.size() != image.width * image.height * image.channels) throw std::invalid_argument("write_png: size mismatch");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png encode: ") + img.message);
  }
  Bytes out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png encode: ") + img.message);
  }
  out.resize(size);
  return out;
}

Image8 read_png(const std::filesystem::path& path) { return decode_png(read_file(path)); }
void write_png(const std::filesystem::path& path, const Image8& image) { write_file(path, encode_png(image)); }

Image8 image_from_tensor(const Tensor& t) {
  Image8 img;
  if (t.ndim() == 2) img.channels = 1;
  else if (t.ndim() == 3 && (t.dim(2) == 1 || t.dim(2) == 3)) img.channels = t.dim(2);
  else throw ShapeError("image_from_tensor: expected H x W or H x W x {1,3}, got " + shape_str(t.shape()));
  img.height = t.dim(0);
  img.width = t.dim(1);
  img.pixels.resize(t.numel());
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double v = std::isfinite(d[i]) ? std::clamp(d[i], 0.0, 1.0) : 0.0;
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

Tensor tensor_from_image(const Image8& image) {
  std::vector<double> v(image.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = image.pixels[i] / 255.0;
  if (image.channels == 1) return Tensor::from({image.height, image.width}, std::move(v));
  return Tensor::from({image.height, image.width, image.channels}, std::move(v));
}

}  // namespace sfpose
