#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "sfpose/io_formats.hpp"
#include "sfpose/random.hpp"

using namespace sfpose;
namespace fs = std::filesystem;

namespace {

FlowField random_flow(std::size_t w, std::size_t h, Rng& rng) {
  FlowField f = FlowField::zeros(w, h);
  f.valid.assign(w * h, 1);
  for (auto& v : f.uv) v = rng.uniform(-40, 40);
  return f;
}

void put_f32(Bytes& b, std::size_t at, float v) { std::memcpy(b.data() + at, &v, 4); }

// Any failure must be a ParseError; anything else counts.
template <class Parse>
std::size_t unstructured_failures(Parse parse, const Bytes& seed_file, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < count; ++i) {
    Bytes buf = seed_file;
    if (i % 2 == 0) {
      buf.resize(rng.index(200));
      for (auto& b : buf) b = static_cast<std::uint8_t>(rng.bits());
    } else {
      if (rng.uniform() < 0.5) buf.resize(rng.index(buf.size() + 1));
      for (std::size_t f = 0, n = 1 + rng.index(6); f < n && !buf.empty(); ++f)
        buf[rng.index(buf.size())] = static_cast<std::uint8_t>(rng.bits());
    }
    try {
      parse(buf);
    } catch (const ParseError&) {
    } catch (...) {
      ++bad;
    }
  }
  return bad;
}

std::string_view text(const Bytes& b) { return {reinterpret_cast<const char*>(b.data()), b.size()}; }

}  // namespace

TEST(Flo, RoundTripIsFloatExact) {
  Rng rng(1);
  const FlowField f = random_flow(7, 5, rng);
  const Bytes bytes = encode_flo(f);
  EXPECT_EQ(bytes.size(), 12u + 7 * 5 * 8);
  const FlowField g = parse_flo(bytes);
  ASSERT_EQ(g.width, 7u);
  ASSERT_EQ(g.height, 5u);
  for (std::size_t i = 0; i < f.uv.size(); ++i) EXPECT_EQ(g.uv[i], static_cast<double>(static_cast<float>(f.uv[i])));
}

TEST(Flo, HeaderLayoutIsLittleEndian) {
  FlowField f = FlowField::zeros(3, 2);
  const Bytes b = encode_flo(f);
  float magic;
  std::int32_t w, h;
  std::memcpy(&magic, b.data(), 4);
  std::memcpy(&w, b.data() + 4, 4);
  std::memcpy(&h, b.data() + 8, 4);
  EXPECT_EQ(magic, 202021.25f);
  EXPECT_EQ(w, 3);
  EXPECT_EQ(h, 2);
}

TEST(Flo, InvalidPixelsUseUnknownSentinel) {
  Rng rng(2);
  FlowField f = random_flow(4, 3, rng);
  f.valid[5] = 0;
  f.uv[10] = std::nan("");
  const FlowField g = parse_flo(encode_flo(f));
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(g.is_valid(i % 4, i / 4), i != 5) << i;
}

TEST(Flo, BadMagicNamesExpectedTag) {
  Bytes b = encode_flo(FlowField::zeros(2, 2));
  put_f32(b, 0, 1.0f);
  try {
    parse_flo(b);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("202021.25"), std::string::npos) << e.what();
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Flo, TruncationReportsOffset) {
  Bytes b = encode_flo(FlowField::zeros(4, 4));
  b.resize(b.size() - 3);
  try {
    parse_flo(b);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), b.size());
  }
  EXPECT_THROW(parse_flo(Bytes(5, 0)), ParseError);
}

TEST(Flo, OversizedHeaderDoesNotAllocate) {
  Bytes b = encode_flo(FlowField::zeros(1, 1));
  const std::int32_t huge = 0x7fffffff;
  std::memcpy(b.data() + 4, &huge, 4);
  std::memcpy(b.data() + 8, &huge, 4);
  EXPECT_THROW(parse_flo(b), ParseError);
}

TEST(Pfm, RoundTripBothChannelCounts) {
  Rng rng(3);
  for (std::size_t c : {1u, 3u}) {
    PfmImage img{5, 4, c, {}};
    for (std::size_t i = 0; i < 5 * 4 * c; ++i) img.data.push_back(static_cast<float>(rng.uniform(-100, 100)));
    const PfmImage back = parse_pfm(encode_pfm(img));
    EXPECT_EQ(back.width, 5u);
    EXPECT_EQ(back.height, 4u);
    EXPECT_EQ(back.channels, c);
    EXPECT_EQ(back.data, img.data);
  }
}

TEST(Pfm, ReadsBigEndianBottomUp) {
  // Hand-built 1x2 big-endian file: rows are stored bottom first.
  const std::string header = "Pf\n1 2\n1.0\n";
  Bytes b(header.begin(), header.end());
  for (float v : {2.5f, -1.0f}) {  // bottom row, then top row
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(u >> s));
  }
  const PfmImage img = parse_pfm(b);
  EXPECT_EQ(img.at(0, 0), -1.0f);
  EXPECT_EQ(img.at(0, 1), 2.5f);
}

TEST(Pfm, RejectsMalformedHeaders) {
  auto parse = [](const std::string& s) {
    const Bytes b(s.begin(), s.end());
    return parse_pfm(b);
  };
  EXPECT_THROW(parse("P6\n1 1\n-1\n"), ParseError);
  EXPECT_THROW(parse("Pf\n0 1\n-1\n"), ParseError);
  EXPECT_THROW(parse("Pf\n1 1\n0\n"), ParseError);
  EXPECT_THROW(parse("Pf\n2 2\n-1\n"), ParseError);  // no data
}

TEST(Tum, RoundTrip) {
  std::vector<TimedPose> poses;
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    poses.push_back({0.1 * i, SE3Pose::from_axis_angle(Vec3(rng.normal(), rng.normal(), rng.normal()),
                                                      Vec3(rng.normal(), rng.normal(), rng.normal()))});
  }
  const Trajectory t(poses);
  const std::string s = encode_tum(to_tum(t));
  const Trajectory back = from_tum(parse_tum(s));
  ASSERT_EQ(back.size(), t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_EQ(back[i].timestamp, t[i].timestamp);
    EXPECT_LT(rotation_distance(back[i].pose.rotation(), t[i].pose.rotation()), 1e-12);
    EXPECT_LT((back[i].pose.translation() - t[i].pose.translation()).norm(), 1e-15);
  }
}

TEST(Tum, CommentsAndBlankLinesAreSkipped) {
  const auto r = parse_tum("# header\n\n1.5 1 2 3 0 0 0 1  # trailing\n\n");
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].timestamp, 1.5);
  EXPECT_EQ(r[0].translation, Vec3(1, 2, 3));
}

TEST(Tum, QuaternionNormIsValidated) {
  EXPECT_NO_THROW(parse_tum("0 0 0 0 0 0 0 1.0000005\n"));
  try {
    parse_tum("0 0 0 0\t 0 0 0 1\n1 0 0 0 0 0 0 1.01\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 17u);  // start of the second line
    EXPECT_NE(std::string(e.what()).find("quaternion"), std::string::npos);
  }
}

TEST(Tum, WrongFieldCountNamesLine) {
  try {
    parse_tum("0 0 0 0 0 0 0 1\n1 2 3\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 16u);
    EXPECT_NE(std::string(e.what()).find("got 3"), std::string::npos);
  }
  EXPECT_THROW(parse_tum("0 0 0 0 0 0 0 1 9\n"), ParseError);
  EXPECT_THROW(parse_tum("0 0 0 x 0 0 0 1\n"), ParseError);
  EXPECT_THROW(parse_tum("0 0 0 nan 0 0 0 1\n"), ParseError);
}

TEST(Png, RoundTripRgbAndGray) {
  Rng rng(5);
  for (std::size_t c : {1u, 3u}) {
    Image8 img{9, 7, c, {}};
    for (std::size_t i = 0; i < 9 * 7 * c; ++i) img.pixels.push_back(static_cast<std::uint8_t>(rng.bits()));
    const Image8 back = decode_png(encode_png(img));
    EXPECT_EQ(back.width, 9u);
    EXPECT_EQ(back.height, 7u);
    EXPECT_EQ(back.channels, c);
    EXPECT_EQ(back.pixels, img.pixels);
  }
}

TEST(Png, TensorConversionRoundsToNearest) {
  const Tensor t = Tensor::from({1, 2, 3}, {0.0, 1.0, 0.5, 0.2, 1.3, -0.4});
  const Image8 img = image_from_tensor(t);
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{0, 255, 128, 51, 255, 0}));
  const Tensor back = tensor_from_image(img);
  EXPECT_EQ(back.shape(), (Shape{1, 2, 3}));
  EXPECT_NEAR(back[2], 128.0 / 255.0, 1e-15);
}

TEST(Png, GarbageIsParseError) {
  EXPECT_THROW(decode_png(Bytes{1, 2, 3, 4}), ParseError);
  EXPECT_THROW(decode_png(Bytes{}), ParseError);
}

TEST(Files, WriteReadThroughDisk) {
  const fs::path dir = fs::temp_directory_path() / "sfpose_io_files";
  fs::create_directories(dir);
  Rng rng(6);
  const FlowField f = random_flow(3, 3, rng);
  write_flo(dir / "a.flo", f);
  EXPECT_EQ(read_flo(dir / "a.flo").uv.size(), f.uv.size());
  EXPECT_THROW(read_flo(dir / "missing.flo"), std::runtime_error);
  fs::remove_all(dir);
}

TEST(Fuzz, ParsersOnlyRaiseParseErrors) {
  Rng rng(7);
  const Bytes flo = encode_flo(random_flow(6, 5, rng));
  PfmImage pfm{4, 3, 3, std::vector<float>(36, 0.5f)};
  const Bytes pfm_bytes = encode_pfm(pfm);
  const std::string tum = encode_tum(to_tum(Trajectory({{0.0, SE3Pose::identity()}, {1.0, SE3Pose::identity()}})));
  const Bytes tum_bytes(tum.begin(), tum.end());
  Image8 png_img{5, 4, 3, std::vector<std::uint8_t>(60, 77)};
  const Bytes png = encode_png(png_img);

  const std::size_t n = 2500;  // 10^4 buffers over the four parsers
  EXPECT_EQ(unstructured_failures([](const Bytes& b) { parse_flo(b); }, flo, n, 1), 0u);
  EXPECT_EQ(unstructured_failures([](const Bytes& b) { parse_pfm(b); }, pfm_bytes, n, 2), 0u);
  EXPECT_EQ(unstructured_failures([](const Bytes& b) { parse_tum(text(b)); }, tum_bytes, n, 3), 0u);
  EXPECT_EQ(unstructured_failures([](const Bytes& b) { decode_png(b); }, png, n, 4), 0u);
}
