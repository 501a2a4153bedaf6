#include "d3ga/binary_io.hpp"
#include "d3ga/image.hpp"
#include "d3ga/mesh.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <sstream>

using namespace d3ga;

namespace {

std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "d3ga_io_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

Image random_image(int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  Image img(w, h);
  for (auto& v : img.data) v = u(rng);
  return img;
}

} // namespace

TEST(Png, EightBitRoundTripIsExact) {
  Image8 img;
  img.width = 7;
  img.height = 5;
  img.data.resize(7 * 5 * 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<std::uint8_t>(i * 37 % 256);
  const std::string p = temp_path("rt8.png");
  write_png8(p, img);
  const Image8 back = read_png8(p);
  EXPECT_EQ(back.width, 7);
  EXPECT_EQ(back.height, 5);
  EXPECT_EQ(back.data, img.data);
}

TEST(Png, LinearRoundTripWithinQuantisation) {
  const Image img = random_image(9, 4, 1);
  const std::string p = temp_path("lin.png");
  write_png(p, img, false);
  const Image back = read_png(p, false);
  for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 0.5 / 255 + 1e-12);
}

TEST(Png, SrgbTransferRoundTrip) {
  for (double v : {0.0, 0.001, 0.0031308, 0.2, 0.5, 1.0}) EXPECT_NEAR(srgb_to_linear(linear_to_srgb(v)), v, 1e-12);
}

TEST(Png, MissingFileThrows) { EXPECT_THROW(read_png8(temp_path("does_not_exist.png")), IoError); }

TEST(Pfm, RoundTripAtFloatPrecision) {
  const Image img = random_image(6, 3, 2);
  const std::string p = temp_path("rt.pfm");
  write_pfm(p, img);
  const Image back = read_pfm(p);
  ASSERT_TRUE(back.same_shape(img));
  for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_EQ(back.data[i], static_cast<double>(static_cast<float>(img.data[i])));
}

TEST(Obj, RoundTripWithLabels) {
  TriMesh m = make_box(Vec3(-1, 0, 0.5), Vec3(1, 2, 3));
  m.face_parts.assign(m.face_count(), Part::body);
  m.face_parts[3] = Part::upper;
  m.face_parts[7] = Part::face;
  std::stringstream s;
  write_obj(s, m);
  const TriMesh back = read_obj(s);
  EXPECT_EQ(back.faces, m.faces);
  EXPECT_EQ(back.face_parts, m.face_parts);
  for (std::size_t v = 0; v < m.vertex_count(); ++v) EXPECT_EQ(back.positions[v], m.positions[v]);
}

TEST(Obj, RejectsBadIndex) {
  std::stringstream s("v 0 0 0\nv 1 0 0\nf 1 2 9\n");
  EXPECT_THROW(read_obj(s), FormatError);
}

TEST(Mesh, InsideTester) {
  const TriMesh box = make_box(Vec3::Zero(), Vec3::Ones());
  const InsideTester t(box);
  EXPECT_TRUE(t.inside(Vec3(0.5, 0.5, 0.5)));
  EXPECT_TRUE(t.inside(Vec3(0.01, 0.9, 0.3)));
  EXPECT_FALSE(t.inside(Vec3(1.5, 0.5, 0.5)));
  EXPECT_FALSE(t.inside(Vec3(-0.01, 0.5, 0.5)));
}

TEST(Mesh, ClosedPrimitivesHaveOutwardNormals) {
  for (const TriMesh& m : {make_icosahedron(1.0), make_box(Vec3::Zero(), Vec3::Ones()),
                           make_uv_sphere(Vec3(1, 2, 3), 0.5, 16, 8)}) {
    Vec3 c = Vec3::Zero();
    for (const auto& p : m.positions) c += p;
    c /= static_cast<double>(m.vertex_count());
    for (std::size_t f = 0; f < m.face_count(); ++f)
      EXPECT_GT(m.face_normal_unnormalized(f).dot(m.positions[m.faces[f][0]] - c), 0.0);
  }
}

TEST(Mesh, ClosestPointOnTriangleRegions) {
  const Vec3 a(0, 0, 0), b(1, 0, 0), c(0, 1, 0);
  EXPECT_LT((closest_point_on_triangle(Vec3(0.2, 0.2, 5), a, b, c) - Vec3(0.2, 0.2, 0)).norm(), 1e-15);
  EXPECT_LT((closest_point_on_triangle(Vec3(-1, -1, 0), a, b, c) - a).norm(), 1e-15);
  EXPECT_LT((closest_point_on_triangle(Vec3(1, 1, 0), a, b, c) - Vec3(0.5, 0.5, 0)).norm(), 1e-15);
}

TEST(BinaryIo, LittleEndianScalars) {
  std::stringstream s(std::ios::in | std::ios::out | std::ios::binary);
  bin::put<std::uint32_t>(s, 0x01020304u);
  bin::put<double>(s, -2.5);
  const std::string bytes = s.str();
  EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 0x04);
  EXPECT_EQ(bin::get<std::uint32_t>(s), 0x01020304u);
  EXPECT_EQ(bin::get<double>(s), -2.5);
  EXPECT_THROW(bin::get<std::uint32_t>(s), FormatError);
}
