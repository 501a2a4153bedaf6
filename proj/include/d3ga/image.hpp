#pragma once

// Float RGB images and their on-disk forms: 8-bit PNG (optionally through the
// sRGB transfer curve) and little-endian PFM.

#include "d3ga/common.hpp"

#include <png.h>

#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace d3ga {

/// Interleaved RGB, row-major, top row first.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, double fill = 0.0) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  std::size_t index(int x, int y) const { return (static_cast<std::size_t>(y) * width + x) * 3; }
  double& at(int x, int y, int c) { return data[index(x, y) + c]; }
  double at(int x, int y, int c) const { return data[index(x, y) + c]; }
  Vec3 pixel(int x, int y) const {
    const auto i = index(x, y);
    return {data[i], data[i + 1], data[i + 2]};
  }
  void set_pixel(int x, int y, const Vec3& v) {
    const auto i = index(x, y);
    data[i] = v[0];
    data[i + 1] = v[1];
    data[i + 2] = v[2];
  }
  bool same_shape(const Image& o) const { return width == o.width && height == o.height; }
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b))
    throw DimensionMismatch(std::string(what) + ": " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                            " vs " + std::to_string(b.width) + "x" + std::to_string(b.height));
}

inline double linear_to_srgb(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return v <= 0.0031308 ? 12.92 * v : 1.055 * std::pow(v, 1.0 / 2.4) - 0.055;
}

inline double srgb_to_linear(double v) {
  return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
}

inline std::uint8_t quantize8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Raw 8-bit RGB, as stored on disk.
struct Image8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;
};

inline Image8 to_image8(const Image& img, bool srgb) {
  Image8 out{img.width, img.height, std::vector<std::uint8_t>(img.data.size())};
  for (std::size_t i = 0; i < img.data.size(); ++i)
    out.data[i] = quantize8(srgb ? linear_to_srgb(img.data[i]) : img.data[i]);
  return out;
}

/// `srgb` inverts the transfer curve (color images); masks are stored raw.
inline Image decode(const Image8& img, bool srgb) {
  static const auto lut_srgb = [] {
    std::array<double, 256> t{};
    for (int i = 0; i < 256; ++i) t[i] = srgb_to_linear(i / 255.0);
    return t;
  }();
  Image out(img.width, img.height);
  for (std::size_t i = 0; i < img.data.size(); ++i)
    out.data[i] = srgb ? lut_srgb[img.data[i]] : img.data[i] / 255.0;
  return out;
}

inline void write_png8(const std::string& path, const Image8& img) {
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("cannot open " + path + " for writing");
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> guard(fp, &std::fclose);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng write failed: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.data.data() + static_cast<std::size_t>(y) * img.width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(fp) != 0 || std::ferror(fp)) throw IoError("write error: " + path);
}

/// Any 8-bit PNG, expanded to RGB.
inline Image8 read_png8(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("cannot open " + path);
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> guard(fp, &std::fclose);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng init failed");
  }
  Image8 img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("not a readable PNG: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  if (png_get_rowbytes(png, info) != static_cast<std::size_t>(img.width) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("unexpected PNG layout: " + path);
  }
  img.data.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  rows.resize(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) rows[y] = img.data.data() + static_cast<std::size_t>(y) * img.width * 3;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_png(const std::string& path, const Image& img, bool srgb = true) {
  write_png8(path, to_image8(img, srgb));
}

inline Image read_png(const std::string& path, bool srgb = true) { return decode(read_png8(path), srgb); }

/// PFM stores rows bottom-to-top; a negative scale marks little-endian.
inline void write_pfm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "PF\n" << img.width << " " << img.height << "\n-1.0\n";
  std::vector<float> row(static_cast<std::size_t>(img.width) * 3);
  for (int y = img.height - 1; y >= 0; --y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) row[static_cast<std::size_t>(x) * 3 + c] = static_cast<float>(img.at(x, y, c));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw IoError("write error: " + path);
}

inline Image read_pfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  in >> magic >> w >> h >> scale;
  in.get();
  if (magic != "PF" || w <= 0 || h <= 0 || scale >= 0) throw FormatError("unsupported PFM: " + path);
  Image img(w, h);
  std::vector<float> row(static_cast<std::size_t>(w) * 3);
  for (int y = h - 1; y >= 0; --y) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!in) throw FormatError("truncated PFM: " + path);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = row[static_cast<std::size_t>(x) * 3 + c];
  }
  return img;
}

} // namespace d3ga
