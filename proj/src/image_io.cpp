#include "difuzcam/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace difuzcam {

namespace fs = std::filesystem;

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

fs::path temp_sibling(const fs::path& path) {
  return path.parent_path() / (path.filename().string() + ".tmp");
}

void write_png_rows(const fs::path& path, int width, int height, int bit_depth, int color_type,
                    const std::vector<png_bytep>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = temp_sibling(path);
  {
    FilePtr fp(std::fopen(tmp.c_str(), "wb"));
    if (!fp) throw std::runtime_error("cannot open for writing: " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
      png_destroy_write_struct(&png, &info);
      throw std::runtime_error("libpng: out of memory");
    }
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      throw std::runtime_error("libpng: write failed for " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, const_cast<png_bytepp>(rows.data()));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  fs::rename(tmp, path);
}

struct PngData {
  png_uint_32 width = 0, height = 0;
  int bit_depth = 0, color_type = 0, channels = 0;
  std::vector<png_byte> pixels;
  std::size_t row_bytes = 0;
};

PngData read_png_raw(const fs::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open: " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw std::runtime_error("not a PNG file: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng: out of memory");
  }
  PngData d;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng: read failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  d.width = png_get_image_width(png, info);
  d.height = png_get_image_height(png, info);
  d.bit_depth = png_get_bit_depth(png, info);
  d.color_type = png_get_color_type(png, info);
  if (d.color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (d.color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (d.bit_depth < 8) png_set_expand(png);
  png_read_update_info(png, info);
  d.bit_depth = png_get_bit_depth(png, info);
  d.channels = png_get_channels(png, info);
  d.row_bytes = png_get_rowbytes(png, info);
  d.pixels.resize(d.row_bytes * d.height);
  std::vector<png_bytep> rows(d.height);
  for (png_uint_32 y = 0; y < d.height; ++y) rows[y] = d.pixels.data() + y * d.row_bytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return d;
}

}  // namespace

void write_png8(const fs::path& path, const Planes& img) {
  if (img.size() != 1 && img.size() != 3) throw std::invalid_argument("write_png8: expected 1 or 3 planes");
  check_same_shape(img, Planes(img.size(), img[0]), "write_png8");
  const int h = static_cast<int>(img[0].rows()), w = static_cast<int>(img[0].cols());
  const int ch = static_cast<int>(img.size());
  std::vector<png_byte> buf(static_cast<std::size_t>(h * w * ch));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        const double v = std::clamp(img[static_cast<std::size_t>(c)](y, x), 0.0, 1.0);
        buf[static_cast<std::size_t>((y * w + x) * ch + c)] = static_cast<png_byte>(std::lround(v * 255.0));
      }
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = buf.data() + static_cast<std::size_t>(y * w * ch);
  write_png_rows(path, w, h, 8, ch == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, rows);
}

Planes read_png8(const fs::path& path) {
  const PngData d = read_png_raw(path);
  if (d.bit_depth != 8) throw std::runtime_error("read_png8: expected an 8-bit PNG: " + path.string());
  const int h = static_cast<int>(d.height), w = static_cast<int>(d.width);
  Planes out = zeros_planes(3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const int src = d.channels >= 3 ? c : 0;
        out[static_cast<std::size_t>(c)](y, x) =
            d.pixels[static_cast<std::size_t>(y) * d.row_bytes + static_cast<std::size_t>(x * d.channels + src)] / 255.0;
      }
  return out;
}

void write_png16(const fs::path& path, const Mosaic16& mosaic) {
  const int h = static_cast<int>(mosaic.rows()), w = static_cast<int>(mosaic.cols());
  std::vector<png_byte> buf(static_cast<std::size_t>(h * w * 2));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::uint16_t v = mosaic(y, x);
      const auto i = static_cast<std::size_t>((y * w + x) * 2);
      buf[i] = static_cast<png_byte>(v >> 8);
      buf[i + 1] = static_cast<png_byte>(v & 0xFF);
    }
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = buf.data() + static_cast<std::size_t>(y * w * 2);
  write_png_rows(path, w, h, 16, PNG_COLOR_TYPE_GRAY, rows);
}

Mosaic16 read_png16(const fs::path& path) {
  const PngData d = read_png_raw(path);
  if (d.bit_depth != 16 || d.channels != 1)
    throw std::runtime_error("read_png16: expected a 16-bit grayscale PNG: " + path.string());
  Mosaic16 m(d.height, d.width);
  for (png_uint_32 y = 0; y < d.height; ++y)
    for (png_uint_32 x = 0; x < d.width; ++x) {
      const png_byte* p = d.pixels.data() + y * d.row_bytes + x * 2;
      m(y, x) = static_cast<std::uint16_t>((p[0] << 8) | p[1]);
    }
  return m;
}

void atomic_write_text(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << content;
    if (!out.flush()) throw std::runtime_error("write failed: " + path.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace difuzcam
