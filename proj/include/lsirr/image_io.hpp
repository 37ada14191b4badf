// 8-bit PNG input/output. Samples map linearly between [0, 255] and [0, 1];
// images are read as RGB regardless of the stored colour type.
#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsirr/imagecore.hpp"

namespace lsirr {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

inline Image read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw ImageIoError("cannot read PNG " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw ImageIoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  const std::size_t h = img.height, w = img.width;
  Image out = Image::chw(3, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out(c, y, x) = static_cast<float>(buf[(y * w + x) * 3 + c]) / 255.0f;
  return out;
}

inline std::uint8_t quantize(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

// Writes 1-channel images as grayscale and 3-channel images as RGB. Output
// bytes depend only on pixel values.
inline void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.rank() != 3 || (image.channels() != 1 && image.channels() != 3))
    throw ImageIoError("write_png expects a 1- or 3-channel image");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw ImageIoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng initialisation failed");
  }
  const std::size_t h = image.height(), w = image.width(), ch = image.channels();
  std::vector<png_byte> row(w * ch);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng error while writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               ch == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) row[x * ch + c] = quantize(image(c, y, x));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Round trip through 8-bit storage without touching disk.
inline Image quantize_8bit(Image img) {
  for (auto& v : img.vec()) v = static_cast<float>(quantize(v)) / 255.0f;
  return img;
}

}  // namespace lsirr
