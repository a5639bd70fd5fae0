#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cwat/error.hpp"

namespace cwat {

/// H x W x C pixel array with values in [0, 255]. The network sees
/// (pixel - mean_shift[c]); raw storage is never shifted.
struct ImageTensor {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> pixels;
  std::vector<double> mean_shift;

  ImageTensor() = default;
  ImageTensor(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  std::size_t index(std::size_t y, std::size_t x, std::size_t c) const {
    return (y * width + x) * channels + c;
  }
  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[index(y, x, c)]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[index(y, x, c)]; }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

inline void write_png(const std::string& path, const ImageTensor& image) {
  if (image.channels != 1 && image.channels != 3) {
    fail(ErrorCategory::data, path + ": only 1- or 3-channel images can be stored");
  }
  std::vector<std::uint8_t> bytes(image.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = image.pixels[i];
    if (!(v >= 0.0 && v <= 255.0) || v != std::round(v)) {
      fail(ErrorCategory::data, path + ": pixel " + std::to_string(i) +
                                    " is not an integer in [0,255]; PNG storage would be lossy");
    }
    bytes[i] = static_cast<std::uint8_t>(v);
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    fail(ErrorCategory::io, path + ": " + png.message);
  }
}

inline ImageTensor read_png(const std::string& path, std::size_t channels = 3) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    fail(ErrorCategory::io, path + ": " + png.message);
  }
  png.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr)) {
    fail(ErrorCategory::io, path + ": " + png.message);
  }
  ImageTensor out(png.height, png.width, channels);
  for (std::size_t i = 0; i < bytes.size(); ++i) out.pixels[i] = bytes[i];
  return out;
}

}  // namespace cwat
