#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "segkit/error.hpp"

namespace segkit {

/// Planar float image, channel-major (C,H,W).
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f) : channels(c), height(h), width(w), data(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  friend bool operator==(const Image&, const Image&) = default;
};

/// Per-pixel class indices, row-major (H,W).
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> data;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::int32_t fill = 0) : height(h), width(w), data(h * w, fill) {}

  std::int32_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  std::int32_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

namespace detail {

struct PngImage {
  png_image img{};
  PngImage() {
    img.version = PNG_IMAGE_VERSION;
  }
  ~PngImage() { png_image_free(&img); }
  PngImage(const PngImage&) = delete;
  PngImage& operator=(const PngImage&) = delete;
};

inline void require_file(const std::string& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) throw EnvironmentError("file not found: " + path);
}

// Decodes to 8-bit samples in the requested format; returns (w, h, bytes).
inline std::vector<std::uint8_t> decode_png(const std::string& path, png_uint_32 format, png_uint_32& w, png_uint_32& h,
                                            png_uint_32* source_format = nullptr) {
  require_file(path);
  PngImage p;
  if (!png_image_begin_read_from_file(&p.img, path.c_str())) {
    throw DataError("cannot decode PNG " + path + ": " + p.img.message);
  }
  if (source_format) *source_format = p.img.format;
  p.img.format = format;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(p.img));
  if (!png_image_finish_read(&p.img, nullptr, bytes.data(), 0, nullptr)) {
    throw DataError("cannot decode PNG " + path + ": " + p.img.message);
  }
  w = p.img.width;
  h = p.img.height;
  return bytes;
}

inline void encode_png(const std::string& path, png_uint_32 format, std::size_t w, std::size_t h,
                       const std::vector<std::uint8_t>& bytes) {
  PngImage p;
  p.img.format = format;
  p.img.width = static_cast<png_uint_32>(w);
  p.img.height = static_cast<png_uint_32>(h);
  if (!png_image_write_to_file(&p.img, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw EnvironmentError("cannot write PNG " + path + ": " + p.img.message);
  }
}

inline std::uint8_t to_byte(float v) {
  const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

}  // namespace detail

/// 8-bit PNG (gray, RGB, or with alpha) as a 3-channel image in [0, 1].
inline Image read_image_png(const std::string& path) {
  png_uint_32 w = 0, h = 0;
  const auto bytes = detail::decode_png(path, PNG_FORMAT_RGB, w, h);
  Image img(3, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(bytes[(y * w + x) * 3 + c]) / 255.0f;
  return img;
}

/// Single-channel 8-bit PNG of class indices.
inline LabelMap read_label_png(const std::string& path) {
  png_uint_32 w = 0, h = 0, source = 0;
  const auto bytes = detail::decode_png(path, PNG_FORMAT_GRAY, w, h, &source);
  if (source & (PNG_FORMAT_FLAG_COLOR | PNG_FORMAT_FLAG_COLORMAP)) {
    throw DataError("label PNG " + path + " must be single-channel grayscale");
  }
  LabelMap label(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) label.data[i] = bytes[i];
  return label;
}

inline void write_image_png(const std::string& path, const Image& img) {
  if (img.channels != 3) throw ParameterError("write_image_png needs a 3-channel image");
  std::vector<std::uint8_t> bytes(img.height * img.width * 3);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) bytes[(y * img.width + x) * 3 + c] = detail::to_byte(img.at(c, y, x));
  detail::encode_png(path, PNG_FORMAT_RGB, img.width, img.height, bytes);
}

inline void write_label_png(const std::string& path, const LabelMap& label) {
  std::vector<std::uint8_t> bytes(label.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const std::int32_t v = label.data[i];
    if (v < 0 || v > 255) throw ParameterError("label value " + std::to_string(v) + " does not fit in 8 bits");
    bytes[i] = static_cast<std::uint8_t>(v);
  }
  detail::encode_png(path, PNG_FORMAT_GRAY, label.width, label.height, bytes);
}

// Interleaved 8-bit RGB.
inline void write_rgb_png(const std::string& path, std::size_t width, std::size_t height, const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != width * height * 3) throw ParameterError("write_rgb_png: buffer size does not match dimensions");
  detail::encode_png(path, PNG_FORMAT_RGB, width, height, rgb);
}

}  // namespace segkit
