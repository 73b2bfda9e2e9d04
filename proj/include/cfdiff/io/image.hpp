// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfdiff/numerics/tensor.hpp"

namespace cfdiff {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Grayscale image with values in [0, 1], row-major.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  float& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return pixels.size(); }

  friend bool operator==(const Image&, const Image&) = default;
};

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

/// Snaps every pixel to the nearest 8-bit level so disk round trips are exact.
inline void quantize(Image& img) {
  for (float& p : img.pixels) p = static_cast<float>(to_byte(p)) / 255.0f;
}

inline Image clamp01(Image img) {
  for (float& p : img.pixels) p = std::clamp(p, 0.0f, 1.0f);
  return img;
}

/// [1, 1, H, W] tensor view of a single image.
inline Tensor image_to_tensor(const Image& img) {
  return Tensor::from_data({1, 1, img.height, img.width}, img.pixels);
}

/// Stacks images into [N, 1, H, W].
inline Tensor images_to_tensor(const std::vector<const Image*>& imgs) {
  if (imgs.empty()) throw ImageError("no images to stack");
  const int h = imgs[0]->height, w = imgs[0]->width;
  std::vector<float> data;
  data.reserve(imgs.size() * static_cast<std::size_t>(h * w));
  for (const auto* im : imgs) {
    if (im->height != h || im->width != w) throw ImageError("images in a batch must share a resolution");
    data.insert(data.end(), im->pixels.begin(), im->pixels.end());
  }
  return Tensor::from_data({static_cast<int>(imgs.size()), 1, h, w}, std::move(data));
}

/// Takes sample `index` of an [N, 1, H, W] tensor.
inline Image tensor_to_image(const Tensor& t, int index = 0) {
  if (t.rank() != 4 || t.dim(1) != 1) throw ImageError("expected [N, 1, H, W], got " + shape_str(t.shape()));
  Image img(t.dim(2), t.dim(3));
  const std::size_t per = img.size();
  std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(per * static_cast<std::size_t>(index)), per,
              img.pixels.begin());
  return img;
}

inline void write_png(const Image& img, const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes(img.size());
  std::transform(img.pixels.begin(), img.pixels.end(), bytes.begin(), to_byte);
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, bytes.data(), 0, nullptr)) {
    throw ImageError("cannot write " + path.string() + ": " + png.message);
  }
}

inline Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw ImageError("cannot read " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr)) {
    throw ImageError("cannot decode " + path.string() + ": " + png.message);
  }
  Image img(static_cast<int>(png.height), static_cast<int>(png.width));
  std::transform(bytes.begin(), bytes.end(), img.pixels.begin(), [](std::uint8_t b) { return b / 255.0f; });
  return img;
}

/// Places images side by side with a one-pixel white gutter.
inline Image hconcat(const std::vector<Image>& panels) {
  if (panels.empty()) throw ImageError("no panels");
  const int h = panels[0].height;
  int w = -1;
  for (const auto& p : panels) {
    if (p.height != h) throw ImageError("panels must share a height");
    w += p.width + 1;
  }
  Image out(h, w, 1.0f);
  int x0 = 0;
  for (const auto& p : panels) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < p.width; ++x) out.at(y, x0 + x) = p.at(y, x);
    }
    x0 += p.width + 1;
  }
  return out;
}

/// |a - b| per pixel.
inline Image abs_difference(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width) throw ImageError("difference of images with different sizes");
  Image out(a.height, a.width);
  for (std::size_t i = 0; i < a.size(); ++i) out.pixels[i] = std::abs(a.pixels[i] - b.pixels[i]);
  return out;
}

}  // namespace cfdiff
