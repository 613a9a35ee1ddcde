#pragma once

// Binary PPM (P6, 8-bit) images and their [-1,1] float tensor form.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "posewarp/tensor.hpp"

namespace posewarp {

struct Rgb8Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB, row-major
};

void write_ppm(const std::filesystem::path& path, const Rgb8Image& image);
Rgb8Image read_ppm(const std::filesystem::path& path);

// [3,H,W] in [-1,1] -> 8-bit, rounding to nearest; values are clamped.
Rgb8Image to_rgb8(const Tensor& image);
Tensor from_rgb8(const Rgb8Image& image);

inline void save_image(const std::filesystem::path& path, const Tensor& image) { write_ppm(path, to_rgb8(image)); }
inline Tensor load_image(const std::filesystem::path& path) { return from_rgb8(read_ppm(path)); }

}  // namespace posewarp
