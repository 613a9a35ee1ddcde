#include "posewarp/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "posewarp/errors.hpp"

namespace posewarp {

void write_ppm(const std::filesystem::path& path, const Rgb8Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

int header_int(std::istream& in, const std::filesystem::path& path) {
  const std::string tok = header_token(in);
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw FormatError("corrupt PPM header in " + path.string());
  }
}

}  // namespace

Rgb8Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  if (header_token(in) != "P6") throw FormatError("not a binary PPM (P6): " + path.string());
  Rgb8Image img;
  img.width = header_int(in, path);
  img.height = header_int(in, path);
  if (header_int(in, path) != 255) throw FormatError("only 8-bit PPM is supported: " + path.string());
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw FormatError("truncated PPM pixel data in " + path.string());
  }
  return img;
}

Rgb8Image to_rgb8(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("to_rgb8: expected [3,H,W], got " + shape_str(image.shape()));
  Rgb8Image img;
  img.height = image.dim(1);
  img.width = image.dim(2);
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  img.pixels.resize(plane * 3);
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) {
      const float x = std::clamp(image.at(c * plane + p), -1.0f, 1.0f);
      img.pixels[p * 3 + c] = static_cast<std::uint8_t>(std::lround((x + 1.0f) * 127.5f));
    }
  }
  return img;
}

Tensor from_rgb8(const Rgb8Image& image) {
  const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
  std::vector<float> data(plane * 3);
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) data[c * plane + p] = image.pixels[p * 3 + c] / 127.5f - 1.0f;
  return Tensor({3, image.height, image.width}, std::move(data));
}

}  // namespace posewarp
