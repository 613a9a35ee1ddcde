#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "posewarp/tensor.hpp"

namespace testutil {

inline posewarp::Tensor random_tensor(posewarp::Shape shape, std::mt19937_64& rng, float lo = -1.0f,
                                      float hi = 1.0f) {
  std::uniform_real_distribution<float> d(lo, hi);
  std::vector<float> v(posewarp::shape_numel(shape));
  for (float& x : v) x = d(rng);
  return posewarp::Tensor(std::move(shape), std::move(v));
}

inline std::vector<float> values(const posewarp::Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline double max_abs_diff(const posewarp::Tensor& a, const posewarp::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, static_cast<double>(std::abs(a.at(i) - b.at(i))));
  return m;
}

inline bool bit_equal(const posewarp::Tensor& a, const posewarp::Tensor& b) {
  return a.shape() == b.shape() && values(a) == values(b);
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("posewarp_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
