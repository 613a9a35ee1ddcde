#pragma once

// 2D skeletons and their Gaussian belief-map embedding.
//
// Coordinates are pixels, origin top-left: u is the column, v is the row.

#include <json.hpp>
#include <vector>

#include "posewarp/tensor.hpp"

namespace posewarp {

struct Joint {
  double u = 0.0;
  double v = 0.0;
  bool visible = false;

  bool operator==(const Joint&) const = default;
};

struct Skeleton {
  std::vector<Joint> joints;

  int size() const { return static_cast<int>(joints.size()); }
  bool operator==(const Skeleton&) const = default;
};

// Joint layout of the default 8-joint sprite skeleton.
enum JointId : int {
  kRoot = 0,
  kHead = 1,
  kLeftShoulder = 2,
  kRightShoulder = 3,
  kLeftHand = 4,
  kRightHand = 5,
  kLeftFoot = 6,
  kRightFoot = 7,
};
inline constexpr int kDefaultJoints = 8;

inline constexpr double kDefaultVariance = 0.03;
inline constexpr float kVisibilityThreshold = 0.1f;

// A joint is in frame when its rounded pixel lies inside the image.
bool in_frame(const Joint& j, int height, int width);

// Standard deviation in pixels for a variance given in normalized units of the
// longer image side.
double sigma_pixels(double variance, int height, int width);

// [N,H,W] maps with B_i[v,u] = exp(-((u-u_i)^2 + (v-v_i)^2) / (2 sigma_px^2)).
// Invisible or out-of-frame joints give all-zero channels.
Tensor embed(const Skeleton& skel, int height, int width, double variance = kDefaultVariance);

// Argmax per channel, refined by a least-squares Gaussian fit around it (or, if
// that fails, by a parabola through the log values of the peak and its
// neighbours). Channels whose maximum is below `threshold` decode to invisible
// joints. Accepts [N,H,W].
Skeleton decode(const Tensor& maps, float threshold = kVisibilityThreshold);

// Average pooling per channel; factor must divide H and W.
Tensor downsample(const Tensor& maps, int factor);

// Indices visible and in frame in both skeletons.
std::vector<int> joint_visibility_pairs(const Skeleton& a, const Skeleton& b, int height, int width);

// Mirror horizontally: u -> W-1-u, and swap left/right joint labels of the
// default layout.
Skeleton flip_horizontal(const Skeleton& skel, int width);

// JSON form: [[u, v, visible], ...].
nlohmann::json skeleton_to_json(const Skeleton& skel);
Skeleton skeleton_from_json(const nlohmann::json& j);

}  // namespace posewarp
