#include "posewarp/pose.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>

#include <Eigen/Dense>

#include "posewarp/ops.hpp"

namespace posewarp {

bool in_frame(const Joint& j, int height, int width) {
  const double u = std::round(j.u), v = std::round(j.v);
  return u >= 0.0 && v >= 0.0 && u <= width - 1 && v <= height - 1;
}

double sigma_pixels(double variance, int height, int width) {
  return std::sqrt(variance) * std::max(height, width);
}

Tensor embed(const Skeleton& skel, int height, int width, double variance) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("embed: image size must be positive");
  if (!(variance > 0.0)) throw std::invalid_argument("embed: variance must be positive");
  const int n = skel.size();
  const double sigma = sigma_pixels(variance, height, width);
  const double inv_two_var = 1.0 / (2.0 * sigma * sigma);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  std::vector<float> maps(plane * n, 0.0f);
  std::vector<double> gx(width), gy(height);
  for (int i = 0; i < n; ++i) {
    const Joint& j = skel.joints[i];
    if (!j.visible || !in_frame(j, height, width)) continue;
    for (int u = 0; u < width; ++u) gx[u] = std::exp(-(u - j.u) * (u - j.u) * inv_two_var);
    for (int v = 0; v < height; ++v) gy[v] = std::exp(-(v - j.v) * (v - j.v) * inv_two_var);
    float* ch = maps.data() + plane * i;
    for (int v = 0; v < height; ++v)
      for (int u = 0; u < width; ++u) ch[static_cast<std::size_t>(v) * width + u] = static_cast<float>(gy[v] * gx[u]);
  }
  return Tensor({n, height, width}, std::move(maps));
}

namespace {

// Offset of the log-parabola vertex through (-1, l), (0, c), (1, r).
double peak_offset(float l, float c, float r) {
  if (l <= 0.0f || c <= 0.0f || r <= 0.0f) return 0.0;
  const double ll = std::log(l), lc = std::log(c), lr = std::log(r);
  const double denom = ll - 2.0 * lc + lr;
  if (!(denom < 0.0)) return 0.0;
  return std::clamp(0.5 * (ll - lr) / denom, -0.5, 0.5);
}

struct Peak {
  double u, v;
};

// Levenberg-Marquardt fit of a * exp(-d^2 / 2s^2) to the in-frame pixels near
// the argmax. Averaging over the whole peak keeps additive noise from moving the
// estimate the way it moves a flat argmax. nullopt when the fit does not settle.
std::optional<Peak> fit_gaussian(const float* ch, int h, int w, int bu, int bv) {
  const double peak = ch[static_cast<std::size_t>(bv) * w + bu];
  int above = 0;
  for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i) above += ch[i] >= 0.5 * peak ? 1 : 0;
  // Area above half maximum is 2 ln2 pi s^2 for an uncropped peak.
  const double s0 = std::max(1.0, std::sqrt(above / (2.0 * std::numbers::ln2 * std::numbers::pi)));
  const int r = static_cast<int>(std::ceil(3.0 * s0)) + 1;
  const int u_lo = std::max(0, bu - r), u_hi = std::min(w - 1, bu + r);
  const int v_lo = std::max(0, bv - r), v_hi = std::min(h - 1, bv + r);

  Eigen::Vector4d p(peak, bu, bv, s0);  // a, u0, v0, s
  auto sse = [&](const Eigen::Vector4d& q) {
    double e = 0.0;
    for (int v = v_lo; v <= v_hi; ++v)
      for (int u = u_lo; u <= u_hi; ++u) {
        const double d2 = (u - q[1]) * (u - q[1]) + (v - q[2]) * (v - q[2]);
        const double res = q[0] * std::exp(-d2 / (2 * q[3] * q[3])) - ch[static_cast<std::size_t>(v) * w + u];
        e += res * res;
      }
    return e;
  };
  double err = sse(p), lambda = 1e-3;
  for (int it = 0; it < 50; ++it) {
    Eigen::Matrix4d jtj = Eigen::Matrix4d::Zero();
    Eigen::Vector4d jtr = Eigen::Vector4d::Zero();
    for (int v = v_lo; v <= v_hi; ++v)
      for (int u = u_lo; u <= u_hi; ++u) {
        const double du = u - p[1], dv = v - p[2], s2 = p[3] * p[3], d2 = du * du + dv * dv;
        const double g = std::exp(-d2 / (2 * s2));
        const Eigen::Vector4d jac(g, p[0] * g * du / s2, p[0] * g * dv / s2, p[0] * g * d2 / (s2 * p[3]));
        jtj += jac * jac.transpose();
        jtr += jac * (p[0] * g - ch[static_cast<std::size_t>(v) * w + u]);
      }
    bool improved = false;
    while (lambda < 1e8) {
      Eigen::Matrix4d damped = jtj;
      damped.diagonal() *= 1.0 + lambda;
      const Eigen::Vector4d next = p - damped.ldlt().solve(jtr);
      const double e = next.allFinite() && next[3] > 0.1 ? sse(next) : INFINITY;
      if (e < err) {
        const double gain = err - e;
        p = next;
        err = e;
        lambda = std::max(1e-7, lambda / 10);
        improved = gain > 1e-12 * (1.0 + err);
        break;
      }
      lambda *= 10;
    }
    if (!improved) break;
  }
  if (!p.allFinite() || p[0] <= 0.0 || std::abs(p[1] - bu) > r || std::abs(p[2] - bv) > r) return std::nullopt;
  return Peak{p[1], p[2]};
}

}  // namespace

Skeleton decode(const Tensor& maps, float threshold) {
  if (maps.rank() != 3) throw ShapeError("decode: expected [N,H,W], got " + shape_str(maps.shape()));
  const int n = maps.dim(0), h = maps.dim(1), w = maps.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Skeleton skel;
  skel.joints.resize(n);
  for (int i = 0; i < n; ++i) {
    const float* ch = maps.raw() + plane * i;
    const std::size_t best = static_cast<std::size_t>(std::max_element(ch, ch + plane) - ch);
    const int bu = static_cast<int>(best % w), bv = static_cast<int>(best / w);
    Joint& j = skel.joints[i];
    j.u = bu;
    j.v = bv;
    j.visible = ch[best] >= threshold;
    if (!j.visible) continue;
    auto at = [&](int u, int v) { return ch[static_cast<std::size_t>(v) * w + u]; };
    if (const auto fit = fit_gaussian(ch, h, w, bu, bv)) {
      j.u = fit->u;
      j.v = fit->v;
      continue;
    }
    if (bu > 0 && bu + 1 < w) j.u += peak_offset(at(bu - 1, bv), at(bu, bv), at(bu + 1, bv));
    if (bv > 0 && bv + 1 < h) j.v += peak_offset(at(bu, bv - 1), at(bu, bv), at(bu, bv + 1));
  }
  return skel;
}

Tensor downsample(const Tensor& maps, int factor) { return avg_pool2d(maps, factor); }

std::vector<int> joint_visibility_pairs(const Skeleton& a, const Skeleton& b, int height, int width) {
  if (a.size() != b.size()) throw std::invalid_argument("joint_visibility_pairs: joint counts differ");
  std::vector<int> out;
  for (int i = 0; i < a.size(); ++i) {
    const Joint& ja = a.joints[i];
    const Joint& jb = b.joints[i];
    if (ja.visible && jb.visible && in_frame(ja, height, width) && in_frame(jb, height, width)) out.push_back(i);
  }
  return out;
}

Skeleton flip_horizontal(const Skeleton& skel, int width) {
  Skeleton out = skel;
  for (Joint& j : out.joints) j.u = (width - 1) - j.u;
  if (out.size() == kDefaultJoints) {
    std::swap(out.joints[kLeftShoulder], out.joints[kRightShoulder]);
    std::swap(out.joints[kLeftHand], out.joints[kRightHand]);
    std::swap(out.joints[kLeftFoot], out.joints[kRightFoot]);
  }
  return out;
}

nlohmann::json skeleton_to_json(const Skeleton& skel) {
  nlohmann::json arr = nlohmann::json::array();
  for (const Joint& j : skel.joints) arr.push_back({j.u, j.v, j.visible});
  return arr;
}

Skeleton skeleton_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw std::invalid_argument("skeleton JSON must be an array of [u, v, visible] triples");
  Skeleton skel;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    if (!e.is_array() || e.size() != 3 || !e[0].is_number() || !e[1].is_number() ||
        !(e[2].is_boolean() || e[2].is_number())) {
      throw std::invalid_argument("skeleton JSON joint " + std::to_string(i) + " is not [u, v, visible]: " + e.dump());
    }
    Joint joint;
    joint.u = e[0].get<double>();
    joint.v = e[1].get<double>();
    joint.visible = e[2].is_boolean() ? e[2].get<bool>() : e[2].get<double>() != 0.0;
    skel.joints.push_back(joint);
  }
  return skel;
}

}  // namespace posewarp
