#include "posewarp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "posewarp/errors.hpp"
#include "posewarp/image_io.hpp"
#include "posewarp/ops.hpp"

namespace posewarp {

std::vector<double> ssim_window_1d() {
  std::vector<double> w(kSsimWindow);
  const int half = kSsimWindow / 2;
  double total = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - half;
    w[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    total += w[i];
  }
  for (double& x : w) x /= total;
  return w;
}

namespace {

// Valid separable filtering of an h x w plane.
std::vector<double> filter_valid(const std::vector<double>& plane, int h, int w, const std::vector<double>& taps) {
  const int k = static_cast<int>(taps.size());
  const int ho = h - k + 1, wo = w - k + 1;
  std::vector<double> rows(static_cast<std::size_t>(h) * wo, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t) acc += taps[t] * plane[static_cast<std::size_t>(y) * w + x + t];
      rows[static_cast<std::size_t>(y) * wo + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(ho) * wo, 0.0);
  for (int y = 0; y < ho; ++y)
    for (int x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t) acc += taps[t] * rows[static_cast<std::size_t>(y + t) * wo + x];
      out[static_cast<std::size_t>(y) * wo + x] = acc;
    }
  return out;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("ssim: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.rank() != 3) throw ShapeError("ssim: expected [C,H,W], got " + shape_str(a.shape()));
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  if (h < kSsimWindow || w < kSsimWindow) {
    throw ShapeError("ssim: image " + std::to_string(w) + "x" + std::to_string(h) + " is smaller than the " +
                     std::to_string(kSsimWindow) + "x" + std::to_string(kSsimWindow) + " window");
  }
  const std::vector<double> taps = ssim_window_1d();
  const double c1 = (kSsimK1 * 1.0) * (kSsimK1 * 1.0);
  const double c2 = (kSsimK2 * 1.0) * (kSsimK2 * 1.0);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  double total = 0.0;
  for (int ch = 0; ch < c; ++ch) {
    std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      x[i] = (a.at(ch * plane + i) + 1.0) * 0.5;
      y[i] = (b.at(ch * plane + i) + 1.0) * 0.5;
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, taps), my = filter_valid(y, h, w, taps);
    const auto sxx = filter_valid(xx, h, w, taps), syy = filter_valid(yy, h, w, taps), sxy = filter_valid(xy, h, w, taps);
    double acc = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i];
      const double vy = syy[i] - my[i] * my[i];
      const double cov = sxy[i] - mx[i] * my[i];
      acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += acc / static_cast<double>(mx.size());
  }
  return total / c;
}

double inception_score(std::span<const float> probs, int n, int k, int n_splits) {
  if (n < 1 || k < 1 || probs.size() != static_cast<std::size_t>(n) * k) {
    throw std::invalid_argument("inception_score: expected " + std::to_string(n) + "x" + std::to_string(k) +
                                " probabilities, got " + std::to_string(probs.size()));
  }
  if (n_splits < 1 || n < n_splits) {
    throw std::invalid_argument("inception_score: " + std::to_string(n) + " images cannot form " +
                                std::to_string(n_splits) + " splits");
  }
  double score_sum = 0.0;
  for (int s = 0; s < n_splits; ++s) {
    const int begin = static_cast<int>(static_cast<long long>(n) * s / n_splits);
    const int end = static_cast<int>(static_cast<long long>(n) * (s + 1) / n_splits);
    std::vector<double> marginal(k, 0.0);
    for (int i = begin; i < end; ++i)
      for (int j = 0; j < k; ++j) marginal[j] += probs[static_cast<std::size_t>(i) * k + j];
    for (double& m : marginal) m /= (end - begin);
    double kl_sum = 0.0;
    for (int i = begin; i < end; ++i) {
      for (int j = 0; j < k; ++j) {
        const double p = probs[static_cast<std::size_t>(i) * k + j];
        if (p > 0.0) kl_sum += p * (std::log(p) - std::log(marginal[j]));
      }
    }
    score_sum += std::exp(kl_sum / (end - begin));
  }
  return score_sum / n_splits;
}

std::vector<float> classifier_probs(const ArchDescriptor& arch, const ParamMap& psi, const Tensor& images) {
  return softmax_rows(classifier_logits(arch, psi, images));
}

double inception_score(const ArchDescriptor& arch, const ParamMap& psi, const Tensor& images, int n_splits) {
  const std::vector<float> p = classifier_probs(arch, psi, images);
  return inception_score(p, images.dim(0), arch.n_classes, n_splits);
}

std::optional<double> joint_error(const Skeleton& pred, const Skeleton& gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("joint_error: joint counts differ");
  double total = 0.0;
  int count = 0;
  for (int i = 0; i < gt.size(); ++i) {
    if (!gt.joints[i].visible) continue;
    total += std::hypot(pred.joints[i].u - gt.joints[i].u, pred.joints[i].v - gt.joints[i].v);
    ++count;
  }
  if (count == 0) return std::nullopt;
  return total / count;
}

nlohmann::json MetricReport::to_json() const {
  return {{"ssim_mean", ssim_mean},
          {"ssim_per_pair", ssim_per_pair},
          {"copy_ssim_mean", copy_ssim_mean},
          {"copy_ssim_per_pair", copy_ssim_per_pair},
          {"beat_copy_fraction", beat_copy_fraction},
          {"is_value", is_value},
          {"joint_error_px_mean", joint_error_px_mean},
          {"phi_real_joint_error_px_mean", phi_real_joint_error_px_mean},
          {"n_pairs", n_pairs}};
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  MetricReport r;
  r.ssim_mean = j.at("ssim_mean").get<double>();
  r.ssim_per_pair = j.at("ssim_per_pair").get<std::vector<double>>();
  r.copy_ssim_mean = j.at("copy_ssim_mean").get<double>();
  r.copy_ssim_per_pair = j.at("copy_ssim_per_pair").get<std::vector<double>>();
  r.beat_copy_fraction = j.at("beat_copy_fraction").get<double>();
  r.is_value = j.at("is_value").get<double>();
  r.joint_error_px_mean = j.at("joint_error_px_mean").get<double>();
  r.phi_real_joint_error_px_mean = j.at("phi_real_joint_error_px_mean").get<double>();
  r.n_pairs = j.at("n_pairs").get<int>();
  return r;
}

namespace {

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

MetricReport evaluate_model(const NetworkParams& params, const DatasetManifest& manifest, const EvalOptions& options) {
  if (manifest.eval.empty()) throw std::invalid_argument("evaluate_model: manifest has no eval pairs");
  const ArchDescriptor& arch = params.arch;
  if (arch.resolution != manifest.height || arch.resolution != manifest.width) {
    throw std::invalid_argument("evaluate_model: model resolution " + std::to_string(arch.resolution) +
                                " does not match the dataset's " + std::to_string(manifest.width) + "x" +
                                std::to_string(manifest.height));
  }
  const ParamMap g = params.subset(kGenerator), phi = params.subset(kPoseRegressor), psi = params.subset(kFeatureNet);
  const int total = options.max_pairs > 0 ? std::min<int>(options.max_pairs, static_cast<int>(manifest.eval.size()))
                                          : static_cast<int>(manifest.eval.size());
  const int chunk = std::max(1, options.chunk);
  const int h = manifest.height, w = manifest.width;

  MetricReport r;
  r.n_pairs = total;
  std::vector<double> synth_err, real_err;
  std::vector<float> probs;
  for (int begin = 0; begin < total; begin += chunk) {
    const int end = std::min(total, begin + chunk);
    std::vector<Tensor> src, gt, maps;
    for (int i = begin; i < end; ++i) {
      const EvalPair& p = manifest.eval[i];
      src.push_back(load_image(manifest.root / p.source.image));
      gt.push_back(load_image(manifest.root / p.ground_truth));
      maps.push_back(embed(p.target_skeleton, h, w, arch.variance));
    }
    const Tensor src_b = stack(src);
    const Tensor synth = generator_forward(arch, g, src_b, stack(maps));
    const Tensor phi_synth = pose_regressor_forward(arch, phi, synth);
    const Tensor phi_real = pose_regressor_forward(arch, phi, src_b);
    const std::vector<float> pr = classifier_probs(arch, psi, synth);
    probs.insert(probs.end(), pr.begin(), pr.end());
    for (int i = begin; i < end; ++i) {
      const EvalPair& p = manifest.eval[i];
      const int b = i - begin;
      const Tensor out = unstack(synth, b);
      r.ssim_per_pair.push_back(ssim(out, gt[b]));
      r.copy_ssim_per_pair.push_back(ssim(src[b], gt[b]));
      if (auto e = joint_error(decode(unstack(phi_synth, b)), p.target_skeleton)) synth_err.push_back(*e);
      if (auto e = joint_error(decode(unstack(phi_real, b)), p.source.skeleton)) real_err.push_back(*e);
    }
  }
  r.ssim_mean = mean_of(r.ssim_per_pair);
  r.copy_ssim_mean = mean_of(r.copy_ssim_per_pair);
  int beats = 0;
  for (int i = 0; i < total; ++i) beats += r.ssim_per_pair[i] > r.copy_ssim_per_pair[i] ? 1 : 0;
  r.beat_copy_fraction = static_cast<double>(beats) / total;
  r.is_value = total >= options.is_splits ? inception_score(probs, total, arch.n_classes, options.is_splits) : 0.0;
  r.joint_error_px_mean = mean_of(synth_err);
  r.phi_real_joint_error_px_mean = mean_of(real_err);
  return r;
}

}  // namespace posewarp
