#pragma once

// SSIM, Inception Score against the in-repo sprite classifier, and joint
// position error, plus the evaluation protocol that ties them to a checkpoint.

#include <json.hpp>
#include <optional>
#include <span>
#include <vector>

#include "posewarp/data.hpp"
#include "posewarp/nn.hpp"
#include "posewarp/pose.hpp"
#include "posewarp/tensor.hpp"

namespace posewarp {

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
std::vector<double> ssim_window_1d();

// Images [C,H,W] in [-1,1], remapped to [0,1] (L = 1). Mean over valid 11x11
// windows, averaged over channels.
double ssim(const Tensor& a, const Tensor& b);

// probs: n rows of k class probabilities, row-major. Splits are contiguous and
// as equal as possible; the score is the mean of the per-split scores.
double inception_score(std::span<const float> probs, int n, int k, int n_splits = 1);
// Softmax of the PSI classifier over images [B,3,H,W].
std::vector<float> classifier_probs(const ArchDescriptor& arch, const ParamMap& psi, const Tensor& images);
double inception_score(const ArchDescriptor& arch, const ParamMap& psi, const Tensor& images, int n_splits = 1);

// Mean Euclidean distance over joints visible in gt; nullopt when none is.
std::optional<double> joint_error(const Skeleton& pred, const Skeleton& gt);

struct MetricReport {
  double ssim_mean = 0.0;
  std::vector<double> ssim_per_pair;
  double copy_ssim_mean = 0.0;
  std::vector<double> copy_ssim_per_pair;
  // Share of pairs where the synthesis beats copying the source.
  double beat_copy_fraction = 0.0;
  double is_value = 0.0;
  // decode(PHI(synthesis)) against the target skeleton.
  double joint_error_px_mean = 0.0;
  // decode(PHI(source image)) against the source skeleton.
  double phi_real_joint_error_px_mean = 0.0;
  int n_pairs = 0;

  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
};

struct EvalOptions {
  int max_pairs = 0;  // 0 evaluates every pair
  int chunk = 8;
  int is_splits = 1;
};

// Runs G on every eval pair of the manifest with the target pose, using the
// parameters in `params` (G, PHI and PSI namespaces).
MetricReport evaluate_model(const NetworkParams& params, const DatasetManifest& manifest, const EvalOptions& options = {});

}  // namespace posewarp
