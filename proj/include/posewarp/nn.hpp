#pragma once

// The four networks: generator G, patch discriminator D, pose regressor PHI and
// the frozen feature extractor PSI (trunk of a small texture classifier).
//
// Parameters live in one flat map keyed by path ("G.enc1.w"). Forward passes
// take whatever tensors are in the map, so the same code runs on watched
// (trainable) parameters and on plain constants.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "posewarp/tensor.hpp"

namespace posewarp {

using ParamMap = std::map<std::string, Tensor>;

struct ArchDescriptor {
  int resolution = 64;
  int n_joints = 8;
  // Encoder widths; one stride-2 conv between consecutive widths.
  std::vector<int> g_widths{32, 64, 128};
  int g_res_blocks = 4;
  // One stride-2 conv per width, then a 3x3 unpadded score conv.
  std::vector<int> d_widths{32, 64, 128};
  std::vector<int> phi_widths{16, 32, 64};
  int phi_res_blocks = 2;
  // One conv + 2x2 average-pool block per width, then global pool + linear.
  std::vector<int> psi_widths{16, 32, 64};
  int n_classes = 10;
  // 1-based PSI block whose output feeds the identity loss.
  int psi_layer = 2;
  bool instance_norm = false;
  double variance = 0.03;

  bool operator==(const ArchDescriptor&) const = default;
};

// Small architecture used by end-to-end gradient checks and fast tests.
ArchDescriptor toy_arch(int resolution = 16);

// Namespaces of the parameter map.
inline constexpr const char* kGenerator = "G";
inline constexpr const char* kDiscriminator = "D";
inline constexpr const char* kPoseRegressor = "PHI";
inline constexpr const char* kFeatureNet = "PSI";

struct NetworkParams {
  ArchDescriptor arch;
  ParamMap tensors;

  // Entries whose name starts with "<ns>."
  ParamMap subset(const std::string& ns) const;
  void assign(const ParamMap& updated);
};

struct ParamSpec {
  std::string name;
  Shape shape;
  bool is_bias;
};

std::vector<ParamSpec> parameter_specs(const ArchDescriptor& arch);

// Conv/linear weights ~ Normal(0, 0.02), biases 0. Each parameter draws from
// its own stream seeded by (seed, name).
NetworkParams init_weights(const ArchDescriptor& arch, std::uint64_t seed);

// Rescales the N(0, 0.02) weights of one namespace to He scale,
// std sqrt(2 / fan_in). Used for the networks trained by plain regression
// (PHI, and PSI during pretraining), which stall from the GAN init.
void rescale_he(NetworkParams& params, const std::string& ns);

// Image [3,H,W] or [B,3,H,W] in [-1,1]; maps [N,H,W] or [B,N,H,W]. Output has
// the image's shape, values in [-1,1].
Tensor generator_forward(const ArchDescriptor& arch, const ParamMap& params, const Tensor& image, const Tensor& maps);

// Raw least-squares scores [1,h,w] (or [B,1,h,w]) for overlapping patches.
Tensor discriminator_forward(const ArchDescriptor& arch, const ParamMap& params, const Tensor& image);
// Score-grid side for an input side, from the layer recipe alone.
int discriminator_grid(const ArchDescriptor& arch, int side);

// Belief maps [N,H,W] (or batched), sigmoid-bounded.
Tensor pose_regressor_forward(const ArchDescriptor& arch, const ParamMap& params, const Tensor& image);

// Output of PSI block z (1-based); spatial size is the input's divided by
// feature_reduction(z).
Tensor feature_extract(const ArchDescriptor& arch, const ParamMap& params, const Tensor& image, int z);
int feature_reduction(int z);
// Classifier logits [B,K] for a batched image [B,3,H,W].
Tensor classifier_logits(const ArchDescriptor& arch, const ParamMap& params, const Tensor& images);

// Descriptor <-> float vector, stored in checkpoints as "meta.arch".
std::vector<float> encode_arch(const ArchDescriptor& arch);
ArchDescriptor decode_arch(std::span<const float> values);

}  // namespace posewarp
