#pragma once

// Procedural articulated-sprite dataset. A figure's appearance depends only on
// its identity id and the dataset seed; its pose depends only on the skeleton.
// Training entries carry (image, skeleton). Eval pairs additionally hold a
// ground-truth rendering of the same identity under a target pose, stored
// under eval/ and never referenced by training entries.

#include <array>
#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "posewarp/pose.hpp"
#include "posewarp/tensor.hpp"

namespace posewarp {

inline constexpr int kTextureClasses = 10;
inline constexpr int kManifestFormat = 1;
inline constexpr float kBackgroundLevel = 128.0f / 255.0f;

enum BodyPart { kTorsoPart = 0, kArmPart = 1, kLegPart = 2, kHeadPart = 3 };

struct Appearance {
  std::uint64_t identity = 0;
  // RGB in [0,1] for torso, arms, legs, head.
  std::array<std::array<float, 3>, 4> colors{};
  int texture = 0;
  double limb_radius = 3.0;
  double torso_radius = 5.0;
  double head_radius = 6.0;
};

Appearance make_appearance(std::uint64_t dataset_seed, std::uint64_t identity, int height, int width);

// Capsules between connected joints (legs, torso, shoulder bar, arms), then the
// head disk, over a mid-gray background. Output [3,H,W] in [-1,1].
Tensor render_sprite(const Appearance& app, const Skeleton& skel, int height, int width);

struct SkeletonConfig {
  int height = 64;
  int width = 64;
  double margin = 4.0;
  double torso_length = 16.0;     // root to head centre
  double neck_fraction = 0.7;     // shoulder bar position along the torso
  double shoulder_half_width = 6.0;
  double arm_length = 13.0;
  double leg_length = 17.0;
  // Joint limits in radians.
  double lean_min = -0.3, lean_max = 0.3;
  double arm_min = -0.3, arm_max = 2.6;   // 0 hangs down, positive swings outwards
  double leg_min = -0.2, leg_max = 0.7;
  int max_retries = 64;
};

// Bone lengths and margin scaled from the 64x64 defaults.
SkeletonConfig skeleton_config_for(int height, int width);

struct PoseAngles {
  double lean = 0.0;
  double left_arm = 0.0, right_arm = 0.0;
  double left_leg = 0.0, right_leg = 0.0;
};

// "Left" joints sit at larger u (the figure faces the camera).
Skeleton build_skeleton(double root_u, double root_v, const PoseAngles& angles, const SkeletonConfig& config);

struct RootRegion {
  double u_min, u_max, v_min, v_max;
};
// Root positions for which every joint stays inside the margin for all angles.
RootRegion safe_root_region(const SkeletonConfig& config);

Skeleton sample_skeleton(std::mt19937_64& rng, const SkeletonConfig& config);

struct ManifestEntry {
  std::string image;  // relative to the dataset root
  Skeleton skeleton;
  std::uint64_t appearance = 0;
  int label = 0;
};

struct EvalPair {
  ManifestEntry source;
  Skeleton target_skeleton;
  std::string ground_truth;
};

struct DatasetManifest {
  int format = kManifestFormat;
  std::uint64_t seed = 0;
  int height = 64;
  int width = 64;
  int n_joints = kDefaultJoints;
  std::vector<ManifestEntry> train;
  std::vector<EvalPair> eval;
  std::filesystem::path root;  // not serialized

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j, const std::filesystem::path& root);
};

inline constexpr std::uint64_t kEvalIdentityBase = 1000000;

DatasetManifest generate_dataset(int n_train, int n_eval, std::uint64_t seed, int height, int width,
                                 const std::filesystem::path& out_dir);
DatasetManifest load_manifest(const std::filesystem::path& dir);

Skeleton sample_target_pose(const DatasetManifest& manifest, std::mt19937_64& rng);

struct TrainingBatch {
  Tensor images;       // [B,3,H,W]
  Tensor maps_source;  // [B,N,H,W]
  Tensor maps_target;
  std::vector<Skeleton> skel_source;
  std::vector<Skeleton> skel_target;
};

struct BatchOptions {
  bool flip = true;
  double variance = kDefaultVariance;
};

// Reads the listed training images; target skeletons are drawn with
// sample_target_pose. With flip on, each source is mirrored with probability 0.5.
TrainingBatch load_batch(const DatasetManifest& manifest, std::span<const int> indices, std::mt19937_64& rng,
                         const BatchOptions& options = {});

// Stacks [C,H,W] tensors into [B,C,H,W].
Tensor stack(std::span<const Tensor> items);
// Item b of a [B,...] tensor.
Tensor unstack(const Tensor& batch, int b);

}  // namespace posewarp
