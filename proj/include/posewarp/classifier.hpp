#pragma once

// Pretraining of the sprite texture classifier whose trunk is PSI.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "posewarp/data.hpp"
#include "posewarp/nn.hpp"

namespace posewarp {

struct PretrainConfig {
  int epochs = 16;
  int batch = 16;
  double lr = 3e-3;
  std::uint64_t seed = 0;
  bool flip = true;
};

struct PretrainResult {
  NetworkParams params;  // arch + PSI tensors only
  std::vector<double> epoch_loss;
  double eval_accuracy = 0.0;  // on the eval split's source images
};

// Fraction of images [B,3,H,W] whose argmax logit equals the label.
double classifier_accuracy(const ArchDescriptor& arch, const ParamMap& psi, const Tensor& images,
                           std::span<const int> labels);

PretrainResult pretrain_psi(const DatasetManifest& manifest, ArchDescriptor arch, const PretrainConfig& config,
                            const std::function<void(int epoch, double loss)>& on_epoch = {});

// Accuracy on the eval split's source images.
double eval_split_accuracy(const DatasetManifest& manifest, const ArchDescriptor& arch, const ParamMap& psi);

}  // namespace posewarp
