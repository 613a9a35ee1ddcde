#include "posewarp/classifier.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "posewarp/image_io.hpp"
#include "posewarp/ops.hpp"
#include "posewarp/train.hpp"

namespace posewarp {

namespace {

Tensor mirrored(const Tensor& img) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<float> out(img.numel());
  for (int ch = 0; ch < c; ++ch)
    for (int v = 0; v < h; ++v) {
      const std::size_t row = (static_cast<std::size_t>(ch) * h + v) * w;
      for (int u = 0; u < w; ++u) out[row + u] = img.at(row + (w - 1 - u));
    }
  return Tensor(img.shape(), std::move(out));
}

}  // namespace

double classifier_accuracy(const ArchDescriptor& arch, const ParamMap& psi, const Tensor& images,
                           std::span<const int> labels) {
  if (images.dim(0) != static_cast<int>(labels.size())) throw std::invalid_argument("classifier_accuracy: label count mismatch");
  const Tensor logits = classifier_logits(arch, psi, images);
  const int k = logits.dim(1);
  int correct = 0;
  for (int i = 0; i < logits.dim(0); ++i) {
    const float* row = logits.raw() + static_cast<std::size_t>(i) * k;
    correct += static_cast<int>(std::max_element(row, row + k) - row) == labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / labels.size();
}

double eval_split_accuracy(const DatasetManifest& manifest, const ArchDescriptor& arch, const ParamMap& psi) {
  if (manifest.eval.empty()) throw std::invalid_argument("eval_split_accuracy: manifest has no eval pairs");
  constexpr int kChunk = 32;
  double correct = 0.0;
  const int n = static_cast<int>(manifest.eval.size());
  for (int begin = 0; begin < n; begin += kChunk) {
    const int end = std::min(n, begin + kChunk);
    std::vector<Tensor> images;
    std::vector<int> labels;
    for (int i = begin; i < end; ++i) {
      images.push_back(load_image(manifest.root / manifest.eval[i].source.image));
      labels.push_back(manifest.eval[i].source.label);
    }
    correct += classifier_accuracy(arch, psi, stack(images), labels) * (end - begin);
  }
  return correct / n;
}

PretrainResult pretrain_psi(const DatasetManifest& manifest, ArchDescriptor arch, const PretrainConfig& config,
                            const std::function<void(int, double)>& on_epoch) {
  if (manifest.train.empty()) throw std::invalid_argument("pretrain_psi: dataset has no training entries");
  if (config.epochs < 1 || config.batch < 1 || !(config.lr > 0)) {
    throw std::invalid_argument("pretrain_psi: epochs, batch and lr must be positive");
  }
  arch.resolution = manifest.height;
  NetworkParams init = init_weights(arch, config.seed);
  rescale_he(init, kFeatureNet);
  PretrainResult result;
  result.params.arch = arch;
  result.params.tensors = init.subset(kFeatureNet);

  const int n = static_cast<int>(manifest.train.size());
  std::vector<Tensor> images;
  images.reserve(n);
  for (const auto& e : manifest.train) images.push_back(load_image(manifest.root / e.image));

  AdamState adam;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::mt19937_64 rng = stream_rng(config.seed, 11, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    std::bernoulli_distribution coin(0.5);
    double loss_sum = 0.0;
    int batches = 0;
    for (int begin = 0; begin < n; begin += config.batch) {
      const int end = std::min(n, begin + config.batch);
      std::vector<Tensor> xs;
      std::vector<int> labels;
      for (int i = begin; i < end; ++i) {
        const int idx = order[i];
        xs.push_back(config.flip && coin(rng) ? mirrored(images[idx]) : images[idx]);
        labels.push_back(manifest.train[idx].label);
      }
      Tape tape;
      ParamMap watched;
      for (const auto& [name, t] : result.params.tensors) watched.emplace(name, tape.watch(t));
      const Tensor loss = cross_entropy(classifier_logits(arch, watched, stack(xs)), labels);
      tape.backward(loss);
      std::map<std::string, Tensor> grads;
      for (const auto& [name, t] : watched) grads.emplace(name, tape.grad(t));
      adam_step(result.params.tensors, grads, adam, config.lr);
      loss_sum += loss.item();
      ++batches;
    }
    result.epoch_loss.push_back(loss_sum / batches);
    if (on_epoch) on_epoch(epoch, result.epoch_loss.back());
  }
  if (!manifest.eval.empty()) result.eval_accuracy = eval_split_accuracy(manifest, arch, result.params.tensors);
  return result;
}

}  // namespace posewarp
