#pragma once

// Alternating optimisation of D, PHI and G with Adam, a replay buffer of past
// fakes for the discriminator, and a linear learning-rate decay.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "posewarp/checkpoint.hpp"
#include "posewarp/data.hpp"
#include "posewarp/loss.hpp"
#include "posewarp/metrics.hpp"
#include "posewarp/nn.hpp"

namespace posewarp {

struct TrainConfig {
  double lr_g = 2e-4;
  double lr_d = 1e-4;
  double lr_phi = 2e-4;
  int batch = 4;
  int epochs = 6;
  double decay_start_epoch = 2.0;
  double lambda_P = 700.0;
  double lambda_Id = 0.3;
  double lambda_style = 1.0;
  int buffer_size = 50;
  std::uint64_t seed = 0;
  bool ablation_l1 = false;
  // Total iterations; 0 means epochs * ceil(n_train / batch).
  int iterations = 0;
  bool flip = true;
  bool instance_norm = false;
  int checkpoint_every = 500;
  int eval_every = 1000;
  std::vector<int> eval_iterations{100};
  int eval_max_pairs = 0;

  LossWeights weights() const { return {lambda_P, lambda_Id, lambda_style}; }
  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  nlohmann::json to_json() const;
  // Starts from `base`; keys present in j override it. Unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
  static TrainConfig from_json(const nlohmann::json& j);
};

// Multiplier at a (fractional) epoch: 1 before decay_start, then linear down to
// 0 at `epochs`.
double lr_schedule(double epoch, const TrainConfig& config);

struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  std::map<std::string, std::vector<float>> m, v;
  std::int64_t step = 0;
};

// Bias-corrected Adam on every entry of `params`; grads must hold the same
// names and shapes.
void adam_step(ParamMap& params, const std::map<std::string, Tensor>& grads, AdamState& state, double lr);

class ReplayBuffer {
 public:
  explicit ReplayBuffer(int capacity = 50) : capacity_(capacity) {}

  // Per fresh fake [C,H,W] (rows of a batch): store it while there is room and
  // return it; once full, with probability 0.5 return a random stored image
  // and keep the fresh one in its slot, otherwise return the fresh one.
  Tensor sample(const Tensor& fresh_batch, std::mt19937_64& rng);

  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(images_.size()); }
  const std::vector<Tensor>& images() const { return images_; }
  void restore(std::vector<Tensor> images);

 private:
  int capacity_;
  std::vector<Tensor> images_;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, nlohmann::json history)
      : std::runtime_error(what), history_(std::move(history)) {}
  const nlohmann::json& history() const { return history_; }

 private:
  nlohmann::json history_;
};

// Gradient reachability observed during one step.
struct IsolationAudit {
  double g_grad_after_d = 0.0;    // max |grad| over G params after the D backward
  double g_grad_after_phi = 0.0;  // ... after the PHI backward
  double d_grad_after_g = 0.0;    // max |grad| over D params after the G backward
  double phi_grad_after_g = 0.0;
  double g_grad_after_g = 0.0;    // sanity: G does receive gradient
  double d_grad_after_d = 0.0;
  double phi_grad_after_phi = 0.0;
};

class Trainer {
 public:
  // `params` must contain all four namespaces; PSI stays frozen.
  Trainer(TrainConfig config, DatasetManifest manifest, NetworkParams params);

  LossReport step(IsolationAudit* audit = nullptr);

  int iteration() const { return iteration_; }
  int total_iterations() const { return total_iterations_; }
  int iterations_per_epoch() const { return iterations_per_epoch_; }
  double epoch_at(int iteration) const;
  const NetworkParams& params() const { return params_; }
  const TrainConfig& config() const { return config_; }
  const DatasetManifest& manifest() const { return manifest_; }
  const std::vector<LossReport>& history() const { return history_; }
  const ReplayBuffer& buffer() const { return buffer_; }

  Checkpoint to_checkpoint() const;
  void restore(const Checkpoint& ckpt);

  // Indices of the training entries used at an iteration.
  std::vector<int> batch_indices(int iteration) const;

 private:
  TrainConfig config_;
  DatasetManifest manifest_;
  NetworkParams params_;
  AdamState adam_g_, adam_d_, adam_phi_;
  ReplayBuffer buffer_;
  int iteration_ = 0;
  int iterations_per_epoch_ = 1;
  int total_iterations_ = 0;
  std::vector<LossReport> history_;
};

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint32_t stream, std::uint64_t index);

struct TrainLoopOptions {
  std::optional<std::filesystem::path> resume;
  // Stop after this many iterations in total (0 = run to the end).
  int stop_after = 0;
  bool quiet = false;
  std::function<void(int iteration, const LossReport&)> on_iteration;
};

struct TrainLoopResult {
  Checkpoint final_checkpoint;
  std::filesystem::path final_path;
  std::vector<LossReport> trace;  // reports of iterations run in this call
};

// Writes train_log.jsonl, ckpt_XXXXXX.pgw every checkpoint_every iterations and
// ckpt_final.pgw. Eval records are appended at eval_iterations, every
// eval_every iterations and at the end.
TrainLoopResult train_loop(const TrainConfig& config, const DatasetManifest& manifest, const NetworkParams& initial,
                           const std::filesystem::path& out_dir, const TrainLoopOptions& options = {});

// Fresh G/D/PHI weights for `seed` around a pretrained PSI.
NetworkParams initial_params(const NetworkParams& psi_params, const TrainConfig& config);

}  // namespace posewarp
