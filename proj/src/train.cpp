#include "posewarp/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "posewarp/errors.hpp"
#include "posewarp/ops.hpp"

namespace posewarp {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  // Zero rates are allowed so a run can be frozen on purpose.
  if (lr_g < 0 || lr_d < 0 || lr_phi < 0) fail("learning rates must be >= 0");
  if (batch < 1) fail("batch must be >= 1");
  if (epochs < 1) fail("epochs must be >= 1");
  if (!(decay_start_epoch >= 0 && decay_start_epoch < epochs)) fail("decay_start_epoch must lie in [0, epochs)");
  if (lambda_P < 0 || lambda_Id < 0 || lambda_style < 0) fail("loss weights must be >= 0");
  if (buffer_size < 0) fail("buffer_size must be >= 0");
  if (iterations < 0) fail("iterations must be >= 0");
  if (checkpoint_every < 0 || eval_every < 0) fail("checkpoint_every and eval_every must be >= 0");
  if (eval_max_pairs < 0) fail("eval_max_pairs must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr_g", lr_g},
          {"lr_d", lr_d},
          {"lr_phi", lr_phi},
          {"batch", batch},
          {"epochs", epochs},
          {"decay_start_epoch", decay_start_epoch},
          {"lambda_P", lambda_P},
          {"lambda_Id", lambda_Id},
          {"lambda_style", lambda_style},
          {"buffer_size", buffer_size},
          {"seed", seed},
          {"ablation_l1", ablation_l1},
          {"iterations", iterations},
          {"flip", flip},
          {"instance_norm", instance_norm},
          {"checkpoint_every", checkpoint_every},
          {"eval_every", eval_every},
          {"eval_iterations", eval_iterations},
          {"eval_max_pairs", eval_max_pairs}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const TrainConfig& base) {
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  const nlohmann::json known = base.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("train config: unknown key \"" + key + "\"");
  }
  TrainConfig c = base;
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument(std::string("train config: bad value for \"") + key + "\": " + j.at(key).dump());
    }
  };
  get("lr_g", c.lr_g);
  get("lr_d", c.lr_d);
  get("lr_phi", c.lr_phi);
  get("batch", c.batch);
  get("epochs", c.epochs);
  get("decay_start_epoch", c.decay_start_epoch);
  get("lambda_P", c.lambda_P);
  get("lambda_Id", c.lambda_Id);
  get("lambda_style", c.lambda_style);
  get("buffer_size", c.buffer_size);
  get("seed", c.seed);
  get("ablation_l1", c.ablation_l1);
  get("iterations", c.iterations);
  get("flip", c.flip);
  get("instance_norm", c.instance_norm);
  get("checkpoint_every", c.checkpoint_every);
  get("eval_every", c.eval_every);
  get("eval_iterations", c.eval_iterations);
  get("eval_max_pairs", c.eval_max_pairs);
  c.validate();
  return c;
}

double lr_schedule(double epoch, const TrainConfig& config) {
  if (epoch < config.decay_start_epoch) return 1.0;
  const double span = config.epochs - config.decay_start_epoch;
  return std::clamp((config.epochs - epoch) / span, 0.0, 1.0);
}

// ---------------------------------------------------------------- adam

void adam_step(ParamMap& params, const std::map<std::string, Tensor>& grads, AdamState& state, double lr) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(AdamState::kBeta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(AdamState::kBeta2, static_cast<double>(state.step));
  for (auto& [name, param] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw std::invalid_argument("adam_step: no gradient for " + name);
    const Tensor& g = git->second;
    if (g.shape() != param.shape()) {
      throw ShapeError("adam_step: gradient of " + name + " is " + shape_str(g.shape()) + ", parameter is " +
                       shape_str(param.shape()));
    }
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(param.numel(), 0.0f);
      v.assign(param.numel(), 0.0f);
    }
    if (m.size() != param.numel() || v.size() != param.numel()) {
      throw ShapeError("adam_step: moment size of " + name + " does not match the parameter");
    }
    std::vector<float> updated(param.data().begin(), param.data().end());
    for (std::size_t i = 0; i < updated.size(); ++i) {
      const double gi = g.at(i);
      m[i] = static_cast<float>(AdamState::kBeta1 * m[i] + (1.0 - AdamState::kBeta1) * gi);
      v[i] = static_cast<float>(AdamState::kBeta2 * v[i] + (1.0 - AdamState::kBeta2) * gi * gi);
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      updated[i] = static_cast<float>(updated[i] - lr * mhat / (std::sqrt(vhat) + AdamState::kEps));
    }
    param = Tensor(param.shape(), std::move(updated));
  }
}

// ---------------------------------------------------------------- replay buffer

Tensor ReplayBuffer::sample(const Tensor& fresh_batch, std::mt19937_64& rng) {
  if (fresh_batch.rank() != 4) throw ShapeError("ReplayBuffer::sample: expected [B,C,H,W], got " + shape_str(fresh_batch.shape()));
  std::vector<Tensor> out;
  std::bernoulli_distribution coin(0.5);
  for (int b = 0; b < fresh_batch.dim(0); ++b) {
    Tensor fresh = unstack(fresh_batch.detach(), b);
    if (capacity_ == 0) {
      out.push_back(std::move(fresh));
    } else if (size() < capacity_) {
      images_.push_back(fresh);
      out.push_back(std::move(fresh));
    } else if (coin(rng)) {
      const std::size_t slot = std::uniform_int_distribution<std::size_t>(0, images_.size() - 1)(rng);
      out.push_back(images_[slot]);
      images_[slot] = std::move(fresh);
    } else {
      out.push_back(std::move(fresh));
    }
  }
  return stack(out);
}

void ReplayBuffer::restore(std::vector<Tensor> images) {
  if (static_cast<int>(images.size()) > capacity_) throw std::invalid_argument("ReplayBuffer::restore: more images than capacity");
  for (Tensor& t : images) t = t.detach();
  images_ = std::move(images);
}

// ---------------------------------------------------------------- trainer

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint32_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream,
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

namespace {

constexpr std::uint32_t kEpochStream = 1;
constexpr std::uint32_t kBatchStream = 2;
constexpr std::uint32_t kBufferStream = 3;

ParamMap watch_all(Tape& tape, const ParamMap& params) {
  ParamMap out;
  for (const auto& [name, t] : params) out.emplace(name, tape.watch(t));
  return out;
}

std::map<std::string, Tensor> grads_of(const Tape& tape, const ParamMap& watched) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : watched) out.emplace(name, tape.grad(t));
  return out;
}

double max_abs_grad(const Tape& tape, const ParamMap& watched) {
  double worst = 0.0;
  for (const auto& [name, t] : watched)
    for (float g : tape.grad_view(t)) worst = std::max(worst, static_cast<double>(std::fabs(g)));
  return worst;
}

// Optimizer state names in checkpoints.
std::string adam_key(const char* kind, const std::string& param) { return std::string("adam.") + kind + "." + param; }

void put_adam(Checkpoint& ckpt, const AdamState& s, const char* ns, const ParamMap& params) {
  ckpt.tensors[std::string("adam.step.") + ns] = Tensor::scalar(static_cast<float>(s.step));
  for (const auto& [name, t] : params) {
    auto mit = s.m.find(name);
    if (mit == s.m.end()) continue;
    ckpt.tensors[adam_key("m", name)] = Tensor(t.shape(), mit->second);
    ckpt.tensors[adam_key("v", name)] = Tensor(t.shape(), s.v.at(name));
  }
}

AdamState get_adam(const Checkpoint& ckpt, const char* ns, const ParamMap& params) {
  AdamState s;
  auto step = ckpt.tensors.find(std::string("adam.step.") + ns);
  if (step == ckpt.tensors.end()) throw CheckpointError(std::string("checkpoint has no optimizer state for ") + ns);
  s.step = static_cast<std::int64_t>(step->second.item());
  for (const auto& [name, t] : params) {
    auto m = ckpt.tensors.find(adam_key("m", name));
    auto v = ckpt.tensors.find(adam_key("v", name));
    if (m == ckpt.tensors.end() || v == ckpt.tensors.end()) {
      if (s.step > 0) throw CheckpointError("checkpoint lacks optimizer moments for " + name);
      continue;
    }
    s.m[name].assign(m->second.data().begin(), m->second.data().end());
    s.v[name].assign(v->second.data().begin(), v->second.data().end());
  }
  return s;
}

}  // namespace

Trainer::Trainer(TrainConfig config, DatasetManifest manifest, NetworkParams params)
    : config_(std::move(config)), manifest_(std::move(manifest)), params_(std::move(params)), buffer_(config_.buffer_size) {
  config_.validate();
  if (manifest_.train.empty()) throw std::invalid_argument("Trainer: dataset has no training entries");
  for (const char* ns : {kGenerator, kDiscriminator, kPoseRegressor, kFeatureNet}) {
    if (params_.subset(ns).empty()) throw std::invalid_argument(std::string("Trainer: missing ") + ns + " parameters");
  }
  if (params_.arch.resolution != manifest_.height || params_.arch.resolution != manifest_.width) {
    throw std::invalid_argument("Trainer: model resolution " + std::to_string(params_.arch.resolution) +
                                " does not match the dataset");
  }
  const int n = static_cast<int>(manifest_.train.size());
  iterations_per_epoch_ = (n + config_.batch - 1) / config_.batch;
  total_iterations_ = config_.iterations > 0 ? config_.iterations : config_.epochs * iterations_per_epoch_;
}

double Trainer::epoch_at(int iteration) const {
  return static_cast<double>(iteration) * config_.epochs / total_iterations_;
}

std::vector<int> Trainer::batch_indices(int iteration) const {
  const int n = static_cast<int>(manifest_.train.size());
  const int epoch = iteration / iterations_per_epoch_;
  const int pos = iteration % iterations_per_epoch_;
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng = stream_rng(config_.seed, kEpochStream, static_cast<std::uint64_t>(epoch));
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> out;
  for (int j = 0; j < config_.batch; ++j) out.push_back(perm[(pos * config_.batch + j) % n]);
  return out;
}

LossReport Trainer::step(IsolationAudit* audit) {
  const int it = iteration_;
  const ArchDescriptor& arch = params_.arch;
  std::mt19937_64 batch_rng = stream_rng(config_.seed, kBatchStream, static_cast<std::uint64_t>(it));
  const std::vector<int> indices = batch_indices(it);
  const TrainingBatch batch = load_batch(manifest_, indices, batch_rng, {config_.flip, arch.variance});
  const double scale = lr_schedule(epoch_at(it), config_);

  Tape tape;
  const ParamMap g = watch_all(tape, params_.subset(kGenerator));
  const Tensor fake = generator_forward(arch, g, batch.images, batch.maps_target);
  const Tensor cycle = generator_forward(arch, g, fake, batch.maps_source);

  // D step on buffered, detached fakes.
  const ParamMap d = watch_all(tape, params_.subset(kDiscriminator));
  std::mt19937_64 buffer_rng = stream_rng(config_.seed, kBufferStream, static_cast<std::uint64_t>(it));
  const std::vector<Tensor> fresh{fake.detach(), cycle.detach()};
  const Tensor fakes = buffer_.sample(concat(fresh, 0), buffer_rng);
  const Tensor d_loss = adv_d_loss(arch, d, batch.images, fakes);
  tape.backward(d_loss);
  if (audit) {
    audit->g_grad_after_d = max_abs_grad(tape, g);
    audit->d_grad_after_d = max_abs_grad(tape, d);
  }
  {
    ParamMap updated = params_.subset(kDiscriminator);
    adam_step(updated, grads_of(tape, d), adam_d_, config_.lr_d * scale);
    params_.assign(updated);
  }

  // PHI step on real images.
  tape.zero_grad();
  const ParamMap phi = watch_all(tape, params_.subset(kPoseRegressor));
  const Tensor phi_l = phi_loss(pose_regressor_forward(arch, phi, batch.images), batch.maps_source);
  tape.backward(phi_l * static_cast<float>(config_.lambda_P));
  if (audit) {
    audit->g_grad_after_phi = max_abs_grad(tape, g);
    audit->phi_grad_after_phi = max_abs_grad(tape, phi);
  }
  {
    ParamMap updated = params_.subset(kPoseRegressor);
    adam_step(updated, grads_of(tape, phi), adam_phi_, config_.lr_phi * scale);
    params_.assign(updated);
  }

  // G step against the freshly updated D and PHI, held constant.
  tape.zero_grad();
  const CycleBatch cb{batch.images, fake, cycle, batch.maps_source, batch.maps_target, batch.skel_source, batch.skel_target};
  GeneratorLoss gl = full_generator_loss(params_, cb, config_.weights(), config_.ablation_l1);
  tape.backward(gl.total);
  if (audit) {
    audit->d_grad_after_g = max_abs_grad(tape, d);
    audit->phi_grad_after_g = max_abs_grad(tape, phi);
    audit->g_grad_after_g = max_abs_grad(tape, g);
  }
  {
    ParamMap updated = params_.subset(kGenerator);
    adam_step(updated, grads_of(tape, g), adam_g_, config_.lr_g * scale);
    params_.assign(updated);
  }

  LossReport report = gl.report;
  report.phi = phi_l.item();
  report.total_D = d_loss.item();
  history_.push_back(report);
  if (!report.all_finite()) {
    nlohmann::json dump = nlohmann::json::array();
    const std::size_t first = history_.size() > 50 ? history_.size() - 50 : 0;
    for (std::size_t i = first; i < history_.size(); ++i) {
      nlohmann::json row = history_[i].to_json();
      row["iteration"] = it - static_cast<int>(history_.size() - 1 - i);
      dump.push_back(std::move(row));
    }
    throw TrainingDiverged("non-finite loss at iteration " + std::to_string(it) + ": " + report.to_json().dump(),
                           std::move(dump));
  }
  ++iteration_;
  return report;
}

Checkpoint Trainer::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.iteration = static_cast<std::uint64_t>(iteration_);
  put_params(ckpt, params_);
  put_adam(ckpt, adam_g_, kGenerator, params_.subset(kGenerator));
  put_adam(ckpt, adam_d_, kDiscriminator, params_.subset(kDiscriminator));
  put_adam(ckpt, adam_phi_, kPoseRegressor, params_.subset(kPoseRegressor));
  char name[32];
  for (int i = 0; i < buffer_.size(); ++i) {
    std::snprintf(name, sizeof name, "buffer.%06d", i);
    ckpt.tensors[name] = buffer_.images()[i];
  }
  return ckpt;
}

void Trainer::restore(const Checkpoint& ckpt) {
  NetworkParams p = params_from(ckpt);
  if (!(p.arch == params_.arch)) throw CheckpointError("checkpoint architecture differs from the trainer's");
  for (const auto& [name, t] : params_.tensors) {
    auto it = p.tensors.find(name);
    if (it == p.tensors.end()) throw CheckpointError("checkpoint lacks parameter " + name);
    if (it->second.shape() != t.shape()) throw CheckpointError("checkpoint parameter " + name + " has the wrong shape");
  }
  params_ = std::move(p);
  adam_g_ = get_adam(ckpt, kGenerator, params_.subset(kGenerator));
  adam_d_ = get_adam(ckpt, kDiscriminator, params_.subset(kDiscriminator));
  adam_phi_ = get_adam(ckpt, kPoseRegressor, params_.subset(kPoseRegressor));
  std::vector<Tensor> images;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind("buffer.", 0) == 0) images.push_back(t);
  }
  buffer_.restore(std::move(images));
  iteration_ = static_cast<int>(ckpt.iteration);
  history_.clear();
}

NetworkParams initial_params(const NetworkParams& psi_params, const TrainConfig& config) {
  ArchDescriptor arch = psi_params.arch;
  arch.instance_norm = config.instance_norm;
  NetworkParams p = init_weights(arch, config.seed);
  rescale_he(p, kPoseRegressor);
  const ParamMap psi = psi_params.subset(kFeatureNet);
  if (psi.empty()) throw std::invalid_argument("initial_params: no PSI parameters supplied");
  for (const auto& [name, t] : psi) p.tensors[name] = t.detach();
  return p;
}

// ---------------------------------------------------------------- loop

namespace {

// Keeps log records that precede a resume point.
void truncate_log(const fs::path& path, int resume_iteration) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> kept;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("iteration")) continue;
    const int it = j.at("iteration").get<int>();
    const bool is_eval = j.contains("event");
    if ((is_eval && it <= resume_iteration) || (!is_eval && it < resume_iteration)) kept.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << '\n';
}

}  // namespace

TrainLoopResult train_loop(const TrainConfig& config, const DatasetManifest& manifest, const NetworkParams& initial,
                           const fs::path& out_dir, const TrainLoopOptions& options) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  Trainer trainer(config, manifest, initial);
  const fs::path log_path = out_dir / "train_log.jsonl";
  if (options.resume) {
    trainer.restore(load_checkpoint(*options.resume));
    truncate_log(log_path, trainer.iteration());
  } else {
    std::ofstream(log_path, std::ios::trunc);
  }
  std::ofstream log(log_path, std::ios::app);
  if (!log) throw IoError("cannot open " + log_path.string());

  const std::set<int> eval_points(config.eval_iterations.begin(), config.eval_iterations.end());
  const int total = trainer.total_iterations();
  const int stop = options.stop_after > 0 ? std::min(options.stop_after, total) : total;
  TrainLoopResult result;
  EvalOptions eval_opts;
  eval_opts.max_pairs = config.eval_max_pairs;
  const bool can_eval = !manifest.eval.empty();

  while (trainer.iteration() < stop) {
    const int it = trainer.iteration();
    const LossReport r = trainer.step();
    result.trace.push_back(r);
    nlohmann::json line = r.to_json();
    line["iteration"] = it;
    line["lr_scale"] = lr_schedule(trainer.epoch_at(it), config);
    log << line.dump() << '\n';
    log.flush();
    if (options.on_iteration) options.on_iteration(it, r);

    const int done = trainer.iteration();
    if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < total) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_%06d.pgw", done);
      save_checkpoint(out_dir / name, trainer.to_checkpoint());
    }
    const bool eval_now = eval_points.count(done) > 0 || (config.eval_every > 0 && done % config.eval_every == 0) ||
                          done == total;
    if (can_eval && eval_now) {
      const MetricReport m = evaluate_model(trainer.params(), manifest, eval_opts);
      nlohmann::json ev = m.to_json();
      ev["event"] = "eval";
      ev["iteration"] = done;
      log << ev.dump() << '\n';
      log.flush();
      if (!options.quiet) {
        std::fprintf(stderr, "[eval %d] ssim %.4f (copy %.4f, beats %.2f) joint err %.2f px, phi real %.2f px, IS %.3f\n",
                     done, m.ssim_mean, m.copy_ssim_mean, m.beat_copy_fraction, m.joint_error_px_mean,
                     m.phi_real_joint_error_px_mean, m.is_value);
      }
    }
    if (!options.quiet && (done % 50 == 0 || done == stop)) {
      std::fprintf(stderr, "[train %d/%d] G %.4f D %.4f pose %.5f/%.5f id %.4f phi %.5f\n", done, total, r.total_G,
                   r.total_D, r.pose_fwd, r.pose_bwd, r.identity, r.phi);
    }
  }
  result.final_checkpoint = trainer.to_checkpoint();
  if (trainer.iteration() == total) {
    result.final_path = out_dir / "ckpt_final.pgw";
    save_checkpoint(result.final_path, result.final_checkpoint);
  }
  return result;
}

}  // namespace posewarp
