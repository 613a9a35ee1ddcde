// posewarp: dataset generation, PSI pretraining, training, synthesis,
// evaluation and gradient verification.
//
// Exit codes: 0 success, 1 verification failure, 2 usage error, 3 IO error.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "posewarp/checkpoint.hpp"
#include "posewarp/classifier.hpp"
#include "posewarp/data.hpp"
#include "posewarp/errors.hpp"
#include "posewarp/gradcheck_suites.hpp"
#include "posewarp/image_io.hpp"
#include "posewarp/metrics.hpp"
#include "posewarp/nn.hpp"
#include "posewarp/ops.hpp"
#include "posewarp/pose.hpp"
#include "posewarp/train.hpp"

namespace fs = std::filesystem;
using namespace posewarp;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerify = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VerificationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::uint64_t fnv1a(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::uint64_t h = 1469598103934665603ull;
  char c;
  while (in.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

// Binds a flag to a variable and to a key of the --config JSON. Config values
// apply only where the flag was not given on the command line.
class Settings {
 public:
  explicit Settings(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_, "JSON file with defaults for this command's flags");
    app_->add_option("--seed", seed_, "random seed");
    bind_key("seed", app_->get_option("--seed"), seed_);
  }

  template <typename T>
  CLI::Option* add(const std::string& flag, const std::string& key, T& var, const std::string& help) {
    CLI::Option* opt = app_->add_option(flag, var, help);
    bind_key(key, opt, var);
    return opt;
  }

  CLI::Option* add_flag(const std::string& flag, const std::string& key, bool& var, const std::string& help) {
    CLI::Option* opt = app_->add_flag(flag, var, help);
    bind_key(key, opt, var);
    return opt;
  }

  void apply_config() {
    if (config_path_.empty()) return;
    const nlohmann::json j = read_json_file(config_path_);
    if (!j.is_object()) throw UsageError("config " + config_path_ + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
      auto it = setters_.find(key);
      if (it == setters_.end()) throw UsageError("config " + config_path_ + ": unknown key \"" + key + "\"");
      if (it->second.first->count() > 0) continue;
      try {
        it->second.second(value);
      } catch (const nlohmann::json::exception&) {
        throw UsageError("config " + config_path_ + ": bad value for \"" + key + "\": " + value.dump());
      }
    }
  }

  std::uint64_t seed() const { return seed_; }
  bool seed_given() const { return app_->get_option("--seed")->count() > 0; }
  const std::string& config_path() const { return config_path_; }

 private:
  template <typename T>
  void bind_key(const std::string& key, CLI::Option* opt, T& var) {
    setters_[key] = {opt, [&var](const nlohmann::json& v) { var = v.get<T>(); }};
  }

  CLI::App* app_;
  std::string config_path_;
  std::uint64_t seed_ = 0;
  std::map<std::string, std::pair<CLI::Option*, std::function<void(const nlohmann::json&)>>> setters_;
};

// ---------------------------------------------------------------- commands

struct DatagenArgs {
  std::string out;
  int n_train = 2000;
  int n_eval = 200;
  int size = 64;
};

int run_datagen(const DatagenArgs& a, std::uint64_t seed) {
  if (a.out.empty()) throw UsageError("datagen: --out is required");
  if (a.size < 16) throw UsageError("datagen: --size must be at least 16");
  const DatasetManifest m = generate_dataset(a.n_train, a.n_eval, seed, a.size, a.size, a.out);
  std::array<int, kTextureClasses> per_class{};
  for (const auto& e : m.train) ++per_class[e.label];
  std::printf("dataset      %s\n", a.out.c_str());
  std::printf("seed         %llu\n", static_cast<unsigned long long>(seed));
  std::printf("size         %dx%d, %d joints\n", m.width, m.height, m.n_joints);
  std::printf("train        %zu\n", m.train.size());
  std::printf("eval pairs   %zu\n", m.eval.size());
  std::printf("classes     ");
  for (int c : per_class) std::printf(" %d", c);
  std::printf("\nmanifest     %016llx\n", static_cast<unsigned long long>(fnv1a(fs::path(a.out) / "manifest.json")));
  return kExitOk;
}

struct PretrainArgs {
  std::string data, out;
  int epochs = PretrainConfig{}.epochs;
  int batch = PretrainConfig{}.batch;
  double lr = PretrainConfig{}.lr;
};

int run_pretrain(const PretrainArgs& a, std::uint64_t seed) {
  if (a.data.empty() || a.out.empty()) throw UsageError("pretrain-psi: --data and --out are required");
  const DatasetManifest m = load_manifest(a.data);
  PretrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.batch = a.batch;
  cfg.lr = a.lr;
  cfg.seed = seed;
  ArchDescriptor arch;
  arch.resolution = m.height;
  const PretrainResult r = pretrain_psi(m, arch, cfg, [](int epoch, double loss) {
    std::fprintf(stderr, "[pretrain-psi] epoch %d loss %.4f\n", epoch + 1, loss);
  });
  Checkpoint ckpt;
  put_params(ckpt, r.params);
  save_checkpoint(a.out, ckpt);
  std::printf("psi checkpoint  %s\n", a.out.c_str());
  std::printf("eval accuracy   %.4f (%zu held-out sprites)\n", r.eval_accuracy, m.eval.size());
  return kExitOk;
}

struct TrainArgs {
  std::string data, psi, out, resume;
  bool ablation_l1 = false;
  int iterations = -1;
};

int run_train(const TrainArgs& a, const Settings& s) {
  if (a.data.empty() || a.psi.empty() || a.out.empty()) throw UsageError("train: --data, --psi and --out are required");
  TrainConfig config;
  if (!s.config_path().empty()) {
    try {
      config = TrainConfig::from_json(read_json_file(s.config_path()));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (s.seed_given()) config.seed = s.seed();
  if (a.ablation_l1) config.ablation_l1 = true;
  if (a.iterations >= 0) config.iterations = a.iterations;
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const DatasetManifest m = load_manifest(a.data);
  const NetworkParams psi = params_from(load_checkpoint(a.psi));
  const NetworkParams init = initial_params(psi, config);
  fs::create_directories(a.out);
  write_json_file(fs::path(a.out) / "config.json", config.to_json());
  TrainLoopOptions opts;
  if (!a.resume.empty()) opts.resume = fs::path(a.resume);
  try {
    const TrainLoopResult r = train_loop(config, m, init, a.out, opts);
    std::printf("final checkpoint  %s\n", r.final_path.string().c_str());
    std::printf("iterations        %llu\n", static_cast<unsigned long long>(r.final_checkpoint.iteration));
  } catch (const TrainingDiverged& e) {
    const fs::path dump = fs::path(a.out) / "divergence.json";
    write_json_file(dump, e.history());
    throw VerificationFailure(std::string(e.what()) + " (loss history in " + dump.string() + ")");
  }
  return kExitOk;
}

struct SynthArgs {
  std::string ckpt, image, pose, out;
};

int run_synth(const SynthArgs& a) {
  if (a.ckpt.empty() || a.image.empty() || a.pose.empty() || a.out.empty()) {
    throw UsageError("synth: --ckpt, --image, --pose and --out are required");
  }
  const NetworkParams params = params_from(load_checkpoint(a.ckpt));
  const Tensor image = load_image(a.image);
  const int h = image.dim(1), w = image.dim(2);
  if (h != params.arch.resolution || w != params.arch.resolution) {
    throw UsageError("synth: image is " + std::to_string(w) + "x" + std::to_string(h) + " but the model expects " +
                     std::to_string(params.arch.resolution) + "x" + std::to_string(params.arch.resolution));
  }
  const nlohmann::json pose = read_json_file(a.pose);
  // A single skeleton is an array of joint triples; a pose list is an array of skeletons.
  std::vector<Skeleton> skeletons;
  try {
    const bool is_list = pose.is_array() && !pose.empty() && pose[0].is_array() && !pose[0].empty() && pose[0][0].is_array();
    if (is_list) {
      for (const auto& s : pose) skeletons.push_back(skeleton_from_json(s));
    } else {
      skeletons.push_back(skeleton_from_json(pose));
    }
  } catch (const std::invalid_argument& e) {
    throw FormatError("malformed skeleton JSON in " + a.pose + ": " + e.what());
  }
  const ParamMap g = params.subset(kGenerator);
  std::vector<Tensor> frames;
  if (skeletons.size() > 1) frames.push_back(image);
  for (const Skeleton& s : skeletons) {
    if (s.size() != params.arch.n_joints) {
      throw FormatError("skeleton in " + a.pose + " has " + std::to_string(s.size()) + " joints, model expects " +
                        std::to_string(params.arch.n_joints));
    }
    const Tensor maps = embed(s, h, w, params.arch.variance);
    frames.push_back(generator_forward(params.arch, g, image, maps));
  }
  const Tensor out = frames.size() == 1 ? frames.front() : concat(frames, 2);
  save_image(a.out, out);
  std::printf("wrote %s (%dx%d, %zu pose%s)\n", a.out.c_str(), out.dim(2), out.dim(1), skeletons.size(),
              skeletons.size() == 1 ? "" : "s");
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt, data, out;
  int max_pairs = 0;
  int is_splits = 1;
};

void print_report(const MetricReport& r) {
  std::printf("%-30s %s\n", "metric", "value");
  std::printf("%-30s %d\n", "n_pairs", r.n_pairs);
  std::printf("%-30s %.4f\n", "ssim_mean", r.ssim_mean);
  std::printf("%-30s %.4f\n", "copy_ssim_mean", r.copy_ssim_mean);
  std::printf("%-30s %.4f\n", "beat_copy_fraction", r.beat_copy_fraction);
  std::printf("%-30s %.4f\n", "is_value", r.is_value);
  std::printf("%-30s %.3f\n", "joint_error_px_mean", r.joint_error_px_mean);
  std::printf("%-30s %.3f\n", "phi_real_joint_error_px_mean", r.phi_real_joint_error_px_mean);
}

int run_eval(const EvalArgs& a) {
  if (a.ckpt.empty() || a.data.empty()) throw UsageError("eval: --ckpt and --data are required");
  const DatasetManifest m = load_manifest(a.data);
  if (m.eval.empty()) throw IoError("eval: dataset " + a.data + " has no eval split");
  const NetworkParams params = params_from(load_checkpoint(a.ckpt));
  EvalOptions opts;
  opts.max_pairs = a.max_pairs;
  opts.is_splits = a.is_splits;
  const MetricReport r = evaluate_model(params, m, opts);
  if (!a.out.empty()) write_json_file(a.out, r.to_json());
  print_report(r);
  return kExitOk;
}

struct GradcheckArgs {
  std::string scope = "ops";
  int configs = kDefaultConfigs;
  std::string inject_fault;
};

int run_gradcheck(const GradcheckArgs& a, std::uint64_t seed) {
  if (!a.inject_fault.empty()) {
    const auto kind = op_from_name(a.inject_fault);
    if (!kind) throw UsageError("gradcheck: unknown op \"" + a.inject_fault + "\" for --inject-fault");
    testing::inject_fault(*kind);
  }
  std::vector<std::string> scopes{a.scope};
  if (a.scope == "all") scopes = {"ops", "losses", "end2end"};
  bool ok = true;
  std::vector<std::string> failing;
  for (const auto& scope : scopes) {
    SuiteResult r;
    try {
      r = run_suite(scope, seed, a.configs);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    std::printf("scope %s (%.1f s)\n", r.scope.c_str(), r.seconds);
    std::printf("  %-34s %12s %8s %10s  %s\n", "op", "worst_rel", "configs", "tolerance", "status");
    for (const auto& e : r.entries) {
      std::printf("  %-34s %12.3e %8d %10.0e  %s\n", e.name.c_str(), e.worst_rel_error, e.configs, e.tolerance,
                  e.passed() ? "ok" : ("FAIL  worst at " + e.worst_case).c_str());
    }
    for (const auto& f : r.failing()) failing.push_back(scope + ":" + f);
    ok = ok && r.passed();
  }
  testing::clear_fault();
  if (!ok) {
    std::string names;
    for (const auto& f : failing) names += (names.empty() ? "" : ", ") + f;
    throw VerificationFailure("gradient check failed for " + names);
  }
  std::printf("all gradient checks passed\n");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pose-conditioned image synthesis on procedural sprites"};
  app.require_subcommand(1);

  DatagenArgs datagen;
  CLI::App* c_datagen = app.add_subcommand("datagen", "Render the procedural sprite dataset");
  Settings s_datagen(c_datagen);
  s_datagen.add("--out", "out", datagen.out, "output directory");
  s_datagen.add("--n-train", "n_train", datagen.n_train, "training samples")->check(CLI::PositiveNumber);
  s_datagen.add("--n-eval", "n_eval", datagen.n_eval, "eval pairs")->check(CLI::NonNegativeNumber);
  s_datagen.add("--size", "size", datagen.size, "image side in pixels")->check(CLI::PositiveNumber);

  PretrainArgs pretrain;
  CLI::App* c_pretrain = app.add_subcommand("pretrain-psi", "Train the texture classifier whose trunk is PSI");
  Settings s_pretrain(c_pretrain);
  s_pretrain.add("--data", "data", pretrain.data, "dataset directory");
  s_pretrain.add("--out", "out", pretrain.out, "PSI checkpoint to write");
  s_pretrain.add("--epochs", "epochs", pretrain.epochs, "training epochs")->check(CLI::PositiveNumber);
  s_pretrain.add("--batch", "batch", pretrain.batch, "batch size")->check(CLI::PositiveNumber);
  s_pretrain.add("--lr", "lr", pretrain.lr, "Adam learning rate")->check(CLI::PositiveNumber);

  TrainArgs train;
  CLI::App* c_train = app.add_subcommand("train", "Train G, D and PHI");
  Settings s_train(c_train);
  c_train->add_option("--data", train.data, "dataset directory");
  c_train->add_option("--psi", train.psi, "PSI checkpoint from pretrain-psi");
  c_train->add_option("--out", train.out, "run directory");
  c_train->add_option("--resume", train.resume, "checkpoint to resume from");
  c_train->add_option("--iterations", train.iterations, "override the iteration budget");
  c_train->add_flag("--ablation-l1", train.ablation_l1, "replace the identity loss by an L1 cycle loss");

  SynthArgs synth;
  CLI::App* c_synth = app.add_subcommand("synth", "Render an image under new poses");
  Settings s_synth(c_synth);
  s_synth.add("--ckpt", "ckpt", synth.ckpt, "trained checkpoint");
  s_synth.add("--image", "image", synth.image, "source PPM image");
  s_synth.add("--pose", "pose", synth.pose, "skeleton JSON, or a JSON list of skeletons for a strip");
  s_synth.add("--out", "out", synth.out, "output PPM");

  EvalArgs eval;
  CLI::App* c_eval = app.add_subcommand("eval", "SSIM, IS and joint error on the eval split");
  Settings s_eval(c_eval);
  s_eval.add("--ckpt", "ckpt", eval.ckpt, "trained checkpoint");
  s_eval.add("--data", "data", eval.data, "dataset directory");
  s_eval.add("--out", "out", eval.out, "MetricReport JSON to write");
  s_eval.add("--max-pairs", "max_pairs", eval.max_pairs, "evaluate only the first N pairs (0 = all)");
  s_eval.add("--is-splits", "is_splits", eval.is_splits, "Inception Score splits")->check(CLI::PositiveNumber);

  GradcheckArgs gradcheck;
  CLI::App* c_grad = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  Settings s_grad(c_grad);
  s_grad.add("--scope", "scope", gradcheck.scope, "ops, losses, end2end or all")
      ->check(CLI::IsMember({"ops", "losses", "end2end", "all"}));
  s_grad.add("--configs", "configs", gradcheck.configs, "random configurations per op")->check(CLI::PositiveNumber);
  c_grad->add_option("--inject-fault", gradcheck.inject_fault, "corrupt one op's backward pass")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (c_datagen->parsed()) {
      s_datagen.apply_config();
      return run_datagen(datagen, s_datagen.seed());
    }
    if (c_pretrain->parsed()) {
      s_pretrain.apply_config();
      return run_pretrain(pretrain, s_pretrain.seed());
    }
    if (c_train->parsed()) return run_train(train, s_train);
    if (c_synth->parsed()) {
      s_synth.apply_config();
      return run_synth(synth);
    }
    if (c_eval->parsed()) {
      s_eval.apply_config();
      return run_eval(eval);
    }
    if (c_grad->parsed()) {
      s_grad.apply_config();
      return run_gradcheck(gradcheck, s_grad.seed());
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const VerificationFailure& e) {
    std::fprintf(stderr, "verification failed: %s\n", e.what());
    return kExitVerify;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitVerify;
  }
  return kExitUsage;
}
