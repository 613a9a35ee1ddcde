#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "helpers.hpp"
#include "posewarp/checkpoint.hpp"
#include "posewarp/classifier.hpp"
#include "posewarp/data.hpp"
#include "posewarp/nn.hpp"
#include "posewarp/ops.hpp"
#include "posewarp/pose.hpp"

using namespace posewarp;
using testutil::random_tensor;

namespace {

Tensor random_maps(int side, std::mt19937_64& rng) {
  Skeleton s;
  std::uniform_real_distribution<double> d(2, side - 3);
  for (int i = 0; i < kDefaultJoints; ++i) s.joints.push_back({d(rng), d(rng), true});
  return embed(s, side, side);
}

bool has_nonfinite(const Tensor& t) {
  for (float v : t.data())
    if (!std::isfinite(v)) return true;
  return false;
}

}  // namespace

TEST_SUITE("nn") {
  TEST_CASE("parameter namespaces") {
    const NetworkParams p = init_weights(ArchDescriptor{}, 1);
    for (const auto& [name, t] : p.tensors) {
      int owners = 0;
      for (const char* ns : {kGenerator, kDiscriminator, kPoseRegressor, kFeatureNet}) {
        owners += name.rfind(std::string(ns) + ".", 0) == 0 ? 1 : 0;
      }
      CHECK_MESSAGE(owners == 1, name);
      CHECK_FALSE(t.requires_grad());
    }
    std::size_t total = 0;
    for (const char* ns : {kGenerator, kDiscriminator, kPoseRegressor, kFeatureNet}) total += p.subset(ns).size();
    CHECK(total == p.tensors.size());
  }

  TEST_CASE("generator output shape and range") {
    for (int side : {32, 64, 128}) {
      CAPTURE(side);
      ArchDescriptor arch;
      arch.resolution = side;
      const NetworkParams p = init_weights(arch, 2);
      std::mt19937_64 rng(side);
      const Tensor img = random_tensor({3, side, side}, rng);
      const Tensor out = generator_forward(arch, p.tensors, img, random_maps(side, rng));
      CHECK(out.shape() == img.shape());
      CHECK_FALSE(has_nonfinite(out));
      for (float v : out.data()) CHECK((v >= -1.0f && v <= 1.0f));
    }
    ArchDescriptor arch;
    arch.resolution = 30;
    const NetworkParams p = init_weights(arch, 2);
    CHECK_THROWS(generator_forward(arch, p.tensors, Tensor::zeros({3, 30, 30}), Tensor::zeros({8, 30, 30})));
  }

  TEST_CASE("every generator parameter receives gradient") {
    ArchDescriptor arch;
    arch.resolution = 32;
    const NetworkParams p = init_weights(arch, 3);
    std::mt19937_64 rng(3);
    const Tensor img = random_tensor({3, 32, 32}, rng), target = random_tensor({3, 32, 32}, rng);
    const Tensor maps = random_maps(32, rng);
    Tape tape;
    ParamMap watched = p.tensors;
    for (auto& [name, t] : watched)
      if (name.rfind("G.", 0) == 0) t = tape.watch(t);
    tape.backward(mse(generator_forward(arch, watched, img, maps), target));
    int checked = 0;
    for (const auto& [name, t] : watched) {
      if (name.rfind("G.", 0) != 0) continue;
      double m = 0.0;
      for (float g : tape.grad_view(t)) m = std::max(m, static_cast<double>(std::abs(g)));
      CHECK_MESSAGE(m > 0.0, name);
      ++checked;
    }
    CHECK(checked == static_cast<int>(p.subset(kGenerator).size()));
  }

  TEST_CASE("discriminator grid") {
    ArchDescriptor arch;
    // No stack of stride-2 convs gives both 26 at 256 and 6 at 64; the recipe
    // keeps 6 at the working resolution.
    CHECK(discriminator_grid(arch, 256) == 30);
    CHECK(discriminator_grid(arch, 64) == 6);
    for (int side : {64, 256}) {
      arch.resolution = side;
      const NetworkParams p = init_weights(arch, 4);
      std::mt19937_64 rng(side);
      const Tensor a = discriminator_forward(arch, p.tensors, random_tensor({3, side, side}, rng));
      const Tensor b = discriminator_forward(arch, p.tensors, Tensor::full({3, side, side}, 0.3f));
      const int g = side == 256 ? 30 : 6;
      CHECK(a.shape() == Shape{1, g, g});
      CHECK(b.shape() == a.shape());
    }
    arch.resolution = 64;
    const NetworkParams p = init_weights(arch, 4);
    CHECK(discriminator_forward(arch, p.tensors, Tensor::zeros({2, 3, 64, 64})).shape() == Shape{2, 1, 6, 6});
    CHECK_THROWS(discriminator_forward(arch, p.tensors, Tensor::zeros({3, 8, 8})));
  }

  TEST_CASE("pose regressor") {
    ArchDescriptor arch;
    const NetworkParams p = init_weights(arch, 5);
    std::mt19937_64 rng(5);
    const Tensor out = pose_regressor_forward(arch, p.tensors, random_tensor({3, 64, 64}, rng));
    CHECK(out.shape() == Shape{8, 64, 64});
    for (float v : out.data()) CHECK((v >= 0.0f && v <= 1.0f));
  }

  TEST_CASE("feature extractor") {
    ArchDescriptor arch;
    const NetworkParams p = init_weights(arch, 6);
    std::mt19937_64 rng(6);
    const Tensor img = random_tensor({3, 64, 64}, rng);
    const Tensor f1 = feature_extract(arch, p.tensors, img, arch.psi_layer);
    const Tensor f2 = feature_extract(arch, p.tensors, img, arch.psi_layer);
    CHECK(testutil::bit_equal(f1, f2));
    CHECK(feature_reduction(2) == 4);
    CHECK(f1.shape() == Shape{arch.psi_widths[1], 16, 16});
    CHECK_THROWS_AS(feature_extract(arch, p.tensors, img, 0), std::out_of_range);
    CHECK_THROWS_AS(feature_extract(arch, p.tensors, img, 4), std::out_of_range);
    CHECK(classifier_logits(arch, p.tensors, stack(std::vector<Tensor>{img, img})).shape() == Shape{2, 10});
  }

  TEST_CASE("pretrained features separate limb textures") {
    testutil::TempDir dir("psi");
    const DatasetManifest m = generate_dataset(400, 40, 11, 32, 32, dir.path());
    ArchDescriptor arch;
    PretrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 11;
    const PretrainResult r = pretrain_psi(m, arch, cfg);
    arch.resolution = 32;
    std::mt19937_64 rng(12);
    const Skeleton s = sample_skeleton(rng, skeleton_config_for(32, 32));
    Appearance a = make_appearance(11, 5, 32, 32);
    Appearance b = a;
    a.texture = 1;
    b.texture = 3;
    const Tensor fa = feature_extract(arch, r.params.tensors, render_sprite(a, s, 32, 32), arch.psi_layer);
    const Tensor fb = feature_extract(arch, r.params.tensors, render_sprite(b, s, 32, 32), arch.psi_layer);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < fa.numel(); ++i) {
      dot += static_cast<double>(fa.at(i)) * fb.at(i);
      na += static_cast<double>(fa.at(i)) * fa.at(i);
      nb += static_cast<double>(fb.at(i)) * fb.at(i);
    }
    const double cosine = dot / std::sqrt(na * nb);
    CAPTURE(cosine);
    CHECK(cosine < 0.99);
  }

  TEST_CASE("init_weights") {
    const ArchDescriptor arch;
    const NetworkParams a = init_weights(arch, 7), b = init_weights(arch, 7), c = init_weights(arch, 8);
    for (const auto& [name, t] : a.tensors) CHECK(testutil::bit_equal(t, b.tensors.at(name)));
    CHECK_FALSE(testutil::bit_equal(a.tensors.at("G.enc1.w"), c.tensors.at("G.enc1.w")));
    const Tensor* big = nullptr;
    for (const auto& spec : parameter_specs(arch)) {
      if (!spec.is_bias && shape_numel(spec.shape) >= 4096) {
        big = &a.tensors.at(spec.name);
        break;
      }
    }
    REQUIRE(big != nullptr);
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < 4096; ++i) {
      s += big->at(i);
      s2 += static_cast<double>(big->at(i)) * big->at(i);
    }
    const double sd = std::sqrt(s2 / 4096 - (s / 4096) * (s / 4096));
    CHECK((sd >= 0.018 && sd <= 0.022));
    for (const auto& spec : parameter_specs(arch)) {
      if (!spec.is_bias) continue;
      for (float v : a.tensors.at(spec.name).data()) CHECK(v == 0.0f);
    }
    // Independent streams per namespace.
    const Tensor& g = a.tensors.at("G.enc1.w");
    const Tensor& d = a.tensors.at("D.conv1.w");
    CHECK(g.at(0) != d.at(0));
  }

  TEST_CASE("rescale_he") {
    const ArchDescriptor arch;
    const NetworkParams base = init_weights(arch, 3);
    NetworkParams p = base;
    rescale_he(p, kPoseRegressor);
    for (const auto& spec : parameter_specs(arch)) {
      CAPTURE(spec.name);
      const Tensor& before = base.tensors.at(spec.name);
      const Tensor& after = p.tensors.at(spec.name);
      if (spec.is_bias || spec.name.rfind("PHI.", 0) != 0) {
        CHECK(testutil::bit_equal(before, after));
        continue;
      }
      const double fan_in = static_cast<double>(shape_numel(spec.shape)) / spec.shape[0];
      const double ratio = std::sqrt(2.0 / fan_in) / 0.02;
      for (std::size_t i = 0; i < before.numel(); i += 97) CHECK(after.at(i) == doctest::Approx(before.at(i) * ratio));
    }
  }

  TEST_CASE("arch descriptor round-trip") {
    ArchDescriptor a = toy_arch(32);
    a.instance_norm = true;
    a.variance = 0.025;
    CHECK(decode_arch(encode_arch(a)) == a);
    CHECK(decode_arch(encode_arch(ArchDescriptor{})) == ArchDescriptor{});
  }

  TEST_CASE("checkpoint round-trip and errors") {
    testutil::TempDir dir("ckpt");
    Checkpoint c;
    c.iteration = 123;
    put_params(c, init_weights(toy_arch(16), 9));
    c.tensors["adam.m.G.enc1.w"] = Tensor::full({2, 2}, 0.5f);
    save_checkpoint(dir / "a.pgw", c);
    const Checkpoint back = load_checkpoint(dir / "a.pgw");
    CHECK(back.iteration == 123);
    CHECK(back.version == kCheckpointVersion);
    REQUIRE(back.tensors.size() == c.tensors.size());
    for (const auto& [name, t] : c.tensors) CHECK(testutil::bit_equal(t, back.tensors.at(name)));
    save_checkpoint(dir / "b.pgw", back);
    CHECK(testutil::read_file(dir / "a.pgw") == testutil::read_file(dir / "b.pgw"));
    const NetworkParams p = params_from(back);
    CHECK(p.arch == toy_arch(16));
    for (const auto& [name, t] : p.tensors) CHECK_FALSE(t.requires_grad());

    const std::string bytes = testutil::read_file(dir / "a.pgw");
    CHECK(bytes.substr(0, 4) == "PGW1");
    auto write = [&](const std::string& name, const std::string& content) {
      std::ofstream(dir / name, std::ios::binary) << content;
      return dir / name;
    };
    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(load_checkpoint(write("magic.pgw", bad)), BadMagicError);
    CHECK_THROWS_AS(load_checkpoint(write("short.pgw", bytes.substr(0, bytes.size() / 2))), TruncatedCheckpointError);
    std::string version = bytes;
    version[4] = 9;
    CHECK_THROWS_AS(load_checkpoint(write("version.pgw", version)), VersionMismatchError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.pgw"), CheckpointIoError);
  }
}
