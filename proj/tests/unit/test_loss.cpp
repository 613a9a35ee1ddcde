#include <doctest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "posewarp/loss.hpp"
#include "posewarp/ops.hpp"
#include "toy.hpp"

using namespace posewarp;
using testutil::random_tensor;

namespace {

double brute_gram_style(const Tensor& fa, const Tensor& ma, const Tensor& fb, const Tensor& mb,
                        const std::vector<int>& visible) {
  if (visible.empty()) return 0.0;
  const int c = fa.dim(0), h = fa.dim(1), w = fa.dim(2), p = h * w;
  double total = 0.0;
  for (int j : visible) {
    for (int a = 0; a < c; ++a)
      for (int b = 0; b < c; ++b) {
        double ga = 0.0, gb = 0.0;
        for (int i = 0; i < p; ++i) {
          const double m1 = ma.at(static_cast<std::size_t>(j) * p + i), m2 = mb.at(static_cast<std::size_t>(j) * p + i);
          ga += m1 * fa.at(static_cast<std::size_t>(a) * p + i) * m1 * fa.at(static_cast<std::size_t>(b) * p + i);
          gb += m2 * fb.at(static_cast<std::size_t>(a) * p + i) * m2 * fb.at(static_cast<std::size_t>(b) * p + i);
        }
        const double d = (ga - gb) / p;
        total += d * d;
      }
  }
  return total / visible.size();
}

double max_param_grad(const Tape& tape, const ParamMap& watched, const std::string& prefix) {
  double m = 0.0;
  for (const auto& [name, t] : watched) {
    if (name.rfind(prefix, 0) != 0) continue;
    for (float g : tape.grad_view(t)) m = std::max(m, static_cast<double>(std::abs(g)));
  }
  return m;
}

}  // namespace

TEST_SUITE("loss") {
  TEST_CASE("least-squares adversarial terms") {
    const Tensor ones = Tensor::full({2, 1, 6, 6}, 1.0f), zeros = Tensor::zeros({2, 1, 6, 6});
    const Tensor half = Tensor::full({2, 1, 6, 6}, 0.5f);
    CHECK(adv_d_loss_scores(ones, zeros).item() == 0.0f);
    CHECK(adv_d_loss_scores(half, half).item() == doctest::Approx(0.5));
    CHECK(adv_g_loss_scores(ones).item() == 0.0f);
    CHECK(adv_g_loss_scores(zeros).item() == 1.0f);
    CHECK_THROWS(adv_d_loss_scores(ones, Tensor::zeros({2, 1, 5, 5})));
    for (int seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(seed);
      const Tensor real = random_tensor({2, 1, 4, 4}, rng), fake = random_tensor({3, 1, 4, 4}, rng);
      double r = 0.0, f = 0.0, g = 0.0;
      for (float v : real.data()) r += (v - 1.0) * (v - 1.0);
      for (float v : fake.data()) {
        f += static_cast<double>(v) * v;
        g += (v - 1.0) * (v - 1.0);
      }
      CHECK(adv_d_loss_scores(real, fake).item() == doctest::Approx(r / real.numel() + f / fake.numel()).epsilon(1e-5));
      CHECK(adv_g_loss_scores(fake).item() == doctest::Approx(g / fake.numel()).epsilon(1e-5));
    }
  }

  TEST_CASE("discriminator loss never reaches G; generator loss never reaches D") {
    testutil::ToyInstance toy = testutil::make_toy(1);
    const ArchDescriptor& arch = toy.params.arch;
    Tape tape;
    ParamMap w = toy.params.tensors;
    for (auto& [name, t] : w)
      if (name.rfind("G.", 0) == 0 || name.rfind("D.", 0) == 0) t = tape.watch(t);
    const Tensor fake = generator_forward(arch, w, toy.batch.source, toy.batch.maps_target);
    const ParamMap d = NetworkParams{arch, w}.subset(kDiscriminator);
    tape.backward(adv_d_loss(arch, d, toy.batch.source, fake));
    CHECK(max_param_grad(tape, w, "G.") == 0.0);
    CHECK(max_param_grad(tape, w, "D.") > 0.0);

    Tape tape2;
    ParamMap w2 = toy.params.tensors;
    for (auto& [name, t] : w2)
      if (name.rfind("G.", 0) == 0) t = tape2.watch(t);
    const Tensor fake2 = generator_forward(arch, w2, toy.batch.source, toy.batch.maps_target);
    tape2.backward(adv_g_loss(arch, toy.params.subset(kDiscriminator), fake2));
    CHECK(max_param_grad(tape2, w2, "G.") > 0.0);
  }

  TEST_CASE("pose, phi and content losses") {
    std::mt19937_64 rng(2);
    const Tensor t = random_tensor({8, 4, 4}, rng, 0.0f, 1.0f);
    CHECK(pose_loss(t, t).item() == 0.0f);
    CHECK(pose_loss(Tensor::full({8, 4, 4}, 0.1f), Tensor::zeros({8, 4, 4})).item() == doctest::Approx(0.01));
    const Tensor p = random_tensor({8, 4, 4}, rng, 0.0f, 1.0f);
    CHECK(pose_loss(p, t).item() == mse(p, t).item());
    CHECK(phi_loss(p, t).item() == pose_loss(p, t).item());
    CHECK(phi_loss(t, t).item() == 0.0f);
    CHECK_THROWS(pose_loss(p, Tensor::zeros({8, 4, 5})));

    const Tensor f = random_tensor({2, 5, 3, 3}, rng);
    CHECK(content_loss(f, f).item() == 0.0f);
    CHECK(content_loss(f, f + 0.3f).item() == doctest::Approx(0.09).epsilon(1e-5));
    const Tensor g = random_tensor({2, 5, 3, 3}, rng);
    double brute = 0.0;
    for (std::size_t i = 0; i < f.numel(); ++i) brute += (f.at(i) - g.at(i)) * static_cast<double>(f.at(i) - g.at(i));
    CHECK(content_loss(f, g).item() == doctest::Approx(brute / f.numel()).epsilon(1e-5));
    CHECK_THROWS(content_loss(f, Tensor::zeros({2, 5, 3, 4})));
  }

  TEST_CASE("patch_features") {
    std::mt19937_64 rng(3);
    const Tensor psi = random_tensor({3, 4, 4}, rng);
    CHECK(testutil::values(patch_features(psi, Tensor::full({2, 4, 4}, 1.0f), 1)) == testutil::values(psi));
    for (float v : testutil::values(patch_features(psi, Tensor::zeros({2, 4, 4}), 0))) CHECK(v == 0.0f);
    std::vector<float> peak(32, 0.0f);
    peak[16 + 6] = 1.0f;  // joint 1, row 1, column 2
    const Tensor x = patch_features(psi, Tensor({2, 4, 4}, peak), 1);
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 16; ++i) {
        const std::size_t k = static_cast<std::size_t>(c) * 16 + i;
        CHECK(x.at(k) == (i == 6 ? psi.at(k) : 0.0f));
      }
    CHECK_THROWS(patch_features(psi, Tensor::zeros({2, 4, 5}), 0));
  }

  TEST_CASE("gram") {
    const Tensor onehot({2, 1, 2}, {1, 0, 0, 1});
    CHECK(testutil::values(gram(onehot)) == std::vector<float>{1, 0, 0, 1});
    const Tensor c = Tensor::full({1, 3, 5}, 0.7f);
    CHECK(gram(c).item() == doctest::Approx(0.49 * 15).epsilon(1e-6));
    for (int seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(seed);
      const Tensor x = random_tensor({3, 4, 4}, rng);
      const Tensor g = gram(x);
      REQUIRE(g.shape() == Shape{3, 3});
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
          double s = 0.0;
          for (int i = 0; i < 16; ++i) s += static_cast<double>(x.at(a * 16 + i)) * x.at(b * 16 + i);
          CHECK(std::abs(g.at(a * 3 + b) - s) < 1e-5);
        }
    }
  }

  TEST_CASE("patch_style_loss") {
    std::mt19937_64 rng(4);
    const Tensor f = random_tensor({3, 4, 4}, rng), m = random_tensor({8, 4, 4}, rng, 0.0f, 1.0f);
    CHECK(patch_style_loss(f, m, f, m, {0, 1, 2, 3}).item() == 0.0f);
    const Tensor g = random_tensor({3, 4, 4}, rng), n = random_tensor({8, 4, 4}, rng, 0.0f, 1.0f);
    CHECK(patch_style_loss(f, m, g, n, {}).item() == 0.0f);
    for (int seed = 0; seed < 20; ++seed) {
      std::mt19937_64 r(100 + seed);
      const Tensor fa = random_tensor({3, 4, 4}, r), fb = random_tensor({3, 4, 4}, r);
      const Tensor ma = random_tensor({8, 4, 4}, r, 0.0f, 1.0f), mb = random_tensor({8, 4, 4}, r, 0.0f, 1.0f);
      const std::vector<int> vis{1, 4, 6};
      const double got = patch_style_loss(fa, ma, fb, mb, vis).item();
      CHECK(std::abs(got - brute_gram_style(fa, ma, fb, mb, vis)) < 1e-5);
      CHECK(patch_style_loss(fb, mb, fa, ma, vis).item() == doctest::Approx(got).epsilon(1e-6));
      // Scaling the features by s scales content by s^2 and patch style by s^4.
      const float s = 1.7f;
      CHECK(patch_style_loss(fa * s, ma, fb * s, mb, vis).item() == doctest::Approx(got * std::pow(s, 4)).epsilon(1e-5));
      CHECK(content_loss(fa * s, fb * s).item() ==
            doctest::Approx(content_loss(fa, fb).item() * s * s).epsilon(1e-5));
      CHECK(testutil::max_abs_diff(gram(fa * s), gram(fa) * (s * s)) < 1e-4);
    }
  }

  TEST_CASE("identity and l1 losses") {
    const Tensor one = Tensor::scalar(1.0f), two = Tensor::scalar(2.0f);
    CHECK(identity_loss(one, two, 0.5).item() == 2.0f);
    CHECK(identity_loss(one, two, 0.0).item() == 1.0f);
    CHECK(identity_loss(one * 3.0f, two, 0.5).item() == 4.0f);
    CHECK(identity_loss(one, two * 3.0f, 0.5).item() == 4.0f);

    std::mt19937_64 rng(5);
    const Tensor a = random_tensor({2, 3, 4, 4}, rng), b = random_tensor({2, 3, 4, 4}, rng);
    CHECK(l1_ablation_loss(a, a).item() == 0.0f);
    CHECK(l1_ablation_loss(a, a + 0.5f).item() == doctest::Approx(0.5).epsilon(1e-6));
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += std::abs(static_cast<double>(a.at(i)) - b.at(i));
    CHECK(l1_ablation_loss(a, b).item() == doctest::Approx(s / a.numel()).epsilon(1e-5));
  }

  TEST_CASE("default weights") {
    const LossWeights w;
    CHECK(w.lambda_P == 700.0);
    CHECK(w.lambda_Id == 0.3);
    CHECK(w.lambda_style == 1.0);
  }

  TEST_CASE("full generator loss composition") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const testutil::ToyInstance toy = testutil::make_toy(seed);
      const LossWeights w;
      const GeneratorLoss l = full_generator_loss(toy.params, toy.batch, w, false);
      const LossReport& r = l.report;
      CHECK(r.all_finite());
      for (double v : {r.adv_G_fwd, r.adv_G_bwd, r.pose_fwd, r.pose_bwd, r.content, r.patch_style, r.identity}) CHECK(v >= 0.0);
      CHECK(r.total_G == doctest::Approx(r.recomposed_total_G(w)).epsilon(1e-5));
      CHECK(r.identity == doctest::Approx(r.content + w.lambda_style * r.patch_style).epsilon(1e-5));

      // Independent recomputation from the public building blocks.
      const ArchDescriptor& arch = toy.params.arch;
      const ParamMap d = toy.params.subset(kDiscriminator), phi = toy.params.subset(kPoseRegressor);
      CHECK(r.adv_G_fwd == doctest::Approx(adv_g_loss(arch, d, toy.batch.fake).item()).epsilon(1e-6));
      CHECK(r.adv_G_bwd == doctest::Approx(adv_g_loss(arch, d, toy.batch.cycle).item()).epsilon(1e-6));
      CHECK(r.pose_fwd ==
            doctest::Approx(pose_loss(pose_regressor_forward(arch, phi, toy.batch.fake), toy.batch.maps_target).item()));
      const ParamMap psi = toy.params.subset(kFeatureNet);
      const Tensor fs = feature_extract(arch, psi, toy.batch.source, arch.psi_layer);
      const Tensor fc = feature_extract(arch, psi, toy.batch.cycle, arch.psi_layer);
      CHECK(r.content == doctest::Approx(content_loss(fs, fc).item()).epsilon(1e-6));

      LossWeights adv_only;
      adv_only.lambda_P = 0.0;
      adv_only.lambda_Id = 0.0;
      const LossReport a = full_generator_loss(toy.params, toy.batch, adv_only, false).report;
      CHECK(a.total_G == doctest::Approx(a.adv_G_fwd + a.adv_G_bwd).epsilon(1e-6));
    }
  }

  TEST_CASE("full generator loss is affine in its weights") {
    const testutil::ToyInstance toy = testutil::make_toy(4);
    auto total = [&](double lp, double lid) {
      LossWeights w;
      w.lambda_P = lp;
      w.lambda_Id = lid;
      return static_cast<double>(full_generator_loss(toy.params, toy.batch, w, false).report.total_G);
    };
    const double p0 = total(0, 0.3), p1 = total(350, 0.3), p2 = total(700, 0.3);
    CHECK(p1 == doctest::Approx((p0 + p2) / 2).epsilon(1e-5));
    const double i0 = total(700, 0), i1 = total(700, 0.6), i2 = total(700, 1.2);
    CHECK(i1 == doctest::Approx((i0 + i2) / 2).epsilon(1e-5));
  }

  TEST_CASE("ablation replaces the identity term") {
    const testutil::ToyInstance toy = testutil::make_toy(5);
    const LossWeights w;
    const LossReport r = full_generator_loss(toy.params, toy.batch, w, true).report;
    CHECK(r.content == 0.0);
    CHECK(r.patch_style == 0.0);
    CHECK(r.identity == doctest::Approx(l1_ablation_loss(toy.batch.source, toy.batch.cycle).item()));
    CHECK(r.total_G == doctest::Approx(r.recomposed_total_G(w)).epsilon(1e-5));
    const LossReport full = full_generator_loss(toy.params, toy.batch, w, false).report;
    CHECK(r.adv_G_fwd == full.adv_G_fwd);
    CHECK(r.pose_bwd == full.pose_bwd);
  }

  TEST_CASE("report json round-trip") {
    const testutil::ToyInstance toy = testutil::make_toy(6);
    LossReport r = full_generator_loss(toy.params, toy.batch, LossWeights{}, false).report;
    r.phi = 0.125;
    r.total_D = 0.5;
    const LossReport back = LossReport::from_json(r.to_json());
    CHECK(back.total_G == r.total_G);
    CHECK(back.patch_style == r.patch_style);
    CHECK(back.phi == r.phi);
    CHECK(back.total_D == r.total_D);
  }
}
