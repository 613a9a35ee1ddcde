#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "posewarp/loss.hpp"
#include "posewarp/metrics.hpp"
#include "posewarp/ops.hpp"

namespace acceptance {

using posewarp::Shape;
using posewarp::Tensor;

namespace {

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> d(lo, hi);
  std::size_t n = 1;
  for (int s : shape) n *= static_cast<std::size_t>(s);
  std::vector<float> v(n);
  for (float& x : v) x = d(rng);
  return Tensor(shape, std::move(v));
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

double err(double got, double want) { return std::abs(got - want) / std::max(1.0, std::abs(want)); }

double brute_gram_entry(const Tensor& x, int a, int b) {
  const std::size_t p = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  double s = 0.0;
  for (std::size_t i = 0; i < p; ++i) s += static_cast<double>(x.at(a * p + i)) * x.at(b * p + i);
  return s;
}

double gram_case(std::mt19937_64& rng) {
  const Tensor x = random_tensor({uniform_int(rng, 1, 5), uniform_int(rng, 1, 7), uniform_int(rng, 1, 7)}, rng);
  const Tensor g = posewarp::gram(x);
  const int c = x.dim(0);
  double worst = 0.0;
  for (int a = 0; a < c; ++a)
    for (int b = 0; b < c; ++b) worst = std::max(worst, err(g.at(static_cast<std::size_t>(a) * c + b), brute_gram_entry(x, a, b)));
  return worst;
}

double patch_style_case(std::mt19937_64& rng) {
  const int c = uniform_int(rng, 1, 4), h = uniform_int(rng, 2, 6), w = uniform_int(rng, 2, 6), n = uniform_int(rng, 1, 5);
  const Tensor fa = random_tensor({c, h, w}, rng), fb = random_tensor({c, h, w}, rng);
  const Tensor ma = random_tensor({n, h, w}, rng, 0.0f, 1.0f), mb = random_tensor({n, h, w}, rng, 0.0f, 1.0f);
  std::vector<int> visible;
  for (int j = 0; j < n; ++j)
    if (uniform_int(rng, 0, 3) != 0) visible.push_back(j);
  const double got = posewarp::patch_style_loss(fa, ma, fb, mb, visible).item();

  double want = 0.0;
  const std::size_t p = static_cast<std::size_t>(h) * w;
  for (int j : visible) {
    for (int a = 0; a < c; ++a)
      for (int b = 0; b < c; ++b) {
        double ga = 0.0, gb = 0.0;
        for (std::size_t i = 0; i < p; ++i) {
          const double m1 = ma.at(j * p + i), m2 = mb.at(j * p + i);
          ga += (m1 * fa.at(a * p + i)) * (m1 * fa.at(b * p + i));
          gb += (m2 * fb.at(a * p + i)) * (m2 * fb.at(b * p + i));
        }
        const double d = (ga - gb) / static_cast<double>(p);
        want += d * d;
      }
  }
  if (!visible.empty()) want /= static_cast<double>(visible.size());
  return err(got, want);
}

double ssim_case(std::mt19937_64& rng) {
  const int c = uniform_int(rng, 1, 3), h = uniform_int(rng, 11, 16), w = uniform_int(rng, 11, 16), k = 11;
  const Tensor a = random_tensor({c, h, w}, rng);
  // Correlated second image so SSIM is not near zero.
  const Tensor noise = random_tensor({c, h, w}, rng, -0.3f, 0.3f);
  std::vector<float> bv(a.numel());
  for (std::size_t i = 0; i < bv.size(); ++i) bv[i] = std::clamp(0.7f * a.at(i) + noise.at(i), -1.0f, 1.0f);
  const Tensor b({c, h, w}, std::move(bv));

  std::vector<double> win(k * k);
  double total = 0.0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      win[i * k + j] = std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) / (2 * 1.5 * 1.5));
      total += win[i * k + j];
    }
  for (double& x : win) x /= total;

  double worst = 0.0;
  const std::vector<double> taps = posewarp::ssim_window_1d();
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) worst = std::max(worst, err(taps[i] * taps[j], win[i * k + j]));

  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double sum = 0.0;
  for (int ch = 0; ch < c; ++ch) {
    double chan = 0.0;
    for (int y = 0; y + k <= h; ++y)
      for (int x = 0; x + k <= w; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) {
            const std::size_t idx = (static_cast<std::size_t>(ch) * h + y + i) * w + x + j;
            const double pa = (a.at(idx) + 1.0) / 2.0, pb = (b.at(idx) + 1.0) / 2.0, g = win[i * k + j];
            ma += g * pa;
            mb += g * pb;
            saa += g * pa * pa;
            sbb += g * pb * pb;
            sab += g * pa * pb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        chan += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      }
    sum += chan / ((h - k + 1) * (w - k + 1));
  }
  return std::max(worst, err(posewarp::ssim(a, b), sum / c));
}

double is_case(std::mt19937_64& rng) {
  const int n = uniform_int(rng, 2, 40), k = uniform_int(rng, 2, 10), splits = uniform_int(rng, 1, std::min(n, 5));
  const Tensor logits = random_tensor({n, k}, rng, -4.0f, 4.0f);
  const std::vector<float> p = posewarp::softmax_rows(logits);
  double want = 0.0;
  for (int s = 0; s < splits; ++s) {
    const int begin = n * s / splits, end = n * (s + 1) / splits, m = end - begin;
    std::vector<double> marginal(k, 0.0);
    for (int i = begin; i < end; ++i)
      for (int j = 0; j < k; ++j) marginal[j] += p[i * k + j] / static_cast<double>(m);
    double kl = 0.0;
    for (int i = begin; i < end; ++i)
      for (int j = 0; j < k; ++j) {
        const double q = p[i * k + j];
        if (q > 0) kl += q * (std::log(q) - std::log(marginal[j]));
      }
    want += std::exp(kl / m);
  }
  return err(posewarp::inception_score(p, n, k, splits), want / splits);
}

Shape random_shape(std::mt19937_64& rng) {
  Shape s(uniform_int(rng, 1, 4));
  for (int& d : s) d = uniform_int(rng, 1, 6);
  return s;
}

double sum_case(std::mt19937_64& rng) {
  const Tensor x = random_tensor(random_shape(rng), rng);
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += x.at(i);
  return err(posewarp::sum(x).item(), s);
}

double mean_case(std::mt19937_64& rng) {
  const Tensor x = random_tensor(random_shape(rng), rng);
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += x.at(i);
  return err(posewarp::mean(x).item(), s / x.numel());
}

// mse and the losses defined as a mean of squared differences.
double mse_case(std::mt19937_64& rng) {
  const Shape shape = random_shape(rng);
  const Tensor a = random_tensor(shape, rng), b = random_tensor(shape, rng);
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (static_cast<double>(a.at(i)) - b.at(i)) * (a.at(i) - b.at(i));
  const double want = s / a.numel();
  return std::max({err(posewarp::mse(a, b).item(), want), err(posewarp::content_loss(a, b).item(), want),
                   err(posewarp::pose_loss(a, b).item(), want)});
}

double l1_case(std::mt19937_64& rng) {
  const Shape shape = random_shape(rng);
  const Tensor a = random_tensor(shape, rng), b = random_tensor(shape, rng);
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::abs(static_cast<double>(a.at(i)) - b.at(i));
  return err(posewarp::l1_ablation_loss(a, b).item(), s / a.numel());
}

double avg_pool_case(std::mt19937_64& rng) {
  const int k = uniform_int(rng, 1, 4), b = uniform_int(rng, 1, 2), c = uniform_int(rng, 1, 3);
  const int ho = uniform_int(rng, 1, 4), wo = uniform_int(rng, 1, 4), h = ho * k, w = wo * k;
  const Tensor x = random_tensor({b, c, h, w}, rng);
  const Tensor y = posewarp::avg_pool2d(x, k);
  double worst = 0.0;
  for (int p = 0; p < b * c; ++p)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) {
        double s = 0.0;
        for (int u = 0; u < k; ++u)
          for (int v = 0; v < k; ++v) s += x.at((static_cast<std::size_t>(p) * h + i * k + u) * w + j * k + v);
        worst = std::max(worst, err(y.at((static_cast<std::size_t>(p) * ho + i) * wo + j), s / (k * k)));
      }
  return worst;
}

double adversarial_case(std::mt19937_64& rng) {
  const int g = uniform_int(rng, 1, 6);
  const Tensor real = random_tensor({uniform_int(rng, 1, 4), 1, g, g}, rng);
  const Tensor fake = random_tensor({uniform_int(rng, 1, 4), 1, g, g}, rng);
  double r = 0.0, f = 0.0, gl = 0.0;
  for (std::size_t i = 0; i < real.numel(); ++i) r += (real.at(i) - 1.0) * (real.at(i) - 1.0);
  for (std::size_t i = 0; i < fake.numel(); ++i) {
    f += static_cast<double>(fake.at(i)) * fake.at(i);
    gl += (fake.at(i) - 1.0) * (fake.at(i) - 1.0);
  }
  return std::max(err(posewarp::adv_d_loss_scores(real, fake).item(), r / real.numel() + f / fake.numel()),
                  err(posewarp::adv_g_loss_scores(fake).item(), gl / fake.numel()));
}

}  // namespace

std::vector<OracleResult> run_oracles(int seeds) {
  const std::vector<std::pair<std::string, std::function<double(std::mt19937_64&)>>> cases{
      {"gram", gram_case},
      {"patch_style_loss", patch_style_case},
      {"ssim (window and map)", ssim_case},
      {"inception_score", is_case},
      {"sum", sum_case},
      {"mean", mean_case},
      {"mse / content / pose", mse_case},
      {"l1", l1_case},
      {"avg_pool2d", avg_pool_case},
      {"least-squares adversarial", adversarial_case},
  };
  std::vector<OracleResult> out;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    OracleResult r{cases[c].first, seeds, 0.0};
    for (int seed = 0; seed < seeds; ++seed) {
      std::mt19937_64 rng(static_cast<std::uint64_t>(seed) * 1000 + c);
      const double e = cases[c].second(rng);
      r.worst_error = std::isfinite(e) ? std::max(r.worst_error, e) : INFINITY;
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace acceptance
