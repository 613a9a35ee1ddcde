#include "posewarp/gradcheck_suites.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "posewarp/data.hpp"
#include "posewarp/gradcheck.hpp"
#include "posewarp/loss.hpp"
#include "posewarp/nn.hpp"
#include "posewarp/ops.hpp"
#include "posewarp/pose.hpp"

namespace posewarp {

bool SuiteResult::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const SuiteEntry& e) { return e.passed(); });
}

std::vector<std::string> SuiteResult::failing() const {
  std::vector<std::string> out;
  for (const auto& e : entries)
    if (!e.passed()) out.push_back(e.name);
  return out;
}

namespace {

using Inputs = std::vector<Tensor>;
using OpFn = std::function<Tensor(const Inputs&)>;

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  float uniform(float lo, float hi) { return std::uniform_real_distribution<float>(lo, hi)(rng_); }
  bool coin() { return integer(0, 1) == 1; }

  Tensor tensor(const Shape& shape, float lo = -1.0f, float hi = 1.0f) {
    std::vector<float> v(shape_numel(shape));
    for (float& x : v) x = uniform(lo, hi);
    return Tensor(shape, std::move(v));
  }
  // Magnitudes in [lo, hi] with random signs; keeps kinks and poles out of reach of eps.
  Tensor signed_tensor(const Shape& shape, float lo, float hi) {
    std::vector<float> v(shape_numel(shape));
    for (float& x : v) x = (coin() ? 1.0f : -1.0f) * uniform(lo, hi);
    return Tensor(shape, std::move(v));
  }
  // One random sign for the whole tensor, so sums of products cannot cancel.
  Tensor same_sign_tensor(const Shape& shape, float lo, float hi) {
    const float sign = coin() ? 1.0f : -1.0f;
    std::vector<float> v(shape_numel(shape));
    for (float& x : v) x = sign * uniform(lo, hi);
    return Tensor(shape, std::move(v));
  }
  Shape shape(int min_rank, int max_rank, int max_dim) {
    Shape s(integer(min_rank, max_rank));
    for (int& d : s) d = integer(1, max_dim);
    return s;
  }
  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

std::string describe(const Inputs& inputs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < inputs.size(); ++i) os << (i ? " " : "") << shape_str(inputs[i].shape());
  return os.str();
}

double dot(const Tensor& y, const std::vector<float>& r) {
  double acc = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) acc += static_cast<double>(y.at(i)) * r[i];
  return acc;
}

// Worst per-coordinate relative error of d<R, fn(inputs)>/d inputs[i] over the
// inputs flagged in `wrt`. R is a fixed random cotangent pushed through the tape
// directly so no other op takes part in the backward pass. Its entries share one
// random sign and have magnitudes in [0.5, 1.5]: with mixed signs, broadcast and
// pooling reductions cancel to gradients below float32 finite-difference noise.
std::vector<float> cotangent(std::size_t n, Gen& gen) {
  std::vector<float> r(n);
  const float sign = gen.coin() ? 1.0f : -1.0f;
  for (float& x : r) x = sign * gen.uniform(0.5f, 1.5f);
  return r;
}

double check_op(const OpFn& fn, const Inputs& inputs, const std::vector<bool>& wrt, const std::vector<float>& r) {
  Tape tape;
  Inputs watched;
  for (const Tensor& t : inputs) watched.push_back(t.empty() ? t : tape.watch(t));
  const Tensor y = fn(watched);
  if (y.numel() != r.size()) throw std::logic_error("check_op: cotangent size mismatch");
  tape.backward(y, r);

  double worst = 0.0;
  Inputs probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!wrt[k]) continue;
    const Tensor g = tape.grad(watched[k]);
    std::vector<float> v(inputs[k].data().begin(), inputs[k].data().end());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const float orig = v[i];
      v[i] = orig + kGradCheckEps;
      probe[k] = Tensor(inputs[k].shape(), v);
      const double plus = dot(fn(probe), r);
      v[i] = orig - kGradCheckEps;
      probe[k] = Tensor(inputs[k].shape(), v);
      const double minus = dot(fn(probe), r);
      v[i] = orig;
      const double n = (plus - minus) / (2.0 * kGradCheckEps);
      const double a = g.at(i);
      worst = std::max(worst, std::fabs(a - n) / std::max(1e-8, std::fabs(a) + std::fabs(n)));
    }
    probe[k] = inputs[k];
  }
  return worst;
}

double check_op(const OpFn& fn, const Inputs& inputs, const std::vector<bool>& wrt, Gen& gen) {
  Inputs detached;
  for (const Tensor& t : inputs) detached.push_back(t);
  return check_op(fn, inputs, wrt, cotangent(fn(detached).numel(), gen));
}

// Smallest |d<r, instance_norm(x)>/dx_i| from the closed form
// (r - mean r - xhat * mean(r xhat)) / std per plane, in double.
double instance_norm_min_grad(const Tensor& x, const std::vector<float>& r, int planes) {
  const std::size_t n = x.numel() / planes;
  double smallest = std::numeric_limits<double>::infinity();
  for (int p = 0; p < planes; ++p) {
    std::vector<double> v(n), rr(n);
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      v[i] = x.at(p * n + i);
      rr[i] = r[p * n + i];
      mu += v[i] / n;
    }
    double var = 0.0;
    for (double& e : v) {
      e -= mu;
      var += e * e / n;
    }
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    double mr = 0.0, mrx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mr += rr[i] / n;
      mrx += rr[i] * v[i] * inv / n;
    }
    for (std::size_t i = 0; i < n; ++i) smallest = std::min(smallest, std::fabs(inv * (rr[i] - mr - v[i] * inv * mrx)));
  }
  return smallest;
}

class EntryBuilder {
 public:
  EntryBuilder(std::string name, double tolerance) {
    entry_.name = std::move(name);
    entry_.tolerance = tolerance;
  }
  void record(double err, const std::string& desc) {
    ++entry_.configs;
    if (entry_.configs == 1 || err > entry_.worst_rel_error) {
      entry_.worst_rel_error = err;
      entry_.worst_case = desc;
    }
  }
  SuiteEntry done() const { return entry_; }

 private:
  SuiteEntry entry_;
};

// Operand b for a binary op on a: same shape, a single element, or a's shape with some dims set to 1.
Shape broadcast_shape(const Shape& a, Gen& gen) {
  switch (gen.integer(0, 2)) {
    case 0: return a;
    case 1: return {1};
    default: {
      Shape b = a;
      for (int& d : b)
        if (gen.coin()) d = 1;
      return b;
    }
  }
}

using ConfigFn = std::function<void(Gen&, EntryBuilder&)>;

SuiteEntry run_entry(const std::string& name, int configs, std::uint64_t seed, const ConfigFn& body,
                     double tolerance = kOpsTolerance) {
  EntryBuilder b(name, tolerance);
  Gen gen(seed ^ std::hash<std::string>{}(name));
  for (int c = 0; c < configs; ++c) body(gen, b);
  return b.done();
}

void binary_config(Gen& gen, EntryBuilder& b, Tensor (*op)(const Tensor&, const Tensor&), int domain) {
  const Shape sa = gen.shape(1, 4, 4);
  const Shape sb = broadcast_shape(sa, gen);
  Tensor x, y;
  // Same-sign operands keep broadcast gradients (sums over the broadcast axes)
  // away from cancellation.
  if (domain == 0) {
    x = gen.same_sign_tensor(sa, 0.25f, 1.0f);
    y = gen.same_sign_tensor(sb, 0.25f, 1.0f);
  } else if (domain == 1) {  // division: keep the divisor away from 0
    x = gen.same_sign_tensor(sa, 0.25f, 1.0f);
    y = gen.same_sign_tensor(sb, 0.5f, 1.5f);
  } else {  // power: base above 1 so log(base) stays clear of 0, exponent clear of 0
    x = gen.tensor(sa, 1.3f, 2.0f);
    y = gen.same_sign_tensor(sb, 0.25f, 1.5f);
  }
  const Inputs in{x, y};
  b.record(check_op([op](const Inputs& v) { return op(v[0], v[1]); }, in, {true, true}, gen), describe(in));
}

void unary_config(Gen& gen, EntryBuilder& b, const std::function<Tensor(const Tensor&)>& op, float lo, float hi,
                  bool signed_magnitude) {
  const Shape s = gen.shape(1, 4, 4);
  const Tensor x = signed_magnitude ? gen.signed_tensor(s, lo, hi) : gen.tensor(s, lo, hi);
  const Inputs in{x};
  b.record(check_op([op](const Inputs& v) { return op(v[0]); }, in, {true}, gen), describe(in));
}

// `target` plus a residual of magnitude in [0.25, 1] with random sign.
Tensor offset(Gen& gen, const Shape& s, float target) {
  return add(gen.signed_tensor(s, 0.25f, 1.0f), target);
}

Shape image_shape(Gen& gen, int c, int h, int w) {
  if (gen.coin()) return {gen.integer(1, 2), c, h, w};
  return {c, h, w};
}

}  // namespace

SuiteResult run_ops_suite(std::uint64_t seed, int configs) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult res;
  res.scope = "ops";
  auto add_entry = [&](const std::string& name, const ConfigFn& body) {
    res.entries.push_back(run_entry(name, configs, seed, body));
  };

  add_entry("add", [](Gen& g, EntryBuilder& b) { binary_config(g, b, add, 0); });
  add_entry("sub", [](Gen& g, EntryBuilder& b) { binary_config(g, b, sub, 0); });
  add_entry("mul", [](Gen& g, EntryBuilder& b) { binary_config(g, b, mul, 0); });
  add_entry("div", [](Gen& g, EntryBuilder& b) { binary_config(g, b, div, 1); });
  add_entry("pow", [](Gen& g, EntryBuilder& b) { binary_config(g, b, pow, 2); });
  add_entry("add(scalar)", [](Gen& g, EntryBuilder& b) {
    const float c = g.uniform(-2.0f, 2.0f);
    unary_config(g, b, [c](const Tensor& x) { return add(x, c); }, -1.0f, 1.0f, false);
  });
  add_entry("mul(scalar)", [](Gen& g, EntryBuilder& b) {
    const float c = g.uniform(-2.0f, 2.0f);
    unary_config(g, b, [c](const Tensor& x) { return mul(x, c); }, -1.0f, 1.0f, false);
  });
  add_entry("pow(scalar)", [](Gen& g, EntryBuilder& b) {
    const float c = g.uniform(-2.0f, 3.0f);
    unary_config(g, b, [c](const Tensor& x) { return pow(x, c); }, 0.5f, 1.5f, false);
  });
  add_entry("matmul", [](Gen& g, EntryBuilder& b) {
    const int m = g.integer(1, 5), k = g.integer(1, 5), n = g.integer(1, 5);
    const Inputs in{g.same_sign_tensor({m, k}, 0.25f, 1.0f), g.same_sign_tensor({k, n}, 0.25f, 1.0f)};
    b.record(check_op([](const Inputs& v) { return matmul(v[0], v[1]); }, in, {true, true}, g), describe(in));
  });
  add_entry("transpose", [](Gen& g, EntryBuilder& b) {
    const Inputs in{g.tensor({g.integer(1, 5), g.integer(1, 5)})};
    b.record(check_op([](const Inputs& v) { return transpose(v[0]); }, in, {true}, g), describe(in));
  });
  add_entry("conv2d", [](Gen& g, EntryBuilder& b) {
    const int k = 2 * g.integer(0, 2) + 1;
    Conv2dOptions opts;
    opts.stride = g.integer(1, 2);
    opts.pad = g.integer(0, k / 2);
    opts.pad_mode = g.coin() ? PadMode::kReflect : PadMode::kZero;
    const int lo = std::max(k, opts.pad + 1);
    const int h = g.integer(lo, lo + 4), w = g.integer(lo, lo + 4);
    const int cin = g.integer(1, 3), cout = g.integer(1, 3);
    const bool bias = g.coin();
    // Same-sign operands: float32 rounding of the outputs otherwise swamps
    // gradients that cancel to near zero.
    const Inputs in{g.same_sign_tensor(image_shape(g, cin, h, w), 0.25f, 1.0f),
                    g.same_sign_tensor({cout, cin, k, k}, 0.25f, 1.0f), bias ? g.tensor({cout}) : Tensor()};
    std::ostringstream desc;
    desc << describe(in) << " stride " << opts.stride << " pad " << opts.pad
         << (opts.pad_mode == PadMode::kReflect ? " reflect" : " zero");
    b.record(check_op([opts](const Inputs& v) { return conv2d(v[0], v[1], v[2], opts); }, in, {true, true, bias}, g),
             desc.str());
  });
  add_entry("upsample_nearest", [](Gen& g, EntryBuilder& b) {
    const int f = g.integer(1, 3);
    const Inputs in{g.tensor(image_shape(g, g.integer(1, 3), g.integer(1, 4), g.integer(1, 4)))};
    b.record(check_op([f](const Inputs& v) { return upsample_nearest(v[0], f); }, in, {true}, g),
             describe(in) + " x" + std::to_string(f));
  });
  add_entry("avg_pool2d", [](Gen& g, EntryBuilder& b) {
    const int k = g.integer(1, 3);
    const Inputs in{g.tensor(image_shape(g, g.integer(1, 3), k * g.integer(1, 3), k * g.integer(1, 3)))};
    b.record(check_op([k](const Inputs& v) { return avg_pool2d(v[0], k); }, in, {true}, g),
             describe(in) + " k" + std::to_string(k));
  });
  add_entry("instance_norm", [](Gen& g, EntryBuilder& b) {
    // The input gradient is the cotangent projected off {1, xhat}, so some
    // coordinates sit arbitrarily close to 0 where float32 finite differences
    // cannot resolve a relative error. Like the kinks of relu, such points are
    // redrawn: every coordinate's true gradient must be at least 0.02.
    const Shape s = image_shape(g, g.integer(1, 3), g.integer(2, 4), g.integer(2, 4));
    const int planes = s.size() == 4 ? s[0] * s[1] : s[0];
    for (int attempt = 0;; ++attempt) {
      const Inputs in{g.tensor(s, -1.0f, 1.0f)};
      const std::vector<float> r = cotangent(in[0].numel(), g);
      if (instance_norm_min_grad(in[0], r, planes) < 0.02 && attempt < 1000) continue;
      b.record(check_op([](const Inputs& v) { return instance_norm(v[0]); }, in, {true}, r), describe(in));
      break;
    }
  });
  add_entry("relu", [](Gen& g, EntryBuilder& b) { unary_config(g, b, relu, 0.05f, 1.0f, true); });
  add_entry("leaky_relu", [](Gen& g, EntryBuilder& b) { unary_config(g, b, leaky_relu, 0.05f, 1.0f, true); });
  add_entry("tanh", [](Gen& g, EntryBuilder& b) {
    unary_config(g, b, [](const Tensor& x) { return posewarp::tanh(x); }, -2.0f, 2.0f, false);
  });
  add_entry("sigmoid", [](Gen& g, EntryBuilder& b) { unary_config(g, b, sigmoid, -3.0f, 3.0f, false); });
  add_entry("abs", [](Gen& g, EntryBuilder& b) {
    unary_config(g, b, [](const Tensor& x) { return posewarp::abs(x); }, 0.05f, 1.0f, true);
  });
  add_entry("sum", [](Gen& g, EntryBuilder& b) { unary_config(g, b, sum, -1.0f, 1.0f, false); });
  add_entry("mean", [](Gen& g, EntryBuilder& b) { unary_config(g, b, mean, -1.0f, 1.0f, false); });
  add_entry("mse", [](Gen& g, EntryBuilder& b) {
    const Shape s = g.shape(1, 4, 4);
    const Tensor a = g.tensor(s);
    // Residuals bounded away from zero.
    const Tensor target = add(a, g.signed_tensor(s, 0.25f, 1.0f));
    const Inputs in{a, target};
    b.record(check_op([](const Inputs& v) { return mse(v[0], v[1]); }, in, {true, true}, g), describe(in));
  });
  add_entry("concat", [](Gen& g, EntryBuilder& b) {
    const Shape base = g.shape(1, 4, 3);
    const int axis = g.integer(0, static_cast<int>(base.size()) - 1);
    Inputs in;
    const int parts = g.integer(2, 3);
    for (int p = 0; p < parts; ++p) {
      Shape s = base;
      s[axis] = g.integer(1, 3);
      in.push_back(g.tensor(s));
    }
    b.record(check_op([axis](const Inputs& v) { return concat(v, axis); }, in, std::vector<bool>(in.size(), true), g),
             describe(in) + " axis " + std::to_string(axis));
  });
  add_entry("slice", [](Gen& g, EntryBuilder& b) {
    const Shape s = g.shape(1, 4, 4);
    const int axis = g.integer(0, static_cast<int>(s.size()) - 1);
    const int begin = g.integer(0, s[axis] - 1);
    const int end = g.integer(begin + 1, s[axis]);
    const Inputs in{g.tensor(s)};
    b.record(check_op([=](const Inputs& v) { return slice(v[0], axis, begin, end); }, in, {true}, g),
             describe(in) + " axis " + std::to_string(axis));
  });
  add_entry("reshape", [](Gen& g, EntryBuilder& b) {
    const Shape s = g.shape(1, 4, 4);
    Shape t{static_cast<int>(shape_numel(s))};
    if (g.coin() && s.size() > 1) t = {s[0], static_cast<int>(shape_numel(s)) / s[0]};
    const Inputs in{g.tensor(s)};
    b.record(check_op([t](const Inputs& v) { return reshape(v[0], t); }, in, {true}, g), describe(in));
  });
  add_entry("cross_entropy", [](Gen& g, EntryBuilder& b) {
    const int rows = g.integer(1, 4), k = g.integer(2, 6);
    std::vector<int> labels(rows);
    for (int& l : labels) l = g.integer(0, k - 1);
    // Moderate logits keep every softmax probability, and so every gradient, well above 0.
    const Inputs in{g.tensor({rows, k}, -0.5f, 0.5f)};
    b.record(check_op([labels](const Inputs& v) { return cross_entropy(v[0], labels); }, in, {true}, g), describe(in));
  });

  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

SuiteResult run_losses_suite(std::uint64_t seed, int configs) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult res;
  res.scope = "losses";
  auto add_entry = [&](const std::string& name, const ConfigFn& body) {
    res.entries.push_back(run_entry(name, configs, seed, body));
  };

  // Squared-error terms are checked where every residual is at least 0.25 in
  // magnitude; near-zero residuals give gradients under float32 finite-difference noise.
  add_entry("adv_d_loss", [](Gen& g, EntryBuilder& b) {
    const int h = g.integer(1, 4), w = g.integer(1, 4);
    const Shape sr{g.integer(1, 3), 1, h, w}, sf{g.integer(1, 3), 1, h, w};
    const Inputs in{offset(g, sr, 1.0f), offset(g, sf, 0.0f)};
    b.record(check_op([](const Inputs& v) { return adv_d_loss_scores(v[0], v[1]); }, in, {true, true}, g),
             describe(in));
  });
  add_entry("adv_g_loss", [](Gen& g, EntryBuilder& b) {
    const Inputs in{offset(g, {g.integer(1, 3), 1, g.integer(1, 4), g.integer(1, 4)}, 1.0f)};
    b.record(check_op([](const Inputs& v) { return adv_g_loss_scores(v[0]); }, in, {true}, g), describe(in));
  });
  add_entry("pose_loss", [](Gen& g, EntryBuilder& b) {
    const Shape s{g.integer(1, 2), g.integer(1, 4), g.integer(2, 5), g.integer(2, 5)};
    const Tensor target = g.tensor(s, 0.0f, 1.0f);
    const Inputs in{add(target, g.signed_tensor(s, 0.25f, 1.0f)), target};
    b.record(check_op([](const Inputs& v) { return pose_loss(v[0], v[1]); }, in, {true, false}, g), describe(in));
  });
  add_entry("phi_loss", [](Gen& g, EntryBuilder& b) {
    const Shape s{g.integer(1, 2), g.integer(1, 4), g.integer(2, 5), g.integer(2, 5)};
    const Tensor target = g.tensor(s, 0.0f, 1.0f);
    const Inputs in{add(target, g.signed_tensor(s, 0.25f, 1.0f)), target};
    b.record(check_op([](const Inputs& v) { return phi_loss(v[0], v[1]); }, in, {true, false}, g), describe(in));
  });
  add_entry("content_loss", [](Gen& g, EntryBuilder& b) {
    const Shape s{g.integer(1, 2), g.integer(1, 4), g.integer(1, 4), g.integer(1, 4)};
    const Tensor a = g.tensor(s);
    const Inputs in{a, add(a, g.signed_tensor(s, 0.25f, 1.0f))};
    b.record(check_op([](const Inputs& v) { return content_loss(v[0], v[1]); }, in, {true, true}, g), describe(in));
  });
  add_entry("gram", [](Gen& g, EntryBuilder& b) {
    const Inputs in{g.same_sign_tensor({g.integer(1, 4), g.integer(1, 4), g.integer(1, 4)}, 0.25f, 1.0f)};
    b.record(check_op([](const Inputs& v) { return gram(v[0]); }, in, {true}, g), describe(in));
  });
  add_entry("patch_style_loss", [](Gen& g, EntryBuilder& b) {
    const int c = g.integer(1, 4), h = g.integer(1, 4), w = g.integer(1, 4), n = g.integer(1, 4);
    std::vector<int> visible;
    for (int i = 0; i < n; ++i)
      if (g.integer(0, 3) > 0) visible.push_back(i);
    if (visible.empty()) visible.push_back(g.integer(0, n - 1));  // nothing visible is a constant 0
    // The second image is the first scaled up by 1.1-1.3 per element (features
    // and masks), so every masked Gram difference has one sign and stays small
    // next to the Gram entries themselves.
    const Tensor fa = g.tensor({c, h, w}, 0.25f, 1.0f), ma = g.tensor({n, h, w}, 0.25f, 1.0f);
    const Inputs in{fa, ma, mul(fa, g.tensor({c, h, w}, 1.1f, 1.3f)), mul(ma, g.tensor({n, h, w}, 1.1f, 1.3f))};
    b.record(check_op([visible](const Inputs& v) { return patch_style_loss(v[0], v[1], v[2], v[3], visible); }, in,
                      {true, true, true, true}, g),
             describe(in) + " visible " + std::to_string(visible.size()));
  });
  add_entry("identity_loss", [](Gen& g, EntryBuilder& b) {
    const double ls = g.uniform(0.0f, 2.0f);
    const Inputs in{g.tensor({1}, 0.0f, 2.0f), g.tensor({1}, 0.0f, 2.0f)};
    b.record(check_op([ls](const Inputs& v) { return identity_loss(v[0], v[1], ls); }, in, {true, true}, g),
             describe(in));
  });
  add_entry("l1_ablation_loss", [](Gen& g, EntryBuilder& b) {
    const Shape s{g.integer(1, 2), 3, g.integer(1, 4), g.integer(1, 4)};
    const Tensor a = g.tensor(s);
    // Keep |a - b| >= 0.05 so no coordinate sits on the kink.
    const Tensor d = g.signed_tensor(s, 0.05f, 0.5f);
    std::vector<float> bv(a.numel());
    for (std::size_t i = 0; i < bv.size(); ++i) bv[i] = a.at(i) - d.at(i);
    const Inputs in{a, Tensor(s, std::move(bv))};
    b.record(check_op([](const Inputs& v) { return l1_ablation_loss(v[0], v[1]); }, in, {true, true}, g),
             describe(in));
  });

  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

namespace {

// Conditioning of the toy instance. Weights are 1.25x He-scaled in every
// network, so activations keep their scale through the ReLU stacks and G's
// gradients stay well above float32 finite-difference noise (the objective is
// ~200 in magnitude, dominated by lambda_P * pose); at the 0.02-std training
// init D, PHI and PSI are nearly constant on a 16x16 input. Biases are drawn
// with magnitude in [0.2, 0.3]: on the flat sprite background pre-activations
// sit near the bias, and a zero bias parks them on the ReLU kink.
NetworkParams well_scaled_toy(std::uint64_t seed) {
  const ArchDescriptor arch = toy_arch(16);
  NetworkParams p = init_weights(arch, seed);
  std::mt19937_64 bias_rng(seed + 17);
  std::uniform_real_distribution<float> bias_mag(0.2f, 0.3f);
  for (auto& [name, t] : p.tensors) {
    std::vector<float> v(t.data().begin(), t.data().end());
    if (t.rank() < 2) {
      for (float& x : v) x = (bias_rng() % 2 ? 1.0f : -1.0f) * bias_mag(bias_rng);
    } else {
      const double fan_in = static_cast<double>(t.numel()) / t.dim(0);
      const float gain = static_cast<float>(1.25 * std::sqrt(2.0 / fan_in) / 0.02);
      for (float& x : v) x *= gain;
    }
    t = Tensor(t.shape(), std::move(v));
  }
  return p;
}

}  // namespace

SuiteResult run_end2end_suite(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult res;
  res.scope = "end2end";
  const NetworkParams params = well_scaled_toy(seed);
  const ArchDescriptor& arch = params.arch;
  const int side = arch.resolution;
  const SkeletonConfig sk = skeleton_config_for(side, side);
  std::mt19937_64 rng(seed);

  constexpr int kBatch = 2;
  std::vector<Tensor> images, src_maps, tgt_maps;
  std::vector<Skeleton> src_skel, tgt_skel;
  for (int b = 0; b < kBatch; ++b) {
    const Appearance app = make_appearance(seed, static_cast<std::uint64_t>(b), side, side);
    src_skel.push_back(sample_skeleton(rng, sk));
    tgt_skel.push_back(sample_skeleton(rng, sk));
    images.push_back(render_sprite(app, src_skel.back(), side, side));
    src_maps.push_back(embed(src_skel.back(), side, side, arch.variance));
    tgt_maps.push_back(embed(tgt_skel.back(), side, side, arch.variance));
  }
  const Tensor source = stack(images), maps_s = stack(src_maps), maps_t = stack(tgt_maps);
  const TensorMap g_params = params.subset(kGenerator);

  for (const bool ablation : {false, true}) {
    const MapScalarFn loss = [&](const TensorMap& g) {
      const Tensor fake = generator_forward(arch, g, source, maps_t);
      const Tensor cycle = generator_forward(arch, g, fake, maps_s);
      const CycleBatch cb{source, fake, cycle, maps_s, maps_t, src_skel, tgt_skel};
      return full_generator_loss(params, cb, LossWeights{}, ablation).total;
    };
    // Every coordinate, with ReLU gates frozen at the base point: with thousands
    // of units across G, D, PHI and PSI, some pre-activation sits within reach of
    // a 1e-3 step for nearly every weight.
    const auto checks = grad_check_tensors_detailed(loss, g_params, kGradCheckEps, 0, seed, true);
    for (const auto& [name, c] : checks) {
      SuiteEntry e;
      e.name = std::string(ablation ? "l1_ablation/" : "identity/") + name;
      e.worst_rel_error = c.rel_error;
      e.configs = 1;
      e.tolerance = kEnd2EndTolerance;
      e.worst_case = "16x16 toy model, batch 2, " + std::to_string(c.probed) + " coords";
      res.entries.push_back(std::move(e));
    }
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

SuiteResult run_suite(const std::string& scope, std::uint64_t seed, int configs) {
  if (scope == "ops") return run_ops_suite(seed, configs);
  if (scope == "losses") return run_losses_suite(seed, configs);
  if (scope == "end2end") return run_end2end_suite(seed);
  throw std::invalid_argument("unknown gradcheck scope \"" + scope + "\" (expected ops, losses or end2end)");
}

}  // namespace posewarp
