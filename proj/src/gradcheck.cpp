#include "posewarp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace posewarp {
namespace {

std::vector<float> analytic_grad(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  Tensor xw = tape.watch(x);
  Tensor y = f(xw);
  if (!y.requires_grad()) return std::vector<float>(x.numel(), 0.0f);
  tape.backward(y);
  auto g = tape.grad(xw);
  return {g.data().begin(), g.data().end()};
}

double numeric_at(const ScalarFn& f, const Tensor& x, std::size_t i, float eps) {
  std::vector<float> v(x.data().begin(), x.data().end());
  const float orig = v[i];
  v[i] = orig + eps;
  const double plus = f(Tensor(x.shape(), v)).item();
  v[i] = orig - eps;
  const double minus = f(Tensor(x.shape(), v)).item();
  return (plus - minus) / (2.0 * eps);
}

}  // namespace

GradCheckResult grad_check_detailed(const ScalarFn& f, const Tensor& x, float eps) {
  const std::vector<float> analytic = analytic_grad(f, x);
  GradCheckResult res;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double a = analytic[i];
    const double n = numeric_at(f, x, i, eps);
    const double err = std::fabs(a - n) / std::max(1e-8, std::fabs(a) + std::fabs(n));
    if (i == 0 || err > res.max_rel_error) res = {err, i, a, n};
  }
  return res;
}

double grad_check(const ScalarFn& f, const Tensor& x, float eps) { return grad_check_detailed(f, x, eps).max_rel_error; }

std::map<std::string, TensorCheck> grad_check_tensors_detailed(const MapScalarFn& f, const TensorMap& inputs,
                                                               float eps, int max_coords, std::uint64_t seed,
                                                               bool freeze_gates) {
  Tape tape;
  TensorMap watched;
  for (const auto& [name, t] : inputs) watched[name] = tape.watch(t);
  testing::clear_gates();
  testing::set_gate_mode(freeze_gates ? testing::GateMode::kRecord : testing::GateMode::kOff);
  Tensor y;
  try {
    y = f(watched);
  } catch (...) {
    testing::set_gate_mode(testing::GateMode::kOff);
    throw;
  }
  testing::set_gate_mode(freeze_gates ? testing::GateMode::kReplay : testing::GateMode::kOff);
  if (y.requires_grad()) tape.backward(y);

  auto eval = [&](const TensorMap& probe) {
    testing::rewind_gates();
    return static_cast<double>(f(probe).item());
  };

  std::map<std::string, TensorCheck> results;
  TensorMap probe = inputs;
  for (const auto& [name, t] : inputs) {
    const Tensor g = tape.grad(watched.at(name));
    std::vector<float> v(t.data().begin(), t.data().end());
    std::vector<std::size_t> coords(v.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    const bool sample = max_coords > 0 && coords.size() > static_cast<std::size_t>(max_coords);
    if (sample) {
      std::mt19937_64 rng(seed ^ std::hash<std::string>{}(name));
      std::shuffle(coords.begin(), coords.end(), rng);
    }
    if (sample) coords.resize(static_cast<std::size_t>(max_coords));
    TensorCheck r;
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i : coords) {
      const float orig = v[i];
      v[i] = orig + eps;
      probe[name] = Tensor(t.shape(), v);
      const double plus = eval(probe);
      v[i] = orig - eps;
      probe[name] = Tensor(t.shape(), v);
      const double minus = eval(probe);
      v[i] = orig;
      const double n = (plus - minus) / (2.0 * eps);
      const double a = g.at(i);
      diff2 += (a - n) * (a - n);
      a2 += a * a;
      n2 += n * n;
      ++r.probed;
    }
    probe[name] = t;
    r.rel_error = std::sqrt(diff2) / std::max(1e-8, std::sqrt(a2) + std::sqrt(n2));
    results[name] = r;
  }
  testing::set_gate_mode(testing::GateMode::kOff);
  testing::clear_gates();
  return results;
}

std::map<std::string, double> grad_check_tensors(const MapScalarFn& f, const TensorMap& inputs, float eps,
                                                 int max_coords, std::uint64_t seed) {
  std::map<std::string, double> errors;
  for (const auto& [name, r] : grad_check_tensors_detailed(f, inputs, eps, max_coords, seed, false)) {
    errors[name] = r.rel_error;
  }
  return errors;
}

}  // namespace posewarp
