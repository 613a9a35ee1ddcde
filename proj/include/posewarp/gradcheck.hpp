#pragma once

// Central finite-difference checks of reverse-mode gradients.

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "posewarp/tensor.hpp"

namespace posewarp {

inline constexpr float kGradCheckEps = 1e-3f;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Compares the tape gradient of f at x against (f(x+eps e_i) - f(x-eps e_i)) / 2eps
// for every coordinate; relative error is |a-n| / max(1e-8, |a|+|n|).
GradCheckResult grad_check_detailed(const ScalarFn& f, const Tensor& x, float eps = kGradCheckEps);
double grad_check(const ScalarFn& f, const Tensor& x, float eps = kGradCheckEps);

using TensorMap = std::map<std::string, Tensor>;
using MapScalarFn = std::function<Tensor(const TensorMap&)>;

struct TensorCheck {
  double rel_error = 0.0;
  int probed = 0;
};

// Per-tensor check over a map of inputs. The error of a tensor is
// |a-n|_2 / max(1e-8, |a|_2+|n|_2) over the probed coordinates: all of them, or
// a seeded random subset of max_coords when that is positive. With freeze_gates,
// the probes evaluate f with every relu/leaky_relu/abs held on the piece it
// takes at the base point; that function equals f near the base point, so its
// central differences estimate the same derivative without kink-crossing error.
std::map<std::string, TensorCheck> grad_check_tensors_detailed(const MapScalarFn& f, const TensorMap& inputs,
                                                               float eps = kGradCheckEps, int max_coords = 0,
                                                               std::uint64_t seed = 0, bool freeze_gates = false);
std::map<std::string, double> grad_check_tensors(const MapScalarFn& f, const TensorMap& inputs,
                                                 float eps = kGradCheckEps, int max_coords = 0,
                                                 std::uint64_t seed = 0);

}  // namespace posewarp
