#pragma once

// Differentiable kernels. Spatial ops accept [C,H,W] or batched [B,C,H,W].

#include <span>
#include <vector>

#include "posewarp/tensor.hpp"

namespace posewarp {

// Elementwise binary ops. `b` must have a's shape, be a single element, or have
// a's rank with each dimension equal to a's or 1 (broadcast, e.g. [1,H,W]
// against [C,H,W]).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor pow(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, float b);
Tensor mul(const Tensor& a, float b);
Tensor pow(const Tensor& a, float b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, float b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, float b) { return add(a, -b); }
inline Tensor operator*(const Tensor& a, float b) { return mul(a, b); }
inline Tensor operator*(float a, const Tensor& b) { return mul(b, a); }

// [M,K] x [K,P] -> [M,P]
Tensor matmul(const Tensor& a, const Tensor& b);
// [M,N] -> [N,M]
Tensor transpose(const Tensor& a);

enum class PadMode { kZero, kReflect };

struct Conv2dOptions {
  int stride = 1;
  int pad = 0;
  PadMode pad_mode = PadMode::kZero;
};

// Cross-correlation. x: [C_in,H,W] or [B,C_in,H,W]; w: [C_out,C_in,k,k] with k
// odd; bias: [C_out] or empty. Output size is floor((H + 2 pad - k) / stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dOptions opts = {});
int conv_output_size(int in, int kernel, int stride, int pad);

Tensor upsample_nearest(const Tensor& x, int factor);
Tensor avg_pool2d(const Tensor& x, int k);
// Per-sample, per-channel normalization to zero mean and unit variance.
Tensor instance_norm(const Tensor& x, float eps = 1e-5f);

inline constexpr float kLeakySlope = 0.2f;

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);

// Scalar ([1]) results; accumulation is done in double.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

// Concatenation along `axis` (negative counts from the back); all other
// dimensions must match. Empty tensors are skipped.
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice(const Tensor& x, int axis, int begin, int end);
Tensor reshape(const Tensor& x, Shape shape);

// Mean softmax cross-entropy of logits [B,K] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
// Row-wise softmax of [B,K] logits (not differentiable).
std::vector<float> softmax_rows(const Tensor& logits);

}  // namespace posewarp
