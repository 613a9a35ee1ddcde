#pragma once

// Dense float32 tensors and a define-by-run reverse-mode differentiation tape.
//
// A Tensor is an immutable value: shape + shared row-major buffer. When it was
// produced by an op whose inputs live on a Tape, it also carries a handle to the
// node that recorded it. Tensors without a tape handle never allocate tape state.
//
// A Tape is single-threaded. Each worker thread owns its own tape; tensors may be
// freely shared between threads once created.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace posewarp {

using Shape = std::vector<int>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tape;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor scalar(float value);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  // Negative indices count from the back.
  int dim(int i) const;
  std::size_t numel() const { return data_ ? data_->size() : 0; }
  bool empty() const { return numel() == 0; }

  std::span<const float> data() const;
  const float* raw() const { return data_ ? data_->data() : nullptr; }
  float at(std::size_t i) const { return (*data_)[i]; }
  float item() const;

  bool requires_grad() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  // Same values, no tape state.
  Tensor detach() const;
  // Shares the buffer; numel must match.
  Tensor reshaped_value(Shape shape) const;

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<float>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Identifies the op that recorded a node; used by fault injection in gradcheck.
enum class OpKind {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kPow,
  kMatmul,
  kTranspose,
  kConv2d,
  kUpsample,
  kAvgPool,
  kRelu,
  kLeakyRelu,
  kTanh,
  kSigmoid,
  kAbs,
  kSum,
  kMean,
  kMse,
  kConcat,
  kSlice,
  kReshape,
  kInstanceNorm,
  kCrossEntropy,
};

const char* op_name(OpKind kind);
// Inverse of op_name; nullopt for unknown names.
std::optional<OpKind> op_from_name(std::string_view name);

// Gives a backward rule access to the upstream gradient and to the gradient
// buffers of each parent (lazily zero-allocated, same size as the parent).
class BackwardContext {
 public:
  std::span<const float> upstream() const { return upstream_; }
  bool needs(int parent) const;
  std::span<float> grad(int parent);

 private:
  friend class Tape;
  BackwardContext(Tape& tape, std::span<const float> upstream, const std::vector<int>& parents)
      : tape_(tape), upstream_(upstream), parents_(parents) {}
  Tape& tape_;
  std::span<const float> upstream_;
  const std::vector<int>& parents_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf that accumulates gradient.
  Tensor watch(const Tensor& value);

  // Records the result of an op. Inputs that are not on this tape are treated
  // as constants; inputs on a different tape are an error.
  Tensor record(OpKind kind, Shape shape, std::vector<float> value,
                const std::vector<const Tensor*>& inputs, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1. Leaf gradients accumulate across calls until
  // zero_grad(); intermediate gradients reflect the latest call only.
  void backward(const Tensor& loss);
  // Vector-Jacobian product from an arbitrary output with the given upstream.
  void backward(const Tensor& output, std::span<const float> upstream);

  // Zero tensor when the node received no gradient.
  Tensor grad(const Tensor& t) const;
  std::span<const float> grad_view(const Tensor& t) const;
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }

 private:
  friend class BackwardContext;
  struct Node {
    OpKind kind = OpKind::kLeaf;
    Shape shape;
    std::size_t numel = 0;
    std::vector<int> parents;
    BackwardFn backward;
    std::vector<float> grad;
  };
  std::span<float> grad_buffer(int node);
  int owned_node(const Tensor& t) const;

  std::vector<Node> nodes_;
};

namespace testing {
// When set, the backward rule of `kind` scales its contribution by 1.5, giving a
// deliberately wrong gradient. Only gradcheck's negative tests use this.
void inject_fault(OpKind kind);
void clear_fault();
bool fault_active(OpKind kind);

// Gate freezing for finite-difference checks of piecewise-linear functions.
// kRecord: relu, leaky_relu and abs append the sign pattern of their inputs.
// kReplay: they reuse the recorded signs in call order, so the function evaluated
// is the one that coincides with the original around the recorded point.
enum class GateMode { kOff, kRecord, kReplay };
void set_gate_mode(GateMode mode);
GateMode gate_mode();
void clear_gates();
void rewind_gates();
void record_gates(std::span<const float> values);
// Next recorded block; throws std::logic_error if the call sequence diverged.
std::span<const std::int8_t> replay_gates(std::size_t n);
}  // namespace testing

}  // namespace posewarp
