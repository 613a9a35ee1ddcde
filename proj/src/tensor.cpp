#include "posewarp/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace posewarp {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != data.size()) {
    throw ShapeError("shape " + shape_str(shape_) + " does not match " + std::to_string(data.size()) +
                     " elements");
  }
  data_ = std::make_shared<const std::vector<float>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0f); }

Tensor Tensor::full(Shape shape, float value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, value));
}

Tensor Tensor::scalar(float value) { return Tensor({1}, {value}); }

int Tensor::dim(int i) const {
  const int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw ShapeError("dimension index out of range for " + shape_str(shape_));
  return shape_[i];
}

std::span<const float> Tensor::data() const {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

Tensor Tensor::reshaped_value(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kPow: return "pow";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kUpsample: return "upsample_nearest";
    case OpKind::kAvgPool: return "avg_pool2d";
    case OpKind::kRelu: return "relu";
    case OpKind::kLeakyRelu: return "leaky_relu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kAbs: return "abs";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kMse: return "mse";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kReshape: return "reshape";
    case OpKind::kInstanceNorm: return "instance_norm";
    case OpKind::kCrossEntropy: return "cross_entropy";
  }
  return "unknown";
}

std::optional<OpKind> op_from_name(std::string_view name) {
  for (int k = 0; k <= static_cast<int>(OpKind::kCrossEntropy); ++k) {
    const auto kind = static_cast<OpKind>(k);
    if (name == op_name(kind)) return kind;
  }
  return std::nullopt;
}

bool BackwardContext::needs(int parent) const { return parents_[parent] >= 0; }

std::span<float> BackwardContext::grad(int parent) { return tape_.grad_buffer(parents_[parent]); }

Tensor Tape::watch(const Tensor& value) {
  if (value.tape_ && value.tape_ != this) {
    throw std::invalid_argument("watch(): tensor already belongs to another tape");
  }
  Node node;
  node.kind = OpKind::kLeaf;
  node.shape = value.shape_;
  node.numel = value.numel();
  nodes_.push_back(std::move(node));
  Tensor t = value.detach();
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size()) - 1;
  return t;
}

int Tape::owned_node(const Tensor& t) const {
  if (!t.tape_) return -1;
  if (t.tape_ != this) throw std::invalid_argument("op mixes tensors from different tapes");
  return t.node_;
}

Tensor Tape::record(OpKind kind, Shape shape, std::vector<float> value,
                    const std::vector<const Tensor*>& inputs, BackwardFn backward) {
  Node node;
  node.kind = kind;
  node.parents.reserve(inputs.size());
  for (const Tensor* in : inputs) node.parents.push_back(owned_node(*in));
  Tensor out(std::move(shape), std::move(value));
  node.shape = out.shape_;
  node.numel = out.numel();
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  out.tape_ = this;
  out.node_ = static_cast<int>(nodes_.size()) - 1;
  return out;
}

std::span<float> Tape::grad_buffer(int node) {
  Node& n = nodes_.at(node);
  if (n.grad.size() != n.numel) n.grad.assign(n.numel, 0.0f);
  return {n.grad.data(), n.grad.size()};
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  const float one = 1.0f;
  backward(loss, std::span<const float>(&one, 1));
}

void Tape::backward(const Tensor& output, std::span<const float> upstream) {
  const int root = owned_node(output);
  if (root < 0) throw std::invalid_argument("backward(): tensor is not on this tape");
  if (upstream.size() != output.numel()) throw ShapeError("backward(): upstream size mismatch");

  // Intermediate gradients are rebuilt from scratch; leaves keep accumulating.
  for (int i = 0; i <= root; ++i) {
    if (nodes_[i].kind != OpKind::kLeaf) nodes_[i].grad.clear();
  }
  {
    auto g = grad_buffer(root);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += upstream[i];
  }
  std::vector<float> scaled;
  for (int i = root; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.kind == OpKind::kLeaf || n.grad.empty() || !n.backward) continue;
    std::span<const float> up(n.grad.data(), n.grad.size());
    if (testing::fault_active(n.kind)) {
      scaled.assign(n.grad.begin(), n.grad.end());
      for (float& v : scaled) v *= 1.5f;
      up = std::span<const float>(scaled.data(), scaled.size());
    }
    BackwardContext ctx(*this, up, n.parents);
    n.backward(ctx);
  }
}

Tensor Tape::grad(const Tensor& t) const {
  const int id = owned_node(t);
  if (id < 0) return Tensor::zeros(t.shape());
  const Node& n = nodes_[id];
  if (n.grad.empty()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), n.grad);
}

std::span<const float> Tape::grad_view(const Tensor& t) const {
  const int id = owned_node(t);
  if (id < 0) return {};
  const Node& n = nodes_[id];
  return {n.grad.data(), n.grad.size()};
}

void Tape::zero_grad() {
  for (Node& n : nodes_) n.grad.clear();
}

namespace testing {
namespace {
std::atomic<int> g_fault{-1};
}
void inject_fault(OpKind kind) { g_fault.store(static_cast<int>(kind)); }
void clear_fault() { g_fault.store(-1); }
bool fault_active(OpKind kind) { return g_fault.load(std::memory_order_relaxed) == static_cast<int>(kind); }

namespace {
GateMode g_gate_mode = GateMode::kOff;
std::vector<std::int8_t> g_gates;
std::size_t g_gate_cursor = 0;
}  // namespace

void set_gate_mode(GateMode mode) {
  g_gate_mode = mode;
  g_gate_cursor = 0;
}
GateMode gate_mode() { return g_gate_mode; }
void clear_gates() {
  g_gates.clear();
  g_gate_cursor = 0;
}
void rewind_gates() { g_gate_cursor = 0; }

void record_gates(std::span<const float> values) {
  for (float v : values) g_gates.push_back(v > 0.0f ? 1 : (v < 0.0f ? -1 : 0));
}

std::span<const std::int8_t> replay_gates(std::size_t n) {
  if (g_gate_cursor + n > g_gates.size()) throw std::logic_error("replay_gates: call sequence differs from recording");
  std::span<const std::int8_t> out(g_gates.data() + g_gate_cursor, n);
  g_gate_cursor += n;
  return out;
}
}  // namespace testing

}  // namespace posewarp
