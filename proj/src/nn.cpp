#include "posewarp/nn.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>

#include "posewarp/ops.hpp"

namespace posewarp {

ArchDescriptor toy_arch(int resolution) {
  ArchDescriptor a;
  a.resolution = resolution;
  a.g_widths = {4, 8, 8};
  a.g_res_blocks = 1;
  a.d_widths = {4, 8};
  a.phi_widths = {4, 8};
  a.phi_res_blocks = 1;
  a.psi_widths = {4, 8, 8};
  return a;
}

ParamMap NetworkParams::subset(const std::string& ns) const {
  ParamMap out;
  const std::string prefix = ns + ".";
  for (const auto& [name, t] : tensors) {
    if (name.compare(0, prefix.size(), prefix) == 0) out.emplace(name, t);
  }
  return out;
}

void NetworkParams::assign(const ParamMap& updated) {
  for (const auto& [name, t] : updated) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("unknown parameter " + name);
    if (it->second.shape() != t.shape()) throw ShapeError("parameter " + name + " changed shape");
    it->second = t.detach();
  }
}

namespace {

void add_conv(std::vector<ParamSpec>& specs, const std::string& name, int c_in, int c_out, int k) {
  specs.push_back({name + ".w", {c_out, c_in, k, k}, false});
  specs.push_back({name + ".b", {c_out}, true});
}

const Tensor& param(const ParamMap& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("missing parameter " + name);
  return it->second;
}

Tensor conv(const ParamMap& params, const std::string& name, const Tensor& x, int stride, int pad, PadMode mode) {
  return conv2d(x, param(params, name + ".w"), param(params, name + ".b"), {stride, pad, mode});
}

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

std::vector<ParamSpec> parameter_specs(const ArchDescriptor& a) {
  std::vector<ParamSpec> specs;
  const auto& gw = a.g_widths;
  add_conv(specs, "G.enc0", a.n_joints + 3, gw[0], 7);
  for (std::size_t i = 1; i < gw.size(); ++i) add_conv(specs, "G.enc" + std::to_string(i), gw[i - 1], gw[i], 3);
  for (int r = 0; r < a.g_res_blocks; ++r) {
    add_conv(specs, "G.res" + std::to_string(r) + ".a", gw.back(), gw.back(), 3);
    add_conv(specs, "G.res" + std::to_string(r) + ".b", gw.back(), gw.back(), 3);
  }
  for (std::size_t i = gw.size() - 1; i >= 1; --i) add_conv(specs, "G.dec" + std::to_string(i), gw[i], gw[i - 1], 3);
  add_conv(specs, "G.out", gw[0], 3, 7);

  int c = 3;
  for (std::size_t i = 0; i < a.d_widths.size(); ++i) {
    add_conv(specs, "D.conv" + std::to_string(i), c, a.d_widths[i], 3);
    c = a.d_widths[i];
  }
  add_conv(specs, "D.score", c, 1, 3);

  const auto& pw = a.phi_widths;
  add_conv(specs, "PHI.in", 3, pw[0], 3);
  for (std::size_t i = 1; i < pw.size(); ++i) add_conv(specs, "PHI.down" + std::to_string(i), pw[i - 1], pw[i], 3);
  for (int r = 0; r < a.phi_res_blocks; ++r) {
    add_conv(specs, "PHI.res" + std::to_string(r) + ".a", pw.back(), pw.back(), 3);
    add_conv(specs, "PHI.res" + std::to_string(r) + ".b", pw.back(), pw.back(), 3);
  }
  for (std::size_t i = pw.size() - 1; i >= 1; --i) add_conv(specs, "PHI.up" + std::to_string(i), pw[i], pw[i - 1], 3);
  add_conv(specs, "PHI.out", pw[0], a.n_joints, 3);

  c = 3;
  for (std::size_t i = 0; i < a.psi_widths.size(); ++i) {
    add_conv(specs, "PSI.block" + std::to_string(i + 1), c, a.psi_widths[i], 3);
    c = a.psi_widths[i];
  }
  specs.push_back({"PSI.fc.w", {a.n_classes, c}, false});
  specs.push_back({"PSI.fc.b", {1, a.n_classes}, true});
  return specs;
}

NetworkParams init_weights(const ArchDescriptor& arch, std::uint64_t seed) {
  NetworkParams p;
  p.arch = arch;
  for (const ParamSpec& spec : parameter_specs(arch)) {
    if (spec.is_bias) {
      p.tensors[spec.name] = Tensor::zeros(spec.shape);
      continue;
    }
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(name_hash(spec.name)),
                      static_cast<std::uint32_t>(name_hash(spec.name) >> 32)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<float> normal(0.0f, 0.02f);
    std::vector<float> v(shape_numel(spec.shape));
    for (float& x : v) x = normal(rng);
    p.tensors[spec.name] = Tensor(spec.shape, std::move(v));
  }
  return p;
}

void rescale_he(NetworkParams& params, const std::string& ns) {
  const std::string prefix = ns + ".";
  for (const ParamSpec& spec : parameter_specs(params.arch)) {
    if (spec.is_bias || spec.name.rfind(prefix, 0) != 0) continue;
    Tensor& t = params.tensors.at(spec.name);
    const double fan_in = static_cast<double>(t.numel()) / t.dim(0);
    const float scale = static_cast<float>(std::sqrt(2.0 / fan_in) / 0.02);
    std::vector<float> v(t.raw(), t.raw() + t.numel());
    for (float& x : v) x *= scale;
    t = Tensor(t.shape(), std::move(v));
  }
}

Tensor generator_forward(const ArchDescriptor& a, const ParamMap& params, const Tensor& image, const Tensor& maps) {
  const int levels = static_cast<int>(a.g_widths.size()) - 1;
  const int h = image.dim(-2), w = image.dim(-1);
  if (h % (1 << levels) != 0 || w % (1 << levels) != 0) {
    throw ShapeError("generator: resolution " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not divisible by " + std::to_string(1 << levels));
  }
  if (maps.dim(-3) != a.n_joints) throw ShapeError("generator: expected " + std::to_string(a.n_joints) + " belief maps");
  auto norm = [&](const Tensor& t) { return a.instance_norm ? instance_norm(t) : t; };
  const PadMode reflect = PadMode::kReflect;

  Tensor x = relu(norm(conv(params, "G.enc0", concat_channels(image, maps), 1, 3, reflect)));
  for (int i = 1; i <= levels; ++i) x = relu(norm(conv(params, "G.enc" + std::to_string(i), x, 2, 1, reflect)));
  for (int r = 0; r < a.g_res_blocks; ++r) {
    const std::string base = "G.res" + std::to_string(r);
    Tensor t = relu(norm(conv(params, base + ".a", x, 1, 1, reflect)));
    t = norm(conv(params, base + ".b", t, 1, 1, reflect));
    x = x + t;
  }
  for (int i = levels; i >= 1; --i) {
    x = relu(norm(conv(params, "G.dec" + std::to_string(i), upsample_nearest(x, 2), 1, 1, reflect)));
  }
  return tanh(conv(params, "G.out", x, 1, 3, reflect));
}

int discriminator_grid(const ArchDescriptor& a, int side) {
  for (std::size_t i = 0; i < a.d_widths.size(); ++i) side = conv_output_size(side, 3, 2, 1);
  return conv_output_size(side, 3, 1, 0);
}

Tensor discriminator_forward(const ArchDescriptor& a, const ParamMap& params, const Tensor& image) {
  if (discriminator_grid(a, std::min(image.dim(-2), image.dim(-1))) < 1) {
    throw ShapeError("discriminator: input " + shape_str(image.shape()) + " too small for the conv stack");
  }
  Tensor x = image;
  for (std::size_t i = 0; i < a.d_widths.size(); ++i) {
    x = leaky_relu(conv(params, "D.conv" + std::to_string(i), x, 2, 1, PadMode::kZero));
  }
  return conv(params, "D.score", x, 1, 0, PadMode::kZero);
}

Tensor pose_regressor_forward(const ArchDescriptor& a, const ParamMap& params, const Tensor& image) {
  const int levels = static_cast<int>(a.phi_widths.size()) - 1;
  const PadMode zero = PadMode::kZero;
  Tensor x = relu(conv(params, "PHI.in", image, 1, 1, zero));
  for (int i = 1; i <= levels; ++i) x = relu(conv(params, "PHI.down" + std::to_string(i), x, 2, 1, zero));
  for (int r = 0; r < a.phi_res_blocks; ++r) {
    const std::string base = "PHI.res" + std::to_string(r);
    Tensor t = relu(conv(params, base + ".a", x, 1, 1, zero));
    x = x + conv(params, base + ".b", t, 1, 1, zero);
  }
  for (int i = levels; i >= 1; --i) {
    x = relu(conv(params, "PHI.up" + std::to_string(i), upsample_nearest(x, 2), 1, 1, zero));
  }
  return sigmoid(conv(params, "PHI.out", x, 1, 1, zero));
}

int feature_reduction(int z) { return 1 << z; }

namespace {

Tensor psi_block(const ParamMap& params, int block, const Tensor& x) {
  return avg_pool2d(relu(conv(params, "PSI.block" + std::to_string(block), x, 1, 1, PadMode::kZero)), 2);
}

}  // namespace

Tensor feature_extract(const ArchDescriptor& a, const ParamMap& params, const Tensor& image, int z) {
  if (z < 1 || z > static_cast<int>(a.psi_widths.size())) {
    throw std::out_of_range("feature_extract: layer " + std::to_string(z) + " out of range 1.." +
                            std::to_string(a.psi_widths.size()));
  }
  Tensor x = image;
  for (int b = 1; b <= z; ++b) x = psi_block(params, b, x);
  return x;
}

Tensor classifier_logits(const ArchDescriptor& a, const ParamMap& params, const Tensor& images) {
  if (images.rank() != 4) throw ShapeError("classifier_logits: expected [B,3,H,W]");
  Tensor x = images;
  for (int b = 1; b <= static_cast<int>(a.psi_widths.size()); ++b) x = psi_block(params, b, x);
  if (x.dim(2) != x.dim(3)) throw ShapeError("classifier_logits: expected square feature maps");
  x = avg_pool2d(x, x.dim(2));
  x = reshape(x, {x.dim(0), x.dim(1)});
  return matmul(x, transpose(param(params, "PSI.fc.w"))) + param(params, "PSI.fc.b");
}

std::vector<float> encode_arch(const ArchDescriptor& a) {
  std::vector<float> v{1.0f, static_cast<float>(a.resolution), static_cast<float>(a.n_joints)};
  auto list = [&](const std::vector<int>& xs) {
    v.push_back(static_cast<float>(xs.size()));
    for (int x : xs) v.push_back(static_cast<float>(x));
  };
  list(a.g_widths);
  v.push_back(static_cast<float>(a.g_res_blocks));
  list(a.d_widths);
  list(a.phi_widths);
  v.push_back(static_cast<float>(a.phi_res_blocks));
  list(a.psi_widths);
  v.push_back(static_cast<float>(a.n_classes));
  v.push_back(static_cast<float>(a.psi_layer));
  v.push_back(a.instance_norm ? 1.0f : 0.0f);
  // Micro-units keep common variances exact through the f32 encoding.
  v.push_back(static_cast<float>(std::lround(a.variance * 1e6)));
  return v;
}

ArchDescriptor decode_arch(std::span<const float> v) {
  std::size_t pos = 0;
  auto next = [&]() -> int {
    if (pos >= v.size()) throw std::invalid_argument("architecture descriptor is truncated");
    return static_cast<int>(v[pos++]);
  };
  auto list = [&]() {
    const int n = next();
    std::vector<int> xs;
    for (int i = 0; i < n; ++i) xs.push_back(next());
    return xs;
  };
  if (next() != 1) throw std::invalid_argument("unknown architecture descriptor version");
  ArchDescriptor a;
  a.resolution = next();
  a.n_joints = next();
  a.g_widths = list();
  a.g_res_blocks = next();
  a.d_widths = list();
  a.phi_widths = list();
  a.phi_res_blocks = next();
  a.psi_widths = list();
  a.n_classes = next();
  a.psi_layer = next();
  a.instance_norm = next() != 0;
  a.variance = next() / 1e6;
  return a;
}

}  // namespace posewarp
