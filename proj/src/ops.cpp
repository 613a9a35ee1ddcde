#include "posewarp/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cassert>
#include <cmath>
#include <numeric>
#include <optional>

namespace posewarp {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

Tape* tape_of(const std::vector<const Tensor*>& inputs) {
  Tape* tape = nullptr;
  for (const Tensor* in : inputs) {
    if (!in->tape()) continue;
    if (tape && tape != in->tape()) throw std::invalid_argument("op mixes tensors from different tapes");
    tape = in->tape();
  }
  return tape;
}

Tensor finish(OpKind kind, Shape shape, std::vector<float> out, const std::vector<const Tensor*>& inputs,
              BackwardFn backward) {
#ifndef NDEBUG
  bool inputs_finite = true;
  for (const Tensor* in : inputs) {
    for (float v : in->data()) inputs_finite = inputs_finite && std::isfinite(v);
  }
  if (inputs_finite) {
    for (float v : out) assert(std::isfinite(v) && "non-finite value from finite inputs");
  }
#endif
  Tape* tape = tape_of(inputs);
  if (!tape) return Tensor(std::move(shape), std::move(out));
  return tape->record(kind, std::move(shape), std::move(out), inputs, std::move(backward));
}

// ---------------------------------------------------------------- elementwise

// Maps each flat index of `a` to the flat index of the broadcast `b`.
// Empty result means same shape (identity map); a single 0 means scalar b.
struct Broadcast {
  enum class Kind { kSame, kScalar, kGeneral } kind = Kind::kSame;
  std::vector<std::size_t> index;
};

Broadcast make_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  Broadcast bc;
  if (a.shape() == b.shape()) return bc;
  if (b.numel() == 1) {
    bc.kind = Broadcast::Kind::kScalar;
    return bc;
  }
  auto fail = [&] {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " are not compatible");
  };
  if (a.rank() != b.rank()) fail();
  const int r = a.rank();
  std::vector<std::size_t> bstride(r, 0);
  std::size_t s = 1;
  for (int d = r - 1; d >= 0; --d) {
    if (b.shape()[d] == a.shape()[d]) {
      bstride[d] = s;
    } else if (b.shape()[d] != 1) {
      fail();
    }
    s *= static_cast<std::size_t>(b.shape()[d]);
  }
  bc.kind = Broadcast::Kind::kGeneral;
  bc.index.resize(a.numel());
  std::vector<int> idx(r, 0);
  std::size_t bi = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    bc.index[i] = bi;
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      bi += bstride[d];
      if (idx[d] < a.shape()[d]) break;
      bi -= bstride[d] * static_cast<std::size_t>(idx[d]);
      idx[d] = 0;
    }
  }
  return bc;
}

inline std::size_t bidx(const Broadcast& bc, std::size_t i) {
  switch (bc.kind) {
    case Broadcast::Kind::kSame: return i;
    case Broadcast::Kind::kScalar: return 0;
    case Broadcast::Kind::kGeneral: return bc.index[i];
  }
  return i;
}

// fwd(a, b) -> out; da(a, b, out) and db(a, b, out) are the local partials.
template <typename Fwd, typename Da, typename Db>
Tensor binary(OpKind kind, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  auto bc = std::make_shared<Broadcast>(make_broadcast(a, b, op_name(kind)));
  const std::size_t n = a.numel();
  std::vector<float> out(n);
  const float* pa = a.raw();
  const float* pb = b.raw();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[bidx(*bc, i)]);
  Tensor av = a.detach(), bv = b.detach();
  auto outv = std::make_shared<std::vector<float>>(out);
  return finish(kind, a.shape(), std::move(out), {&a, &b}, [av, bv, bc, outv, da, db](BackwardContext& ctx) {
    auto up = ctx.upstream();
    const float* pa = av.raw();
    const float* pb = bv.raw();
    const float* po = outv->data();
    if (ctx.needs(0)) {
      auto ga = ctx.grad(0);
      for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] * da(pa[i], pb[bidx(*bc, i)], po[i]);
    }
    if (ctx.needs(1)) {
      auto gb = ctx.grad(1);
      for (std::size_t i = 0; i < up.size(); ++i) {
        const std::size_t j = bidx(*bc, i);
        gb[j] += up[i] * db(pa[i], pb[j], po[i]);
      }
    }
  });
}

template <typename Fwd, typename Deriv>
Tensor unary(OpKind kind, const Tensor& x, Fwd fwd, Deriv deriv) {
  const std::size_t n = x.numel();
  std::vector<float> out(n);
  const float* px = x.raw();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(px[i]);
  Tensor xv = x.detach();
  auto outv = std::make_shared<std::vector<float>>(out);
  return finish(kind, x.shape(), std::move(out), {&x}, [xv, outv, deriv](BackwardContext& ctx) {
    auto up = ctx.upstream();
    auto g = ctx.grad(0);
    const float* px = xv.raw();
    const float* po = outv->data();
    for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] * deriv(px[i], po[i]);
  });
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const float* a, const float* b, float* c,
          bool accumulate) {
  ConstMapMat A(a, trans_a ? k : m, trans_a ? m : k);
  ConstMapMat B(b, trans_b ? n : k, trans_b ? k : n);
  MapMat C(c, m, n);
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b) {
    C.noalias() += A * B;
  } else if (trans_a && !trans_b) {
    C.noalias() += A.transpose() * B;
  } else if (!trans_a && trans_b) {
    C.noalias() += A * B.transpose();
  } else {
    C.noalias() += A.transpose() * B.transpose();
  }
}

// Splits [C,H,W] or [B,C,H,W] into (batch, channels, h, w).
struct Spatial {
  int batch, channels, h, w;
  bool batched;
};

Spatial spatial_dims(const Tensor& x, const char* op) {
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2), false};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), true};
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [B,C,H,W], got " + shape_str(x.shape()));
}

Shape spatial_shape(const Spatial& s, int c, int h, int w) {
  if (s.batched) return {s.batch, c, h, w};
  return {c, h, w};
}

// Source index along one axis for each output position and kernel tap; -1 marks zero padding.
std::vector<int> tap_index(int in, int out, int k, int stride, int pad, PadMode mode) {
  std::vector<int> idx(static_cast<std::size_t>(k) * out);
  for (int t = 0; t < k; ++t) {
    for (int o = 0; o < out; ++o) {
      int i = o * stride - pad + t;
      if (i < 0 || i >= in) {
        if (mode == PadMode::kZero) {
          i = -1;
        } else {
          if (i < 0) i = -i;
          if (i >= in) i = 2 * in - 2 - i;
        }
      }
      idx[static_cast<std::size_t>(t) * out + o] = i;
    }
  }
  return idx;
}

struct ConvGeometry {
  Spatial in;
  int c_out, k, h_out, w_out;
  std::vector<int> rows, cols;  // tap_index tables
  std::size_t patch() const { return static_cast<std::size_t>(in.channels) * k * k; }
  std::size_t positions() const { return static_cast<std::size_t>(h_out) * w_out; }
  std::size_t columns() const { return positions() * in.batch; }
};

// col: [C_in*k*k, B*H_out*W_out]
void im2col(const ConvGeometry& g, const float* x, float* col) {
  const std::size_t ncols = g.columns();
  const std::size_t plane = static_cast<std::size_t>(g.in.h) * g.in.w;
  for (int c = 0; c < g.in.channels; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        float* row = col + ((static_cast<std::size_t>(c) * g.k + ky) * g.k + kx) * ncols;
        const int* ry = &g.rows[static_cast<std::size_t>(ky) * g.h_out];
        const int* rx = &g.cols[static_cast<std::size_t>(kx) * g.w_out];
        for (int b = 0; b < g.in.batch; ++b) {
          const float* src = x + (static_cast<std::size_t>(b) * g.in.channels + c) * plane;
          float* dst = row + static_cast<std::size_t>(b) * g.positions();
          for (int oy = 0; oy < g.h_out; ++oy) {
            const int iy = ry[oy];
            float* d = dst + static_cast<std::size_t>(oy) * g.w_out;
            if (iy < 0) {
              std::fill(d, d + g.w_out, 0.0f);
              continue;
            }
            const float* s = src + static_cast<std::size_t>(iy) * g.in.w;
            for (int ox = 0; ox < g.w_out; ++ox) {
              const int ix = rx[ox];
              d[ox] = ix < 0 ? 0.0f : s[ix];
            }
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const float* col, float* dx) {
  const std::size_t ncols = g.columns();
  const std::size_t plane = static_cast<std::size_t>(g.in.h) * g.in.w;
  for (int c = 0; c < g.in.channels; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const float* row = col + ((static_cast<std::size_t>(c) * g.k + ky) * g.k + kx) * ncols;
        const int* ry = &g.rows[static_cast<std::size_t>(ky) * g.h_out];
        const int* rx = &g.cols[static_cast<std::size_t>(kx) * g.w_out];
        for (int b = 0; b < g.in.batch; ++b) {
          float* dst = dx + (static_cast<std::size_t>(b) * g.in.channels + c) * plane;
          const float* src = row + static_cast<std::size_t>(b) * g.positions();
          for (int oy = 0; oy < g.h_out; ++oy) {
            const int iy = ry[oy];
            if (iy < 0) continue;
            const float* s = src + static_cast<std::size_t>(oy) * g.w_out;
            float* d = dst + static_cast<std::size_t>(iy) * g.in.w;
            for (int ox = 0; ox < g.w_out; ++ox) {
              const int ix = rx[ox];
              if (ix >= 0) d[ix] += s[ox];
            }
          }
        }
      }
    }
  }
}

// Stride-1 path. The input is padded once and outputs are laid out at the padded
// width, so every kernel tap reads a contiguous shifted window of each padded
// plane and no column matrix is built. Output columns at or past w_out are
// scratch.
struct UnitStrideLayout {
  int hp, wp;
  std::size_t plane;  // padded plane plus k-1 slack floats
  std::size_t wide;   // h_out * wp
  std::vector<int> src_rows, src_cols;
};

using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

UnitStrideLayout unit_stride_layout(const ConvGeometry& g, int pad, PadMode mode) {
  UnitStrideLayout l;
  l.hp = g.in.h + 2 * pad;
  l.wp = g.in.w + 2 * pad;
  l.plane = static_cast<std::size_t>(l.hp) * l.wp + g.k - 1;
  l.wide = static_cast<std::size_t>(g.h_out) * l.wp;
  l.src_rows = tap_index(g.in.h, l.hp, 1, 1, pad, mode);
  l.src_cols = tap_index(g.in.w, l.wp, 1, 1, pad, mode);
  return l;
}

void pad_sample(const ConvGeometry& g, const UnitStrideLayout& l, const float* x, int b, float* xp) {
  const std::size_t plane = static_cast<std::size_t>(g.in.h) * g.in.w;
  for (int c = 0; c < g.in.channels; ++c) {
    const float* src = x + (static_cast<std::size_t>(b) * g.in.channels + c) * plane;
    float* dst = xp + static_cast<std::size_t>(c) * l.plane;
    for (int yp = 0; yp < l.hp; ++yp) {
      float* d = dst + static_cast<std::size_t>(yp) * l.wp;
      const int iy = l.src_rows[yp];
      if (iy < 0) {
        std::fill(d, d + l.wp, 0.0f);
        continue;
      }
      const float* s = src + static_cast<std::size_t>(iy) * g.in.w;
      for (int xq = 0; xq < l.wp; ++xq) {
        const int ix = l.src_cols[xq];
        d[xq] = ix < 0 ? 0.0f : s[ix];
      }
    }
    std::fill(dst + static_cast<std::size_t>(l.hp) * l.wp, dst + l.plane, 0.0f);
  }
}

// [C_out, C_in, k, k] -> [k*k][C_out][C_in]
std::vector<float> tap_major(const float* w, int c_out, int c_in, int k) {
  std::vector<float> out(static_cast<std::size_t>(c_out) * c_in * k * k);
  for (int o = 0; o < c_out; ++o)
    for (int c = 0; c < c_in; ++c)
      for (int t = 0; t < k * k; ++t)
        out[(static_cast<std::size_t>(t) * c_out + o) * c_in + c] = w[(static_cast<std::size_t>(o) * c_in + c) * k * k + t];
  return out;
}

std::size_t tap_offset(const UnitStrideLayout& l, int k, int t) {
  return static_cast<std::size_t>(t / k) * l.wp + t % k;
}

}  // namespace

// ---------------------------------------------------------------- binary ops

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::kAdd, a, b, [](float x, float y) { return x + y; }, [](float, float, float) { return 1.0f; },
      [](float, float, float) { return 1.0f; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::kSub, a, b, [](float x, float y) { return x - y; }, [](float, float, float) { return 1.0f; },
      [](float, float, float) { return -1.0f; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::kMul, a, b, [](float x, float y) { return x * y; }, [](float, float y, float) { return y; },
      [](float x, float, float) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::kDiv, a, b, [](float x, float y) { return x / y; }, [](float, float y, float) { return 1.0f / y; },
      [](float, float y, float o) { return -o / y; });
}

Tensor pow(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::kPow, a, b, [](float x, float y) { return std::pow(x, y); },
      [](float x, float y, float) { return y * std::pow(x, y - 1.0f); },
      [](float x, float, float o) { return x > 0.0f ? o * std::log(x) : 0.0f; });
}

Tensor add(const Tensor& a, float b) { return add(a, Tensor::scalar(b)); }
Tensor mul(const Tensor& a, float b) { return mul(a, Tensor::scalar(b)); }
Tensor pow(const Tensor& a, float b) { return pow(a, Tensor::scalar(b)); }

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), p = b.dim(1);
  std::vector<float> out(static_cast<std::size_t>(m) * p);
  gemm(false, false, m, p, k, a.raw(), b.raw(), out.data(), false);
  Tensor av = a.detach(), bv = b.detach();
  return finish(OpKind::kMatmul, {m, p}, std::move(out), {&a, &b}, [av, bv, m, k, p](BackwardContext& ctx) {
    auto up = ctx.upstream();
    if (ctx.needs(0)) gemm(false, true, m, k, p, up.data(), bv.raw(), ctx.grad(0).data(), true);
    if (ctx.needs(1)) gemm(true, false, k, p, m, av.raw(), up.data(), ctx.grad(1).data(), true);
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<float> out(a.numel());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = a.at(static_cast<std::size_t>(i) * n + j);
  return finish(OpKind::kTranspose, {n, m}, std::move(out), {&a}, [m, n](BackwardContext& ctx) {
    auto up = ctx.upstream();
    auto g = ctx.grad(0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) g[static_cast<std::size_t>(i) * n + j] += up[static_cast<std::size_t>(j) * m + i];
  });
}

// ---------------------------------------------------------------- convolution

int conv_output_size(int in, int kernel, int stride, int pad) {
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const int span = in + 2 * pad - kernel;
  if (span < 0) {
    throw ShapeError("conv2d: input extent " + std::to_string(in) + " with padding " + std::to_string(pad) +
                     " is smaller than kernel " + std::to_string(kernel));
  }
  return span / stride + 1;
}

namespace {

Tensor conv2d_unit_stride(const Tensor& x, const Tensor& w, const Tensor& bias, std::shared_ptr<ConvGeometry> geom,
                          Conv2dOptions opts) {
  const ConvGeometry& g = *geom;
  auto layout = std::make_shared<const UnitStrideLayout>(unit_stride_layout(g, opts.pad, opts.pad_mode));
  const UnitStrideLayout& l = *layout;
  const int taps = g.k * g.k;
  const std::size_t pos = g.positions();
  auto wt = std::make_shared<const std::vector<float>>(tap_major(w.raw(), g.c_out, g.in.channels, g.k));

  std::vector<float> out(static_cast<std::size_t>(g.in.batch) * g.c_out * pos);
  std::vector<float> xp(static_cast<std::size_t>(g.in.channels) * l.plane);
  RowMat y(g.c_out, static_cast<Eigen::Index>(l.wide));
  for (int b = 0; b < g.in.batch; ++b) {
    pad_sample(g, l, x.raw(), b, xp.data());
    y.setZero();
    for (int t = 0; t < taps; ++t) {
      ConstMapMat wm(wt->data() + static_cast<std::size_t>(t) * g.c_out * g.in.channels, g.c_out, g.in.channels);
      ConstStridedMap xm(xp.data() + tap_offset(l, g.k, t), g.in.channels, static_cast<Eigen::Index>(l.wide),
                         Eigen::OuterStride<>(static_cast<Eigen::Index>(l.plane)));
      y.noalias() += wm * xm;
    }
    for (int o = 0; o < g.c_out; ++o) {
      const float bv = bias.empty() ? 0.0f : bias.at(o);
      float* d = out.data() + (static_cast<std::size_t>(b) * g.c_out + o) * pos;
      for (int oy = 0; oy < g.h_out; ++oy)
        for (int ox = 0; ox < g.w_out; ++ox) d[oy * g.w_out + ox] = y(o, static_cast<Eigen::Index>(oy) * l.wp + ox) + bv;
    }
  }

  Tensor xv = x.detach();
  const bool has_bias = !bias.empty();
  Shape shape = spatial_shape(g.in, g.c_out, g.h_out, g.w_out);
  return finish(OpKind::kConv2d, std::move(shape), std::move(out), {&x, &w, &bias},
                [geom, layout, wt, xv, has_bias](BackwardContext& ctx) {
                  const ConvGeometry& g = *geom;
                  const UnitStrideLayout& l = *layout;
                  const int taps = g.k * g.k, ci = g.in.channels;
                  const std::size_t pos = g.positions();
                  auto up = ctx.upstream();
                  if (has_bias && ctx.needs(2)) {
                    auto gb = ctx.grad(2);
                    for (int o = 0; o < g.c_out; ++o) {
                      double acc = 0.0;
                      for (int b = 0; b < g.in.batch; ++b) {
                        const float* s = up.data() + (static_cast<std::size_t>(b) * g.c_out + o) * pos;
                        for (std::size_t p = 0; p < pos; ++p) acc += s[p];
                      }
                      gb[o] += static_cast<float>(acc);
                    }
                  }
                  const bool need_x = ctx.needs(0), need_w = ctx.needs(1);
                  if (!need_x && !need_w) return;
                  RowMat dy = RowMat::Zero(g.c_out, static_cast<Eigen::Index>(l.wide));
                  RowMat dwt = RowMat::Zero(static_cast<Eigen::Index>(taps) * g.c_out, ci);
                  std::vector<float> xp, dxp;
                  if (need_w) xp.resize(static_cast<std::size_t>(ci) * l.plane);
                  if (need_x) dxp.resize(static_cast<std::size_t>(ci) * l.plane);
                  const std::size_t in_plane = static_cast<std::size_t>(g.in.h) * g.in.w;
                  for (int b = 0; b < g.in.batch; ++b) {
                    for (int o = 0; o < g.c_out; ++o) {
                      const float* s = up.data() + (static_cast<std::size_t>(b) * g.c_out + o) * pos;
                      for (int oy = 0; oy < g.h_out; ++oy)
                        for (int ox = 0; ox < g.w_out; ++ox)
                          dy(o, static_cast<Eigen::Index>(oy) * l.wp + ox) = s[oy * g.w_out + ox];
                    }
                    if (need_w) {
                      pad_sample(g, l, xv.raw(), b, xp.data());
                      for (int t = 0; t < taps; ++t) {
                        ConstStridedMap xm(xp.data() + tap_offset(l, g.k, t), ci, static_cast<Eigen::Index>(l.wide),
                                           Eigen::OuterStride<>(static_cast<Eigen::Index>(l.plane)));
                        dwt.middleRows(static_cast<Eigen::Index>(t) * g.c_out, g.c_out).noalias() += dy * xm.transpose();
                      }
                    }
                    if (need_x) {
                      std::fill(dxp.begin(), dxp.end(), 0.0f);
                      for (int t = 0; t < taps; ++t) {
                        ConstMapMat wm(wt->data() + static_cast<std::size_t>(t) * g.c_out * ci, g.c_out, ci);
                        StridedMap dxm(dxp.data() + tap_offset(l, g.k, t), ci, static_cast<Eigen::Index>(l.wide),
                                       Eigen::OuterStride<>(static_cast<Eigen::Index>(l.plane)));
                        dxm.noalias() += wm.transpose() * dy;
                      }
                      auto gx = ctx.grad(0);
                      for (int c = 0; c < ci; ++c) {
                        float* dst = gx.data() + (static_cast<std::size_t>(b) * ci + c) * in_plane;
                        const float* src = dxp.data() + static_cast<std::size_t>(c) * l.plane;
                        for (int yp = 0; yp < l.hp; ++yp) {
                          const int iy = l.src_rows[yp];
                          if (iy < 0) continue;
                          for (int xq = 0; xq < l.wp; ++xq) {
                            const int ix = l.src_cols[xq];
                            if (ix >= 0) dst[static_cast<std::size_t>(iy) * g.in.w + ix] += src[static_cast<std::size_t>(yp) * l.wp + xq];
                          }
                        }
                      }
                    }
                  }
                  if (need_w) {
                    auto gw = ctx.grad(1);
                    for (int o = 0; o < g.c_out; ++o)
                      for (int c = 0; c < ci; ++c)
                        for (int t = 0; t < taps; ++t)
                          gw[(static_cast<std::size_t>(o) * ci + c) * taps + t] += dwt(static_cast<Eigen::Index>(t) * g.c_out + o, c);
                  }
                });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dOptions opts) {
  auto geom = std::make_shared<ConvGeometry>();
  geom->in = spatial_dims(x, "conv2d");
  if (w.rank() != 4 || w.dim(1) != geom->in.channels || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  geom->c_out = w.dim(0);
  geom->k = w.dim(2);
  if (geom->k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(geom->k));
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != geom->c_out)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(geom->c_out) +
                     " output channels");
  }
  if (opts.pad_mode == PadMode::kReflect && (opts.pad >= geom->in.h || opts.pad >= geom->in.w)) {
    throw ShapeError("conv2d: reflect padding must be smaller than the input extent");
  }
  geom->h_out = conv_output_size(geom->in.h, geom->k, opts.stride, opts.pad);
  geom->w_out = conv_output_size(geom->in.w, geom->k, opts.stride, opts.pad);
  geom->rows = tap_index(geom->in.h, geom->h_out, geom->k, opts.stride, opts.pad, opts.pad_mode);
  geom->cols = tap_index(geom->in.w, geom->w_out, geom->k, opts.stride, opts.pad, opts.pad_mode);

  if (opts.stride == 1) return conv2d_unit_stride(x, w, bias, std::move(geom), opts);

  const ConvGeometry& g = *geom;
  const std::size_t patch = g.patch(), ncols = g.columns(), pos = g.positions();
  std::vector<float> col(patch * ncols);
  im2col(g, x.raw(), col.data());
  std::vector<float> prod(static_cast<std::size_t>(g.c_out) * ncols);
  gemm(false, false, g.c_out, static_cast<int>(ncols), static_cast<int>(patch), w.raw(), col.data(), prod.data(),
       false);

  // [C_out, B*P] -> [B, C_out, P], plus bias.
  std::vector<float> out(prod.size());
  for (int b = 0; b < g.in.batch; ++b) {
    for (int c = 0; c < g.c_out; ++c) {
      const float* s = prod.data() + static_cast<std::size_t>(c) * ncols + static_cast<std::size_t>(b) * pos;
      float* d = out.data() + (static_cast<std::size_t>(b) * g.c_out + c) * pos;
      const float bv = bias.empty() ? 0.0f : bias.at(c);
      for (std::size_t p = 0; p < pos; ++p) d[p] = s[p] + bv;
    }
  }

  Tensor xv = x.detach(), wv = w.detach();
  const bool has_bias = !bias.empty();
  Shape shape = spatial_shape(g.in, g.c_out, g.h_out, g.w_out);
  return finish(OpKind::kConv2d, std::move(shape), std::move(out), {&x, &w, &bias},
                [geom, xv, wv, has_bias](BackwardContext& ctx) {
                  const ConvGeometry& g = *geom;
                  const std::size_t patch = g.patch(), ncols = g.columns(), pos = g.positions();
                  auto up = ctx.upstream();
                  std::vector<float> dprod(static_cast<std::size_t>(g.c_out) * ncols);
                  for (int b = 0; b < g.in.batch; ++b) {
                    for (int c = 0; c < g.c_out; ++c) {
                      const float* s = up.data() + (static_cast<std::size_t>(b) * g.c_out + c) * pos;
                      std::copy(s, s + pos,
                                dprod.data() + static_cast<std::size_t>(c) * ncols + static_cast<std::size_t>(b) * pos);
                    }
                  }
                  if (has_bias && ctx.needs(2)) {
                    auto gb = ctx.grad(2);
                    for (int c = 0; c < g.c_out; ++c) {
                      const float* row = dprod.data() + static_cast<std::size_t>(c) * ncols;
                      double acc = 0.0;
                      for (std::size_t i = 0; i < ncols; ++i) acc += row[i];
                      gb[c] += static_cast<float>(acc);
                    }
                  }
                  const bool need_x = ctx.needs(0), need_w = ctx.needs(1);
                  if (!need_x && !need_w) return;
                  if (need_w) {
                    std::vector<float> col(patch * ncols);
                    im2col(g, xv.raw(), col.data());
                    gemm(false, true, g.c_out, static_cast<int>(patch), static_cast<int>(ncols), dprod.data(),
                         col.data(), ctx.grad(1).data(), true);
                  }
                  if (need_x) {
                    std::vector<float> dcol(patch * ncols);
                    gemm(true, false, static_cast<int>(patch), static_cast<int>(ncols), g.c_out, wv.raw(),
                         dprod.data(), dcol.data(), false);
                    col2im(g, dcol.data(), ctx.grad(0).data());
                  }
                });
}

// ---------------------------------------------------------------- resampling

Tensor upsample_nearest(const Tensor& x, int factor) {
  if (factor < 1) throw ShapeError("upsample_nearest: factor must be >= 1");
  const Spatial s = spatial_dims(x, "upsample_nearest");
  const int ho = s.h * factor, wo = s.w * factor;
  const std::size_t planes = static_cast<std::size_t>(s.batch) * s.channels;
  std::vector<float> out(planes * ho * wo);
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = x.raw() + p * s.h * s.w;
    float* dst = out.data() + p * ho * wo;
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx)
        dst[static_cast<std::size_t>(y) * wo + xx] = src[static_cast<std::size_t>(y / factor) * s.w + xx / factor];
  }
  return finish(OpKind::kUpsample, spatial_shape(s, s.channels, ho, wo), std::move(out), {&x},
                [s, factor, planes, ho, wo](BackwardContext& ctx) {
                  auto up = ctx.upstream();
                  auto g = ctx.grad(0);
                  for (std::size_t p = 0; p < planes; ++p) {
                    const float* src = up.data() + p * ho * wo;
                    float* dst = g.data() + p * s.h * s.w;
                    for (int y = 0; y < ho; ++y)
                      for (int xx = 0; xx < wo; ++xx)
                        dst[static_cast<std::size_t>(y / factor) * s.w + xx / factor] +=
                            src[static_cast<std::size_t>(y) * wo + xx];
                  }
                });
}

Tensor avg_pool2d(const Tensor& x, int k) {
  const Spatial s = spatial_dims(x, "avg_pool2d");
  if (k < 1 || s.h % k != 0 || s.w % k != 0) {
    throw ShapeError("avg_pool2d: window " + std::to_string(k) + " does not divide spatial size of " +
                     shape_str(x.shape()));
  }
  const int ho = s.h / k, wo = s.w / k;
  const std::size_t planes = static_cast<std::size_t>(s.batch) * s.channels;
  const float inv = 1.0f / static_cast<float>(k * k);
  std::vector<float> out(planes * ho * wo, 0.0f);
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = x.raw() + p * s.h * s.w;
    float* dst = out.data() + p * ho * wo;
    for (int y = 0; y < ho; ++y) {
      for (int xx = 0; xx < wo; ++xx) {
        double acc = 0.0;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) acc += src[static_cast<std::size_t>(y * k + dy) * s.w + xx * k + dx];
        dst[static_cast<std::size_t>(y) * wo + xx] = static_cast<float>(acc) * inv;
      }
    }
  }
  return finish(OpKind::kAvgPool, spatial_shape(s, s.channels, ho, wo), std::move(out), {&x},
                [s, k, planes, ho, wo, inv](BackwardContext& ctx) {
                  auto up = ctx.upstream();
                  auto g = ctx.grad(0);
                  for (std::size_t p = 0; p < planes; ++p) {
                    const float* src = up.data() + p * ho * wo;
                    float* dst = g.data() + p * s.h * s.w;
                    for (int y = 0; y < s.h; ++y)
                      for (int xx = 0; xx < s.w; ++xx)
                        dst[static_cast<std::size_t>(y) * s.w + xx] += src[static_cast<std::size_t>(y / k) * wo + xx / k] * inv;
                  }
                });
}

Tensor instance_norm(const Tensor& x, float eps) {
  const Spatial s = spatial_dims(x, "instance_norm");
  const std::size_t planes = static_cast<std::size_t>(s.batch) * s.channels;
  const std::size_t n = static_cast<std::size_t>(s.h) * s.w;
  std::vector<float> out(x.numel());
  auto inv_std = std::make_shared<std::vector<float>>(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = x.raw() + p * n;
    double mu = 0.0, var = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += src[i];
    mu /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[p] = static_cast<float>(is);
    for (std::size_t i = 0; i < n; ++i) out[p * n + i] = static_cast<float>((src[i] - mu) * is);
  }
  auto outv = std::make_shared<std::vector<float>>(out);
  return finish(OpKind::kInstanceNorm, x.shape(), std::move(out), {&x}, [planes, n, inv_std, outv](BackwardContext& ctx) {
    auto up = ctx.upstream();
    auto g = ctx.grad(0);
    for (std::size_t p = 0; p < planes; ++p) {
      const float* dy = up.data() + p * n;
      const float* y = outv->data() + p * n;
      double mean_dy = 0.0, mean_dy_y = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        mean_dy += dy[i];
        mean_dy_y += static_cast<double>(dy[i]) * y[i];
      }
      mean_dy /= static_cast<double>(n);
      mean_dy_y /= static_cast<double>(n);
      const double is = (*inv_std)[p];
      for (std::size_t i = 0; i < n; ++i) g[p * n + i] += static_cast<float>(is * (dy[i] - mean_dy - y[i] * mean_dy_y));
    }
  });
}

// ---------------------------------------------------------------- activations

// Under gate replay a piecewise-linear op becomes x times the slope of the
// recorded piece.
std::optional<Tensor> gated(const Tensor& x, float neg, float zero, float pos) {
  const testing::GateMode mode = testing::gate_mode();
  if (mode == testing::GateMode::kRecord) testing::record_gates(x.data());
  if (mode != testing::GateMode::kReplay) return std::nullopt;
  const auto signs = testing::replay_gates(x.numel());
  std::vector<float> slope(signs.size());
  for (std::size_t i = 0; i < signs.size(); ++i) slope[i] = signs[i] > 0 ? pos : (signs[i] < 0 ? neg : zero);
  return mul(x, Tensor(x.shape(), std::move(slope)));
}

Tensor relu(const Tensor& x) {
  if (auto g = gated(x, 0.0f, 0.0f, 1.0f)) return *g;
  return unary(
      OpKind::kRelu, x, [](float v) { return v > 0.0f ? v : 0.0f; },
      [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor leaky_relu(const Tensor& x) {
  if (auto g = gated(x, kLeakySlope, kLeakySlope, 1.0f)) return *g;
  return unary(
      OpKind::kLeakyRelu, x, [](float v) { return v > 0.0f ? v : kLeakySlope * v; },
      [](float v, float) { return v > 0.0f ? 1.0f : kLeakySlope; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      OpKind::kTanh, x, [](float v) { return std::tanh(v); }, [](float, float o) { return 1.0f - o * o; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      OpKind::kSigmoid, x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
      [](float, float o) { return o * (1.0f - o); });
}

Tensor abs(const Tensor& x) {
  if (auto g = gated(x, -1.0f, 0.0f, 1.0f)) return *g;
  return unary(
      OpKind::kAbs, x, [](float v) { return std::fabs(v); },
      [](float v, float) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return finish(OpKind::kSum, {1}, {static_cast<float>(acc)}, {&x}, [](BackwardContext& ctx) {
    const float up = ctx.upstream()[0];
    for (float& g : ctx.grad(0)) g += up;
  });
}

Tensor mean(const Tensor& x) {
  if (x.empty()) throw ShapeError("mean: empty tensor");
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const double n = static_cast<double>(x.numel());
  return finish(OpKind::kMean, {1}, {static_cast<float>(acc / n)}, {&x}, [n](BackwardContext& ctx) {
    const float up = static_cast<float>(ctx.upstream()[0] / n);
    for (float& g : ctx.grad(0)) g += up;
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (a.empty()) throw ShapeError("mse: empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.at(i)) - b.at(i);
    acc += d * d;
  }
  const double n = static_cast<double>(a.numel());
  Tensor av = a.detach(), bv = b.detach();
  return finish(OpKind::kMse, {1}, {static_cast<float>(acc / n)}, {&a, &b}, [av, bv, n](BackwardContext& ctx) {
    const float scale = static_cast<float>(2.0 * ctx.upstream()[0] / n);
    const float* pa = av.raw();
    const float* pb = bv.raw();
    if (ctx.needs(0)) {
      auto g = ctx.grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * (pa[i] - pb[i]);
    }
    if (ctx.needs(1)) {
      auto g = ctx.grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= scale * (pa[i] - pb[i]);
    }
  });
}

// ---------------------------------------------------------------- shape ops

Tensor concat(std::span<const Tensor> parts, int axis) {
  std::vector<const Tensor*> inputs;
  for (const Tensor& p : parts) {
    if (!p.empty()) inputs.push_back(&p);
  }
  if (inputs.empty()) return Tensor();
  if (inputs.size() == 1 && parts.size() == 1) return parts[0];
  const Shape& ref = inputs[0]->shape();
  const int r = static_cast<int>(ref.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const Tensor* p : inputs) {
    bool ok = p->rank() == r;
    for (int d = 0; ok && d < r; ++d) ok = d == axis || p->shape()[d] == ref[d];
    if (!ok) throw ShapeError("concat: " + shape_str(p->shape()) + " does not match " + shape_str(ref));
    out_shape[axis] += p->shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(ref[d]);
  for (int d = axis + 1; d < r; ++d) inner *= static_cast<std::size_t>(ref[d]);
  const std::size_t out_row = static_cast<std::size_t>(out_shape[axis]) * inner;
  std::vector<float> out(shape_numel(out_shape));
  auto offsets = std::make_shared<std::vector<std::size_t>>();
  auto widths = std::make_shared<std::vector<std::size_t>>();
  std::size_t off = 0;
  for (const Tensor* p : inputs) {
    const std::size_t wdt = static_cast<std::size_t>(p->shape()[axis]) * inner;
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(p->raw() + o * wdt, wdt, out.data() + o * out_row + off);
    offsets->push_back(off);
    widths->push_back(wdt);
    off += wdt;
  }
  return finish(OpKind::kConcat, std::move(out_shape), std::move(out), inputs,
                [offsets, widths, outer, out_row](BackwardContext& ctx) {
                  auto up = ctx.upstream();
                  for (std::size_t k = 0; k < offsets->size(); ++k) {
                    if (!ctx.needs(static_cast<int>(k))) continue;
                    auto g = ctx.grad(static_cast<int>(k));
                    const std::size_t wdt = (*widths)[k];
                    for (std::size_t o = 0; o < outer; ++o) {
                      const float* s = up.data() + o * out_row + (*offsets)[k];
                      float* d = g.data() + o * wdt;
                      for (std::size_t i = 0; i < wdt; ++i) d[i] += s[i];
                    }
                  }
                });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (b.empty()) return a;
  if (a.empty()) return b;
  if (a.rank() != b.rank() || a.rank() < 3 || a.dim(-1) != b.dim(-1) || a.dim(-2) != b.dim(-2) ||
      (a.rank() == 4 && a.dim(0) != b.dim(0))) {
    throw ShapeError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Tensor parts[] = {a, b};
  return concat(parts, -3);
}

Tensor slice(const Tensor& x, int axis, int begin, int end) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("slice: axis out of range for " + shape_str(x.shape()));
  if (begin < 0 || end > x.shape()[axis] || begin > end) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(x.shape()[d]);
  for (int d = axis + 1; d < r; ++d) inner *= static_cast<std::size_t>(x.shape()[d]);
  const std::size_t in_row = static_cast<std::size_t>(x.shape()[axis]) * inner;
  const std::size_t wdt = static_cast<std::size_t>(end - begin) * inner;
  const std::size_t off = static_cast<std::size_t>(begin) * inner;
  Shape shape = x.shape();
  shape[axis] = end - begin;
  std::vector<float> out(outer * wdt);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.raw() + o * in_row + off, wdt, out.data() + o * wdt);
  return finish(OpKind::kSlice, std::move(shape), std::move(out), {&x}, [outer, in_row, wdt, off](BackwardContext& ctx) {
    auto up = ctx.upstream();
    auto g = ctx.grad(0);
    for (std::size_t o = 0; o < outer; ++o) {
      const float* s = up.data() + o * wdt;
      float* d = g.data() + o * in_row + off;
      for (std::size_t i = 0; i < wdt; ++i) d[i] += s[i];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  return finish(OpKind::kReshape, std::move(shape), std::move(out), {&x}, [](BackwardContext& ctx) {
    auto up = ctx.upstream();
    auto g = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up[i];
  });
}

// ---------------------------------------------------------------- classification

std::vector<float> softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax_rows: expected [B,K], got " + shape_str(logits.shape()));
  const int rows = logits.dim(0), k = logits.dim(1);
  std::vector<float> out(logits.numel());
  for (int r = 0; r < rows; ++r) {
    const float* z = logits.raw() + static_cast<std::size_t>(r) * k;
    const float zmax = *std::max_element(z, z + k);
    double total = 0.0;
    for (int j = 0; j < k; ++j) total += std::exp(static_cast<double>(z[j]) - zmax);
    for (int j = 0; j < k; ++j)
      out[static_cast<std::size_t>(r) * k + j] = static_cast<float>(std::exp(static_cast<double>(z[j]) - zmax) / total);
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || static_cast<std::size_t>(logits.dim(0)) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const int rows = logits.dim(0), k = logits.dim(1);
  auto probs = std::make_shared<std::vector<float>>(softmax_rows(logits));
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double acc = 0.0;
  for (int r = 0; r < rows; ++r) {
    const int y = (*lab)[r];
    if (y < 0 || y >= k) throw std::out_of_range("cross_entropy: label out of range");
    acc -= std::log(std::max(1e-30, static_cast<double>((*probs)[static_cast<std::size_t>(r) * k + y])));
  }
  return finish(OpKind::kCrossEntropy, {1}, {static_cast<float>(acc / rows)}, {&logits},
                [probs, lab, rows, k](BackwardContext& ctx) {
                  const float scale = ctx.upstream()[0] / static_cast<float>(rows);
                  auto g = ctx.grad(0);
                  for (int r = 0; r < rows; ++r) {
                    for (int j = 0; j < k; ++j) {
                      const std::size_t i = static_cast<std::size_t>(r) * k + j;
                      g[i] += scale * ((*probs)[i] - (j == (*lab)[r] ? 1.0f : 0.0f));
                    }
                  }
                });
}

}  // namespace posewarp
