#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "rfbnet/common.hpp"
#include "rfbnet/label_map.hpp"
#include "rfbnet/tensor.hpp"

namespace rfbnet {

namespace detail {
inline int ceil_div(int a, int b) {
  return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  auto out = Tensor<T>::op_result(a.shape(), {a, b}, [a, b](detail::TensorNode<T>& node) mutable {
    const auto& g = node.grad;
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  debug_check_finite(out, "add");
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  auto out = Tensor<T>::op_result(a.shape(), {a, b}, [a, b](detail::TensorNode<T>& node) mutable {
    const auto& g = node.grad;
    if (a.requires_grad()) {
      auto& ga = a.grad();
      const T* pb = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      const T* pa = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa[i];
    }
  });
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
  debug_check_finite(out, "mul");
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T k) {
  auto out = Tensor<T>::op_result(a.shape(), {a}, [a, k](detail::TensorNode<T>& node) mutable {
    if (!a.requires_grad()) return;
    auto& ga = a.grad();
    const auto& g = node.grad;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * k;
  });
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * k;
  debug_check_finite(out, "scale");
  return out;
}

enum class Activation { kRelu, kSigmoid };

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto out = Tensor<T>::op_result(x.shape(), {x}, [x](detail::TensorNode<T>& node) mutable {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T* px = x.data();
    const auto& g = node.grad;
    // Subgradient at 0 is taken as 0.
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += px[i] > T(0) ? g[i] : T(0);
  });
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
  debug_check_finite(out, "relu");
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> y(x.numel());
  const T* px = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const T v = px[i];
    if (v >= T(0)) {
      y[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      y[i] = e / (T(1) + e);
    }
  }
  auto out = Tensor<T>::op_result(x.shape(), {x}, [x, y](detail::TensorNode<T>& node) mutable {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const auto& g = node.grad;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
  });
  out.values() = std::move(y);
  debug_check_finite(out, "sigmoid");
  return out;
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  return kind == Activation::kRelu ? relu(x) : sigmoid(x);
}

// y[n,c,h,w] = x[n,c,h,w] * gate[n,0,h,w]; the single gate channel broadcasts
// over all feature channels.
template <typename T>
Tensor<T> gate_mul(const Tensor<T>& x, const Tensor<T>& gate) {
  const Shape4 xs = x.shape();
  const Shape4 gs = gate.shape();
  if (gs.c != 1 || gs.n != xs.n || gs.h != xs.h || gs.w != xs.w) {
    throw ShapeError(detail::cat("gate_mul: gate ", gs.str(), " does not broadcast over ", xs.str()));
  }
  auto out = Tensor<T>::op_result(xs, {x, gate}, [x, gate](detail::TensorNode<T>& node) mutable {
    const Shape4 s = x.shape();
    const Shape4 g = gate.shape();
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    const T* pg = gate.data();
    const T* px = x.data();
    const auto& go = node.grad;
    if (x.requires_grad()) {
      auto& gx = x.grad();
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
          const std::size_t xo = s.index(n, c, 0, 0);
          const std::size_t ao = g.index(n, 0, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) gx[xo + i] += go[xo + i] * pg[ao + i];
        }
    }
    if (gate.requires_grad()) {
      auto& gg = gate.grad();
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
          const std::size_t xo = s.index(n, c, 0, 0);
          const std::size_t ao = g.index(n, 0, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) gg[ao + i] += go[xo + i] * px[xo + i];
        }
    }
  });
  const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
  const T* px = x.data();
  const T* pg = gate.data();
  T* po = out.data();
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const std::size_t xo = xs.index(n, c, 0, 0);
      const std::size_t ao = gs.index(n, 0, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) po[xo + i] = px[xo + i] * pg[ao + i];
    }
  debug_check_finite(out, "gate_mul");
  return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ValueError("concat_channels: no inputs");
  const Shape4 s0 = parts.front().shape();
  int ctot = 0;
  for (const auto& p : parts) {
    const Shape4 s = p.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw ShapeError(detail::cat("concat_channels: ", s.str(), " incompatible with ", s0.str()));
    }
    ctot += s.c;
  }
  const Shape4 os{s0.n, ctot, s0.h, s0.w};
  auto parents = parts;
  auto out = Tensor<T>::op_result(os, parents, [parts, os](detail::TensorNode<T>& node) mutable {
    const std::size_t plane = static_cast<std::size_t>(os.h) * os.w;
    const auto& g = node.grad;
    int coff = 0;
    for (auto& p : parts) {
      const Shape4 s = p.shape();
      if (p.requires_grad()) {
        auto& gp = p.grad();
        for (int n = 0; n < s.n; ++n)
          for (int c = 0; c < s.c; ++c) {
            const std::size_t src = os.index(n, coff + c, 0, 0);
            const std::size_t dst = s.index(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) gp[dst + i] += g[src + i];
          }
      }
      coff += s.c;
    }
  });
  const std::size_t plane = static_cast<std::size_t>(os.h) * os.w;
  T* po = out.data();
  int coff = 0;
  for (const auto& p : parts) {
    const Shape4 s = p.shape();
    const T* pp = p.data();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const std::size_t dst = os.index(n, coff + c, 0, 0);
        const std::size_t src = s.index(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) po[dst + i] = pp[src + i];
      }
    coff += s.c;
  }
  debug_check_finite(out, "concat_channels");
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  auto out = Tensor<T>::op_result(Shape4{1, 1, 1, 1}, {x}, [x](detail::TensorNode<T>& node) mutable {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T g = node.grad[0];
    for (auto& v : gx) v += g;
  });
  T acc = T(0);
  for (const T v : x.values()) acc += v;
  out.data()[0] = acc;
  debug_check_finite(out, "sum");
  return out;
}

// sum(x * p) with p treated as a constant projection.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, const Tensor<T>& p) {
  require_same_shape(x.shape(), p.shape(), "weighted_sum");
  auto out = Tensor<T>::op_result(Shape4{1, 1, 1, 1}, {x}, [x, p](detail::TensorNode<T>& node) mutable {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T g = node.grad[0];
    const T* pp = p.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * pp[i];
  });
  T acc = T(0);
  const T* px = x.data();
  const T* pp = p.data();
  for (std::size_t i = 0; i < x.numel(); ++i) acc += px[i] * pp[i];
  out.data()[0] = acc;
  return out;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

template <typename T>
Shape4 conv2d_output_shape(const Shape4& x, const Shape4& k, int stride, int pad, int groups) {
  if (stride < 1) throw ValueError("conv2d: stride must be positive");
  if (pad < 0) throw ValueError("conv2d: padding must be non-negative");
  if (groups < 1) throw ValueError("conv2d: groups must be positive");
  if (k.n % groups != 0) {
    throw ShapeError(detail::cat("conv2d: output channels ", k.n, " not divisible by groups ", groups));
  }
  if (x.c != k.c * groups) {
    throw ShapeError(detail::cat("conv2d: input channel axis ", x.c, " does not match kernel (",
                                 k.c, " per group x ", groups, " groups)"));
  }
  const int oh = (x.h + 2 * pad - k.h) / stride + 1;
  const int ow = (x.w + 2 * pad - k.w) / stride + 1;
  if (x.h + 2 * pad < k.h || x.w + 2 * pad < k.w || oh < 1 || ow < 1) {
    throw ShapeError(detail::cat("conv2d: spatial axes ", x.h, "x", x.w, " too small for kernel ",
                                 k.h, "x", k.w, " at pad ", pad));
  }
  return Shape4{x.n, k.n, oh, ow};
}

namespace detail {

// ow range such that iw = ow*stride - pad + kw stays inside [0, w).
inline void conv_ow_range(int w, int ow_count, int stride, int pad, int kw, int& lo, int& hi) {
  lo = std::max(0, ceil_div(pad - kw, stride));
  hi = std::min(ow_count - 1, (w - 1 + pad - kw) / stride);
}

template <typename T>
void conv2d_forward_kernel(const Shape4& xs, const T* px, const Shape4& ks, const T* pw,
                           const T* pbias, int stride, int pad, int groups, const Shape4& os, T* po) {
  const int cpg = ks.c;
  const int copg = ks.n / groups;
  for (int n = 0; n < xs.n; ++n) {
    for (int g = 0; g < groups; ++g) {
      for (int col = 0; col < copg; ++col) {
        const int co = g * copg + col;
        T* out_base = po + os.index(n, co, 0, 0);
        const T b = pbias ? pbias[co] : T(0);
        for (std::size_t i = 0; i < static_cast<std::size_t>(os.h) * os.w; ++i) out_base[i] = b;
        for (int cil = 0; cil < cpg; ++cil) {
          const int ci = g * cpg + cil;
          const T* x_base = px + xs.index(n, ci, 0, 0);
          for (int kh = 0; kh < ks.h; ++kh) {
            for (int kw = 0; kw < ks.w; ++kw) {
              const T wv = pw[ks.index(co, cil, kh, kw)];
              if (wv == T(0)) continue;
              int lo, hi;
              conv_ow_range(xs.w, os.w, stride, pad, kw, lo, hi);
              for (int oh = 0; oh < os.h; ++oh) {
                const int ih = oh * stride - pad + kh;
                if (ih < 0 || ih >= xs.h) continue;
                T* orow = out_base + static_cast<std::size_t>(oh) * os.w;
                const std::ptrdiff_t xoff = static_cast<std::ptrdiff_t>(ih) * xs.w - pad + kw;
                for (int ow = lo; ow <= hi; ++ow) orow[ow] += wv * x_base[xoff + static_cast<std::ptrdiff_t>(ow) * stride];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation with standard stride/padding semantics. Kernel layout is
// (out_channels, in_channels/groups, kh, kw); bias, when given, has
// out_channels entries in shape {1, Cout, 1, 1}.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const std::optional<Tensor<T>>& bias,
                 int stride = 1, int pad = 0, int groups = 1) {
  const Shape4 xs = x.shape();
  const Shape4 ks = kernel.shape();
  const Shape4 os = conv2d_output_shape<T>(xs, ks, stride, pad, groups);
  if (bias && !(bias->shape() == Shape4{1, ks.n, 1, 1})) {
    throw ShapeError(detail::cat("conv2d: bias shape ", bias->shape().str(), " wants {1,", ks.n, ",1,1}"));
  }

  std::vector<Tensor<T>> parents{x, kernel};
  if (bias) parents.push_back(*bias);
  auto out = Tensor<T>::op_result(os, parents,
      [x, kernel, bias, stride, pad, groups, os](detail::TensorNode<T>& node) mutable {
        const Shape4 xs = x.shape();
        const Shape4 ks = kernel.shape();
        const int cpg = ks.c;
        const int copg = ks.n / groups;
        const T* px = x.data();
        const T* pw = kernel.data();
        const T* pgo = node.grad.data();

        T* pgx = nullptr;
        if (x.requires_grad()) pgx = x.grad().data();
        T* pgw = nullptr;
        if (kernel.requires_grad()) pgw = kernel.grad().data();
        T* pgb = nullptr;
        if (bias && bias->requires_grad()) pgb = bias->grad().data();

        for (int n = 0; n < xs.n; ++n) {
          for (int g = 0; g < groups; ++g) {
            for (int col = 0; col < copg; ++col) {
              const int co = g * copg + col;
              const T* go_base = pgo + os.index(n, co, 0, 0);
              if (pgb) {
                T acc = T(0);
                for (std::size_t i = 0; i < static_cast<std::size_t>(os.h) * os.w; ++i) acc += go_base[i];
                pgb[co] += acc;
              }
              for (int cil = 0; cil < cpg; ++cil) {
                const int ci = g * cpg + cil;
                const T* x_base = px + xs.index(n, ci, 0, 0);
                T* gx_base = pgx ? pgx + xs.index(n, ci, 0, 0) : nullptr;
                for (int kh = 0; kh < ks.h; ++kh) {
                  for (int kw = 0; kw < ks.w; ++kw) {
                    const std::size_t widx = ks.index(co, cil, kh, kw);
                    const T wv = pw[widx];
                    int lo, hi;
                    detail::conv_ow_range(xs.w, os.w, stride, pad, kw, lo, hi);
                    T wacc = T(0);
                    for (int oh = 0; oh < os.h; ++oh) {
                      const int ih = oh * stride - pad + kh;
                      if (ih < 0 || ih >= xs.h) continue;
                      const T* gorow = go_base + static_cast<std::size_t>(oh) * os.w;
                      const std::ptrdiff_t xoff = static_cast<std::ptrdiff_t>(ih) * xs.w - pad + kw;
                      if (pgw) {
                        for (int ow = lo; ow <= hi; ++ow) wacc += gorow[ow] * x_base[xoff + static_cast<std::ptrdiff_t>(ow) * stride];
                      }
                      if (gx_base) {
                        for (int ow = lo; ow <= hi; ++ow) gx_base[xoff + static_cast<std::ptrdiff_t>(ow) * stride] += gorow[ow] * wv;
                      }
                    }
                    if (pgw) pgw[widx] += wacc;
                  }
                }
              }
            }
          }
        }
      });

  detail::conv2d_forward_kernel(xs, x.data(), ks, kernel.data(),
                                bias ? bias->data() : nullptr, stride, pad, groups, os, out.data());
  debug_check_finite(out, "conv2d");
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, int stride = 1, int pad = 0, int groups = 1) {
  return conv2d(x, kernel, std::optional<Tensor<T>>{}, stride, pad, groups);
}

// Per-channel spatial convolution followed by 1x1 channel mixing; exactly the
// composition of a grouped conv2d and a pointwise conv2d.
template <typename T>
Tensor<T> depthwise_separable_conv2d(const Tensor<T>& x, const Tensor<T>& depthwise_kernel,
                                     const Tensor<T>& pointwise_kernel, int stride = 1, int pad = 0,
                                     const std::optional<Tensor<T>>& pointwise_bias = {}) {
  const Shape4 ds = depthwise_kernel.shape();
  if (ds.c != 1) {
    throw ShapeError(detail::cat("depthwise_separable_conv2d: depthwise kernel channel axis must be 1, got ",
                                 ds.c));
  }
  if (ds.n != x.shape().c) {
    throw ShapeError(detail::cat("depthwise_separable_conv2d: depthwise channel axis ", ds.n,
                                 " does not match input channels ", x.shape().c));
  }
  auto mid = conv2d(x, depthwise_kernel, std::optional<Tensor<T>>{}, stride, pad, /*groups=*/ds.n);
  return conv2d(mid, pointwise_kernel, pointwise_bias, 1, 0, 1);
}

// ---------------------------------------------------------------------------
// Bilinear resize (half-pixel centers)
// ---------------------------------------------------------------------------

namespace detail {
struct LerpAxis {
  std::vector<int> i0, i1;
  std::vector<double> frac;
};

inline LerpAxis make_lerp_axis(int in, int out) {
  LerpAxis a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.frac.resize(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    double f = src - std::floor(src);
    int lo = static_cast<int>(std::floor(src));
    int hi = lo + 1;
    if (lo < 0) { lo = 0; hi = 0; f = 0.0; }
    if (hi > in - 1) { hi = in - 1; if (lo > in - 1) { lo = in - 1; } f = lo == hi ? 0.0 : f; }
    a.i0[o] = lo;
    a.i1[o] = hi;
    a.frac[o] = f;
  }
  return a;
}
}  // namespace detail

// Half-pixel-center sampling: src = (dst + 0.5) * in/out - 0.5, with edge
// clamping. The lerp form keeps constant inputs exactly constant.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ValueError("bilinear_resize: output extents must be >= 1");
  const Shape4 xs = x.shape();
  const Shape4 os{xs.n, xs.c, out_h, out_w};
  const auto ay = detail::make_lerp_axis(xs.h, out_h);
  const auto ax = detail::make_lerp_axis(xs.w, out_w);

  auto out = Tensor<T>::op_result(os, {x}, [x, os, ay, ax](detail::TensorNode<T>& node) mutable {
    if (!x.requires_grad()) return;
    const Shape4 xs = x.shape();
    auto& gx = x.grad();
    const auto& g = node.grad;
    for (int n = 0; n < os.n; ++n)
      for (int c = 0; c < os.c; ++c) {
        const std::size_t xbase = xs.index(n, c, 0, 0);
        const std::size_t obase = os.index(n, c, 0, 0);
        for (int oy = 0; oy < os.h; ++oy) {
          const double fy = ay.frac[oy];
          const std::size_t r0 = xbase + static_cast<std::size_t>(ay.i0[oy]) * xs.w;
          const std::size_t r1 = xbase + static_cast<std::size_t>(ay.i1[oy]) * xs.w;
          const T* grow = g.data() + obase + static_cast<std::size_t>(oy) * os.w;
          for (int ox = 0; ox < os.w; ++ox) {
            const double fx = ax.frac[ox];
            const T gv = grow[ox];
            const int x0 = ax.i0[ox], x1 = ax.i1[ox];
            gx[r0 + x0] += gv * static_cast<T>((1 - fy) * (1 - fx));
            gx[r0 + x1] += gv * static_cast<T>((1 - fy) * fx);
            gx[r1 + x0] += gv * static_cast<T>(fy * (1 - fx));
            gx[r1 + x1] += gv * static_cast<T>(fy * fx);
          }
        }
      }
  });

  const T* px = x.data();
  T* po = out.data();
  for (int n = 0; n < os.n; ++n)
    for (int c = 0; c < os.c; ++c) {
      const std::size_t xbase = xs.index(n, c, 0, 0);
      const std::size_t obase = os.index(n, c, 0, 0);
      for (int oy = 0; oy < os.h; ++oy) {
        const T fy = static_cast<T>(ay.frac[oy]);
        const T* row0 = px + xbase + static_cast<std::size_t>(ay.i0[oy]) * xs.w;
        const T* row1 = px + xbase + static_cast<std::size_t>(ay.i1[oy]) * xs.w;
        T* orow = po + obase + static_cast<std::size_t>(oy) * os.w;
        for (int ox = 0; ox < os.w; ++ox) {
          const T fx = static_cast<T>(ax.frac[ox]);
          const int x0 = ax.i0[ox], x1 = ax.i1[ox];
          const T top = row0[x0] + fx * (row0[x1] - row0[x0]);
          const T bot = row1[x0] + fx * (row1[x1] - row1[x0]);
          orow[ox] = top + fy * (bot - top);
        }
      }
    }
  debug_check_finite(out, "bilinear_resize");
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

enum class BnMode { kTrain, kEval };

template <typename T>
struct BnStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BnStats(int channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

// Train mode normalizes by biased batch statistics and updates the running
// stats with momentum 0.9; eval mode normalizes by the running stats.
// Epsilon 1e-5 keeps zero-variance channels finite.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& scale_p, const Tensor<T>& shift_p,
                     BnMode mode, BnStats<T>& stats, T momentum = T(0.9), T eps = T(1e-5)) {
  const Shape4 xs = x.shape();
  const int C = xs.c;
  if (!(scale_p.shape() == Shape4{1, C, 1, 1}) || !(shift_p.shape() == Shape4{1, C, 1, 1})) {
    throw ShapeError(detail::cat("batch_norm: scale/shift need {1,", C, ",1,1}, got ",
                                 scale_p.shape().str(), " and ", shift_p.shape().str()));
  }
  if (static_cast<int>(stats.running_mean.size()) != C) {
    throw ShapeError(detail::cat("batch_norm: running stats sized ", stats.running_mean.size(),
                                 " for channel axis ", C));
  }

  const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
  const std::size_t m = static_cast<std::size_t>(xs.n) * plane;
  std::vector<T> mean(C, T(0)), inv_std(C, T(0));
  const T* px = x.data();

  if (mode == BnMode::kTrain) {
    for (int c = 0; c < C; ++c) {
      T acc = T(0);
      for (int n = 0; n < xs.n; ++n) {
        const T* base = px + xs.index(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) acc += base[i];
      }
      mean[c] = acc / static_cast<T>(m);
      T vacc = T(0);
      for (int n = 0; n < xs.n; ++n) {
        const T* base = px + xs.index(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          const T d = base[i] - mean[c];
          vacc += d * d;
        }
      }
      const T var = vacc / static_cast<T>(m);
      inv_std[c] = T(1) / std::sqrt(var + eps);
      stats.running_mean[c] = momentum * stats.running_mean[c] + (T(1) - momentum) * mean[c];
      stats.running_var[c] = momentum * stats.running_var[c] + (T(1) - momentum) * var;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = stats.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(stats.running_var[c] + eps);
    }
  }

  auto out = Tensor<T>::op_result(xs, {x, scale_p, shift_p},
      [x, scale_p, shift_p, mean, inv_std, mode, m](detail::TensorNode<T>& node) mutable {
        const Shape4 xs = x.shape();
        const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
        const T* px = x.data();
        const T* pg = node.grad.data();
        const T* psc = scale_p.data();
        T* pgx = x.requires_grad() ? x.grad().data() : nullptr;
        T* pgs = scale_p.requires_grad() ? scale_p.grad().data() : nullptr;
        T* pgb = shift_p.requires_grad() ? shift_p.grad().data() : nullptr;

        for (int c = 0; c < xs.c; ++c) {
          const T mu = mean[c];
          const T inv = inv_std[c];
          T sum_g = T(0), sum_gx = T(0);
          for (int n = 0; n < xs.n; ++n) {
            const std::size_t off = xs.index(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) {
              const T g = pg[off + i];
              sum_g += g;
              sum_gx += g * (px[off + i] - mu) * inv;
            }
          }
          if (pgb) pgb[c] += sum_g;
          if (pgs) pgs[c] += sum_gx;
          if (pgx) {
            const T sc = psc[c];
            if (mode == BnMode::kTrain) {
              const T im = T(1) / static_cast<T>(m);
              for (int n = 0; n < xs.n; ++n) {
                const std::size_t off = xs.index(n, c, 0, 0);
                for (std::size_t i = 0; i < plane; ++i) {
                  const T xhat = (px[off + i] - mu) * inv;
                  pgx[off + i] += sc * inv * (pg[off + i] - im * sum_g - xhat * im * sum_gx);
                }
              }
            } else {
              for (int n = 0; n < xs.n; ++n) {
                const std::size_t off = xs.index(n, c, 0, 0);
                for (std::size_t i = 0; i < plane; ++i) pgx[off + i] += sc * inv * pg[off + i];
              }
            }
          }
        }
      });

  T* po = out.data();
  const T* psc = scale_p.data();
  const T* psh = shift_p.data();
  for (int c = 0; c < C; ++c) {
    const T mu = mean[c];
    const T inv = inv_std[c];
    const T sc = psc[c];
    const T sh = psh[c];
    for (int n = 0; n < xs.n; ++n) {
      const std::size_t off = xs.index(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) po[off + i] = sc * (px[off + i] - mu) * inv + sh;
    }
  }
  debug_check_finite(out, "batch_norm");
  return out;
}

// ---------------------------------------------------------------------------
// Softmax cross entropy
// ---------------------------------------------------------------------------

// Mean over non-ignored pixels of -log softmax at the true class.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const LabelMap& labels) {
  const Shape4 ls = logits.shape();
  const int K = ls.c;
  if (labels.n != ls.n || labels.h != ls.h || labels.w != ls.w) {
    throw ShapeError(detail::cat("softmax_cross_entropy: labels ", labels.n, "x", labels.h, "x",
                                 labels.w, " vs logits ", ls.str()));
  }
  std::size_t count = 0;
  for (const auto id : labels.ids) {
    if (id == LabelMap::kIgnore) continue;
    if (id >= K) {
      throw ValueError(detail::cat("softmax_cross_entropy: label id ", int(id), " out of range for ",
                                   K, " classes"));
    }
    ++count;
  }
  if (count == 0) throw ValueError("softmax_cross_entropy: all pixels ignored");

  auto out = Tensor<T>::op_result(Shape4{1, 1, 1, 1}, {logits},
      [logits, labels, K, count](detail::TensorNode<T>& node) mutable {
        if (!logits.requires_grad()) return;
        const Shape4 ls = logits.shape();
        const T* pl = logits.data();
        T* pg = logits.grad().data();
        const T g = node.grad[0] / static_cast<T>(count);
        std::vector<T> prob(K);
        for (int n = 0; n < ls.n; ++n)
          for (int y = 0; y < ls.h; ++y)
            for (int x = 0; x < ls.w; ++x) {
              const auto id = labels.at(n, y, x);
              if (id == LabelMap::kIgnore) continue;
              T zmax = pl[ls.index(n, 0, y, x)];
              for (int k = 1; k < K; ++k) zmax = std::max(zmax, pl[ls.index(n, k, y, x)]);
              T denom = T(0);
              for (int k = 0; k < K; ++k) {
                prob[k] = std::exp(pl[ls.index(n, k, y, x)] - zmax);
                denom += prob[k];
              }
              for (int k = 0; k < K; ++k) {
                const T p = prob[k] / denom;
                pg[ls.index(n, k, y, x)] += g * (p - (k == id ? T(1) : T(0)));
              }
            }
      });

  const T* pl = logits.data();
  T acc = T(0);
  for (int n = 0; n < ls.n; ++n)
    for (int y = 0; y < ls.h; ++y)
      for (int x = 0; x < ls.w; ++x) {
        const auto id = labels.at(n, y, x);
        if (id == LabelMap::kIgnore) continue;
        T zmax = pl[ls.index(n, 0, y, x)];
        for (int k = 1; k < K; ++k) zmax = std::max(zmax, pl[ls.index(n, k, y, x)]);
        T denom = T(0);
        for (int k = 0; k < K; ++k) denom += std::exp(pl[ls.index(n, k, y, x)] - zmax);
        acc += std::log(denom) - (pl[ls.index(n, id, y, x)] - zmax);
      }
  out.data()[0] = acc / static_cast<T>(count);
  debug_check_finite(out, "softmax_cross_entropy");
  return out;
}

}  // namespace rfbnet
