#pragma once

#include <optional>
#include <string>

#include "rfbnet/ops.hpp"
#include "rfbnet/param.hpp"

namespace rfbnet {

// Conv layer owning its kernel and optional bias.
template <typename T>
struct Conv2d {
  Param<T> weight;
  std::optional<Param<T>> bias;
  int stride = 1;
  int pad = 0;
  int groups = 1;

  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int k, int stride_ = 1, int pad_ = 0, bool with_bias = false,
         int groups_ = 1)
      : stride(stride_), pad(pad_), groups(groups_) {
    weight = Param<T>(Shape4{out_ch, in_ch / groups_, k, k});
    if (with_bias) bias = Param<T>(Shape4{1, out_ch, 1, 1}, /*exempt=*/true);
  }

  int fan_in() const {
    const Shape4 s = weight.shape();
    return s.c * s.h * s.w;
  }

  void init(Rng& rng) {
    weight.init_uniform(rng, fan_in());
    if (bias) bias->fill(T(0));
  }
  void init_zero() {
    weight.fill(T(0));
    if (bias) bias->fill(T(0));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv2d(x, weight.t, bias ? std::optional<Tensor<T>>(bias->t) : std::optional<Tensor<T>>{},
                  stride, pad, groups);
  }

  void collect(Registry<T>& reg, const std::string& prefix) {
    reg.add(prefix + ".weight", weight);
    if (bias) reg.add(prefix + ".bias", *bias);
  }
};

// Depthwise k x k + pointwise 1x1, bias on the pointwise stage only.
template <typename T>
struct SeparableConv2d {
  Param<T> depthwise;
  Param<T> pointwise;
  std::optional<Param<T>> bias;
  int stride = 1;
  int pad = 0;

  SeparableConv2d() = default;
  SeparableConv2d(int channels, int out_ch, int k, bool with_bias = true)
      : stride(1), pad(k / 2) {
    depthwise = Param<T>(Shape4{channels, 1, k, k});
    pointwise = Param<T>(Shape4{out_ch, channels, 1, 1});
    if (with_bias) bias = Param<T>(Shape4{1, out_ch, 1, 1}, /*exempt=*/true);
  }

  void init(Rng& rng) {
    const Shape4 d = depthwise.shape();
    depthwise.init_uniform(rng, d.h * d.w);
    pointwise.init_uniform(rng, pointwise.shape().c);
    if (bias) bias->fill(T(0));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return depthwise_separable_conv2d(x, depthwise.t, pointwise.t, stride, pad,
                                      bias ? std::optional<Tensor<T>>(bias->t) : std::optional<Tensor<T>>{});
  }

  void collect(Registry<T>& reg, const std::string& prefix) {
    reg.add(prefix + ".depthwise", depthwise);
    reg.add(prefix + ".pointwise", pointwise);
    if (bias) reg.add(prefix + ".bias", *bias);
  }
};

template <typename T>
struct BatchNorm2d {
  Param<T> scale;
  Param<T> shift;
  BnStats<T> stats;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels) : stats(channels) {
    scale = Param<T>(Shape4{1, channels, 1, 1}, /*exempt=*/true);
    shift = Param<T>(Shape4{1, channels, 1, 1}, /*exempt=*/true);
    scale.fill(T(1));
  }

  void init(Rng&) {
    scale.fill(T(1));
    shift.fill(T(0));
  }

  Tensor<T> forward(const Tensor<T>& x, BnMode mode) {
    return batch_norm(x, scale.t, shift.t, mode, stats);
  }

  void collect(Registry<T>& reg, const std::string& prefix) {
    reg.add(prefix + ".scale", scale);
    reg.add(prefix + ".shift", shift);
    reg.add_buffer(prefix + ".running_mean", stats.running_mean);
    reg.add_buffer(prefix + ".running_var", stats.running_var);
  }
};

}  // namespace rfbnet
