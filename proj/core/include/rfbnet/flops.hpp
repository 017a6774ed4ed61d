#pragma once

#include <cstdint>
#include <vector>

#include "rfbnet/common.hpp"

namespace rfbnet {

// Analytic multiply-accumulate accounting. Nothing here executes a network;
// counts are closed-form per layer descriptor.
struct ConvDesc {
  int in_channels = 0;
  int out_channels = 0;
  int kh = 0;
  int kw = 0;
  int stride = 1;
  int pad = 0;
  int groups = 1;
  int in_h = 0;
  int in_w = 0;

  int out_h() const { return (in_h + 2 * pad - kh) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kw) / stride + 1; }
};

inline std::uint64_t conv_macs(const ConvDesc& d) {
  if (d.in_channels <= 0 || d.out_channels <= 0 || d.kh <= 0 || d.kw <= 0 || d.in_h <= 0 ||
      d.in_w <= 0 || d.stride <= 0 || d.groups <= 0) {
    throw ValueError("conv_macs: unspecified or non-positive shape");
  }
  if (d.in_channels % d.groups != 0 || d.out_channels % d.groups != 0) {
    throw ValueError("conv_macs: channels not divisible by groups");
  }
  const std::uint64_t per_out = static_cast<std::uint64_t>(d.in_channels / d.groups) * d.kh * d.kw;
  return per_out * d.out_channels * d.out_h() * d.out_w();
}

// Depthwise k x k followed by pointwise 1x1.
inline std::uint64_t separable_conv_macs(int channels, int out_channels, int k, int h, int w) {
  ConvDesc dw{channels, channels, k, k, 1, k / 2, channels, h, w};
  ConvDesc pw{channels, out_channels, 1, 1, 1, 0, 1, h, w};
  return conv_macs(dw) + conv_macs(pw);
}

inline std::uint64_t sum_macs(const std::vector<ConvDesc>& layers) {
  std::uint64_t total = 0;
  for (const auto& d : layers) total += conv_macs(d);
  return total;
}

}  // namespace rfbnet
