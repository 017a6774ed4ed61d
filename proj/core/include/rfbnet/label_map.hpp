#pragma once

#include <cstdint>
#include <vector>

#include "rfbnet/common.hpp"

namespace rfbnet {

// Per-pixel class ids for a batch of images. 255 marks ignored pixels.
struct LabelMap {
  static constexpr std::uint8_t kIgnore = 255;

  int n = 0;
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> ids;

  LabelMap() = default;
  LabelMap(int n_, int h_, int w_, std::uint8_t fill = 0)
      : n(n_), h(h_), w(w_), ids(static_cast<std::size_t>(n_) * h_ * w_, fill) {}

  std::size_t index(int in, int iy, int ix) const {
    return (static_cast<std::size_t>(in) * h + iy) * w + ix;
  }
  std::uint8_t at(int in, int iy, int ix) const { return ids[index(in, iy, ix)]; }
  std::uint8_t& at(int in, int iy, int ix) { return ids[index(in, iy, ix)]; }
  std::size_t numel() const { return ids.size(); }
};

}  // namespace rfbnet
