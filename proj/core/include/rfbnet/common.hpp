#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace rfbnet {

// Base class for all library errors. Subclasses pick the failure domain so
// callers (and the CLI exit-code mapping) can react without string matching.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error { using Error::Error; };
struct ValueError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };

namespace detail {
template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}
}  // namespace detail

// Dense rank-4 extents in (batch, channels, height, width) order.
struct Shape4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  bool operator==(const Shape4&) const = default;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t index(int in, int ic, int ih, int iw) const {
    return ((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw;
  }
  bool valid() const { return n > 0 && c > 0 && h > 0 && w > 0; }
  std::string str() const {
    return detail::cat(n, "x", c, "x", h, "x", w);
  }
};

inline void require_same_shape(const Shape4& a, const Shape4& b, const char* op) {
  if (!(a == b)) {
    throw ShapeError(detail::cat(op, ": shape mismatch ", a.str(), " vs ", b.str()));
  }
}

}  // namespace rfbnet
