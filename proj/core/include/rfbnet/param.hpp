#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "rfbnet/rng.hpp"
#include "rfbnet/tensor.hpp"

namespace rfbnet {

// A trainable tensor. Biases and normalization scales/shifts are exempt from
// weight decay.
template <typename T>
struct Param {
  Tensor<T> t;
  bool decay_exempt = false;

  Param() = default;
  explicit Param(const Shape4& s, bool exempt = false) : decay_exempt(exempt) {
    t = Tensor<T>::zeros(s, /*requires_grad=*/true);
  }

  const Shape4& shape() const { return t.shape(); }
  std::size_t numel() const { return t.numel(); }
  void fill(T v) { std::fill(t.values().begin(), t.values().end(), v); }

  // Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  void init_uniform(Rng& rng, int fan_in) {
    const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-b, b));
  }
};

// Ordered, named view over a model's parameters and persistent buffers
// (batch-norm running stats). Registration order is deterministic; the
// optimizer walks params in this order and checkpoints serialize it.
template <typename T>
struct Registry {
  struct ParamEntry {
    std::string name;
    Param<T>* param;
  };
  struct BufferEntry {
    std::string name;
    std::vector<T>* data;
  };

  std::vector<ParamEntry> params;
  std::vector<BufferEntry> buffers;

  void add(const std::string& name, Param<T>& p) { params.push_back({name, &p}); }
  void add_buffer(const std::string& name, std::vector<T>& data) { buffers.push_back({name, &data}); }

  std::size_t total_param_count() const {
    std::size_t n = 0;
    for (const auto& e : params) n += e.param->numel();
    return n;
  }

  void zero_grads() {
    for (auto& e : params) e.param->t.zero_grad();
  }
};

}  // namespace rfbnet
