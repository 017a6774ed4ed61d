#pragma once

#include <cmath>
#include <vector>

#include "rfbnet/common.hpp"
#include "rfbnet/param.hpp"

namespace rfbnet {

// Poly schedule: lr(iter) = base * (1 - iter/max_iter)^power.
inline double poly_lr(double base_lr, std::size_t iter, std::size_t max_iter, double power) {
  if (max_iter == 0) throw ValueError("poly_lr: max_iter must be positive");
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(max_iter);
  return base_lr * std::pow(frac, power);
}

// Adam with the poly learning-rate schedule and decoupled weight decay.
// beta1/beta2/eps are the canonical defaults.
template <typename T>
class AdamOptimizer {
 public:
  AdamOptimizer(Registry<T>& registry, double base_lr, std::size_t max_iter, double poly_power,
                double weight_decay)
      : registry_(&registry),
        base_lr_(base_lr),
        max_iter_(max_iter),
        poly_power_(poly_power),
        weight_decay_(weight_decay) {
    if (base_lr < 0) throw ValueError("adam: base_lr must be non-negative");
    if (max_iter == 0) throw ValueError("adam: max_iter must be positive");
    m_.resize(registry.params.size());
    v_.resize(registry.params.size());
    for (std::size_t i = 0; i < registry.params.size(); ++i) {
      const auto n = registry.params[i].param->numel();
      m_[i].assign(n, T(0));
      v_[i].assign(n, T(0));
    }
  }

  std::size_t step_count() const { return step_; }
  double current_lr() const { return poly_lr(base_lr_, step_, max_iter_, poly_power_); }

  void step() {
    if (step_ > max_iter_) {
      throw ValueError(detail::cat("adam: step ", step_, " exceeds max_iter ", max_iter_));
    }
    const double lr = current_lr();
    const double t = static_cast<double>(step_) + 1.0;
    const double bc1 = 1.0 - std::pow(kBeta1, t);
    const double bc2 = 1.0 - std::pow(kBeta2, t);

    for (std::size_t i = 0; i < registry_->params.size(); ++i) {
      Param<T>& p = *registry_->params[i].param;
      const auto& g = p.t.grad();
      auto& val = p.t.values();
      auto& m = m_[i];
      auto& v = v_[i];
      const bool decay = !p.decay_exempt && weight_decay_ > 0.0;
      for (std::size_t j = 0; j < val.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m[j] = static_cast<T>(kBeta1 * m[j] + (1.0 - kBeta1) * gj);
        v[j] = static_cast<T>(kBeta2 * v[j] + (1.0 - kBeta2) * gj * gj);
        const double mhat = static_cast<double>(m[j]) / bc1;
        const double vhat = static_cast<double>(v[j]) / bc2;
        double upd = lr * mhat / (std::sqrt(vhat) + kEps);
        if (decay) upd += lr * weight_decay_ * static_cast<double>(val[j]);
        val[j] = static_cast<T>(val[j] - upd);
      }
    }
    ++step_;
  }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

 private:
  Registry<T>* registry_;
  double base_lr_;
  std::size_t max_iter_;
  double poly_power_;
  double weight_decay_;
  std::size_t step_ = 0;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
};

}  // namespace rfbnet
