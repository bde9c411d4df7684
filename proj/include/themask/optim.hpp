#pragma once

// AdamW with per-group learning-rate multipliers and frozen groups, and the
// poly learning-rate schedule.

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "themask/errors.hpp"
#include "themask/params.hpp"

namespace themask {

/// base_lr * (1 - iter/total)^power.
inline double poly_lr(std::size_t iter, std::size_t total, double base_lr, double power = 0.9) {
  if (total == 0 || iter > total) throw ContractError("poly_lr: iteration outside [0, total]");
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(total);
  return base_lr * std::pow(frac, power);
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  std::map<std::string, double> lr_multiplier;  // by group, default 1
  std::set<std::string> frozen;                 // groups left untouched
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(std::move(cfg)) {}

  /// One update of every non-frozen parameter from its accumulated
  /// gradient. A parameter without a gradient is treated as zero gradient.
  void step(ParamStore& ps, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : ps.entries()) {
      if (cfg_.frozen.count(p.group)) continue;
      const std::size_t n = p.value.numel();
      std::vector<double> g = p.value.has_grad() ? p.value.grad() : std::vector<double>(n, 0.0);
      for (double v : g) {
        if (!std::isfinite(v)) throw NumericError("non-finite gradient in parameter '" + name + "'");
      }
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(n, 0.0);
        st.v.assign(n, 0.0);
      }
      const auto mult = cfg_.lr_multiplier.find(p.group);
      const double glr = lr * (mult == cfg_.lr_multiplier.end() ? 1.0 : mult->second);
      auto w = p.value.mutable_data();
      for (std::size_t i = 0; i < n; ++i) {
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        w[i] -= glr * cfg_.weight_decay * w[i];
        w[i] -= glr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  std::size_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace themask
