#pragma once

// Named trainable tensors with parameter groups, and conversion to and from
// checkpoints.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "themask/errors.hpp"
#include "themask/rng.hpp"
#include "themask/serialize.hpp"
#include "themask/tensor.hpp"

namespace themask {

inline constexpr const char* kBackboneGroup = "backbone";
inline constexpr const char* kDecoderGroup = "decoder";

struct Param {
  Tensor value;  // leaf, requires_grad
  std::string group;
};

class ParamStore {
 public:
  /// Registers a leaf filled uniformly from [-bound, bound].
  const Tensor& add_uniform(const std::string& name, Shape shape, double bound,
                            const std::string& group, Rng& rng) {
    std::vector<double> v(shape_numel(shape));
    for (auto& e : v) e = rng.uniform(-bound, bound);
    return add(name, Tensor::from_data(std::move(shape), std::move(v), true), group);
  }

  const Tensor& add_constant(const std::string& name, Shape shape, double value,
                             const std::string& group) {
    return add(name, Tensor::full(std::move(shape), value, true), group);
  }

  const Tensor& add(const std::string& name, Tensor value, const std::string& group) {
    if (params_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
    if (!value.is_leaf() || !value.requires_grad()) {
      value = Tensor::from_data(value.shape(),
                                std::vector<double>(value.data().begin(), value.data().end()),
                                true);
    }
    auto& p = params_[name];
    p.value = std::move(value);
    p.group = group;
    return p.value;
  }

  const Tensor& operator[](const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("no parameter named '" + name + "'");
    return it->second.value;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }

  std::map<std::string, Param>& entries() { return params_; }
  const std::map<std::string, Param>& entries() const { return params_; }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.value.zero_grad();
  }

  NamedTensors to_named() const {
    NamedTensors out;
    for (const auto& [name, p] : params_) out.emplace(name, p.value.detach());
    return out;
  }

  /// Copies values in from `src`. Every name in `required_groups` must be
  /// present with a matching shape; names of other groups are copied when
  /// present. Extra names in `src` are an error when `strict`.
  void load(const NamedTensors& src, const std::vector<std::string>& required_groups,
            bool strict) {
    std::vector<std::string> missing, extra, mismatched;
    for (auto& [name, p] : params_) {
      auto it = src.find(name);
      const bool required =
          std::find(required_groups.begin(), required_groups.end(), p.group) !=
          required_groups.end();
      if (it == src.end()) {
        if (required) missing.push_back(name);
        continue;
      }
      if (it->second.shape() != p.value.shape()) {
        mismatched.push_back(name + " " + shape_str(it->second.shape()) + " vs " +
                             shape_str(p.value.shape()));
      }
    }
    if (strict) {
      for (const auto& [name, _] : src) {
        if (!params_.count(name)) extra.push_back(name);
      }
    }
    if (!missing.empty() || !extra.empty() || !mismatched.empty()) {
      std::string msg = "checkpoint does not fit the model";
      auto list = [&](const char* what, const std::vector<std::string>& names) {
        if (names.empty()) return;
        msg += std::string("; ") + what + ":";
        for (const auto& n : names) msg += " " + n;
      };
      list("missing", missing);
      list("extra", extra);
      list("shape mismatch", mismatched);
      throw LoadError(msg);
    }
    for (auto& [name, p] : params_) {
      auto it = src.find(name);
      if (it == src.end()) continue;
      auto dst = p.value.mutable_data();
      std::copy(it->second.data().begin(), it->second.data().end(), dst.begin());
    }
  }

 private:
  std::map<std::string, Param> params_;
};

}  // namespace themask
