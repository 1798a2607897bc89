#pragma once

// Adam with bias correction over a fixed set of ParamStore entries.
// Parameters are visited in name order and updated with serial loops, so a
// given gradient history always produces bitwise-identical trajectories.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "voxfuse/common.hpp"
#include "voxfuse/layers.hpp"
#include "voxfuse/tensor.hpp"

namespace voxfuse {

template <Scalar T>
struct AdamConfig {
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

template <Scalar T>
class AdamState {
 public:
  AdamState() = default;

  AdamState(const ParamStore<T>& store, const std::vector<std::string>& names,
            AdamConfig<T> cfg = {})
      : cfg_(cfg) {
    for (const auto& name : names) {
      const auto& p = store.at(name);
      m_.emplace(name, Tensor<T>::zeros(p.shape()));
      v_.emplace(name, Tensor<T>::zeros(p.shape()));
    }
  }

  std::int64_t step_count() const { return step_; }
  const AdamConfig<T>& config() const { return cfg_; }

  // theta -= lr * m_hat / (sqrt(v_hat) + eps). Every tracked parameter must
  // carry a gradient buffer.
  void step(ParamStore<T>& store, T lr) {
    ++step_;
    const T bc1 = T(1) - static_cast<T>(std::pow(double(cfg_.beta1), double(step_)));
    const T bc2 = T(1) - static_cast<T>(std::pow(double(cfg_.beta2), double(step_)));
    for (auto& [name, m] : m_) {
      Tensor<T>& p = store.at(name);
      if (!p.has_grad()) {
        throw ContractError("adam: missing gradient for parameter '" + name + "'");
      }
      Tensor<T>& v = v_.at(name);
      const T* g = p.grad().data();
      T* pm = m.ptr();
      T* pv = v.ptr();
      T* pp = p.ptr();
      const std::int64_t n = p.size();
      for (std::int64_t i = 0; i < n; ++i) {
        pm[i] = cfg_.beta1 * pm[i] + (T(1) - cfg_.beta1) * g[i];
        pv[i] = cfg_.beta2 * pv[i] + (T(1) - cfg_.beta2) * g[i] * g[i];
        const T mhat = pm[i] / bc1;
        const T vhat = pv[i] / bc2;
        pp[i] -= lr * mhat / (static_cast<T>(std::sqrt(vhat)) + cfg_.eps);
      }
    }
  }

  // moments as archive entries under opt.m. / opt.v. prefixes
  std::map<std::string, Tensor<T>> export_entries() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, t] : m_) out.emplace("opt.m." + name, t);
    for (const auto& [name, t] : v_) out.emplace("opt.v." + name, t);
    return out;
  }

  static AdamState restore(const std::map<std::string, Tensor<T>>& entries,
                           std::int64_t step, AdamConfig<T> cfg = {}) {
    AdamState s;
    s.cfg_ = cfg;
    s.step_ = step;
    for (const auto& [name, t] : entries) {
      if (name.rfind("opt.m.", 0) == 0) s.m_.emplace(name.substr(6), t);
      if (name.rfind("opt.v.", 0) == 0) s.v_.emplace(name.substr(6), t);
    }
    if (s.m_.size() != s.v_.size()) {
      throw DataError("adam: mismatched moment entries in checkpoint");
    }
    return s;
  }

 private:
  AdamConfig<T> cfg_;
  std::map<std::string, Tensor<T>> m_, v_;
  std::int64_t step_ = 0;
};

}  // namespace voxfuse
