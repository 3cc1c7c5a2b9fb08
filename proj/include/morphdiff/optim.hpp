#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "morphdiff/nn.hpp"

namespace morphdiff {

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay. weight_decay = 0 gives plain Adam.
template <class S>
class AdamW {
 public:
  AdamW(NamedParams<S> params, AdamWOptions options) : params_(std::move(params)), options_(options) {
    for (const auto& [name, p] : params_) {
      m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
      v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  void step() {
    ++steps_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k].second;
      if (!p.has_grad()) continue;
      const auto g = p.grad();
      auto w = p.mutable_data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        const double mi = options_.beta1 * m[i] + (1.0 - options_.beta1) * gi;
        const double vi = options_.beta2 * v[i] + (1.0 - options_.beta2) * gi * gi;
        m[i] = static_cast<float>(mi);
        v[i] = static_cast<float>(vi);
        const double update = (mi / c1) / (std::sqrt(vi / c2) + options_.eps);
        w[i] = static_cast<S>(w[i] - options_.lr * (update + options_.weight_decay * w[i]));
      }
    }
  }

  std::int64_t steps() const { return steps_; }
  const AdamWOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }

  // Moment buffers as tensors named opt.m.<param> / opt.v.<param>.
  NamedParams<float> state() const {
    NamedParams<float> out;
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const auto& shape = params_[k].second.shape();
      out.emplace_back("opt.m." + params_[k].first,
                       Tensor<float>(shape, m_[k]));
      out.emplace_back("opt.v." + params_[k].first,
                       Tensor<float>(shape, v_[k]));
    }
    return out;
  }

  void load_state(const std::map<std::string, Tensor<float>>& tensors, std::int64_t steps) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const auto mi = tensors.find("opt.m." + params_[k].first);
      const auto vi = tensors.find("opt.v." + params_[k].first);
      if (mi == tensors.end() || vi == tensors.end()) {
        throw ShapeError("optimizer state missing for parameter " + params_[k].first);
      }
      if (mi->second.numel() != static_cast<std::int64_t>(m_[k].size()) ||
          vi->second.numel() != static_cast<std::int64_t>(v_[k].size())) {
        throw ShapeError("optimizer state shape mismatch for parameter " + params_[k].first);
      }
      m_[k].assign(mi->second.data().begin(), mi->second.data().end());
      v_[k].assign(vi->second.data().begin(), vi->second.data().end());
    }
    steps_ = steps;
  }

 private:
  NamedParams<S> params_;
  AdamWOptions options_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::int64_t steps_ = 0;
};

}  // namespace morphdiff
