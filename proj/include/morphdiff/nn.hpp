#pragma once

// Parameter containers and the two affine layers everything else is built from.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "morphdiff/ops.hpp"
#include "morphdiff/rng.hpp"

namespace morphdiff {

template <class S>
using NamedParams = std::vector<std::pair<std::string, Tensor<S>>>;

template <class S>
void set_trainable(NamedParams<S>& params, bool on) {
  for (auto& [name, p] : params) p.set_requires_grad(on);
}

template <class S>
std::int64_t parameter_count(const NamedParams<S>& params) {
  std::int64_t n = 0;
  for (const auto& [name, p] : params) n += p.numel();
  return n;
}

// y = W x + b for x of shape [in] or [in x N] (columns are samples).
template <class S>
class Linear {
 public:
  Linear() = default;

  Linear(std::int64_t in, std::int64_t out, Rng& rng, bool bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight_ = rng.uniform_tensor<S>({out, in}, -bound, bound, true);
    if (bias) bias_ = rng.uniform_tensor<S>({out}, -bound, bound, true);
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    const bool vector_input = x.rank() == 1;
    Tensor<S> cols = vector_input ? reshape(x, {x.dim(0), 1}) : x;
    Tensor<S> y = matmul(weight_, cols);
    if (bias_.defined()) y = add_channelwise(y, bias_);
    return vector_input ? reshape(y, {weight_.dim(0)}) : y;
  }

  std::int64_t in_features() const { return weight_.dim(1); }
  std::int64_t out_features() const { return weight_.dim(0); }

  Tensor<S>& weight() { return weight_; }
  Tensor<S>& bias() { return bias_; }

  void collect(NamedParams<S>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".w", weight_);
    if (bias_.defined()) out.emplace_back(prefix + ".b", bias_);
  }

 private:
  Tensor<S> weight_;
  Tensor<S> bias_;
};

// k x k convolution with bias; `same` padding for odd k.
template <class S>
class Conv2d {
 public:
  Conv2d() = default;

  Conv2d(std::int64_t in, std::int64_t out, std::int64_t kernel, Rng& rng, std::int64_t stride = 1)
      : stride_(stride), padding_(kernel / 2) {
    if (kernel % 2 == 0) throw ShapeError("Conv2d uses same padding and needs an odd kernel, got " + std::to_string(kernel));
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
    weight_ = rng.uniform_tensor<S>({out, in, kernel, kernel}, -bound, bound, true);
    bias_ = rng.uniform_tensor<S>({out}, -bound, bound, true);
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    return add_channelwise(conv2d(x, weight_, stride_, padding_), bias_);
  }

  std::int64_t in_channels() const { return weight_.dim(1); }
  std::int64_t out_channels() const { return weight_.dim(0); }

  Tensor<S>& weight() { return weight_; }
  Tensor<S>& bias() { return bias_; }

  void collect(NamedParams<S>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".w", weight_);
    out.emplace_back(prefix + ".b", bias_);
  }

 private:
  Tensor<S> weight_;
  Tensor<S> bias_;
  std::int64_t stride_ = 1;
  std::int64_t padding_ = 0;
};

}  // namespace morphdiff
