#pragma once

// Central finite-difference oracle for the backward rules.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "morphdiff/rng.hpp"
#include "morphdiff/tensor.hpp"

namespace morphdiff {

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::int64_t coordinates = 0;
  std::int64_t worst_coordinate = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

inline double relative_gradient_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-8);
}

namespace detail {

template <class S, class Loss>
double eval_loss(Loss& loss) {
  NoGradGuard guard;
  return static_cast<double>(loss().item());
}

}  // namespace detail

// Max over the selected coordinates of |analytic - central| / (|analytic| + |central| + 1e-8)
// for a scalar loss of the given leaf tensors. `fraction` < 1 samples a
// random subset of coordinates (at least `min_coordinates`).
template <class S>
GradcheckResult check_gradients(const std::function<Tensor<S>()>& loss, std::vector<Tensor<S>> leaves, double h = 1e-3,
                                double fraction = 1.0, std::uint64_t seed = 0, std::int64_t min_coordinates = 8) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  backward(loss());

  struct Coord {
    std::size_t leaf;
    std::size_t index;
  };
  std::vector<Coord> coords;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    for (std::int64_t i = 0; i < leaves[l].numel(); ++i) coords.push_back({l, static_cast<std::size_t>(i)});
  }
  if (fraction < 1.0) {
    Rng rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng.engine());
    const auto keep = std::max<std::int64_t>(min_coordinates, static_cast<std::int64_t>(fraction * coords.size()));
    if (static_cast<std::size_t>(keep) < coords.size()) coords.resize(static_cast<std::size_t>(keep));
  }

  GradcheckResult result;
  auto fn = loss;
  for (std::size_t c = 0; c < coords.size(); ++c) {
    auto& leaf = leaves[coords[c].leaf];
    const std::size_t i = coords[c].index;
    const double analytic = leaf.has_grad() ? static_cast<double>(leaf.grad()[i]) : 0.0;
    auto values = leaf.mutable_data();
    const S original = values[i];
    values[i] = static_cast<S>(original + h);
    const double plus = detail::eval_loss<S>(fn);
    values[i] = static_cast<S>(original - h);
    const double minus = detail::eval_loss<S>(fn);
    values[i] = original;
    const double numeric = (plus - minus) / (2.0 * h);
    const double err = relative_gradient_error(analytic, numeric);
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_coordinate = static_cast<std::int64_t>(c);
      result.worst_analytic = analytic;
      result.worst_numeric = numeric;
    }
  }
  result.coordinates = static_cast<std::int64_t>(coords.size());
  return result;
}

// Single-input form: f maps x to a scalar.
template <class S>
double finite_difference_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, const Tensor<S>& x,
                               double h = 1e-3) {
  Tensor<S> leaf = x.detach();
  return check_gradients<S>([&] { return f(leaf); }, {leaf}, h).max_rel_error;
}

}  // namespace morphdiff
