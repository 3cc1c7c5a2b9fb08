#pragma once

// Kolmogorov-Arnold layers: every edge (i -> o) carries a learnable cubic
// B-spline plus a fixed silu base path,
//
//   out_o = sum_i base[o,i] * silu(x_i) + scale[o,i] * sum_j coeffs[o,i,j] * B_j(clamp(x_i)).
//
// Both paths are evaluated as matrix products over a [in x P] block of
// inputs, so the same layer serves batches of vectors and per-pixel channel
// vectors inside a KanBlock.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "morphdiff/nn.hpp"

namespace morphdiff {

// Uniform knot vector extended `order` cells beyond [lo, hi] on both sides.
struct SplineGrid {
  int order = 3;
  int intervals = 5;
  double lo = -1.0;
  double hi = 1.0;

  void validate() const {
    if (!(lo < hi)) throw DomainError("spline grid needs lo < hi, got [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    if (order < 1 || order > 7) throw DomainError("spline order must be in [1, 7]");
    if (intervals < 1) throw DomainError("spline grid needs at least one interval");
  }

  int basis_count() const { return intervals + order; }
  double spacing() const { return (hi - lo) / intervals; }

  std::vector<double> knots() const {
    validate();
    std::vector<double> t(static_cast<std::size_t>(intervals + 2 * order + 1));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = lo + (static_cast<double>(i) - order) * spacing();
    return t;
  }
};

namespace detail {

// Non-zero basis values at x (after clamping) and their derivatives. Index
// `first` is the global index of values[0]; there are order + 1 entries.
struct LocalBasis {
  int first = 0;
  double values[8] = {};
  double derivs[8] = {};
};

inline LocalBasis local_basis(double x, const SplineGrid& grid) {
  const int p = grid.order;
  const double h = grid.spacing();
  const bool inside = x >= grid.lo && x <= grid.hi;
  x = std::clamp(x, grid.lo, grid.hi);
  int cell = static_cast<int>(std::floor((x - grid.lo) / h));
  cell = std::clamp(cell, 0, grid.intervals - 1);
  const int m = cell + p;  // knot span index: t[m] <= x < t[m+1]
  // Work in cell-local units so the recursion never sees a slightly negative
  // distance from rounding at knot boundaries.
  const double u = std::clamp((x - grid.lo) / h - cell, 0.0, 1.0);

  double n[8] = {1.0};
  double lower[8] = {};
  double left[8] = {};
  double right[8] = {};
  for (int j = 1; j <= p; ++j) {
    if (j == p) std::copy(n, n + p, lower);
    left[j] = u + j - 1;
    right[j] = j - u;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double temp = n[r] / (right[r + 1] + left[j - r]);
      n[r] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    n[j] = saved;
  }

  LocalBasis out;
  out.first = m - p;
  for (int r = 0; r <= p; ++r) {
    out.values[r] = n[r];
    const double a = r >= 1 ? lower[r - 1] : 0.0;
    const double b = r <= p - 1 ? lower[r] : 0.0;
    out.derivs[r] = inside ? (a - b) / h : 0.0;
  }
  return out;
}

}  // namespace detail

// All grid.basis_count() basis values at x; x outside [lo, hi] is clamped.
inline std::vector<double> bspline_basis(double x, const SplineGrid& grid) {
  grid.validate();
  std::vector<double> out(static_cast<std::size_t>(grid.basis_count()), 0.0);
  const auto local = detail::local_basis(x, grid);
  for (int r = 0; r <= grid.order; ++r) out[static_cast<std::size_t>(local.first + r)] = local.values[r];
  return out;
}

// x[I x P] -> features[(I*K) x P] with row i*K + j holding B_j(x[i, :]).
template <class S>
Tensor<S> bspline_features(const Tensor<S>& x, const SplineGrid& grid) {
  grid.validate();
  if (x.rank() != 2) throw ShapeError("bspline_features expects [in, points], got " + shape_string(x.shape()));
  const std::int64_t in = x.dim(0), points = x.dim(1);
  const int k = grid.basis_count();
  const int p = grid.order;
  const auto xv = x.data();
  std::vector<S> out(static_cast<std::size_t>(in * k * points), S{0});
  const bool keep = grad_enabled() && x.requires_grad();
  std::vector<int> first;
  std::vector<S> derivs;
  if (keep) {
    first.resize(xv.size());
    derivs.resize(xv.size() * static_cast<std::size_t>(p + 1));
  }
  for (std::int64_t i = 0; i < in; ++i) {
    for (std::int64_t q = 0; q < points; ++q) {
      const std::size_t idx = static_cast<std::size_t>(i * points + q);
      const auto local = detail::local_basis(static_cast<double>(xv[idx]), grid);
      for (int r = 0; r <= p; ++r) {
        out[static_cast<std::size_t>((i * k + local.first + r) * points + q)] = static_cast<S>(local.values[r]);
      }
      if (keep) {
        first[idx] = local.first;
        for (int r = 0; r <= p; ++r) derivs[idx * (p + 1) + r] = static_cast<S>(local.derivs[r]);
      }
    }
  }
  return record<S>("bspline_features", Shape{in * k, points}, std::move(out), {x},
                   [in, points, k, p, first = std::move(first), derivs = std::move(derivs)](
                       const std::vector<S>& g, const auto& inputs) {
                     auto& gx = inputs[0]->grad_buffer();
                     for (std::int64_t i = 0; i < in; ++i) {
                       for (std::int64_t q = 0; q < points; ++q) {
                         const std::size_t idx = static_cast<std::size_t>(i * points + q);
                         S acc{0};
                         for (int r = 0; r <= p; ++r) {
                           acc += g[static_cast<std::size_t>((i * k + first[idx] + r) * points + q)] *
                                  derivs[idx * (p + 1) + r];
                         }
                         gx[idx] += acc;
                       }
                     }
                   });
}

// coeffs[O x I x K], scale[O x I] -> [O x (I*K)] with scale folded into each edge.
template <class S>
Tensor<S> spline_weights(const Tensor<S>& coeffs, const Tensor<S>& scale) {
  if (coeffs.rank() != 3 || scale.rank() != 2 || scale.dim(0) != coeffs.dim(0) || scale.dim(1) != coeffs.dim(1)) {
    throw ShapeError("spline_weights: coeffs " + shape_string(coeffs.shape()) + " and scale " +
                     shape_string(scale.shape()) + " disagree");
  }
  const std::int64_t o = coeffs.dim(0), in = coeffs.dim(1), k = coeffs.dim(2);
  const auto c = coeffs.data();
  const auto s = scale.data();
  std::vector<S> out(c.size());
  for (std::int64_t e = 0; e < o * in; ++e) {
    for (std::int64_t j = 0; j < k; ++j) out[e * k + j] = s[e] * c[e * k + j];
  }
  return record<S>("spline_weights", Shape{o, in * k}, std::move(out), {coeffs, scale},
                   [o, in, k](const std::vector<S>& g, const auto& inputs) {
                     const auto& c = inputs[0]->value;
                     const auto& s = inputs[1]->value;
                     if (inputs[0]->requires_grad) {
                       auto& gc = inputs[0]->grad_buffer();
                       for (std::int64_t e = 0; e < o * in; ++e) {
                         for (std::int64_t j = 0; j < k; ++j) gc[e * k + j] += g[e * k + j] * s[e];
                       }
                     }
                     if (inputs[1]->requires_grad) {
                       auto& gs = inputs[1]->grad_buffer();
                       for (std::int64_t e = 0; e < o * in; ++e) {
                         double acc = 0.0;
                         for (std::int64_t j = 0; j < k; ++j) acc += g[e * k + j] * c[e * k + j];
                         gs[e] += static_cast<S>(acc);
                       }
                     }
                   });
}

template <class S>
class KanLayer {
 public:
  KanLayer() = default;

  KanLayer(std::int64_t in, std::int64_t out, Rng& rng, SplineGrid grid = {}) : grid_(grid) {
    grid_.validate();
    const double root_in = std::sqrt(static_cast<double>(in));
    coeffs_ = rng.normal_tensor<S>({out, in, grid_.basis_count()}, 0.1 / root_in, true);
    base_ = rng.normal_tensor<S>({out, in}, 1.0 / root_in, true);
    scale_ = Tensor<S>::full({out, in}, S{1}, true);
  }

  std::int64_t in_dim() const { return base_.dim(1); }
  std::int64_t out_dim() const { return base_.dim(0); }
  const SplineGrid& grid() const { return grid_; }

  // x[in x P] -> [out x P]
  Tensor<S> forward_columns(const Tensor<S>& x) const {
    if (x.rank() != 2 || x.dim(0) != in_dim()) {
      throw ShapeError("KanLayer expects [" + std::to_string(in_dim()) + ", P] columns, got " + shape_string(x.shape()));
    }
    Tensor<S> base = matmul(base_, silu(x));
    Tensor<S> spline = matmul(spline_weights(coeffs_, scale_), bspline_features(x, grid_));
    return add(base, spline);
  }

  // x[batch x in] -> [batch x out]
  Tensor<S> operator()(const Tensor<S>& x) const {
    if (x.rank() != 2 || x.dim(1) != in_dim()) {
      throw ShapeError("KanLayer expects [batch, " + std::to_string(in_dim()) + "], got " + shape_string(x.shape()));
    }
    return transpose(forward_columns(transpose(x)));
  }

  Tensor<S>& coeffs() { return coeffs_; }
  Tensor<S>& base_weight() { return base_; }
  Tensor<S>& spline_scale() { return scale_; }

  void collect(NamedParams<S>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".coeffs", coeffs_);
    out.emplace_back(prefix + ".base", base_);
    out.emplace_back(prefix + ".scale", scale_);
  }

 private:
  SplineGrid grid_;
  Tensor<S> coeffs_;
  Tensor<S> base_;
  Tensor<S> scale_;
};

// 3x3 same-padded convolution followed by a KAN layer shared across pixels.
template <class S>
class KanBlock {
 public:
  KanBlock() = default;

  KanBlock(std::int64_t in_channels, std::int64_t out_channels, Rng& rng, SplineGrid grid = {})
      : conv_(in_channels, out_channels, 3, rng), kan_(out_channels, out_channels, rng, grid) {}

  // `shift`, when given, is a per-channel offset added between conv and KAN.
  Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& shift = {}) const {
    Tensor<S> h = conv_(x);
    if (shift.defined()) h = add_channelwise(h, shift);
    const Shape shape = h.shape();
    Tensor<S> cols = reshape(h, {shape[0], shape[1] * shape[2]});
    return reshape(kan_.forward_columns(cols), shape);
  }

  std::int64_t out_channels() const { return conv_.out_channels(); }
  Conv2d<S>& conv() { return conv_; }
  KanLayer<S>& kan() { return kan_; }

  void collect(NamedParams<S>& out, const std::string& prefix) const {
    conv_.collect(out, prefix + ".conv");
    kan_.collect(out, prefix);
  }

 private:
  Conv2d<S> conv_;
  KanLayer<S> kan_;
};

}  // namespace morphdiff
