#pragma once

// Spatial transformer: pull-warping with bilinear interpolation.
//
// A displacement field u is a [2 x H x W] tensor in pixel units; channel 0 is
// the column offset u_x, channel 1 the row offset u_y. Warping samples the
// source at p + u(p). Corners falling outside the image read as 0.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "morphdiff/ops.hpp"

namespace morphdiff {

template <class S>
struct DeformationField {
  Tensor<S> u;
  bool normalized = false;
  double u_max = 10.0;
  std::int64_t clamped = 0;  // elements clipped to [-1, 1] by the last normalize
};

namespace detail {

inline void require_field(const Shape& field, const Shape& image, const char* op) {
  if (field.size() != 3 || field[0] != 2) {
    throw ShapeError(std::string(op) + ": field must be [2, H, W], got " + shape_string(field));
  }
  if (image.size() != 3 || image[1] != field[1] || image[2] != field[2]) {
    throw ShapeError(std::string(op) + ": image " + shape_string(image) + " does not match field " + shape_string(field));
  }
}

struct BilinearTap {
  std::int64_t x0, y0;
  double fx, fy;
};

inline BilinearTap bilinear_tap(double x, double y) {
  const double xf = std::floor(x), yf = std::floor(y);
  return {static_cast<std::int64_t>(xf), static_cast<std::int64_t>(yf), x - xf, y - yf};
}

template <class S>
double pixel(const S* plane, std::int64_t h, std::int64_t w, std::int64_t y, std::int64_t x) {
  return (x < 0 || y < 0 || x >= w || y >= h) ? 0.0 : static_cast<double>(plane[y * w + x]);
}

template <class S>
double bilinear(const S* plane, std::int64_t h, std::int64_t w, const BilinearTap& t) {
  const double v00 = pixel(plane, h, w, t.y0, t.x0);
  const double v01 = pixel(plane, h, w, t.y0, t.x0 + 1);
  const double v10 = pixel(plane, h, w, t.y0 + 1, t.x0);
  const double v11 = pixel(plane, h, w, t.y0 + 1, t.x0 + 1);
  return (1 - t.fy) * ((1 - t.fx) * v00 + t.fx * v01) + t.fy * ((1 - t.fx) * v10 + t.fx * v11);
}

// Partial derivatives of the interpolated value with respect to x and y.
template <class S>
std::pair<double, double> bilinear_slope(const S* plane, std::int64_t h, std::int64_t w, const BilinearTap& t) {
  const double v00 = pixel(plane, h, w, t.y0, t.x0);
  const double v01 = pixel(plane, h, w, t.y0, t.x0 + 1);
  const double v10 = pixel(plane, h, w, t.y0 + 1, t.x0);
  const double v11 = pixel(plane, h, w, t.y0 + 1, t.x0 + 1);
  return {(1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10), (1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01)};
}

// Scatters g into the four corners (the adjoint of `bilinear`).
template <class S>
void bilinear_scatter(S* plane, std::int64_t h, std::int64_t w, const BilinearTap& t, double g) {
  auto put = [&](std::int64_t y, std::int64_t x, double wgt) {
    if (x >= 0 && y >= 0 && x < w && y < h) plane[y * w + x] += static_cast<S>(g * wgt);
  };
  put(t.y0, t.x0, (1 - t.fy) * (1 - t.fx));
  put(t.y0, t.x0 + 1, (1 - t.fy) * t.fx);
  put(t.y0 + 1, t.x0, t.fy * (1 - t.fx));
  put(t.y0 + 1, t.x0 + 1, t.fy * t.fx);
}

}  // namespace detail

// img[C x H x W] sampled at coords[2 x N] (row 0 = x/column, row 1 = y/row)
// -> [C x N]. Differentiable in both arguments.
template <class S>
Tensor<S> bilinear_sample(const Tensor<S>& img, const Tensor<S>& coords) {
  if (img.rank() != 3) throw ShapeError("bilinear_sample: image must be [C, H, W], got " + shape_string(img.shape()));
  if (coords.rank() != 2 || coords.dim(0) != 2) {
    throw ShapeError("bilinear_sample: coords must be [2, N], got " + shape_string(coords.shape()));
  }
  const std::int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2), n = coords.dim(1);
  const auto iv = img.data();
  const auto cv = coords.data();
  std::vector<S> out(static_cast<std::size_t>(c * n));
  for (std::int64_t q = 0; q < n; ++q) {
    const auto tap = detail::bilinear_tap(cv[q], cv[n + q]);
    for (std::int64_t ch = 0; ch < c; ++ch) out[ch * n + q] = static_cast<S>(detail::bilinear(iv.data() + ch * h * w, h, w, tap));
  }
  return record<S>("bilinear_sample", Shape{c, n}, std::move(out), {img, coords},
                   [c, h, w, n](const std::vector<S>& g, const auto& in) {
                     const auto& iv = in[0]->value;
                     const auto& cv = in[1]->value;
                     for (std::int64_t q = 0; q < n; ++q) {
                       const auto tap = detail::bilinear_tap(cv[q], cv[n + q]);
                       double gx = 0.0, gy = 0.0;
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                         const double go = g[ch * n + q];
                         if (in[0]->requires_grad) {
                           detail::bilinear_scatter(in[0]->grad_buffer().data() + ch * h * w, h, w, tap, go);
                         }
                         const auto [sx, sy] = detail::bilinear_slope(iv.data() + ch * h * w, h, w, tap);
                         gx += go * sx;
                         gy += go * sy;
                       }
                       if (in[1]->requires_grad) {
                         auto& gc = in[1]->grad_buffer();
                         gc[q] += static_cast<S>(gx);
                         gc[n + q] += static_cast<S>(gy);
                       }
                     }
                   });
}

// out(p) = img(p + u(p)) for u in pixel units; differentiable in img and u.
template <class S>
Tensor<S> warp_image(const Tensor<S>& img, const Tensor<S>& u) {
  detail::require_field(u.shape(), img.shape(), "warp_image");
  const std::int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2), hw = h * w;
  const auto iv = img.data();
  const auto uv = u.data();
  std::vector<S> out(static_cast<std::size_t>(c * hw));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const std::int64_t p = y * w + x;
      if (uv[p] == S{0} && uv[hw + p] == S{0}) {
        for (std::int64_t ch = 0; ch < c; ++ch) out[ch * hw + p] = iv[ch * hw + p];
        continue;
      }
      const auto tap = detail::bilinear_tap(x + static_cast<double>(uv[p]), y + static_cast<double>(uv[hw + p]));
      for (std::int64_t ch = 0; ch < c; ++ch) out[ch * hw + p] = static_cast<S>(detail::bilinear(iv.data() + ch * hw, h, w, tap));
    }
  }
  return record<S>("warp_image", img.shape(), std::move(out), {img, u},
                   [c, h, w, hw](const std::vector<S>& g, const auto& in) {
                     const auto& iv = in[0]->value;
                     const auto& uv = in[1]->value;
                     for (std::int64_t y = 0; y < h; ++y) {
                       for (std::int64_t x = 0; x < w; ++x) {
                         const std::int64_t p = y * w + x;
                         const auto tap = detail::bilinear_tap(x + static_cast<double>(uv[p]), y + static_cast<double>(uv[hw + p]));
                         double gx = 0.0, gy = 0.0;
                         for (std::int64_t ch = 0; ch < c; ++ch) {
                           const double go = g[ch * hw + p];
                           if (in[0]->requires_grad) {
                             detail::bilinear_scatter(in[0]->grad_buffer().data() + ch * hw, h, w, tap, go);
                           }
                           const auto [sx, sy] = detail::bilinear_slope(iv.data() + ch * hw, h, w, tap);
                           gx += go * sx;
                           gy += go * sy;
                         }
                         if (in[1]->requires_grad) {
                           auto& gu = in[1]->grad_buffer();
                           gu[p] += static_cast<S>(gx);
                           gu[hw + p] += static_cast<S>(gy);
                         }
                       }
                     }
                   });
}

template <class S>
Tensor<S> warp_image(const Tensor<S>& img, const DeformationField<S>& field) {
  if (field.normalized) throw DomainError("warp_image needs a field in pixel units; denormalize it first");
  return warp_image(img, field.u);
}

// Label maps [1 x H x W] with integer labels 0..num_labels-1: each one-hot
// channel is warped bilinearly and the arg-max (lowest label on ties) wins.
template <class S>
Tensor<S> warp_labels(const Tensor<S>& labels, const Tensor<S>& u, int num_labels = 3) {
  detail::require_field(u.shape(), labels.shape(), "warp_labels");
  if (labels.dim(0) != 1) throw ShapeError("warp_labels expects a single-channel label map, got " + shape_string(labels.shape()));
  NoGradGuard no_grad;
  const std::int64_t h = labels.dim(1), w = labels.dim(2), hw = h * w;
  std::vector<S> onehot(static_cast<std::size_t>(num_labels * hw), S{0});
  const auto lv = labels.data();
  for (std::int64_t p = 0; p < hw; ++p) {
    const auto k = static_cast<std::int64_t>(std::lround(static_cast<double>(lv[p])));
    if (k < 0 || k >= num_labels) throw DomainError("warp_labels: label " + std::to_string(k) + " outside [0, " + std::to_string(num_labels) + ")");
    onehot[k * hw + p] = S{1};
  }
  const Tensor<S> warped = warp_image(Tensor<S>({num_labels, h, w}, std::move(onehot)), u.detach());
  const auto wv = warped.data();
  std::vector<S> out(static_cast<std::size_t>(hw));
  for (std::int64_t p = 0; p < hw; ++p) {
    int best = 0;
    for (int k = 1; k < num_labels; ++k) {
      if (wv[k * hw + p] > wv[best * hw + p]) best = k;
    }
    out[p] = static_cast<S>(best);
  }
  return Tensor<S>({1, h, w}, std::move(out));
}

// Displacement of "warp by a, then by b": c(p) = b(p) + a(p + b(p)).
template <class S>
Tensor<S> compose_fields(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_field(a.shape(), b.shape(), "compose_fields");
  return add(b, warp_image(a, b));
}

template <class S>
DeformationField<S> normalize_field(const DeformationField<S>& field, double u_max) {
  if (!(u_max > 0)) throw DomainError("normalize_field needs u_max > 0, got " + std::to_string(u_max));
  if (field.normalized) throw DomainError("field is already normalized");
  DeformationField<S> out{field.u.detach(), true, u_max, 0};
  for (auto& v : out.u.mutable_data()) {
    const double scaled = static_cast<double>(v) / u_max;
    if (scaled > 1.0 || scaled < -1.0) ++out.clamped;
    v = static_cast<S>(std::clamp(scaled, -1.0, 1.0));
  }
  return out;
}

template <class S>
DeformationField<S> denormalize_field(const DeformationField<S>& field, double u_max) {
  if (!(u_max > 0)) throw DomainError("denormalize_field needs u_max > 0, got " + std::to_string(u_max));
  if (!field.normalized) throw DomainError("field is already in pixel units");
  DeformationField<S> out{field.u.detach(), false, u_max, 0};
  for (auto& v : out.u.mutable_data()) v = static_cast<S>(static_cast<double>(v) * u_max);
  return out;
}

// det(I + grad u) per pixel: central differences inside, one-sided at borders.
template <class S>
Tensor<double> jacobian_determinant(const Tensor<S>& u) {
  if (u.rank() != 3 || u.dim(0) != 2) throw ShapeError("jacobian_determinant: field must be [2, H, W], got " + shape_string(u.shape()));
  const std::int64_t h = u.dim(1), w = u.dim(2), hw = h * w;
  if (h < 2 || w < 2) throw ShapeError("jacobian_determinant needs H, W >= 2");
  const auto uv = u.data();
  auto at = [&](std::int64_t ch, std::int64_t y, std::int64_t x) { return static_cast<double>(uv[ch * hw + y * w + x]); };
  auto ddx = [&](std::int64_t ch, std::int64_t y, std::int64_t x) {
    if (x == 0) return at(ch, y, 1) - at(ch, y, 0);
    if (x == w - 1) return at(ch, y, w - 1) - at(ch, y, w - 2);
    return 0.5 * (at(ch, y, x + 1) - at(ch, y, x - 1));
  };
  auto ddy = [&](std::int64_t ch, std::int64_t y, std::int64_t x) {
    if (y == 0) return at(ch, 1, x) - at(ch, 0, x);
    if (y == h - 1) return at(ch, h - 1, x) - at(ch, h - 2, x);
    return 0.5 * (at(ch, y + 1, x) - at(ch, y - 1, x));
  };
  std::vector<double> det(static_cast<std::size_t>(hw));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      det[y * w + x] = (1 + ddx(0, y, x)) * (1 + ddy(1, y, x)) - ddy(0, y, x) * ddx(1, y, x);
    }
  }
  return Tensor<double>({h, w}, std::move(det));
}

inline double folding_fraction(const Tensor<double>& det) {
  std::int64_t folded = 0;
  for (double d : det.data()) folded += d <= 0.0;
  return static_cast<double>(folded) / static_cast<double>(det.numel());
}

}  // namespace morphdiff
