#pragma once

// Field and image losses plus the evaluation metrics.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "morphdiff/io.hpp"
#include "morphdiff/warp.hpp"

namespace morphdiff {

inline constexpr double kNccEps = 1e-5;

// Global zero-mean normalized cross-correlation. Rank-3 inputs [C x H x W]
// are correlated per channel and the channel scores averaged.
template <class S>
Tensor<S> ncc(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("ncc: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  }
  if (a.numel() < 2) throw ShapeError("ncc needs at least 2 elements");
  const std::int64_t c = a.rank() == 3 ? a.dim(0) : 1;
  const std::int64_t n = a.numel() / c;
  if (n < 2) throw ShapeError("ncc needs at least 2 elements per channel");
  const auto av = a.data();
  const auto bv = b.data();

  struct Stats {
    double ma, mb, sab, saa, sbb;
  };
  std::vector<Stats> stats(static_cast<std::size_t>(c));
  double total = 0.0;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const S* pa = av.data() + ch * n;
    const S* pb = bv.data() + ch * n;
    double ma = 0.0, mb = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      ma += pa[i];
      mb += pb[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double da = pa[i] - ma, db = pb[i] - mb;
      sab += da * db;
      saa += da * da;
      sbb += db * db;
    }
    stats[ch] = {ma, mb, sab, saa, sbb};
    total += sab / (std::sqrt(saa + kNccEps) * std::sqrt(sbb + kNccEps));
  }
  return record<S>("ncc", Shape{}, {static_cast<S>(total / static_cast<double>(c))}, {a, b},
                   [c, n, stats = std::move(stats)](const std::vector<S>& g, const auto& in) {
                     const auto& av = in[0]->value;
                     const auto& bv = in[1]->value;
                     const double go = g[0] / static_cast<double>(c);
                     for (std::int64_t ch = 0; ch < c; ++ch) {
                       const auto& s = stats[ch];
                       const double denom = std::sqrt(s.saa + kNccEps) * std::sqrt(s.sbb + kNccEps);
                       // Centering contributes nothing: the centered vectors sum to zero.
                       if (in[0]->requires_grad) {
                         auto& ga = in[0]->grad_buffer();
                         const double k = s.sab / (s.saa + kNccEps);
                         for (std::int64_t i = 0; i < n; ++i) {
                           const double da = av[ch * n + i] - s.ma, db = bv[ch * n + i] - s.mb;
                           ga[ch * n + i] += static_cast<S>(go * (db - k * da) / denom);
                         }
                       }
                       if (in[1]->requires_grad) {
                         auto& gb = in[1]->grad_buffer();
                         const double k = s.sab / (s.sbb + kNccEps);
                         for (std::int64_t i = 0; i < n; ++i) {
                           const double da = av[ch * n + i] - s.ma, db = bv[ch * n + i] - s.mb;
                           gb[ch * n + i] += static_cast<S>(go * (da - k * db) / denom);
                         }
                       }
                     }
                   });
}

// Mean squared forward difference, averaged over every (channel, direction)
// pair of a [C x H x W] field.
template <class S>
Tensor<S> smoothness(const Tensor<S>& u) {
  if (u.rank() != 3 || u.dim(1) < 2 || u.dim(2) < 2) {
    throw ShapeError("smoothness expects [C, H, W] with H, W >= 2, got " + shape_string(u.shape()));
  }
  const std::int64_t c = u.dim(0), h = u.dim(1), w = u.dim(2), hw = h * w;
  const double nx = static_cast<double>(h * (w - 1)), ny = static_cast<double>((h - 1) * w);
  const double pairs = 2.0 * static_cast<double>(c);
  const auto uv = u.data();
  double total = 0.0;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const S* p = uv.data() + ch * hw;
    double sx = 0.0, sy = 0.0;
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        if (x + 1 < w) sx += std::pow(static_cast<double>(p[y * w + x + 1] - p[y * w + x]), 2);
        if (y + 1 < h) sy += std::pow(static_cast<double>(p[(y + 1) * w + x] - p[y * w + x]), 2);
      }
    }
    total += sx / nx + sy / ny;
  }
  return record<S>("smoothness", Shape{}, {static_cast<S>(total / pairs)}, {u},
                   [c, h, w, hw, nx, ny, pairs](const std::vector<S>& g, const auto& in) {
                     const auto& uv = in[0]->value;
                     auto& gu = in[0]->grad_buffer();
                     const double kx = 2.0 * g[0] / (pairs * nx), ky = 2.0 * g[0] / (pairs * ny);
                     for (std::int64_t ch = 0; ch < c; ++ch) {
                       const S* p = uv.data() + ch * hw;
                       S* q = gu.data() + ch * hw;
                       for (std::int64_t y = 0; y < h; ++y) {
                         for (std::int64_t x = 0; x < w; ++x) {
                           const std::int64_t i = y * w + x;
                           if (x + 1 < w) {
                             const double d = kx * (p[i + 1] - p[i]);
                             q[i + 1] += static_cast<S>(d);
                             q[i] -= static_cast<S>(d);
                           }
                           if (y + 1 < h) {
                             const double d = ky * (p[i + w] - p[i]);
                             q[i + w] += static_cast<S>(d);
                             q[i] -= static_cast<S>(d);
                           }
                         }
                       }
                     }
                   });
}

// 1 - NCC(pred, gt) + gamma * smoothness(pred)
template <class S>
Tensor<S> df_loss(const Tensor<S>& pred, const Tensor<S>& gt, double gamma) {
  if (gamma < 0) throw DomainError("df_loss needs gamma >= 0");
  Tensor<S> out = add_scalar(neg(ncc(pred, gt)), S{1});
  if (gamma > 0) out = add(out, scale(smoothness(pred), static_cast<S>(gamma)));
  return out;
}

// |critic(img) - t_age|, critic being any callable image -> scalar tensor.
template <class S, class Critic>
Tensor<S> bae_loss(const Critic& critic, const Tensor<S>& img, double t_age) {
  return abs(add_scalar(critic(img), static_cast<S>(-t_age)));
}

// --------------------------------------------------------------- metrics

inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

template <class S>
double psnr(const Tensor<S>& a, const Tensor<S>& b, double max_val = 1.0) {
  if (a.shape() != b.shape()) throw ShapeError("psnr: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  double acc = 0.0;
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < av.size(); ++i) acc += std::pow(static_cast<double>(av[i]) - bv[i], 2);
  const double m = acc / static_cast<double>(av.size());
  if (m == 0.0) return kPsnrIdentical;
  return -10.0 * std::log10(m / (max_val * max_val));
}

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(size));
  double total = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

// Index into [0, n) by mirroring with the edge sample repeated (..., 1, 0 | 0, 1, ...).
inline std::int64_t symmetric_index(std::int64_t i, std::int64_t n) {
  const std::int64_t period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

// Separable Gaussian blur of an H x W plane with symmetric padding.
inline std::vector<double> blur(const std::vector<double>& img, std::int64_t h, std::int64_t w, const std::vector<double>& g) {
  const auto r = static_cast<std::int64_t>(g.size() / 2);
  std::vector<double> tmp(img.size()), out(img.size());
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::int64_t k = -r; k <= r; ++k) acc += g[k + r] * img[y * w + symmetric_index(x + k, w)];
      tmp[y * w + x] = acc;
    }
  }
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::int64_t k = -r; k <= r; ++k) acc += g[k + r] * tmp[symmetric_index(y + k, h) * w + x];
      out[y * w + x] = acc;
    }
  }
  return out;
}

}  // namespace detail

// Mean local SSIM (11x11 Gaussian window, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2)
// for [C x H x W] or [H x W] images in [0, 1]; channels are averaged.
template <class S>
double ssim(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw ShapeError("ssim: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  if (a.rank() != 2 && a.rank() != 3) throw ShapeError("ssim expects [H, W] or [C, H, W], got " + shape_string(a.shape()));
  const std::int64_t c = a.rank() == 3 ? a.dim(0) : 1;
  const std::int64_t h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1), hw = h * w;
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto g = detail::gaussian_window(11, 1.5);
  const auto av = a.data();
  const auto bv = b.data();
  double total = 0.0;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    std::vector<double> x(av.begin() + ch * hw, av.begin() + (ch + 1) * hw);
    std::vector<double> y(bv.begin() + ch * hw, bv.begin() + (ch + 1) * hw);
    std::vector<double> xx(hw), yy(hw), xy(hw);
    for (std::int64_t i = 0; i < hw; ++i) {
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::blur(x, h, w, g), my = detail::blur(y, h, w, g);
    const auto sxx = detail::blur(xx, h, w, g), syy = detail::blur(yy, h, w, g), sxy = detail::blur(xy, h, w, g);
    double acc = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
      acc += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += acc / static_cast<double>(hw);
  }
  return total / static_cast<double>(c);
}

// One evaluation record. Loss terms and any extra values ride along in `terms`.
struct MetricReport {
  double psnr_db = 0.0;
  double ssim = 0.0;
  double ncc = 0.0;
  double mean_jacobian = 0.0;
  double folding_fraction = 0.0;
  std::map<std::string, double> terms;

  static constexpr const char* kColumns = "psnr_db,ssim,ncc,mean_jacobian,folding_fraction";

  KeyValues to_key_values(const std::string& prefix = "") const {
    KeyValues kv;
    kv.emplace_back(prefix + "psnr_db", format_double(psnr_db));
    kv.emplace_back(prefix + "ssim", format_double(ssim));
    kv.emplace_back(prefix + "ncc", format_double(ncc));
    kv.emplace_back(prefix + "mean_jacobian", format_double(mean_jacobian));
    kv.emplace_back(prefix + "folding_fraction", format_double(folding_fraction));
    for (const auto& [name, value] : terms) kv.emplace_back(prefix + name, format_double(value));
    return kv;
  }

  std::string csv_row() const {
    std::ostringstream os;
    os << format_double(psnr_db) << ',' << format_double(ssim) << ',' << format_double(ncc) << ','
       << format_double(mean_jacobian) << ',' << format_double(folding_fraction);
    return os.str();
  }
};

}  // namespace morphdiff
