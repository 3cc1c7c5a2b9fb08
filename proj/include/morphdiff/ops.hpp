#pragma once

// Differentiable tensor operations. Reductions accumulate in double; matrix
// products go through Eigen's GEMM kernels.

#include <Eigen/Core>

#include <cmath>
#include <string>
#include <vector>

#include "morphdiff/tensor.hpp"

namespace morphdiff {

namespace detail {

template <class S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatrixMap = Eigen::Map<RowMatrix<S>>;
template <class S>
using ConstMatrixMap = Eigen::Map<const RowMatrix<S>>;

template <class S>
ConstMatrixMap<S> as_matrix(const std::vector<S>& v, std::int64_t rows, std::int64_t cols) {
  return ConstMatrixMap<S>(v.data(), rows, cols);
}

template <class S>
MatrixMap<S> as_matrix(std::vector<S>& v, std::int64_t rows, std::int64_t cols) {
  return MatrixMap<S>(v.data(), rows, cols);
}

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

template <class S>
Shape broadcast_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.numel() == 1) return a.shape();
  if (a.numel() == 1) return b.shape();
  throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                   " are not broadcast-compatible");
}

template <class S>
S sigmoid(S x) {
  return S{1} / (S{1} + std::exp(-x));
}

// out = f(a, b) with scalar broadcasting; da/db give the local partials.
template <class S, class F, class DA, class DB>
Tensor<S> binary(const char* op, const Tensor<S>& a, const Tensor<S>& b, F f, DA da, DB db) {
  Shape shape = broadcast_shape(op, a, b);
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  const bool a_scalar = a.numel() == 1 && a.shape() != shape;
  const bool b_scalar = b.numel() == 1 && b.shape() != shape;
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<S> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
  return record<S>(op, std::move(shape), std::move(out), {a, b},
                   [a_scalar, b_scalar, da, db](const std::vector<S>& g, const auto& in) {
                     const auto& x = in[0]->value;
                     const auto& y = in[1]->value;
                     const std::size_t n = g.size();
                     if (in[0]->requires_grad) {
                       auto& ga = in[0]->grad_buffer();
                       if (a_scalar) {
                         double acc = 0.0;
                         for (std::size_t i = 0; i < n; ++i) acc += g[i] * da(x[0], y[b_scalar ? 0 : i]);
                         ga[0] += static_cast<S>(acc);
                       } else {
                         for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * da(x[i], y[b_scalar ? 0 : i]);
                       }
                     }
                     if (in[1]->requires_grad) {
                       auto& gb = in[1]->grad_buffer();
                       if (b_scalar) {
                         double acc = 0.0;
                         for (std::size_t i = 0; i < n; ++i) acc += g[i] * db(x[a_scalar ? 0 : i], y[0]);
                         gb[0] += static_cast<S>(acc);
                       } else {
                         for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * db(x[a_scalar ? 0 : i], y[i]);
                       }
                     }
                   });
}

// out = f(a); df(x, y) is the derivative given input x and output y.
template <class S, class F, class DF>
Tensor<S> unary(const char* op, const Tensor<S>& a, F f, DF df) {
  const auto av = a.data();
  std::vector<S> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  std::vector<S> saved_out = a.requires_grad() && grad_enabled() ? out : std::vector<S>{};
  return record<S>(op, a.shape(), std::move(out), {a},
                   [df, saved = std::move(saved_out)](const std::vector<S>& g, const auto& in) {
                     const auto& x = in[0]->value;
                     auto& ga = in[0]->grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], saved[i]);
                   });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary<S>(
      "add", a, b, [](S x, S y) { return x + y; }, [](S, S) { return S{1}; }, [](S, S) { return S{1}; });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary<S>(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S, S) { return S{1}; }, [](S, S) { return S{-1}; });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary<S>(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; }, [](S x, S) { return x; });
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  for (S y : b.data()) {
    if (y == S{0}) throw DomainError("div: division by zero");
  }
  return detail::binary<S>(
      "div", a, b, [](S x, S y) { return x / y; }, [](S, S y) { return S{1} / y; },
      [](S x, S y) { return -x / (y * y); });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S s) {
  return detail::unary<S>(
      "scale", a, [s](S x) { return x * s; }, [s](S, S) { return s; });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S s) {
  return detail::unary<S>(
      "add_scalar", a, [s](S x) { return x + s; }, [](S, S) { return S{1}; });
}

template <class S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, S{-1});
}

template <class S>
Tensor<S> silu(const Tensor<S>& a) {
  return detail::unary<S>(
      "silu", a, [](S x) { return x * detail::sigmoid(x); },
      [](S x, S) {
        const S s = detail::sigmoid(x);
        return s + x * s * (S{1} - s);
      });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return detail::unary<S>(
      "sigmoid", a, [](S x) { return detail::sigmoid(x); }, [](S, S y) { return y * (S{1} - y); });
}

template <class S>
Tensor<S> square(const Tensor<S>& a) {
  return detail::unary<S>(
      "square", a, [](S x) { return x * x; }, [](S x, S) { return S{2} * x; });
}

template <class S>
Tensor<S> sqrt(const Tensor<S>& a) {
  for (S x : a.data()) {
    if (x < S{0}) throw DomainError("sqrt of negative value " + std::to_string(x));
  }
  return detail::unary<S>(
      "sqrt", a, [](S x) { return std::sqrt(x); }, [](S, S y) { return S{0.5} / y; });
}

template <class S>
Tensor<S> log(const Tensor<S>& a) {
  for (S x : a.data()) {
    if (x <= S{0}) throw DomainError("log of non-positive value " + std::to_string(x));
  }
  return detail::unary<S>(
      "log", a, [](S x) { return std::log(x); }, [](S x, S) { return S{1} / x; });
}

template <class S>
Tensor<S> exp(const Tensor<S>& a) {
  return detail::unary<S>(
      "exp", a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <class S>
Tensor<S> sin(const Tensor<S>& a) {
  return detail::unary<S>(
      "sin", a, [](S x) { return std::sin(x); }, [](S x, S) { return std::cos(x); });
}

template <class S>
Tensor<S> abs(const Tensor<S>& a) {
  return detail::unary<S>(
      "abs", a, [](S x) { return std::abs(x); },
      [](S x, S) { return x > S{0} ? S{1} : (x < S{0} ? S{-1} : S{0}); });
}

template <class S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <class S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <class S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <class S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }
template <class S>
Tensor<S> operator-(const Tensor<S>& a) { return neg(a); }
template <class S>
Tensor<S> operator*(const Tensor<S>& a, S s) { return scale(a, s); }
template <class S>
Tensor<S> operator*(S s, const Tensor<S>& a) { return scale(a, s); }
template <class S>
Tensor<S> operator+(const Tensor<S>& a, S s) { return add_scalar(a, s); }
template <class S>
Tensor<S> operator-(const Tensor<S>& a, S s) { return add_scalar(a, -s); }

// ----------------------------------------------------------------- reductions

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
  double acc = 0.0;
  for (S x : a.data()) acc += x;
  return record<S>("sum", Shape{}, {static_cast<S>(acc)}, {a}, [](const std::vector<S>& g, const auto& in) {
    auto& ga = in[0]->grad_buffer();
    for (auto& v : ga) v += g[0];
  });
}

template <class S>
Tensor<S> mean(const Tensor<S>& a) {
  const auto n = static_cast<double>(a.numel());
  double acc = 0.0;
  for (S x : a.data()) acc += x;
  return record<S>("mean", Shape{}, {static_cast<S>(acc / n)}, {a}, [n](const std::vector<S>& g, const auto& in) {
    auto& ga = in[0]->grad_buffer();
    const S share = static_cast<S>(g[0] / n);
    for (auto& v : ga) v += share;
  });
}

template <class S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  return mean(square(sub(a, b)));
}

// [C x ...] -> [C], mean over everything after the leading axis.
template <class S>
Tensor<S> channel_mean(const Tensor<S>& x) {
  detail::require(x.rank() >= 2, "channel_mean expects rank >= 2, got " + shape_string(x.shape()));
  const std::int64_t c = x.dim(0);
  const std::int64_t inner = x.numel() / c;
  const auto xv = x.data();
  std::vector<S> out(static_cast<std::size_t>(c));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < inner; ++i) acc += xv[ch * inner + i];
    out[ch] = static_cast<S>(acc / static_cast<double>(inner));
  }
  return record<S>("channel_mean", Shape{c}, std::move(out), {x},
                   [c, inner](const std::vector<S>& g, const auto& in) {
                     auto& gx = in[0]->grad_buffer();
                     for (std::int64_t ch = 0; ch < c; ++ch) {
                       const S share = g[ch] / static_cast<S>(inner);
                       for (std::int64_t i = 0; i < inner; ++i) gx[ch * inner + i] += share;
                     }
                   });
}

// ------------------------------------------------------------- linear algebra

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: cannot multiply " + shape_string(a.shape()) + " by " + shape_string(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> out(static_cast<std::size_t>(m * n));
  detail::as_matrix(out, m, n).noalias() =
      detail::as_matrix(a.node()->value, m, k) * detail::as_matrix(b.node()->value, k, n);
  return record<S>("matmul", Shape{m, n}, std::move(out), {a, b},
                   [m, k, n](const std::vector<S>& g, const auto& in) {
                     const auto G = detail::as_matrix(g, m, n);
                     if (in[0]->requires_grad) {
                       detail::as_matrix(in[0]->grad_buffer(), m, k).noalias() +=
                           G * detail::as_matrix(in[1]->value, k, n).transpose();
                     }
                     if (in[1]->requires_grad) {
                       detail::as_matrix(in[1]->grad_buffer(), k, n).noalias() +=
                           detail::as_matrix(in[0]->value, m, k).transpose() * G;
                     }
                   });
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
  detail::require(a.rank() == 2, "transpose expects a matrix, got " + shape_string(a.shape()));
  const std::int64_t r = a.dim(0), c = a.dim(1);
  std::vector<S> out(static_cast<std::size_t>(r * c));
  detail::as_matrix(out, c, r) = detail::as_matrix(a.node()->value, r, c).transpose();
  return record<S>("transpose", Shape{c, r}, std::move(out), {a}, [r, c](const std::vector<S>& g, const auto& in) {
    detail::as_matrix(in[0]->grad_buffer(), r, c) += detail::as_matrix(g, c, r).transpose();
  });
}

// Softmax over axis 0 independently for every column of a [K x N] matrix.
template <class S>
Tensor<S> softmax_columns(const Tensor<S>& a) {
  detail::require(a.rank() == 2, "softmax_columns expects a matrix, got " + shape_string(a.shape()));
  const std::int64_t k = a.dim(0), n = a.dim(1);
  const auto av = a.data();
  std::vector<S> out(av.size());
  for (std::int64_t j = 0; j < n; ++j) {
    S hi = av[j];
    for (std::int64_t i = 1; i < k; ++i) hi = std::max(hi, av[i * n + j]);
    double z = 0.0;
    for (std::int64_t i = 0; i < k; ++i) z += std::exp(static_cast<double>(av[i * n + j] - hi));
    for (std::int64_t i = 0; i < k; ++i) out[i * n + j] = static_cast<S>(std::exp(static_cast<double>(av[i * n + j] - hi)) / z);
  }
  std::vector<S> saved = a.requires_grad() && grad_enabled() ? out : std::vector<S>{};
  return record<S>("softmax_columns", a.shape(), std::move(out), {a},
                   [k, n, y = std::move(saved)](const std::vector<S>& g, const auto& in) {
                     auto& ga = in[0]->grad_buffer();
                     for (std::int64_t j = 0; j < n; ++j) {
                       double dot = 0.0;
                       for (std::int64_t i = 0; i < k; ++i) dot += g[i * n + j] * y[i * n + j];
                       for (std::int64_t i = 0; i < k; ++i) {
                         ga[i * n + j] += static_cast<S>(y[i * n + j] * (g[i * n + j] - dot));
                       }
                     }
                   });
}

// ----------------------------------------------------------------- reshaping

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  detail::require(shape_numel(shape) == a.numel(),
                  "reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  std::vector<S> out(a.data().begin(), a.data().end());
  return record<S>("reshape", std::move(shape), std::move(out), {a}, [](const std::vector<S>& g, const auto& in) {
    auto& ga = in[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// Concatenation along axis 0; trailing dimensions must agree.
template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts) {
  detail::require(!parts.empty(), "concat needs at least one tensor");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::int64_t lead = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    detail::require(p.rank() >= 1 && Shape(p.shape().begin() + 1, p.shape().end()) == tail,
                    "concat: " + shape_string(p.shape()) + " does not match trailing dims of " +
                        shape_string(parts[0].shape()));
    offsets.push_back(static_cast<std::size_t>(lead * shape_numel(tail)));
    lead += p.dim(0);
  }
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  std::vector<S> out;
  out.reserve(static_cast<std::size_t>(shape_numel(shape)));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return record<S>("concat", std::move(shape), std::move(out), parts,
                   [offsets](const std::vector<S>& g, const auto& in) {
                     for (std::size_t k = 0; k < in.size(); ++k) {
                       if (!in[k]->requires_grad) continue;
                       auto& gk = in[k]->grad_buffer();
                       for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += g[offsets[k] + i];
                     }
                   });
}

// Rows [begin, end) along axis 0.
template <class S>
Tensor<S> slice(const Tensor<S>& a, std::int64_t begin, std::int64_t end) {
  detail::require(a.rank() >= 1 && 0 <= begin && begin < end && end <= a.dim(0),
                  "slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for " +
                      shape_string(a.shape()));
  const std::int64_t inner = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<S> out(a.data().begin() + begin * inner, a.data().begin() + end * inner);
  const auto offset = static_cast<std::size_t>(begin * inner);
  return record<S>("slice", std::move(shape), std::move(out), {a}, [offset](const std::vector<S>& g, const auto& in) {
    auto& ga = in[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[offset + i] += g[i];
  });
}

// x[C x ...] + b[C] broadcast over every trailing position.
template <class S>
Tensor<S> add_channelwise(const Tensor<S>& x, const Tensor<S>& b) {
  detail::require(x.rank() >= 1 && b.numel() == x.dim(0),
                  "add_channelwise: bias " + shape_string(b.shape()) + " does not match " + shape_string(x.shape()));
  const std::int64_t c = x.dim(0);
  const std::int64_t inner = x.numel() / c;
  const auto xv = x.data();
  const auto bv = b.data();
  std::vector<S> out(xv.size());
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t i = 0; i < inner; ++i) out[ch * inner + i] = xv[ch * inner + i] + bv[ch];
  }
  return record<S>("add_channelwise", x.shape(), std::move(out), {x, b},
                   [c, inner](const std::vector<S>& g, const auto& in) {
                     if (in[0]->requires_grad) {
                       auto& gx = in[0]->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     }
                     if (in[1]->requires_grad) {
                       auto& gb = in[1]->grad_buffer();
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                         double acc = 0.0;
                         for (std::int64_t i = 0; i < inner; ++i) acc += g[ch * inner + i];
                         gb[ch] += static_cast<S>(acc);
                       }
                     }
                   });
}

// ------------------------------------------------------------------ imaging

namespace detail {

struct ConvGeometry {
  std::int64_t channels, height, width, kernel, stride, padding, out_height, out_width;
};

template <class S>
void im2col(std::span<const S> x, const ConvGeometry& g, std::vector<S>& cols) {
  const std::int64_t n = g.out_height * g.out_width;
  cols.assign(static_cast<std::size_t>(g.channels * g.kernel * g.kernel * n), S{0});
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (std::int64_t ky = 0; ky < g.kernel; ++ky) {
      for (std::int64_t kx = 0; kx < g.kernel; ++kx) {
        S* row = cols.data() + ((c * g.kernel + ky) * g.kernel + kx) * n;
        for (std::int64_t oy = 0; oy < g.out_height; ++oy) {
          const std::int64_t iy = oy * g.stride + ky - g.padding;
          if (iy < 0 || iy >= g.height) continue;
          const S* src = x.data() + (c * g.height + iy) * g.width;
          for (std::int64_t ox = 0; ox < g.out_width; ++ox) {
            const std::int64_t ix = ox * g.stride + kx - g.padding;
            if (ix >= 0 && ix < g.width) row[oy * g.out_width + ox] = src[ix];
          }
        }
      }
    }
  }
}

template <class S>
void col2im(const std::vector<S>& cols, const ConvGeometry& g, std::vector<S>& x) {
  const std::int64_t n = g.out_height * g.out_width;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (std::int64_t ky = 0; ky < g.kernel; ++ky) {
      for (std::int64_t kx = 0; kx < g.kernel; ++kx) {
        const S* row = cols.data() + ((c * g.kernel + ky) * g.kernel + kx) * n;
        for (std::int64_t oy = 0; oy < g.out_height; ++oy) {
          const std::int64_t iy = oy * g.stride + ky - g.padding;
          if (iy < 0 || iy >= g.height) continue;
          S* dst = x.data() + (c * g.height + iy) * g.width;
          for (std::int64_t ox = 0; ox < g.out_width; ++ox) {
            const std::int64_t ix = ox * g.stride + kx - g.padding;
            if (ix >= 0 && ix < g.width) dst[ix] += row[oy * g.out_width + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation of input[C_in x H x W] with kernel[C_out x C_in x k x k].
template <class S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, std::int64_t stride = 1, std::int64_t padding = 0) {
  detail::require(input.rank() == 3, "conv2d: input must be [C, H, W], got " + shape_string(input.shape()));
  detail::require(kernel.rank() == 4 && kernel.dim(1) == input.dim(0) && kernel.dim(2) == kernel.dim(3),
                  "conv2d: kernel " + shape_string(kernel.shape()) + " incompatible with input " +
                      shape_string(input.shape()));
  detail::require(stride >= 1 && padding >= 0, "conv2d: stride must be >= 1 and padding >= 0");
  const std::int64_t k = kernel.dim(2);
  const std::int64_t span_h = input.dim(1) + 2 * padding - k;
  const std::int64_t span_w = input.dim(2) + 2 * padding - k;
  detail::require(span_h >= 0 && span_w >= 0 && span_h % stride == 0 && span_w % stride == 0,
                  "conv2d: non-integral output size for input " + shape_string(input.shape()) + ", kernel " +
                      std::to_string(k) + ", stride " + std::to_string(stride) + ", padding " +
                      std::to_string(padding));
  const detail::ConvGeometry geo{input.dim(0), input.dim(1), input.dim(2), k, stride, padding,
                                 span_h / stride + 1, span_w / stride + 1};
  const std::int64_t c_out = kernel.dim(0);
  const std::int64_t patch = geo.channels * k * k;
  const std::int64_t n = geo.out_height * geo.out_width;

  std::vector<S> cols;
  detail::im2col(input.data(), geo, cols);
  std::vector<S> out(static_cast<std::size_t>(c_out * n));
  detail::as_matrix(out, c_out, n).noalias() = detail::as_matrix(kernel.node()->value, c_out, patch) *
                                                detail::as_matrix(cols, patch, n);
  const bool keep_cols = grad_enabled() && kernel.requires_grad();
  if (!keep_cols) cols = {};
  return record<S>(
      "conv2d", Shape{c_out, geo.out_height, geo.out_width}, std::move(out), {input, kernel},
      [geo, c_out, patch, n, cols = std::move(cols)](const std::vector<S>& g, const auto& in) {
        const auto G = detail::as_matrix(g, c_out, n);
        if (in[1]->requires_grad) {
          detail::as_matrix(in[1]->grad_buffer(), c_out, patch).noalias() +=
              G * detail::as_matrix(cols, patch, n).transpose();
        }
        if (in[0]->requires_grad) {
          std::vector<S> dcols(static_cast<std::size_t>(patch * n));
          detail::as_matrix(dcols, patch, n).noalias() =
              detail::as_matrix(in[1]->value, c_out, patch).transpose() * G;
          detail::col2im(dcols, geo, in[0]->grad_buffer());
        }
      });
}

enum class Resample { down, up };

// down: 2x2 average pooling; up: nearest-neighbour replication.
template <class S>
Tensor<S> resample2x(const Tensor<S>& input, Resample direction) {
  detail::require(input.rank() == 3, "resample2x: input must be [C, H, W], got " + shape_string(input.shape()));
  const std::int64_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const auto x = input.data();
  if (direction == Resample::down) {
    detail::require(h % 2 == 0 && w % 2 == 0,
                    "resample2x down needs even height and width, got " + shape_string(input.shape()));
    const std::int64_t ho = h / 2, wo = w / 2;
    std::vector<S> out(static_cast<std::size_t>(c * ho * wo));
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t y = 0; y < ho; ++y) {
        for (std::int64_t xx = 0; xx < wo; ++xx) {
          const S* p = x.data() + (ch * h + 2 * y) * w + 2 * xx;
          out[(ch * ho + y) * wo + xx] = (p[0] + p[1] + p[w] + p[w + 1]) * S{0.25};
        }
      }
    }
    return record<S>("resample_down", Shape{c, ho, wo}, std::move(out), {input},
                     [c, h, w, ho, wo](const std::vector<S>& g, const auto& in) {
                       auto& gx = in[0]->grad_buffer();
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                         for (std::int64_t y = 0; y < ho; ++y) {
                           for (std::int64_t xx = 0; xx < wo; ++xx) {
                             const S v = g[(ch * ho + y) * wo + xx] * S{0.25};
                             S* p = gx.data() + (ch * h + 2 * y) * w + 2 * xx;
                             p[0] += v;
                             p[1] += v;
                             p[w] += v;
                             p[w + 1] += v;
                           }
                         }
                       }
                     });
  }
  const std::int64_t ho = h * 2, wo = w * 2;
  std::vector<S> out(static_cast<std::size_t>(c * ho * wo));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t y = 0; y < ho; ++y) {
      for (std::int64_t xx = 0; xx < wo; ++xx) out[(ch * ho + y) * wo + xx] = x[(ch * h + y / 2) * w + xx / 2];
    }
  }
  return record<S>("resample_up", Shape{c, ho, wo}, std::move(out), {input},
                   [c, h, w, ho, wo](const std::vector<S>& g, const auto& in) {
                     auto& gx = in[0]->grad_buffer();
                     for (std::int64_t ch = 0; ch < c; ++ch) {
                       for (std::int64_t y = 0; y < ho; ++y) {
                         for (std::int64_t xx = 0; xx < wo; ++xx) {
                           gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * ho + y) * wo + xx];
                         }
                       }
                     }
                   });
}

// ---------------------------------------------------------------- utilities

template <class S>
bool all_finite(const Tensor<S>& t) {
  for (S v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace morphdiff
