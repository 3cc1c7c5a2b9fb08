#pragma once

// Noise-prediction U-Net over deformation fields.
//
//   input  concat(phi_t, c1)                          3  x H   x W
//   enc1   conv + silu                                B  x H   x W
//   enc2   down, conv + silu                          2B x H/2 x W/2
//   mid    down, KAN block, cross-attention to c2     2B x H/4 x W/4
//   dec1   up, concat enc2, KAN block                 B  x H/2 x W/2
//   dec2   up, concat enc1, KAN block                 B  x H   x W
//   out    conv                                       2  x H   x W
//
// Step and age embeddings are added to every block's channels. With
// use_kan = false the three KAN blocks become conv + silu blocks; with
// use_ftie = false the attention site is skipped and c2 is ignored.

#include <cmath>
#include <string>
#include <vector>

#include "morphdiff/kan.hpp"

namespace morphdiff {

// Interleaved [sin(v f_0), cos(v f_0), sin(v f_1), ...] with f_i = 10000^(-2i/dim).
template <class S>
Tensor<S> sinusoidal_embedding(double value, std::int64_t dim) {
  if (dim <= 0 || dim % 2 != 0) throw ShapeError("sinusoidal embedding needs a positive even width, got " + std::to_string(dim));
  std::vector<S> out(static_cast<std::size_t>(dim));
  for (std::int64_t i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
    out[2 * i] = static_cast<S>(std::sin(value * freq));
    out[2 * i + 1] = static_cast<S>(std::cos(value * freq));
  }
  return Tensor<S>({dim}, std::move(out));
}

struct UnetConfig {
  std::int64_t base = 32;
  std::int64_t embed_dim = 64;
  std::int64_t guidance_dim = 64;
  bool use_kan = true;
  bool use_ftie = true;
  SplineGrid grid{};
};

// Single-head attention from pixel queries to one key/value token built from
// c2, added back residually. The output projection starts at zero.
template <class S>
class CrossAttention {
 public:
  CrossAttention() = default;

  CrossAttention(std::int64_t channels, std::int64_t context_dim, Rng& rng)
      : q_(channels, channels, rng, false),
        k_(context_dim, channels, rng, false),
        v_(context_dim, channels, rng, false),
        o_(channels, channels, rng) {
    for (auto& w : o_.weight().mutable_data()) w = S{0};
    for (auto& b : o_.bias().mutable_data()) b = S{0};
  }

  // features[C x H x W], c2[context_dim] -> [C x H x W]
  Tensor<S> operator()(const Tensor<S>& features, const Tensor<S>& c2) const {
    if (features.rank() != 3 || features.dim(0) != q_.in_features()) {
      throw ShapeError("cross-attention expects [" + std::to_string(q_.in_features()) + ", H, W] features, got " +
                       shape_string(features.shape()));
    }
    const Shape shape = features.shape();
    const std::int64_t c = shape[0], p = shape[1] * shape[2];
    const Tensor<S> x = reshape(features, {c, p});
    const Tensor<S> token = reshape(c2, {c2.numel(), 1});
    const Tensor<S> q = q_(x);                                                     // [C x P]
    const Tensor<S> k = k_(token);                                                 // [C x 1]
    const Tensor<S> v = v_(token);                                                 // [C x 1]
    const Tensor<S> scores = scale(matmul(transpose(k), q), static_cast<S>(1.0 / std::sqrt(static_cast<double>(c))));
    const Tensor<S> attn = softmax_columns(scores);                                // [1 x P], softmax over keys
    const Tensor<S> mixed = o_(matmul(v, attn));                                   // [C x P]
    return add(features, reshape(mixed, shape));
  }

  Linear<S>& output_projection() { return o_; }

  void collect(NamedParams<S>& out, const std::string& prefix) const {
    q_.collect(out, prefix + ".q");
    k_.collect(out, prefix + ".k");
    v_.collect(out, prefix + ".v");
    o_.collect(out, prefix + ".o");
  }

 private:
  Linear<S> q_, k_, v_, o_;
};

template <class S>
class DiffKanUnet {
 public:
  DiffKanUnet() = default;

  DiffKanUnet(UnetConfig config, Rng& rng) : config_(config) {
    const std::int64_t b = config.base, e = config.embed_dim;
    if (b < 1 || e < 2 || e % 2 != 0) throw DomainError("U-Net needs base >= 1 and an even embedding width");
    config_.grid.validate();
    step_mlp_ = {Linear<S>(e, e, rng), Linear<S>(e, e, rng)};
    age_mlp_ = {Linear<S>(e, e, rng), Linear<S>(e, e, rng)};
    enc1_ = Conv2d<S>(3, b, 3, rng);
    enc2_ = Conv2d<S>(b, 2 * b, 3, rng);
    const std::int64_t in[3] = {2 * b, 4 * b, 2 * b};
    const std::int64_t out[3] = {2 * b, b, b};
    for (int i = 0; i < 3; ++i) {
      if (config.use_kan) {
        kan_.emplace_back(in[i], out[i], rng, config.grid);
      } else {
        plain_.emplace_back(in[i], out[i], 3, rng);
      }
    }
    const std::int64_t widths[5] = {b, 2 * b, 2 * b, b, b};
    for (auto w : widths) emb_proj_.emplace_back(e, w, rng);
    if (config.use_ftie) attn_ = CrossAttention<S>(2 * b, config.guidance_dim, rng);
    out_ = Conv2d<S>(b, 2, 3, rng);
  }

  const UnetConfig& config() const { return config_; }

  // Summed step and age embeddings, [embed_dim].
  Tensor<S> embed_step_age(int t, double t_age_norm) const {
    auto mlp = [](const std::pair<Linear<S>, Linear<S>>& m, const Tensor<S>& x) { return m.second(silu(m.first(x))); };
    return add(mlp(step_mlp_, sinusoidal_embedding<S>(t, config_.embed_dim)),
               mlp(age_mlp_, sinusoidal_embedding<S>(t_age_norm * 1000.0, config_.embed_dim)));
  }

  // phi_t[2 x H x W], c1[1 x H x W] -> predicted noise [2 x H x W].
  Tensor<S> operator()(const Tensor<S>& phi_t, const Tensor<S>& c1, int t, double t_age_norm, const Tensor<S>& c2 = {}) const {
    if (phi_t.rank() != 3 || phi_t.dim(0) != 2) throw ShapeError("denoiser expects phi_t [2, H, W], got " + shape_string(phi_t.shape()));
    if (c1.rank() != 3 || c1.dim(0) != 1 || c1.dim(1) != phi_t.dim(1) || c1.dim(2) != phi_t.dim(2)) {
      throw ShapeError("denoiser: source image " + shape_string(c1.shape()) + " does not match field " + shape_string(phi_t.shape()));
    }
    if (phi_t.dim(1) % 4 != 0 || phi_t.dim(2) % 4 != 0) {
      throw ShapeError("denoiser needs H and W divisible by 4, got " + shape_string(phi_t.shape()));
    }
    if (config_.use_ftie && (!c2.defined() || c2.numel() != config_.guidance_dim)) {
      throw ShapeError("denoiser expects a guidance vector of length " + std::to_string(config_.guidance_dim));
    }
    const Tensor<S> e = silu(embed_step_age(t, t_age_norm));
    auto shift = [&](int i) { return emb_proj_[i](e); };

    const Tensor<S> x = concat<S>({phi_t, c1});
    const Tensor<S> h1 = silu(add_channelwise(enc1_(x), shift(0)));
    const Tensor<S> h2 = silu(add_channelwise(enc2_(resample2x(h1, Resample::down)), shift(1)));
    Tensor<S> m = block(0, resample2x(h2, Resample::down), shift(2));
    if (config_.use_ftie) m = attn_(m, c2);
    const Tensor<S> d1 = block(1, concat<S>({resample2x(m, Resample::up), h2}), shift(3));
    const Tensor<S> d2 = block(2, concat<S>({resample2x(d1, Resample::up), h1}), shift(4));
    return out_(d2);
  }

  CrossAttention<S>& attention() { return attn_; }

  void collect(NamedParams<S>& out, const std::string& prefix = "unet") const {
    step_mlp_.first.collect(out, prefix + ".temb.0");
    step_mlp_.second.collect(out, prefix + ".temb.1");
    age_mlp_.first.collect(out, prefix + ".aemb.0");
    age_mlp_.second.collect(out, prefix + ".aemb.1");
    enc1_.collect(out, prefix + ".enc.0");
    enc2_.collect(out, prefix + ".enc.1");
    for (std::size_t i = 0; i < kan_.size(); ++i) kan_[i].collect(out, prefix + ".kan." + std::to_string(i));
    for (std::size_t i = 0; i < plain_.size(); ++i) plain_[i].collect(out, prefix + ".block." + std::to_string(i));
    for (std::size_t i = 0; i < emb_proj_.size(); ++i) emb_proj_[i].collect(out, prefix + ".emb." + std::to_string(i));
    if (config_.use_ftie) attn_.collect(out, prefix + ".attn");
    out_.collect(out, prefix + ".out");
  }

 private:
  Tensor<S> block(int i, const Tensor<S>& x, const Tensor<S>& shift) const {
    if (config_.use_kan) return kan_[i](x, shift);
    return silu(add_channelwise(plain_[i](x), shift));
  }

  UnetConfig config_;
  std::pair<Linear<S>, Linear<S>> step_mlp_;
  std::pair<Linear<S>, Linear<S>> age_mlp_;
  Conv2d<S> enc1_, enc2_;
  std::vector<KanBlock<S>> kan_;
  std::vector<Conv2d<S>> plain_;
  std::vector<Linear<S>> emb_proj_;
  CrossAttention<S> attn_;
  Conv2d<S> out_;
};

}  // namespace morphdiff
