#pragma once

// Guidance from a variable number of auxiliary scans. Each scan goes through
// one shared CNN encoder; the feature vectors fill N ordered slots, empty
// slots stay zero, and a linear projection maps the concatenation to c2.

#include <optional>
#include <string>
#include <vector>

#include "morphdiff/nn.hpp"

namespace morphdiff {

struct FtieConfig {
  std::int64_t slots = 3;
  std::int64_t feat_dim = 32;
  std::int64_t guidance_dim = 64;

  void validate() const {
    if (slots < 1) throw DomainError("F-TIE needs at least one slot");
    if (feat_dim < 1 || guidance_dim < 1) throw DomainError("F-TIE dimensions must be positive");
  }
};

template <class S>
class FtieModule {
 public:
  FtieModule() = default;

  FtieModule(FtieConfig config, Rng& rng)
      : config_(config),
        conv1_(1, 8, 3, rng),
        conv2_(8, 16, 3, rng),
        head_(16, config.feat_dim, rng),
        proj_(config.slots * config.feat_dim, config.guidance_dim, rng) {
    config_.validate();
  }

  const FtieConfig& config() const { return config_; }

  // img[1 x H x W] -> [feat_dim]
  Tensor<S> encode_image(const Tensor<S>& img) const {
    if (img.rank() != 3 || img.dim(0) != 1) {
      throw ShapeError("F-TIE encoder expects a single-channel [1, H, W] image, got " + shape_string(img.shape()));
    }
    if (img.dim(1) % 4 != 0 || img.dim(2) % 4 != 0) {
      throw ShapeError("F-TIE encoder needs H and W divisible by 4, got " + shape_string(img.shape()));
    }
    Tensor<S> h = resample2x(silu(conv1_(img)), Resample::down);
    h = resample2x(silu(conv2_(h)), Resample::down);
    return head_(channel_mean(h));
  }

  // Images fill slots 1..k in the order given; the caller sorts them.
  Tensor<S> build_guidance(const std::vector<Tensor<S>>& imgs) const {
    if (static_cast<std::int64_t>(imgs.size()) > config_.slots) {
      throw DomainError("F-TIE accepts at most N = " + std::to_string(config_.slots) + " auxiliary images, got " +
                        std::to_string(imgs.size()));
    }
    std::vector<std::optional<Tensor<S>>> slots(static_cast<std::size_t>(config_.slots));
    for (std::size_t i = 0; i < imgs.size(); ++i) slots[i] = imgs[i];
    return build_guidance_slots(slots);
  }

  // Explicit slot assignment; empty slots are zero-padded.
  Tensor<S> build_guidance_slots(const std::vector<std::optional<Tensor<S>>>& slots) const {
    if (static_cast<std::int64_t>(slots.size()) != config_.slots) {
      throw DomainError("F-TIE expects exactly N = " + std::to_string(config_.slots) + " slots, got " +
                        std::to_string(slots.size()));
    }
    std::vector<Tensor<S>> parts;
    for (const auto& slot : slots) {
      parts.push_back(slot ? encode_image(*slot) : Tensor<S>::zeros({config_.feat_dim}));
    }
    return proj_(concat(parts));
  }

  Linear<S>& projection() { return proj_; }

  void collect(NamedParams<S>& out, const std::string& prefix = "ftie") const {
    conv1_.collect(out, prefix + ".enc.conv1");
    conv2_.collect(out, prefix + ".enc.conv2");
    head_.collect(out, prefix + ".enc.head");
    proj_.collect(out, prefix + ".proj");
  }

 private:
  FtieConfig config_;
  Conv2d<S> conv1_;
  Conv2d<S> conv2_;
  Linear<S> head_;
  Linear<S> proj_;
};

}  // namespace morphdiff
