#pragma once

// Brain-age critic: three conv/silu/pool stages, global average pool, and a
// linear head read out as 65 + 25 y years. Pre-trained with Gaussian noise
// augmentation, then frozen.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "morphdiff/nn.hpp"
#include "morphdiff/optim.hpp"

namespace morphdiff {

template <class S>
class BaeModel {
 public:
  static constexpr double kAgeCenter = 65.0;
  static constexpr double kAgeScale = 25.0;

  BaeModel() = default;

  explicit BaeModel(Rng& rng)
      : conv1_(1, 8, 3, rng), conv2_(8, 16, 3, rng), conv3_(16, 32, 3, rng), head_(32, 1, rng) {}

  // img[1 x H x W] -> predicted age in years (scalar tensor).
  Tensor<S> operator()(const Tensor<S>& img) const {
    if (img.rank() != 3 || img.dim(0) != 1) throw ShapeError("age critic expects [1, H, W], got " + shape_string(img.shape()));
    Tensor<S> h = resample2x(silu(conv1_(img)), Resample::down);
    h = resample2x(silu(conv2_(h)), Resample::down);
    h = resample2x(silu(conv3_(h)), Resample::down);
    const Tensor<S> y = reshape(head_(channel_mean(h)), {});
    return add_scalar(scale(y, static_cast<S>(kAgeScale)), static_cast<S>(kAgeCenter));
  }

  double predict_age(const Tensor<S>& img) const {
    NoGradGuard no_grad;
    return static_cast<double>((*this)(img).item());
  }

  // Stops parameter updates; gradients still flow to the input image.
  void freeze() {
    NamedParams<S> params;
    collect(params);
    set_trainable(params, false);
    frozen_ = true;
  }
  bool frozen() const { return frozen_; }

  void collect(NamedParams<S>& out, const std::string& prefix = "bae") const {
    conv1_.collect(out, prefix + ".conv1");
    conv2_.collect(out, prefix + ".conv2");
    conv3_.collect(out, prefix + ".conv3");
    head_.collect(out, prefix + ".head");
  }

 private:
  Conv2d<S> conv1_, conv2_, conv3_;
  Linear<S> head_;
  bool frozen_ = false;
};

template <class S>
struct AgeExample {
  Tensor<S> image;
  double age = 0;
  std::string subject;
};

struct BaeTrainOptions {
  std::vector<double> noise_levels{0.0, 0.05, 0.1, 0.2};
  int epochs = 80;
  int batch_size = 8;
  double lr = 2e-3;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
};

template <class S>
struct BaeTrainResult {
  BaeModel<S> model;
  double clean_mae = 0;
  double noisy_mae = 0;  // validation MAE under sigma = 0.1
  std::size_t train_size = 0;
  std::size_t val_size = 0;
};

template <class S>
Tensor<S> add_gaussian_noise(const Tensor<S>& img, double sigma, Rng& rng) {
  if (sigma == 0.0) return img.detach();
  return add(img.detach(), rng.normal_tensor<S>(img.shape(), sigma));
}

// Mean absolute age error; sigma > 0 corrupts each image with a fixed noise stream.
template <class S>
double bae_mae(const BaeModel<S>& model, const std::vector<AgeExample<S>>& examples, double sigma = 0.0, std::uint64_t seed = 0) {
  if (examples.empty()) throw DomainError("bae_mae on an empty set");
  Rng rng(Rng::derive(seed, 0x6e6f697365ULL));
  double total = 0.0;
  for (const auto& ex : examples) total += std::abs(model.predict_age(add_gaussian_noise(ex.image, sigma, rng)) - ex.age);
  return total / static_cast<double>(examples.size());
}

// Splits by subject (val_fraction of subjects held out), trains with L1 loss
// and per-sample noise sigma drawn from noise_levels plus 0, returns the
// frozen critic with its validation errors.
template <class S>
BaeTrainResult<S> train_bae(const std::vector<AgeExample<S>>& examples, const BaeTrainOptions& options) {
  if (examples.empty()) throw DomainError("train_bae: empty dataset");
  std::vector<std::string> subjects;
  for (const auto& ex : examples) subjects.push_back(ex.subject);
  std::sort(subjects.begin(), subjects.end());
  subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
  Rng split_rng(Rng::derive(options.seed, 1));
  std::shuffle(subjects.begin(), subjects.end(), split_rng.engine());
  auto n_val = static_cast<std::size_t>(std::lround(options.val_fraction * static_cast<double>(subjects.size())));
  if (subjects.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, subjects.size() - 1);
  else n_val = 0;
  const std::vector<std::string> val_subjects(subjects.end() - static_cast<std::ptrdiff_t>(n_val), subjects.end());

  BaeTrainResult<S> result;
  std::vector<AgeExample<S>> train, val;
  for (const auto& ex : examples) {
    const bool is_val = std::find(val_subjects.begin(), val_subjects.end(), ex.subject) != val_subjects.end();
    (is_val ? val : train).push_back(ex);
  }
  if (val.empty()) val = train;  // a single subject: report training error

  Rng init_rng(Rng::derive(options.seed, 2));
  result.model = BaeModel<S>(init_rng);
  NamedParams<S> params;
  result.model.collect(params);
  AdamW<S> opt(params, AdamWOptions{options.lr, 0.9, 0.999, 1e-8, 0.0});
  std::vector<double> sigmas = options.noise_levels;
  if (std::find(sigmas.begin(), sigmas.end(), 0.0) == sigmas.end()) sigmas.push_back(0.0);

  std::vector<std::size_t> order(train.size());
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    Rng rng(Rng::derive(options.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
      std::vector<Tensor<S>> losses;
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = train[order[i]];
        const double sigma = sigmas[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(sigmas.size()) - 1))];
        const Tensor<S> pred = result.model(add_gaussian_noise(ex.image, sigma, rng));
        losses.push_back(reshape(abs(add_scalar(pred, static_cast<S>(-ex.age))), {1}));
      }
      opt.zero_grad();
      const Tensor<S> loss = mean(concat(losses));
      if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("non-finite loss while training the age critic");
      backward(loss);
      opt.step();
    }
  }
  result.model.freeze();
  result.train_size = train.size();
  result.val_size = val.size();
  result.clean_mae = bae_mae(result.model, val, 0.0, options.seed);
  result.noisy_mae = bae_mae(result.model, val, 0.1, options.seed);
  return result;
}

}  // namespace morphdiff
