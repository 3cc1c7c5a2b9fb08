#pragma once

// DDPM over normalized deformation fields: schedule, forward corruption,
// the combined training objective, and ancestral sampling.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "morphdiff/losses.hpp"
#include "morphdiff/rng.hpp"

namespace morphdiff {

// Arrays are indexed by step t in [1, T] at position t - 1.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> posterior_var;

  double beta_at(int t) const { return beta[index(t)]; }
  double alpha_at(int t) const { return alpha[index(t)]; }
  double alpha_bar_at(int t) const { return alpha_bar[index(t)]; }
  double posterior_var_at(int t) const { return posterior_var[index(t)]; }

  std::size_t index(int t) const {
    if (t < 1 || t > T) throw DomainError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    return static_cast<std::size_t>(t - 1);
  }
};

inline NoiseSchedule schedule_from_betas(std::vector<double> beta) {
  if (beta.empty()) throw DomainError("noise schedule needs T >= 1");
  NoiseSchedule s;
  s.T = static_cast<int>(beta.size());
  double prod = 1.0;
  for (double b : beta) {
    if (!(b > 0.0 && b < 1.0)) throw DomainError("noise schedule betas must lie in (0, 1), got " + std::to_string(b));
    const double prev = prod;
    prod *= 1.0 - b;
    s.alpha.push_back(1.0 - b);
    s.alpha_bar.push_back(prod);
    s.posterior_var.push_back(b * (1.0 - prev) / (1.0 - prod));
  }
  s.beta = std::move(beta);
  return s;
}

// Linear betas from beta_start to beta_end inclusive.
inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw DomainError("noise schedule needs T >= 1, got " + std::to_string(T));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw DomainError("noise schedule needs 0 < beta_start <= beta_end < 1, got " + std::to_string(beta_start) + ", " +
                      std::to_string(beta_end));
  }
  std::vector<double> beta(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) beta[i] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (T - 1);
  return schedule_from_betas(std::move(beta));
}

// phi_t = sqrt(abar_t) phi0 + sqrt(1 - abar_t) eps
template <class S>
Tensor<S> q_sample(const Tensor<S>& phi0, int t, const Tensor<S>& eps, const NoiseSchedule& s) {
  if (phi0.shape() != eps.shape()) {
    throw ShapeError("q_sample: phi0 " + shape_string(phi0.shape()) + " and noise " + shape_string(eps.shape()) + " differ");
  }
  const double ab = s.alpha_bar_at(t);
  return add(scale(phi0, static_cast<S>(std::sqrt(ab))), scale(eps, static_cast<S>(std::sqrt(1.0 - ab))));
}

// phi0_hat = (phi_t - sqrt(1 - abar_t) eps_pred) / sqrt(abar_t)
template <class S>
Tensor<S> predict_phi0(const Tensor<S>& phi_t, int t, const Tensor<S>& eps_pred, const NoiseSchedule& s) {
  if (phi_t.shape() != eps_pred.shape()) {
    throw ShapeError("predict_phi0: phi_t " + shape_string(phi_t.shape()) + " and noise " + shape_string(eps_pred.shape()) + " differ");
  }
  const double ab = s.alpha_bar_at(t);
  return scale(sub(phi_t, scale(eps_pred, static_cast<S>(std::sqrt(1.0 - ab)))), static_cast<S>(1.0 / std::sqrt(ab)));
}

struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 0.5;
  double lambda3 = 0.1;
  double gamma = 0.01;

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || gamma < 0) throw DomainError("loss weights must be non-negative");
  }
};

// One supervised completion example, everything already on the model's scale.
template <class S>
struct TrainingExample {
  Tensor<S> phi0;          // normalized ground-truth field [2 x H x W]
  Tensor<S> source;        // c1 [1 x H x W]
  double target_age = 0;   // years
  double target_age_norm = 0;
  std::vector<Tensor<S>> aux;
};

// Per-batch means. l_df and l_bae are the alpha_bar-weighted terms that enter
// the total; the *_raw values are the unweighted losses.
template <class S>
struct LossBreakdown {
  Tensor<S> total;
  double l_simple = 0;
  double l_df = 0;
  double l_bae = 0;
  double l_df_raw = 0;
  double l_bae_raw = 0;
};

// eps_fn(phi_t, t, example) -> predicted noise; critic(img) -> age tensor.
template <class S>
using EpsFn = std::function<Tensor<S>(const Tensor<S>&, int, const TrainingExample<S>&)>;
template <class S>
using CriticFn = std::function<Tensor<S>(const Tensor<S>&)>;

// Batch mean of  lambda1 L_simple + abar_t (lambda2 L_DF + lambda3 L_BAE).
// L_DF and L_BAE are evaluated on phi0_hat reconstructed at the sampled step,
// L_BAE on the source warped by the denormalized phi0_hat.
template <class S>
LossBreakdown<S> training_loss(const std::vector<TrainingExample<S>>& batch, const EpsFn<S>& eps_fn, const CriticFn<S>& critic,
                               const NoiseSchedule& s, const LossWeights& w, double u_max, Rng& rng) {
  if (batch.empty()) throw DomainError("training_loss on an empty batch");
  w.validate();
  const double n = static_cast<double>(batch.size());
  LossBreakdown<S> out;
  std::vector<Tensor<S>> terms;
  for (const auto& ex : batch) {
    const int t = static_cast<int>(rng.uniform_int(1, s.T));
    const Tensor<S> eps = rng.normal_tensor<S>(ex.phi0.shape());
    const Tensor<S> phi_t = q_sample(ex.phi0, t, eps, s);
    const Tensor<S> eps_pred = eps_fn(phi_t, t, ex);
    const Tensor<S> l_simple = mse(eps_pred, eps);
    Tensor<S> term = scale(l_simple, static_cast<S>(w.lambda1));
    out.l_simple += l_simple.item() / n;
    const double ab = s.alpha_bar_at(t);
    if (w.lambda2 > 0 || w.lambda3 > 0) {
      const Tensor<S> phi0_hat = predict_phi0(phi_t, t, eps_pred, s);
      if (w.lambda2 > 0) {
        const Tensor<S> l_df = df_loss(phi0_hat, ex.phi0, w.gamma);
        out.l_df_raw += l_df.item() / n;
        out.l_df += ab * l_df.item() / n;
        term = add(term, scale(l_df, static_cast<S>(w.lambda2 * ab)));
      }
      if (w.lambda3 > 0) {
        const Tensor<S> generated = warp_image(ex.source, scale(phi0_hat, static_cast<S>(u_max)));
        const Tensor<S> l_bae = bae_loss(critic, generated, ex.target_age);
        out.l_bae_raw += l_bae.item() / n;
        out.l_bae += ab * l_bae.item() / n;
        term = add(term, scale(l_bae, static_cast<S>(w.lambda3 * ab)));
      }
    }
    terms.push_back(reshape(term, {1}));
  }
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + name + " in training loss");
  };
  check(out.l_simple, "L_simple");
  check(out.l_df_raw, "L_DF");
  check(out.l_bae_raw, "L_BAE");
  out.total = mean(concat(terms));
  check(out.total.item(), "total loss");
  return out;
}

// Ancestral sampling from phi_T ~ N(0, I) down to phi_0. eps_fn(phi_t, t)
// predicts the noise; the result is in normalized units.
template <class S>
Tensor<S> ancestral_sample(const Shape& shape, const NoiseSchedule& s, std::uint64_t seed,
                           const std::function<Tensor<S>(const Tensor<S>&, int)>& eps_fn) {
  NoGradGuard no_grad;
  Rng rng(seed);
  Tensor<S> phi = rng.normal_tensor<S>(shape);
  for (int t = s.T; t >= 1; --t) {
    const Tensor<S> eps = eps_fn(phi, t);
    const double coef = s.beta_at(t) / std::sqrt(1.0 - s.alpha_bar_at(t));
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha_at(t));
    std::vector<S> next(phi.data().begin(), phi.data().end());
    const auto ev = eps.data();
    const double sd = t > 1 ? std::sqrt(s.posterior_var_at(t)) : 0.0;
    const Tensor<S> z = t > 1 ? rng.normal_tensor<S>(shape) : Tensor<S>::zeros(shape);
    const auto zv = z.data();
    for (std::size_t i = 0; i < next.size(); ++i) {
      const double mu = (static_cast<double>(next[i]) - coef * ev[i]) * inv_sqrt_alpha;
      next[i] = static_cast<S>(mu + sd * zv[i]);
      if (!std::isfinite(static_cast<double>(next[i]))) {
        throw NumericError("sampling produced a non-finite value at step t = " + std::to_string(t));
      }
    }
    phi = Tensor<S>(shape, std::move(next));
  }
  return phi;
}

}  // namespace morphdiff
