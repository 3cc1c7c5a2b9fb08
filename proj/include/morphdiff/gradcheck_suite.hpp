#pragma once

// The registered finite-difference checks behind `morphdiff gradcheck`.
// Everything runs in double; full-network checks sample a subset of
// coordinates and use the looser tolerance.

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "morphdiff/backbone.hpp"
#include "morphdiff/bae.hpp"
#include "morphdiff/diffusion.hpp"
#include "morphdiff/ftie.hpp"
#include "morphdiff/gradcheck.hpp"
#include "morphdiff/kan.hpp"
#include "morphdiff/losses.hpp"
#include "morphdiff/warp.hpp"

namespace morphdiff {

inline constexpr double kOpTolerance = 1e-3;
inline constexpr double kNetworkTolerance = 1e-2;

struct GradcheckCase {
  std::string name;
  double tolerance = kOpTolerance;
  std::function<GradcheckResult()> run;
};

struct GradcheckRow {
  std::string name;
  double tolerance = 0;
  GradcheckResult result;
  double seconds = 0;
  bool passed() const { return result.max_rel_error < tolerance; }
};

namespace detail {

using D = Tensor<double>;

// Weighted sum so every output coordinate reaches the loss with its own slope.
inline D probe(const D& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, rng.normal_tensor<double>(y.shape())));
}

// x^2 whose backward rule has the wrong sign: the negative control.
inline D faulty_square(const D& x) {
  std::vector<double> v(x.data().begin(), x.data().end());
  for (auto& e : v) e *= e;
  return record<double>("faulty_square", x.shape(), std::move(v), {x}, [](const std::vector<double>& g, const auto& in) {
    if (!in[0]->requires_grad) return;
    auto& gx = in[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= 2.0 * in[0]->value[i] * g[i];
  });
}

}  // namespace detail

inline std::vector<GradcheckCase> gradcheck_cases(bool include_faulty = false) {
  using detail::D;
  using detail::probe;
  std::vector<GradcheckCase> cases;
  auto add_case = [&](std::string name, double tol, std::function<GradcheckResult()> fn) {
    cases.push_back({std::move(name), tol, std::move(fn)});
  };

  add_case("add_channelwise_scalar", kOpTolerance, [] {
    Rng rng(1);
    const D a = rng.normal_tensor<double>({3, 4}), b = rng.normal_tensor<double>({3}), c = rng.normal_tensor<double>({});
    return check_gradients<double>([&] { return probe(add(add_channelwise(a, b), c), 2); }, {a, b, c}, 1e-6);
  });
  add_case("mul_div", kOpTolerance, [] {
    Rng rng(3);
    const D a = rng.normal_tensor<double>({5}), b = rng.uniform_tensor<double>({5}, 0.5, 2.0);
    return check_gradients<double>([&] { return probe(div(mul(a, b), add_scalar(b, 1.0)), 4); }, {a, b}, 1e-6);
  });
  add_case("silu_exp_log_sqrt", kOpTolerance, [] {
    Rng rng(5);
    const D a = rng.uniform_tensor<double>({6}, 0.2, 2.0);
    return check_gradients<double>([&] { return probe(add(silu(a), sqrt(log(add_scalar(exp(a), 1.0)))), 6); }, {a}, 1e-6);
  });
  add_case("matmul_transpose", kOpTolerance, [] {
    Rng rng(7);
    const D a = rng.normal_tensor<double>({3, 4}), b = rng.normal_tensor<double>({3, 5});
    return check_gradients<double>([&] { return probe(matmul(transpose(a), b), 8); }, {a, b}, 1e-6);
  });
  add_case("softmax_columns", kOpTolerance, [] {
    Rng rng(9);
    const D a = rng.normal_tensor<double>({4, 3});
    return check_gradients<double>([&] { return probe(softmax_columns(a), 10); }, {a}, 1e-6);
  });
  add_case("conv2d", kOpTolerance, [] {
    Rng rng(11);
    const D x = rng.normal_tensor<double>({2, 5, 5}), k = rng.normal_tensor<double>({3, 2, 3, 3});
    return check_gradients<double>([&] { return probe(conv2d(x, k, 1, 1), 12); }, {x, k}, 1e-6);
  });
  add_case("resample_down_up", kOpTolerance, [] {
    Rng rng(13);
    const D x = rng.normal_tensor<double>({2, 4, 4});
    return check_gradients<double>([&] { return probe(resample2x(resample2x(x, Resample::down), Resample::up), 14); }, {x}, 1e-6);
  });
  add_case("channel_mean_concat_slice", kOpTolerance, [] {
    Rng rng(15);
    const D x = rng.normal_tensor<double>({3, 2, 2}), y = rng.normal_tensor<double>({2});
    return check_gradients<double>([&] { return probe(slice(concat<double>({channel_mean(x), y}), 1, 4), 16); }, {x, y}, 1e-6);
  });
  add_case("kan_layer", kOpTolerance, [] {
    Rng rng(17);
    KanLayer<double> layer(3, 4, rng);
    const D x = rng.uniform_tensor<double>({5, 3}, -1.2, 1.2);
    return check_gradients<double>([&] { return probe(layer(x), 18); }, {x, layer.coeffs(), layer.base_weight(), layer.spline_scale()},
                                   1e-6);
  });
  add_case("kan_block", kOpTolerance, [] {
    Rng rng(19);
    KanBlock<double> block(2, 3, rng);
    const D x = rng.normal_tensor<double>({2, 4, 4}), shift = rng.normal_tensor<double>({3}, 0.3);
    NamedParams<double> params;
    block.collect(params, "b");
    std::vector<D> leaves{x, shift};
    for (auto& [n, p] : params) leaves.push_back(p);
    return check_gradients<double>([&] { return probe(block(x, shift), 20); }, leaves, 1e-6);
  });
  add_case("cross_attention", kOpTolerance, [] {
    Rng rng(21);
    CrossAttention<double> attn(4, 5, rng);
    for (auto& w : attn.output_projection().weight().mutable_data()) w = rng.normal();
    const D x = rng.normal_tensor<double>({4, 3, 3}), c2 = rng.normal_tensor<double>({5});
    NamedParams<double> params;
    attn.collect(params, "a");
    std::vector<D> leaves{x, c2};
    for (auto& [n, p] : params) leaves.push_back(p);
    return check_gradients<double>([&] { return probe(attn(x, c2), 22); }, leaves, 1e-6);
  });
  add_case("bilinear_warp", kOpTolerance, [] {
    Rng rng(23);
    const D img = rng.uniform_tensor<double>({2, 6, 6}, 0, 1);
    // Keep sample points away from integer lattice kinks.
    D u = rng.uniform_tensor<double>({2, 6, 6}, -1.5, 1.5);
    for (auto& v : u.mutable_data()) v = std::round(v) + 0.5 * (v - std::round(v)) + 0.13;
    return check_gradients<double>([&] { return probe(warp_image(img, u), 24); }, {img, u}, 1e-6);
  });
  add_case("ncc", kOpTolerance, [] {
    Rng rng(25);
    const D a = rng.normal_tensor<double>({2, 5, 5}), b = rng.normal_tensor<double>({2, 5, 5});
    return check_gradients<double>([&] { return ncc(a, b); }, {a, b}, 1e-6);
  });
  add_case("smoothness", kOpTolerance, [] {
    Rng rng(27);
    const D u = rng.normal_tensor<double>({2, 5, 4});
    return check_gradients<double>([&] { return smoothness(u); }, {u}, 1e-6);
  });
  add_case("df_loss", kOpTolerance, [] {
    Rng rng(29);
    const D pred = rng.normal_tensor<double>({2, 5, 5}), gt = rng.normal_tensor<double>({2, 5, 5});
    return check_gradients<double>([&] { return df_loss(pred, gt, 0.01); }, {pred}, 1e-6);
  });
  add_case("bae_loss_through_critic", kOpTolerance, [] {
    Rng rng(31);
    BaeModel<double> critic(rng);
    const D img = rng.uniform_tensor<double>({1, 8, 8}, 0, 1);
    return check_gradients<double>([&] { return bae_loss(critic, img, 10.0); }, {img}, 1e-6);
  });
  add_case("ftie_guidance", kOpTolerance, [] {
    Rng rng(33);
    FtieModule<double> ftie(FtieConfig{}, rng);
    const D a = rng.uniform_tensor<double>({1, 8, 8}, 0, 1), b = rng.uniform_tensor<double>({1, 8, 8}, 0, 1);
    NamedParams<double> params;
    ftie.collect(params);
    std::vector<D> leaves{a, b};
    for (auto& [n, p] : params) leaves.push_back(p);
    return check_gradients<double>([&] { return probe(ftie.build_guidance({a, b}), 34); }, leaves, 1e-6, 0.25, 35);
  });
  add_case("denoiser_full_network", kNetworkTolerance, [] {
    Rng rng(37);
    UnetConfig cfg;
    cfg.base = 8;
    DiffKanUnet<double> net(cfg, rng);
    for (auto& w : net.attention().output_projection().weight().mutable_data()) w = 0.1 * rng.normal();
    const D phi = rng.normal_tensor<double>({2, 16, 16}), c1 = rng.uniform_tensor<double>({1, 16, 16}, 0, 1);
    const D c2 = rng.normal_tensor<double>({64});
    NamedParams<double> params;
    net.collect(params);
    std::vector<D> leaves{phi, c2};
    for (auto& [n, p] : params) leaves.push_back(p);
    return check_gradients<double>([&] { return probe(net(phi, c1, 9, 0.4, c2), 38); }, leaves, 1e-5, 0.01, 39);
  });
  add_case("training_loss_full", kNetworkTolerance, [] {
    Rng rng(41);
    UnetConfig cfg;
    cfg.base = 4;
    cfg.embed_dim = 16;
    cfg.guidance_dim = 16;
    DiffKanUnet<double> net(cfg, rng);
    FtieModule<double> ftie(FtieConfig{3, 8, 16}, rng);
    BaeModel<double> critic(rng);
    critic.freeze();
    std::vector<TrainingExample<double>> batch;
    for (int k = 0; k < 2; ++k) {
      TrainingExample<double> ex;
      ex.phi0 = rng.uniform_tensor<double>({2, 8, 8}, -0.2, 0.2);
      ex.source = rng.uniform_tensor<double>({1, 8, 8}, 0, 1);
      ex.target_age = 60 + 10 * k;
      ex.target_age_norm = (ex.target_age - 40) / 50;
      ex.aux = {rng.uniform_tensor<double>({1, 8, 8}, 0, 1)};
      batch.push_back(ex);
    }
    const NoiseSchedule s = make_schedule(10, 1e-2, 0.2);
    const EpsFn<double> eps = [&](const D& phi_t, int t, const TrainingExample<double>& ex) {
      return net(phi_t, ex.source, t, ex.target_age_norm, ftie.build_guidance(ex.aux));
    };
    const CriticFn<double> critic_fn = [&](const D& img) { return critic(img); };
    NamedParams<double> params;
    net.collect(params);
    ftie.collect(params);
    std::vector<D> leaves;
    for (auto& [n, p] : params) leaves.push_back(p);
    return check_gradients<double>(
        [&] {
          Rng draw(42);
          return training_loss<double>(batch, eps, critic_fn, s, LossWeights{}, 10.0, draw).total;
        },
        leaves, 1e-5, 0.02, 43);
  });
  if (include_faulty) {
    add_case("faulty_square (negative control)", kOpTolerance, [] {
      Rng rng(99);
      const D x = rng.normal_tensor<double>({4});
      return check_gradients<double>([&] { return probe(detail::faulty_square(x), 100); }, {x}, 1e-6);
    });
  }
  return cases;
}

inline std::vector<GradcheckRow> run_gradchecks(bool include_faulty = false) {
  std::vector<GradcheckRow> rows;
  for (const auto& c : gradcheck_cases(include_faulty)) {
    const auto t0 = std::chrono::steady_clock::now();
    GradcheckRow row{c.name, c.tolerance, c.run()};
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(row);
  }
  return rows;
}

}  // namespace morphdiff
