// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.
//
//   acceptance [--work DIR] [--only 1,2,...]
//
// Criteria 6-9 train real models and take a couple of hours on one core;
// --work is wiped and everything regenerated on every run.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "morphdiff/gradcheck_suite.hpp"
#include "morphdiff/pipeline.hpp"

using namespace morphdiff;
namespace fs = std::filesystem;
using D = Tensor<double>;
using Clock = std::chrono::steady_clock;

namespace {

// ---------------------------------------------------------------- tolerances

constexpr double kGradcheckSeconds = 120.0;
constexpr int kMinCheckedOps = 12;
constexpr double kScheduleTol = 1e-6;
constexpr double kRoundTripTol = 1e-5;
constexpr double kVarianceRelTol = 0.05;
constexpr int kMonteCarloDraws = 10000;
constexpr double kWarpTol = 1e-6;
constexpr double kJacobianTol = 1e-3;
constexpr double kKanMse = 1e-3;
constexpr int kKanSteps = 2000;
constexpr double kPartitionTol = 1e-5;
constexpr double kPsnrTol = 1e-12;
constexpr double kSsimTol = 1e-6;

// End-to-end benchmark.
constexpr std::int64_t kSubjects = 200;
constexpr std::uint64_t kDataSeed = 1;
constexpr int kEpochs = 50;
constexpr int kSteps = 100;
// Model-side field scale, picked on the val split (10 and 40 did worse).
constexpr double kRunUMax = 20.0;
constexpr double kMinUpliftDb = 1.0;
constexpr double kMaxFolding = 0.01;
constexpr double kMaxMinutes = 60.0;

// Ablation: same generator and settings at reduced scale (see README).
constexpr std::int64_t kAblationSubjects = 100;
constexpr int kAblationEpochs = 20;
constexpr int kAblationSeeds = 5;
constexpr int kAblationWins = 3;

constexpr int kBaeSeeds = 5;
constexpr double kBaeMaxRatio = 1.5;
constexpr int kBaeWins = 3;

constexpr double kSampledSegAgreement = 0.90;
constexpr double kOracleSegAgreement = 0.99;

constexpr double kResumeTol = 1e-4;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void progress(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

double minutes_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count() / 60.0; }

// ------------------------------------------------------------ 1. gradients

Outcome gradient_integrity() {
  const auto t0 = Clock::now();
  const auto rows = run_gradchecks(false);
  const double seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  double worst_op = 0, worst_net = 0;
  int failed = 0;
  for (const auto& r : rows) {
    (r.tolerance == kNetworkTolerance ? worst_net : worst_op) =
        std::max(r.tolerance == kNetworkTolerance ? worst_net : worst_op, r.result.max_rel_error);
    failed += !r.passed();
  }
  // The negative control must be caught.
  const auto with_faulty = run_gradchecks(true);
  const bool caught = !with_faulty.back().passed();
  Outcome o;
  o.pass = failed == 0 && caught && static_cast<int>(rows.size()) >= kMinCheckedOps && seconds < kGradcheckSeconds;
  o.detail = fmt("%zu checks, %d failed; worst op rel err %.2e (< 1e-3), worst network %.2e (< 1e-2); faulty rule %s; %.1f s (< %.0f)",
                 rows.size(), failed, worst_op, worst_net, caught ? "caught" : "MISSED", seconds, kGradcheckSeconds);
  return o;
}

// ------------------------------------------------------------ 2. schedule

Outcome schedule_identities() {
  // Hand arithmetic: betas 0.1..0.4, alpha_bar_t = prod (1 - beta).
  const auto s = make_schedule(4, 0.1, 0.4);
  const double hand[4] = {0.9, 0.9 * 0.8, 0.9 * 0.8 * 0.7, 0.9 * 0.8 * 0.7 * 0.6};
  double sched_err = 0;
  for (int t = 1; t <= 4; ++t) sched_err = std::max(sched_err, std::abs(s.alpha_bar_at(t) - hand[t - 1]));

  const auto ref = make_schedule(1000, 1e-4, 0.02);
  Rng rng(20);
  double rt_err = 0;
  for (int k = 0; k < 200; ++k) {
    const int t = static_cast<int>(rng.uniform_int(1, 1000));
    const D phi0 = rng.uniform_tensor<double>({2, 8, 8}, -1, 1);
    const D eps = rng.normal_tensor<double>({2, 8, 8});
    const D back = predict_phi0(q_sample(phi0, t, eps, ref), t, eps, ref);
    for (std::int64_t i = 0; i < phi0.numel(); ++i) rt_err = std::max(rt_err, std::abs(back[i] - phi0[i]));
  }

  double worst_var = 0;
  for (int t : {1, 10, 100, 500, 1000}) {
    const D phi0 = rng.uniform_tensor<double>({kMonteCarloDraws}, -1, 1);
    const D x = q_sample(phi0, t, rng.normal_tensor<double>({kMonteCarloDraws}), ref);
    // Variance of phi_t around its conditional mean sqrt(alpha_bar) phi0.
    const double ab = ref.alpha_bar_at(t);
    double v = 0;
    for (int i = 0; i < kMonteCarloDraws; ++i) {
      const double r = x[i] - std::sqrt(ab) * phi0[i];
      v += r * r / kMonteCarloDraws;
    }
    worst_var = std::max(worst_var, std::abs(v / (1 - ab) - 1));
  }
  Outcome o;
  o.pass = sched_err < kScheduleTol && std::abs(s.alpha_bar_at(4) - 0.3024) < kScheduleTol && rt_err < kRoundTripTol &&
           worst_var < kVarianceRelTol;
  o.detail = fmt("T=4 alpha_bar_4 = %.6f, max err %.1e (< 1e-6); round trip %.1e (< 1e-5); MC variance off by %.2f%% (< 5%%)",
                 s.alpha_bar_at(4), sched_err, rt_err, 100 * worst_var);
  return o;
}

// ---------------------------------------------------------------- 3. warp

double naive_bilinear(const D& img, int ch, double x, double y) {
  const int h = static_cast<int>(img.dim(1)), w = static_cast<int>(img.dim(2));
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  double out = 0;
  for (int yi = y0; yi <= y0 + 1; ++yi) {
    for (int xi = x0; xi <= x0 + 1; ++xi) {
      if (xi < 0 || yi < 0 || xi >= w || yi >= h) continue;
      out += (1 - std::abs(x - xi)) * (1 - std::abs(y - yi)) * img[(ch * h + yi) * w + xi];
    }
  }
  return out;
}

Outcome warp_oracle() {
  Rng rng(30);
  double worst = 0;
  for (int c = 0; c < 50; ++c) {
    const int ch = static_cast<int>(rng.uniform_int(1, 3)), h = static_cast<int>(rng.uniform_int(3, 12)),
              w = static_cast<int>(rng.uniform_int(3, 12));
    const D img = rng.uniform_tensor<double>({ch, h, w}, 0, 1);
    const D u = rng.uniform_tensor<double>({2, h, w}, -3, 3);
    const D out = warp_image(img, u);
    for (int k = 0; k < ch; ++k) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double ref = naive_bilinear(img, k, x + u[y * w + x], y + u[(h + y) * w + x]);
          worst = std::max(worst, std::abs(out[(k * h + y) * w + x] - ref));
        }
      }
    }
  }
  const Tensor<float> img = rng.uniform_tensor<float>({1, 16, 16}, 0, 1);
  const Tensor<float> same = warp_image(img, Tensor<float>::zeros({2, 16, 16}));
  bool bitwise = true;
  for (std::int64_t i = 0; i < img.numel(); ++i) bitwise = bitwise && same[i] == img[i];
  // u = 0.1 p: the map p -> 1.1 p has determinant 1.21 everywhere.
  std::vector<double> uv(2 * 10 * 10);
  for (int y = 0; y < 10; ++y) {
    for (int x = 0; x < 10; ++x) {
      uv[y * 10 + x] = 0.1 * x;
      uv[100 + y * 10 + x] = 0.1 * y;
    }
  }
  const D det = jacobian_determinant(D({2, 10, 10}, uv));
  double jac_err = 0;
  for (int y = 1; y < 9; ++y) {
    for (int x = 1; x < 9; ++x) jac_err = std::max(jac_err, std::abs(det[y * 10 + x] - 1.21));
  }
  Outcome o;
  o.pass = worst < kWarpTol && bitwise && jac_err < kJacobianTol;
  o.detail = fmt("50 cases max |warp - brute force| %.1e (< 1e-6); zero field %s; interior det err %.1e (< 1e-3)", worst,
                 bitwise ? "bitwise identity" : "NOT identity", jac_err);
  return o;
}

// ----------------------------------------------------------------- 4. KAN

Outcome kan_capability() {
  Rng rng(40);
  std::vector<double> xs(256), ys(256);
  for (int i = 0; i < 256; ++i) {
    xs[i] = rng.uniform(-1.0, 1.0);
    ys[i] = std::sin(std::numbers::pi * xs[i]);
  }
  const D x({256, 1}, xs), y({256, 1}, ys);
  KanLayer<double> k1(1, 8, rng), k2(8, 1, rng);
  NamedParams<double> params;
  k1.collect(params, "k1");
  k2.collect(params, "k2");
  AdamW<double> opt(params, AdamWOptions{1e-2, 0.9, 0.999, 1e-8, 0.0});
  for (int step = 0; step < kKanSteps; ++step) {
    opt.zero_grad();
    backward(mse(k2(k1(x)), y));
    opt.step();
  }
  double fit = 0;
  {
    NoGradGuard ng;
    fit = mse(k2(k1(x)), y).item();
  }
  double pou = 0;
  for (int order = 1; order <= 3; ++order) {
    const SplineGrid grid{order, 5, -1.0, 1.0};
    for (int s = 0; s <= 1000; ++s) {
      double total = 0;
      for (double b : bspline_basis(-1.0 + 2.0 * s / 1000.0, grid)) total += b;
      pou = std::max(pou, std::abs(total - 1));
    }
  }
  Outcome o;
  o.pass = fit < kKanMse && pou < kPartitionTol;
  o.detail = fmt("1-8-1 KAN on sin(pi x): MSE %.2e after %d steps (< 1e-3); partition of unity err %.1e, orders 1-3 (< 1e-5)", fit,
                 kKanSteps, pou);
  return o;
}

// -------------------------------------------------------------- 5. metrics

Outcome metric_correctness() {
  const double p = psnr(D::zeros({1, 8, 8}), D::full({1, 8, 8}, 0.1));
  Rng rng(50);
  const D img = rng.uniform_tensor<double>({1, 32, 32}, 0, 1);
  const double s = ssim(img, img);
  double ncc_err = 0;
  for (int k = 0; k < 10; ++k) {
    const D a = rng.uniform_tensor<double>({2, 8, 8}, -1, 1);
    const double gain = rng.uniform(0.5, 3.0), offset = rng.uniform(-1, 1);
    ncc_err = std::max(ncc_err, std::abs(ncc(a, add_scalar(scale(a, gain), offset)).item() - 1));
  }
  Outcome o;
  o.pass = std::abs(p - 20.0) < kPsnrTol && std::abs(s - 1) < kSsimTol && ncc_err < 10 * kNccEps;
  o.detail = fmt("PSNR(MSE=0.01) = %.12f dB; SSIM(x, x) = %.9f; NCC affine err %.1e (< 10 eps = %.0e)", p, s, ncc_err, 10 * kNccEps);
  return o;
}

// ---------------------------------------------------- shared experiment state

struct RunResult {
  EvalReport report;
  double minutes = 0;
};

struct Experiments {
  fs::path work;
  Clock::time_point start_of_benchmark;
  bool benchmark_started = false;
  std::map<std::string, BaeTrainResult<float>> critics;
  std::optional<RunResult> main_run;

  fs::path data() {
    const fs::path dir = work / "data200";
    if (!fs::exists(dir / "dataset.meta")) {
      if (!benchmark_started) start_of_benchmark = Clock::now(), benchmark_started = true;
      progress("generating the " + std::to_string(kSubjects) + "-subject dataset");
      fs::remove_all(dir);
      DatasetSpec spec;
      spec.num_subjects = kSubjects;
      spec.seed = kDataSeed;
      make_dataset(dir, spec);
    }
    return dir;
  }

  const BaeTrainResult<float>& critic(std::uint64_t seed, bool augmented) {
    const std::string key = (augmented ? "aug" : "clean") + std::to_string(seed);
    if (auto it = critics.find(key); it != critics.end()) return it->second;
    const fs::path d = data();
    progress("training " + std::string(augmented ? "noise-augmented" : "clean") + " age critic, seed " + std::to_string(seed));
    BaeTrainOptions opt;
    opt.seed = seed;
    if (!augmented) opt.noise_levels = {0.0};
    auto res = train_bae(age_examples(load_subjects(d, read_manifest(d).bae)), opt);
    save_checkpoint(work / (key + ".dfck"), bae_checkpoint(res.model));
    return critics.emplace(key, std::move(res)).first->second;
  }

  RunConfig config(const fs::path& dataset, const std::string& name, std::uint64_t seed, int epochs, bool full_model) {
    RunConfig c;
    c.dataset = dataset;
    c.bae_checkpoint = work / "aug1.dfck";
    c.checkpoint = work / name / "model.dfck";
    c.log = work / name / "train.log";
    c.T = kSteps;
    c.u_max = kRunUMax;
    c.epochs = epochs;
    c.seed = seed;
    c.use_kan = full_model;
    c.use_ftie = full_model;
    fs::create_directories(work / name);
    return c;
  }

  RunResult train_and_evaluate(const RunConfig& c, const std::string& name) {
    critic(1, true);
    progress("training " + name + " (" + std::to_string(c.epochs) + " epochs)");
    const auto t0 = Clock::now();
    train_model(c);
    RunConfig loaded;
    const auto model = load_model<float>(load_checkpoint(c.checkpoint), &loaded);
    progress("evaluating " + name + " on the test split");
    EvalOptions opt;
    opt.seed = 1;
    RunResult r{evaluate(c.dataset, &model, loaded, opt), minutes_since(t0)};
    r.report.write(c.checkpoint.parent_path() / "eval");
    return r;
  }

  const RunResult& main() {
    if (!main_run) {
      const fs::path d = data();
      main_run = train_and_evaluate(config(d, "full_seed1", 1, kEpochs, true), "full model, 200 subjects");
      main_run->minutes = minutes_since(start_of_benchmark);
    }
    return *main_run;
  }
};

// ---------------------------------------------------------- 6. end-to-end

Outcome end_to_end(Experiments& ex) {
  const RunResult& r = ex.main();
  const auto psnr_s = r.report.column("psnr_db"), base = r.report.column("baseline_psnr_db");
  const double ssim_m = r.report.column("ssim").mean, base_ssim = r.report.column("baseline_ssim").mean;
  const double fold = r.report.column("folding_fraction").mean;
  const double uplift = psnr_s.mean - base.mean;
  Outcome o;
  o.pass = uplift >= kMinUpliftDb && ssim_m > base_ssim && fold < kMaxFolding && r.minutes <= kMaxMinutes;
  o.detail = fmt("%zu test pairs: PSNR %.3f +- %.3f dB vs identity %.3f, uplift %+.3f dB (>= %.1f); SSIM %.4f vs %.4f; folding %.5f "
                 "(< %.2f); %.1f min (<= %.0f)",
                 r.report.pairs.size(), psnr_s.mean, psnr_s.std, base.mean, uplift, kMinUpliftDb, ssim_m, base_ssim, fold,
                 kMaxFolding, r.minutes, kMaxMinutes);
  return o;
}

// ------------------------------------------------------------ 7. ablation

Outcome ablation(Experiments& ex) {
  const fs::path d = ex.work / "data_ablation";
  if (!fs::exists(d / "dataset.meta")) {
    progress("generating the " + std::to_string(kAblationSubjects) + "-subject ablation dataset");
    fs::remove_all(d);
    DatasetSpec spec;
    spec.num_subjects = kAblationSubjects;
    spec.bae_subjects = 1;  // the critic comes from the main dataset
    spec.seed = kDataSeed;
    make_dataset(d, spec);
  }
  int wins = 0;
  std::string per_seed;
  for (int seed = 1; seed <= kAblationSeeds; ++seed) {
    const auto s = static_cast<std::uint64_t>(seed);
    const auto full = ex.train_and_evaluate(ex.config(d, "ablation_full_s" + std::to_string(seed), s, kAblationEpochs, true),
                                            "ablation full model, seed " + std::to_string(seed));
    const auto plain = ex.train_and_evaluate(ex.config(d, "ablation_plain_s" + std::to_string(seed), s, kAblationEpochs, false),
                                             "ablation no-KAN-no-FTIE, seed " + std::to_string(seed));
    const double a = full.report.column("psnr_db").mean, b = plain.report.column("psnr_db").mean;
    wins += a >= b;
    per_seed += fmt(" s%d %.2f/%.2f", seed, a, b);
    progress(fmt("seed %d: full %.3f dB, plain %.3f dB", seed, a, b));
  }
  Outcome o;
  o.pass = wins >= kAblationWins;
  o.detail = fmt("full >= no-KAN-no-FTIE mean PSNR on %d/%d seeds (need %d); %lld subjects, %d epochs; full/plain dB:%s", wins,
                 kAblationSeeds, kAblationWins, static_cast<long long>(kAblationSubjects), kAblationEpochs, per_seed.c_str());
  return o;
}

// ---------------------------------------------------------- 8. BAE noise

Outcome bae_robustness(Experiments& ex) {
  int wins = 0;
  bool bounded = true;
  std::string per_seed;
  for (int seed = 1; seed <= kBaeSeeds; ++seed) {
    const auto& aug = ex.critic(static_cast<std::uint64_t>(seed), true);
    const auto& clean = ex.critic(static_cast<std::uint64_t>(seed), false);
    const double ra = aug.noisy_mae / aug.clean_mae, rc = clean.noisy_mae / clean.clean_mae;
    bounded = bounded && ra <= kBaeMaxRatio;
    wins += ra < rc;
    per_seed += fmt(" s%d %.3f/%.3f", seed, ra, rc);
  }
  Outcome o;
  o.pass = bounded && wins >= kBaeWins;
  o.detail = fmt("augmented ratio <= %.1f on all seeds: %s; augmented < clean-trained degradation on %d/%d (need %d); "
                 "sigma=0.1/clean MAE ratio aug/clean:%s",
                 kBaeMaxRatio, bounded ? "yes" : "no", wins, kBaeSeeds, kBaeWins, per_seed.c_str());
  return o;
}

// ------------------------------------------------------- 9. segmentations

Outcome modality_agnostic(Experiments& ex) {
  const double sampled = ex.main().report.column("seg_agreement").mean;
  RunConfig c;
  EvalOptions opt;
  opt.oracle = true;
  const double oracle = evaluate(ex.data(), nullptr, c, opt).column("seg_agreement").mean;
  Outcome o;
  o.pass = sampled >= kSampledSegAgreement && oracle >= kOracleSegAgreement;
  o.detail = fmt("brain-pixel label agreement on the test split: sampled fields %.4f (>= %.2f), ground-truth fields %.4f (>= %.2f)",
                 sampled, kSampledSegAgreement, oracle, kOracleSegAgreement);
  return o;
}

// ------------------------------------------------------ 10. reproducibility

struct Cmd {
  int code = -1;
  std::string output;
};

Cmd cli(const std::string& args) {
  Cmd r;
  FILE* pipe = popen((std::string(MORPHDIFF_CLI) + " " + args + " 2>&1").c_str(), "r");
  if (!pipe) return r;
  char buf[512];
  while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  if (fs::is_regular_file(root)) {
    out[""] = read_text(root);
    return out;
  }
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_text(e.path());
  }
  return out;
}

double logged_total(const fs::path& log, int epoch) {
  std::istringstream is(read_text(log));
  const std::string prefix = "epoch " + std::to_string(epoch) + "/";
  for (std::string line; std::getline(is, line);) {
    if (line.rfind(prefix, 0) != 0) continue;
    const auto at = line.find("total=");
    return std::stod(line.substr(at + 6));
  }
  throw DomainError("no epoch " + std::to_string(epoch) + " in " + log.string());
}

Outcome reproducibility(const fs::path& work) {
  const fs::path dir = work / "repro";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string d = (dir / "data").string();
  std::vector<std::string> failures;
  // Same command line twice; the outputs of the first run are snapshotted and removed in between.
  auto twice = [&](const std::string& what, const std::string& args, const fs::path& out) {
    std::map<std::string, std::string> first;
    for (int k = 0; k < 2; ++k) {
      fs::remove_all(out);
      const auto r = cli(args);
      if (r.code != 0) {
        failures.push_back(what + " exited " + std::to_string(r.code) + ": " + r.output);
        return;
      }
      if (k == 0) first = tree(out);
    }
    if (first.empty() || tree(out) != first) failures.push_back(what + " output differs between runs");
  };
  twice("gen-data", "gen-data --subjects 10 --seed 5 --out " + d, dir / "data");
  const fs::path bae = dir / "bae.dfck";
  twice("train-bae", "train-bae --data " + d + " --epochs 2 --seed 3 --out " + bae.string(), bae);
  auto write_config = [&](const std::string& name, int epochs) {
    std::ofstream(dir / (name + ".cfg")) << "dataset = data\nbae_checkpoint = bae.dfck\ncheckpoint = " << name << "/m.dfck\nlog = "
                                         << name << "/train.log\nT = 25\nbase = 8\nepochs = " << epochs << "\nlr = 0.001\nseed = 4\n";
  };
  write_config("run", 2);
  twice("train", "train --config " + (dir / "run.cfg").string(), dir / "run");
  const std::string ck = (dir / "run" / "m.dfck").string();
  const std::string src = (dir / "data" / "subjects" / "s0000" / "t0_img.dftn").string();
  const std::string seg = (dir / "data" / "subjects" / "s0000" / "t0_seg.dftn").string();
  twice("sample", "sample --checkpoint " + ck + " --source " + src + " --seg " + seg + " --target-age 85 --seed 2 --out " + (dir / "smp").string(),
        dir / "smp");
  twice("evaluate", "evaluate --checkpoint " + ck + " --split val --seed 2 --out " + (dir / "ev").string(), dir / "ev");

  // Resume: one epoch, then continue to two, against the uninterrupted run.
  write_config("half", 1);
  write_config("resumed", 2);
  double gap = 1e300;
  const auto h = cli("train --config " + (dir / "half.cfg").string());
  fs::create_directories(dir / "resumed");
  const auto r = cli("train --config " + (dir / "resumed.cfg").string() + " --resume " + (dir / "half" / "m.dfck").string());
  if (h.code != 0 || r.code != 0) {
    failures.push_back("resume run failed: " + h.output + r.output);
  } else {
    gap = std::abs(logged_total(dir / "resumed" / "train.log", 2) - logged_total(dir / "run" / "train.log", 2));
    if (!(gap <= kResumeTol)) failures.push_back(fmt("resume gap %.3e", gap));
  }
  Outcome o;
  o.pass = failures.empty();
  o.detail = o.pass ? fmt("gen-data, train-bae, train, sample, evaluate byte-identical across two runs; resume gap at epoch 2 %.1e (<= 1e-4)",
                          gap)
                    : "failures: " + failures.front();
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"morphdiff acceptance run"};
  fs::path work = fs::temp_directory_path() / "morphdiff_acceptance";
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory (wiped per experiment)");
  app.add_option("--only", only, "run just these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  fs::remove_all(work);
  fs::create_directories(work);

  Experiments ex{work};
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient integrity", gradient_integrity},
      {"schedule and diffusion identities", schedule_identities},
      {"warp oracle", warp_oracle},
      {"KAN capability", kan_capability},
      {"metric correctness", metric_correctness},
      {"end-to-end uplift", [&] { return end_to_end(ex); }},
      {"ablation direction", [&] { return ablation(ex); }},
      {"age-critic noise robustness", [&] { return bae_robustness(ex); }},
      {"modality-agnostic segmentation", [&] { return modality_agnostic(ex); }},
      {"reproducibility", [&] { return reproducibility(work); }},
  };
  std::vector<std::string> lines;
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    lines.push_back(fmt("[%s] %2d %s: ", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str()) + o.detail);
    std::cout << lines.back() << std::endl;
  }
  std::cout << "\nsummary\n";
  for (const auto& l : lines) std::cout << l << '\n';
  std::cout << (all ? "all criteria passed" : "SOME CRITERIA FAILED") << std::endl;
  return all ? 0 : 1;
}
