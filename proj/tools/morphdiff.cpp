// morphdiff command-line tool.
//
// Exit codes: 0 ok, 1 usage or invalid argument, 2 I/O, 3 numerical failure
// (including a failed gradient check).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "morphdiff/gradcheck_suite.hpp"
#include "morphdiff/pipeline.hpp"

using namespace morphdiff;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kIo = 2, kNumeric = 3 };

// --seed wins; otherwise MORPHDIFF_SEED; otherwise 0.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("MORPHDIFF_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw DomainError(std::string("MORPHDIFF_SEED must be a non-negative integer, got '") + env + "'");
  }
  return 0;
}

int cmd_gen_data(std::int64_t subjects, std::int64_t bae_subjects, std::uint64_t seed, const fs::path& out) {
  DatasetSpec spec;
  spec.num_subjects = subjects;
  spec.bae_subjects = bae_subjects;
  spec.seed = seed;
  const Manifest m = make_dataset(out, spec);
  std::cout << "wrote " << out.string() << ": train " << m.train.size() << ", val " << m.val.size() << ", test " << m.test.size()
            << ", bae " << m.bae.size() << " subjects\n";
  return kOk;
}

int cmd_train_bae(const fs::path& data, const fs::path& out, int epochs, bool clean, std::uint64_t seed) {
  const Manifest m = read_manifest(data);
  const auto examples = age_examples(load_subjects(data, m.bae));
  BaeTrainOptions opt;
  opt.epochs = epochs;
  opt.seed = seed;
  if (clean) opt.noise_levels = {0.0};
  const auto res = train_bae(examples, opt);
  save_checkpoint(out, bae_checkpoint(res.model, {{"seed", std::to_string(seed)},
                                                  {"epochs", std::to_string(epochs)},
                                                  {"noise_augmented", clean ? "0" : "1"},
                                                  {"val.clean_mae", format_double(res.clean_mae)},
                                                  {"val.noisy_mae", format_double(res.noisy_mae)}}));
  std::printf("age critic: train %zu, val %zu scans; val MAE clean %.4f y, sigma=0.1 %.4f y (ratio %.3f)\n", res.train_size,
              res.val_size, res.clean_mae, res.noisy_mae, res.noisy_mae / res.clean_mae);
  return kOk;
}

int cmd_train(const fs::path& config_path, const fs::path& resume, std::optional<std::uint64_t> seed_flag) {
  RunConfig c = load_run_config(config_path);
  if (seed_flag) c.seed = *seed_flag;
  TrainOptions opt;
  opt.resume = resume;
  opt.out = &std::cout;
  train_model(c, opt);
  std::cout << "checkpoint " << c.checkpoint.string() << '\n';
  return kOk;
}

int cmd_sample(const fs::path& checkpoint, const fs::path& source_path, double target_age, const std::vector<std::string>& aux_paths,
               const fs::path& seg_path, std::uint64_t seed, const fs::path& out) {
  RunConfig c;
  const auto model = load_model<float>(load_checkpoint(checkpoint), &c);
  const Tensor<float> source = load_dftn(source_path);
  if (source.rank() != 3 || source.dim(0) != 1) throw ShapeError("source must be a [1, H, W] image, got " + shape_string(source.shape()));
  std::vector<Tensor<float>> aux;
  for (const auto& p : aux_paths) aux.push_back(load_dftn(p));
  if (static_cast<int>(aux.size()) > c.slots) {
    throw DomainError("at most N = " + std::to_string(c.slots) + " auxiliary images are accepted, got " + std::to_string(aux.size()));
  }
  if (!c.use_ftie && !aux.empty()) throw DomainError("this checkpoint was trained without auxiliary guidance; drop --aux");
  const Tensor<float> phi = sample_field(model, c.schedule(), source, c.normalize_age(target_age), aux, seed);
  const Tensor<float> field = scale(phi, static_cast<float>(c.u_max));
  fs::create_directories(out);
  save_dftn(out / "field_normalized.dftn", phi);
  save_dftn(out / "field.dftn", field);
  save_dftn(out / "warped.dftn", warp_image(source, field));
  if (!seg_path.empty()) save_dftn(out / "warped_seg.dftn", warp_labels(load_dftn(seg_path), field));
  const Tensor<double> det = jacobian_determinant(field);
  std::printf("sampled field: folding fraction %.5f; outputs in %s\n", folding_fraction(det), out.string().c_str());
  return kOk;
}

int cmd_evaluate(const fs::path& checkpoint, const fs::path& data_flag, const std::string& split, bool oracle, std::uint64_t seed,
                 const fs::path& out) {
  RunConfig c;
  std::optional<CompletionModel<float>> model;
  if (!checkpoint.empty()) {
    model = load_model<float>(load_checkpoint(checkpoint), &c);
  } else if (!oracle) {
    throw DomainError("evaluate needs --checkpoint unless --oracle is given");
  }
  const fs::path data = data_flag.empty() ? c.dataset : data_flag;
  if (data.empty()) throw DomainError("evaluate needs --data when no checkpoint names a dataset");
  EvalOptions opt;
  opt.split = split;
  opt.oracle = oracle;
  opt.seed = seed;
  const EvalReport report = evaluate(data, model ? &*model : nullptr, c, opt);
  report.write(out);
  const auto psnr_s = report.column("psnr_db"), base_s = report.column("baseline_psnr_db");
  const auto ssim_s = report.column("ssim"), base_ssim = report.column("baseline_ssim");
  std::printf("%zu pairs (%s): PSNR %.3f +- %.3f dB (baseline %.3f), SSIM %.4f (baseline %.4f), folding %.5f, seg agreement %.4f\n",
              report.pairs.size(), oracle ? "ground-truth fields" : "sampled", psnr_s.mean, psnr_s.std, base_s.mean, ssim_s.mean,
              base_ssim.mean, report.column("folding_fraction").mean, report.column("seg_agreement").mean);
  return kOk;
}

int cmd_gradcheck(bool inject_faulty) {
  const auto rows = run_gradchecks(inject_faulty);
  bool ok = true;
  std::printf("%-34s %12s %9s %7s %8s  %s\n", "op", "max_rel_err", "tol", "coords", "seconds", "status");
  for (const auto& r : rows) {
    std::printf("%-34s %12.3e %9.0e %7lld %8.2f  %s\n", r.name.c_str(), r.result.max_rel_error, r.tolerance,
                static_cast<long long>(r.result.coordinates), r.seconds, r.passed() ? "PASS" : "FAIL");
    ok = ok && r.passed();
  }
  std::printf("%zu checks, %s\n", rows.size(), ok ? "all passed" : "FAILURES");
  return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"morphdiff: longitudinal brain-scan completion with diffusion-generated deformation fields"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  std::function<int()> action;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic phantom dataset");
  std::int64_t subjects = 10, bae_subjects = 0;
  fs::path out;
  gen->add_option("--subjects", subjects, "main subjects (split 70/10/20)")->check(CLI::PositiveNumber);
  gen->add_option("--bae-subjects", bae_subjects, "extra subjects for the age critic (0: same as --subjects)");
  gen->add_option("--seed", seed, "master seed (default: MORPHDIFF_SEED or 0)");
  gen->add_option("--out", out, "output directory")->required();
  gen->callback([&] { action = [&] { return cmd_gen_data(subjects, bae_subjects, resolve_seed(seed), out); }; });

  auto* bae = app.add_subcommand("train-bae", "pre-train the brain-age critic on the bae split");
  fs::path data;
  int bae_epochs = BaeTrainOptions{}.epochs;
  bool clean = false;
  bae->add_option("--data", data, "dataset directory")->required();
  bae->add_option("--out", out, "checkpoint to write")->required();
  bae->add_option("--epochs", bae_epochs, "training epochs")->check(CLI::NonNegativeNumber);
  bae->add_flag("--clean", clean, "train without noise augmentation");
  bae->add_option("--seed", seed, "seed (default: MORPHDIFF_SEED or 0)");
  bae->callback([&] { action = [&] { return cmd_train_bae(data, out, bae_epochs, clean, resolve_seed(seed)); }; });

  auto* train = app.add_subcommand("train", "train the completion model");
  fs::path config, resume;
  train->add_option("--config", config, "run configuration (key = value)")->required();
  train->add_option("--resume", resume, "continue from this checkpoint");
  train->add_option("--seed", seed, "override the configured seed");
  train->callback([&] {
    action = [&] {
      std::optional<std::uint64_t> s = seed;
      if (!s && std::getenv("MORPHDIFF_SEED")) s = resolve_seed(std::nullopt);
      return cmd_train(config, resume, s);
    };
  });

  auto* sample = app.add_subcommand("sample", "complete a missing scan from a source image");
  fs::path checkpoint, source, seg;
  double target_age = 0;
  std::vector<std::string> aux;
  sample->add_option("--checkpoint", checkpoint, "trained model")->required();
  sample->add_option("--source", source, "source image (DFTN, [1, H, W])")->required();
  sample->add_option("--target-age", target_age, "age of the scan to generate, in years")->required();
  sample->add_option("--aux", aux, "auxiliary scans of the same subject, in slot order");
  sample->add_option("--seg", seg, "segmentation to warp with the same field");
  sample->add_option("--seed", seed, "sampling seed (default: MORPHDIFF_SEED or 0)");
  sample->add_option("--out", out, "output directory")->required();
  sample->callback([&] { action = [&] { return cmd_sample(checkpoint, source, target_age, aux, seg, resolve_seed(seed), out); }; });

  auto* eval = app.add_subcommand("evaluate", "score every forward pair of a split");
  std::string split = "test";
  bool oracle = false;
  eval->add_option("--checkpoint", checkpoint, "trained model");
  eval->add_option("--data", data, "dataset directory (default: the one recorded in the checkpoint)");
  eval->add_option("--split", split, "train, val, test or bae");
  eval->add_flag("--oracle", oracle, "score the ground-truth fields instead of sampling");
  eval->add_option("--seed", seed, "sampling seed (default: MORPHDIFF_SEED or 0)");
  eval->add_option("--out", out, "report directory")->required();
  eval->callback([&] { action = [&] { return cmd_evaluate(checkpoint, data, split, oracle, resolve_seed(seed), out); }; });

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  bool inject = false;
  grad->add_flag("--inject-faulty", inject, "add a deliberately wrong backward rule (must be reported)");
  grad->callback([&] { action = [&] { return cmd_gradcheck(inject); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  try {
    return action();
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
}
