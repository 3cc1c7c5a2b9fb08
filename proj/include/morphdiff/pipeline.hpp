#pragma once

// Training, sampling and evaluation on a phantom dataset directory.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "morphdiff/backbone.hpp"
#include "morphdiff/bae.hpp"
#include "morphdiff/checkpoint.hpp"
#include "morphdiff/config.hpp"
#include "morphdiff/diffusion.hpp"
#include "morphdiff/ftie.hpp"
#include "morphdiff/optim.hpp"
#include "morphdiff/synthdata.hpp"

namespace morphdiff {

// Denoiser plus guidance encoder, built from a RunConfig.
template <class S>
class CompletionModel {
 public:
  CompletionModel() = default;

  explicit CompletionModel(const RunConfig& c) : schedule_(c.schedule()), sigma_(c.field_sigma / c.u_max) {
    unet_config_.base = c.base;
    unet_config_.use_kan = c.use_kan;
    unet_config_.use_ftie = c.use_ftie;
    ftie_config_.slots = c.slots;
    ftie_config_.guidance_dim = unet_config_.guidance_dim;
    Rng rng(Rng::derive(c.seed, 0x6d6f64656cULL));
    unet_ = DiffKanUnet<S>(unet_config_, rng);
    if (c.use_ftie) ftie_ = FtieModule<S>(ftie_config_, rng);
  }

  const UnetConfig& unet_config() const { return unet_config_; }
  const FtieConfig& ftie_config() const { return ftie_config_; }
  DiffKanUnet<S>& unet() { return unet_; }

  // c2 for the given aux scans; undefined when guidance is disabled.
  Tensor<S> guidance(const std::vector<Tensor<S>>& aux) const {
    if (!unet_config_.use_ftie) return {};
    return ftie_.build_guidance(aux);
  }

  // The U-Net predicts the residual of the best linear noise estimate for
  // fields of RMS sigma, so it never has to copy phi_t through the network.
  Tensor<S> eps(const Tensor<S>& phi_t, int t, const Tensor<S>& source, double age_norm, const Tensor<S>& c2) const {
    const double ab = schedule_.alpha_bar_at(t), signal = ab * sigma_ * sigma_, total = signal + (1.0 - ab);
    const S skip = static_cast<S>(std::sqrt(1.0 - ab) / total), out = static_cast<S>(std::sqrt(signal / total));
    return add(scale(phi_t, skip), scale(unet_(phi_t, source, t, age_norm, c2), out));
  }

  NamedParams<S> params() const {
    NamedParams<S> out;
    unet_.collect(out, "unet");
    if (unet_config_.use_ftie) ftie_.collect(out, "ftie");
    return out;
  }

  KeyValues architecture() const {
    const auto& g = unet_config_.grid;
    return {{"arch.base", std::to_string(unet_config_.base)},
            {"arch.embed_dim", std::to_string(unet_config_.embed_dim)},
            {"arch.guidance_dim", std::to_string(unet_config_.guidance_dim)},
            {"arch.use_kan", unet_config_.use_kan ? "1" : "0"},
            {"arch.field_sigma", format_double(sigma_)},
            {"arch.use_ftie", unet_config_.use_ftie ? "1" : "0"},
            {"arch.slots", std::to_string(ftie_config_.slots)},
            {"arch.feat_dim", std::to_string(ftie_config_.feat_dim)},
            {"arch.spline_order", std::to_string(g.order)},
            {"arch.spline_intervals", std::to_string(g.intervals)},
            {"arch.spline_lo", format_double(g.lo)},
            {"arch.spline_hi", format_double(g.hi)}};
  }

 private:
  UnetConfig unet_config_;
  FtieConfig ftie_config_;
  NoiseSchedule schedule_;
  double sigma_ = 1.0;
  DiffKanUnet<S> unet_;
  FtieModule<S> ftie_;
};

inline void check_architecture(const Checkpoint& ck, const KeyValues& expected) {
  for (const auto& [key, value] : expected) {
    if (!ck.has(key)) throw ShapeError("checkpoint lacks architecture key " + key);
    if (ck.get(key) != value) {
      throw ShapeError("architecture mismatch: checkpoint " + key + " = " + ck.get(key) + ", configuration wants " + value);
    }
  }
}

// The run configuration is stored under `config.` so a checkpoint is self-describing.
inline RunConfig config_from_checkpoint(const Checkpoint& ck) {
  std::map<std::string, std::string> kv;
  for (const auto& [key, value] : ck.header) {
    if (key.rfind("config.", 0) == 0) kv[key.substr(7)] = value;
  }
  if (kv.empty()) throw IoError("checkpoint carries no run configuration");
  return parse_run_config(kv);
}

template <class S>
CompletionModel<S> load_model(const Checkpoint& ck, RunConfig* config_out = nullptr) {
  if (ck.has("kind") && ck.get("kind") != "completion") throw IoError("checkpoint holds a '" + ck.get("kind") + "' model, not a completion model");
  const RunConfig c = config_from_checkpoint(ck);
  CompletionModel<S> model(c);
  check_architecture(ck, model.architecture());
  auto params = model.params();
  load_parameters(ck.tensor_map(), params);
  if (config_out) *config_out = c;
  return model;
}

// --------------------------------------------------------------- age critic

template <class S>
Checkpoint bae_checkpoint(const BaeModel<S>& model, const KeyValues& extra = {}) {
  Checkpoint ck;
  ck.header = {{"kind", "bae"}};
  ck.header.insert(ck.header.end(), extra.begin(), extra.end());
  NamedParams<S> params;
  model.collect(params);
  ck.add(params);
  return ck;
}

template <class S>
BaeModel<S> load_bae(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (!ck.has("kind") || ck.get("kind") != "bae") throw IoError(path.string() + " is not an age-critic checkpoint");
  Rng rng(0);
  BaeModel<S> model(rng);
  NamedParams<S> params;
  model.collect(params);
  load_parameters(ck.tensor_map(), params);
  model.freeze();
  return model;
}

// One example per timepoint of every listed subject.
inline std::vector<AgeExample<float>> age_examples(const std::vector<SubjectRecord>& subjects) {
  std::vector<AgeExample<float>> out;
  for (const auto& s : subjects) {
    for (const auto& tp : s.timepoints) out.push_back({tp.image, tp.age, s.id});
  }
  return out;
}

// ----------------------------------------------------------------- training

struct EpochLog {
  int epoch = 0;
  double total = 0;
  double l_simple = 0;
  double l_df = 0;
  double l_bae = 0;
  double l_df_raw = 0;
  double l_bae_raw = 0;
  std::int64_t steps = 0;

  std::string line(int epochs) const {
    char buf[320];
    std::snprintf(buf, sizeof buf, "epoch %d/%d total=%.9g l_simple=%.9g l_df=%.9g l_bae=%.9g l_df_raw=%.9g l_bae_raw=%.9g steps=%lld",
                  epoch, epochs, total, l_simple, l_df, l_bae, l_df_raw, l_bae_raw, static_cast<long long>(steps));
    return buf;
  }
};

struct TrainOptions {
  std::filesystem::path resume;   // checkpoint to continue from
  int stop_after = -1;            // stop once this epoch is done (tests); -1 runs to config.epochs
  std::ostream* out = nullptr;    // progress lines
};

inline std::filesystem::path series_path(const std::filesystem::path& checkpoint, int epoch) {
  char suffix[32];
  std::snprintf(suffix, sizeof suffix, ".e%04d", epoch);
  auto p = checkpoint;
  p.replace_extension();
  p += suffix;
  p += checkpoint.extension();
  return p;
}

template <class S>
Checkpoint training_checkpoint(const RunConfig& c, const CompletionModel<S>& model, const AdamW<S>& opt, int epoch) {
  Checkpoint ck;
  ck.header = {{"kind", "completion"}, {"epoch", std::to_string(epoch)}, {"optimizer_steps", std::to_string(opt.steps())},
               {"rng.seed", std::to_string(c.seed)}, {"rng.stream", "epoch"}};
  for (const auto& kv : model.architecture()) ck.header.push_back(kv);
  for (const auto& [k, v] : c.to_key_values()) ck.header.emplace_back("config." + k, v);
  ck.add(model.params());
  ck.add(opt.state());
  return ck;
}

// Trains the completion model; returns one log record per epoch run here.
inline std::vector<EpochLog> train_model(const RunConfig& c, const TrainOptions& options = {}) {
  c.validate();
  c.validate_paths();
  const Manifest manifest = read_manifest(c.dataset);
  const auto subjects = load_subjects(c.dataset, manifest.train);
  std::vector<std::tuple<std::size_t, int, int>> pairs;
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    for (const auto& [i, j] : forward_pairs(subjects[s])) pairs.emplace_back(s, i, j);
  }
  if (pairs.empty()) throw DomainError("training split has no forward pairs");

  std::optional<BaeModel<float>> critic;
  if (c.weights.lambda3 > 0) critic = load_bae<float>(c.bae_checkpoint);
  const CriticFn<float> critic_fn = [&](const Tensor<float>& img) {
    if (!critic) throw DomainError("age critic requested but none loaded");
    return (*critic)(img);
  };

  CompletionModel<float> model(c);
  AdamW<float> opt(model.params(), AdamWOptions{c.lr, 0.9, 0.999, 1e-8, c.weight_decay});
  int start = 0;
  if (!options.resume.empty()) {
    const Checkpoint ck = load_checkpoint(options.resume);
    check_architecture(ck, model.architecture());
    auto params = model.params();
    const auto stored = ck.tensor_map();
    load_parameters(stored, params);
    opt.load_state(stored, std::stoll(ck.get("optimizer_steps")));
    start = std::stoi(ck.get("epoch"));
  }
  const NoiseSchedule schedule = c.schedule();
  const int last = options.stop_after >= 0 ? std::min(options.stop_after, c.epochs) : c.epochs;

  std::ofstream log_file;
  if (!c.log.empty()) {
    if (c.log.has_parent_path()) std::filesystem::create_directories(c.log.parent_path());
    log_file.open(c.log, start > 0 ? std::ios::app : std::ios::trunc);
    if (!log_file) throw IoError("cannot open log file " + c.log.string());
  }

  const EpsFn<float> eps_fn = [&](const Tensor<float>& phi_t, int t, const TrainingExample<float>& ex) {
    return model.eps(phi_t, t, ex.source, ex.target_age_norm, model.guidance(ex.aux));
  };

  std::vector<EpochLog> logs;
  for (int epoch = start + 1; epoch <= last; ++epoch) {
    Rng rng(Rng::derive(c.seed, static_cast<std::uint64_t>(epoch)));
    auto order = pairs;
    std::shuffle(order.begin(), order.end(), rng.engine());
    EpochLog log;
    log.epoch = epoch;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(c.batch_size)) {
      std::vector<TrainingExample<float>> batch;
      for (std::size_t k = b; k < std::min(order.size(), b + static_cast<std::size_t>(c.batch_size)); ++k) {
        const auto& [s, i, j] = order[k];
        const auto& subject = subjects[s];
        const int available = static_cast<int>(subject.timepoints.size()) - 2;
        const int num_aux = c.use_ftie ? static_cast<int>(rng.uniform_int(0, std::min(c.slots, available))) : 0;
        Task task = make_task(subject, i, j, num_aux);
        // Stored fields use the dataset's scale; the model works in the configured one.
        const Tensor<float> phi0 = normalize_field(DeformationField<float>{subject.field_pixels(i, j)}, c.u_max).u;
        batch.push_back({phi0, task.source, task.target_age, c.normalize_age(task.target_age), std::move(task.aux)});
      }
      opt.zero_grad();
      LossBreakdown<float> loss;
      try {
        loss = training_loss<float>(batch, eps_fn, critic_fn, schedule, c.weights, c.u_max, rng);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", step " + std::to_string(log.steps + 1) + ": " + e.what());
      }
      backward(loss.total);
      opt.step();
      log.total += loss.total.item();
      log.l_simple += loss.l_simple;
      log.l_df += loss.l_df;
      log.l_bae += loss.l_bae;
      log.l_df_raw += loss.l_df_raw;
      log.l_bae_raw += loss.l_bae_raw;
      ++log.steps;
    }
    const double n = static_cast<double>(log.steps);
    for (double* v : {&log.total, &log.l_simple, &log.l_df, &log.l_bae, &log.l_df_raw, &log.l_bae_raw}) *v /= n;
    logs.push_back(log);
    const std::string line = log.line(c.epochs);
    if (options.out) *options.out << line << std::endl;
    if (log_file) log_file << line << std::endl;
    if (epoch % c.checkpoint_every == 0 || epoch == c.epochs) {
      const Checkpoint ck = training_checkpoint(c, model, opt, epoch);
      save_checkpoint(series_path(c.checkpoint, epoch), ck);
      save_checkpoint(c.checkpoint, ck);
    }
  }
  return logs;
}

// ----------------------------------------------------------------- sampling

// Normalized field for one completion problem.
template <class S>
Tensor<S> sample_field(const CompletionModel<S>& model, const NoiseSchedule& schedule, const Tensor<S>& source, double age_norm,
                       const std::vector<Tensor<S>>& aux, std::uint64_t seed) {
  NoGradGuard no_grad;
  const Tensor<S> c2 = model.guidance(aux);
  return ancestral_sample<S>({2, source.dim(1), source.dim(2)}, schedule, seed,
                             [&](const Tensor<S>& phi, int t) { return model.eps(phi, t, source, age_norm, c2); });
}

// --------------------------------------------------------------- evaluation

// Stable across platforms, unlike std::hash.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) h = (h ^ ch) * 0x100000001b3ULL;
  return h;
}

struct PairResult {
  std::string subject;
  int source_idx = 0;
  int target_idx = 0;
  double source_age = 0;
  double target_age = 0;
  int num_aux = 0;
  MetricReport metrics;
  double baseline_psnr = 0;
  double baseline_ssim = 0;
  double seg_agreement = 0;

  double gap() const { return target_age - source_age; }

  static constexpr const char* kHeader =
      "subject,source,target,source_age,target_age,gap,num_aux,psnr_db,ssim,ncc,mean_jacobian,folding_fraction,"
      "baseline_psnr_db,baseline_ssim,seg_agreement";

  std::string csv_row() const {
    std::ostringstream os;
    os << subject << ',' << source_idx << ',' << target_idx << ',' << format_double(source_age) << ',' << format_double(target_age)
       << ',' << format_double(gap()) << ',' << num_aux << ',' << metrics.csv_row() << ',' << format_double(baseline_psnr) << ','
       << format_double(baseline_ssim) << ',' << format_double(seg_agreement);
    return os.str();
  }
};

// Fraction of the target's non-background pixels whose label matches.
inline double brain_agreement(const Tensor<float>& predicted, const Tensor<float>& target) {
  std::int64_t agree = 0, total = 0;
  for (std::int64_t i = 0; i < target.numel(); ++i) {
    if (static_cast<int>(target[i]) == kBackground) continue;
    ++total;
    agree += predicted[i] == target[i];
  }
  return total ? static_cast<double>(agree) / static_cast<double>(total) : 1.0;
}

inline PairResult score_pair(const Task& task, const Tensor<float>& field_px) {
  PairResult r;
  r.subject = task.subject;
  r.source_idx = task.source_idx;
  r.target_idx = task.target_idx;
  r.source_age = task.source_age;
  r.target_age = task.target_age;
  r.num_aux = static_cast<int>(task.aux.size());
  const Tensor<float> generated = warp_image(task.source, field_px);
  r.metrics.psnr_db = psnr(generated, task.target);
  r.metrics.ssim = ssim(generated, task.target);
  r.metrics.ncc = ncc(generated, task.target).item();
  const Tensor<double> det = jacobian_determinant(field_px);
  double sum = 0;
  for (double d : det.data()) sum += d;
  r.metrics.mean_jacobian = sum / static_cast<double>(det.numel());
  r.metrics.folding_fraction = folding_fraction(det);
  r.baseline_psnr = psnr(task.source, task.target);
  r.baseline_ssim = ssim(task.source, task.target);
  r.seg_agreement = brain_agreement(warp_labels(task.source_seg, field_px), task.target_seg);
  return r;
}

struct Summary {
  double mean = 0;
  double std = 0;  // population
  std::int64_t count = 0;
};

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  s.count = static_cast<std::int64_t>(v.size());
  if (v.empty()) return s;
  for (double x : v) s.mean += x / static_cast<double>(v.size());
  if (std::isinf(s.mean)) return s;
  for (double x : v) s.std += (x - s.mean) * (x - s.mean) / static_cast<double>(v.size());
  s.std = std::sqrt(s.std);
  return s;
}

struct EvalReport {
  std::vector<PairResult> pairs;

  static std::vector<std::pair<std::string, std::function<double(const PairResult&)>>> columns() {
    return {{"psnr_db", [](const PairResult& p) { return p.metrics.psnr_db; }},
            {"ssim", [](const PairResult& p) { return p.metrics.ssim; }},
            {"ncc", [](const PairResult& p) { return p.metrics.ncc; }},
            {"mean_jacobian", [](const PairResult& p) { return p.metrics.mean_jacobian; }},
            {"folding_fraction", [](const PairResult& p) { return p.metrics.folding_fraction; }},
            {"baseline_psnr_db", [](const PairResult& p) { return p.baseline_psnr; }},
            {"baseline_ssim", [](const PairResult& p) { return p.baseline_ssim; }},
            {"seg_agreement", [](const PairResult& p) { return p.seg_agreement; }}};
  }

  Summary column(const std::string& name, double gap_lo = -1e300, double gap_hi = 1e300) const {
    for (const auto& [col, get] : columns()) {
      if (col != name) continue;
      std::vector<double> v;
      for (const auto& p : pairs) {
        if (p.gap() >= gap_lo && p.gap() < gap_hi) v.push_back(get(p));
      }
      return summarize(v);
    }
    throw DomainError("unknown report column '" + name + "'");
  }

  // Aggregates overall and per age-gap bin (<5, 5-10, >=10 years).
  KeyValues aggregate() const {
    KeyValues kv{{"pairs", std::to_string(pairs.size())}};
    const std::pair<const char*, std::pair<double, double>> bins[] = {
        {"all", {-1e300, 1e300}}, {"gap_lt5", {-1e300, 5.0}}, {"gap_5to10", {5.0, 10.0}}, {"gap_ge10", {10.0, 1e300}}};
    for (const auto& [bin, range] : bins) {
      for (const auto& [col, get] : columns()) {
        const Summary s = column(col, range.first, range.second);
        if (std::string(bin) != "all" && col == "psnr_db") kv.emplace_back(std::string(bin) + ".pairs", std::to_string(s.count));
        if (s.count == 0) continue;
        kv.emplace_back(std::string(bin) + "." + col + ".mean", format_double(s.mean));
        kv.emplace_back(std::string(bin) + "." + col + ".std", format_double(s.std));
      }
    }
    return kv;
  }

  void write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream os(dir / "pairs.csv", std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + (dir / "pairs.csv").string());
    os << PairResult::kHeader << '\n';
    for (const auto& p : pairs) os << p.csv_row() << '\n';
    save_key_values(dir / "summary.txt", aggregate());
  }
};

struct EvalOptions {
  std::string split = "test";
  bool oracle = false;      // score the ground-truth fields instead of sampling
  std::uint64_t seed = 0;   // sampling seed; each pair derives its own stream
  std::ostream* out = nullptr;
};

// All forward pairs of the split, with every available aux scan (up to N).
inline EvalReport evaluate(const std::filesystem::path& dataset, const CompletionModel<float>* model, const RunConfig& c,
                           const EvalOptions& options) {
  const Manifest manifest = read_manifest(dataset);
  const auto& ids = manifest.split(options.split);
  if (ids.empty()) throw DomainError("split '" + options.split + "' is empty");
  if (!options.oracle && !model) throw DomainError("evaluation needs a model unless in oracle mode");
  const NoiseSchedule schedule = c.schedule();
  EvalReport report;
  for (const auto& id : ids) {
    const SubjectRecord s = load_subject(dataset, id);
    for (const auto& [i, j] : forward_pairs(s)) {
      const int num_aux = c.use_ftie ? std::min(c.slots, static_cast<int>(s.timepoints.size()) - 2) : 0;
      const Task task = make_task(s, i, j, num_aux);
      Tensor<float> field;
      if (options.oracle) {
        field = s.field_pixels(i, j);
      } else {
        const std::uint64_t pair_seed = Rng::derive(Rng::derive(options.seed, fnv1a(id)), static_cast<std::uint64_t>(i * 16 + j));
        const Tensor<float> phi = sample_field(*model, schedule, task.source, c.normalize_age(task.target_age), task.aux, pair_seed);
        field = scale(phi, static_cast<float>(c.u_max));
      }
      report.pairs.push_back(score_pair(task, field));
      if (options.out) *options.out << "pair " << id << ' ' << i << "->" << j << " psnr=" << report.pairs.back().metrics.psnr_db << std::endl;
    }
  }
  return report;
}

}  // namespace morphdiff
