#pragma once

// Synthetic longitudinal head phantoms with exact ground-truth fields.
//
// A subject is a 64x64 head ellipse with textured brain, a bright cortical
// ring and a dark ventricle whose mean radius grows linearly with age. Ageing
// is a radial pull field around the ventricle centre: displacement m = kappa
// * gap at the ventricle boundary, linear in r inside it and a Gaussian
// falloff outside. Later scans are warps of earlier ones, so every stored
// field reproduces its target exactly.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "morphdiff/io.hpp"
#include "morphdiff/rng.hpp"
#include "morphdiff/warp.hpp"

namespace morphdiff {

namespace phantom {
inline constexpr std::int64_t kSize = 64;
inline constexpr double kAgeMin = 40.0;
inline constexpr double kAgeMax = 90.0;
inline constexpr double kKappa = 0.08;     // px of ventricle growth per year
inline constexpr double kFalloff = 10.0;   // px, Gaussian sigma outside the ventricle
inline constexpr double kUMax = 10.0;      // px, field normalization scale
inline constexpr double kMaxGap = 8.0;     // years between consecutive scans
inline constexpr double kMinGap = 2.0;
inline constexpr double kBackgroundLevel = 0.06;  // label thresholds
inline constexpr double kVentricleLevel = 0.37;
}  // namespace phantom

enum Label { kBackground = 0, kBrain = 1, kVentricle = 2 };

struct Anatomy {
  double head_cx = 31.5, head_cy = 31.5;
  double head_ax = 25.0, head_ay = 21.0;
  double vent_cx = 31.5, vent_cy = 31.5;
  double vent_radius_base = 5.0;  // mean ventricle radius at age_min
  double vent_ellipticity = 0.0;
  double vent_angle = 0.0;
  std::array<double, 9> texture{};  // three plane waves: (kx, ky, phase)

  double ventricle_radius(double age) const { return vent_radius_base + phantom::kKappa * (age - phantom::kAgeMin); }
};

inline Anatomy random_anatomy(Rng& rng) {
  Anatomy a;
  a.head_cx = 31.5 + rng.uniform(-1.0, 1.0);
  a.head_cy = 31.5 + rng.uniform(-1.0, 1.0);
  a.head_ax = rng.uniform(24.0, 27.0);
  a.head_ay = rng.uniform(20.0, 23.0);
  a.vent_cx = a.head_cx + rng.uniform(-1.0, 1.0);
  a.vent_cy = a.head_cy + rng.uniform(-1.0, 1.0);
  a.vent_radius_base = rng.uniform(4.8, 5.2);
  a.vent_ellipticity = rng.uniform(0.0, 0.1);
  a.vent_angle = rng.uniform(0.0, std::numbers::pi);
  for (int k = 0; k < 3; ++k) {
    const double theta = rng.uniform(0.0, 2 * std::numbers::pi);
    const double freq = 2 * std::numbers::pi * rng.uniform(2.0, 4.0) / phantom::kSize;
    a.texture[3 * k] = freq * std::cos(theta);
    a.texture[3 * k + 1] = freq * std::sin(theta);
    a.texture[3 * k + 2] = rng.uniform(0.0, 2 * std::numbers::pi);
  }
  return a;
}

namespace detail {

// 0 -> 1 ramp across `width` pixels centred on signed distance 0 (positive inside).
inline double soft_step(double inside_distance, double width) {
  return std::clamp(inside_distance / width + 0.5, 0.0, 1.0);
}

}  // namespace detail

// Baseline scan at `age`, drawn analytically.
inline Tensor<float> render_phantom(const Anatomy& a, double age) {
  const std::int64_t n = phantom::kSize;
  const double radius = a.ventricle_radius(age);
  const double ca = std::cos(a.vent_angle), sa = std::sin(a.vent_angle);
  std::vector<float> img(static_cast<std::size_t>(n * n));
  for (std::int64_t y = 0; y < n; ++y) {
    for (std::int64_t x = 0; x < n; ++x) {
      const double dx = x - a.head_cx, dy = y - a.head_cy;
      const double rho = std::sqrt(dx * dx / (a.head_ax * a.head_ax) + dy * dy / (a.head_ay * a.head_ay));
      const double scale_px = std::min(a.head_ax, a.head_ay);
      const double head = detail::soft_step((1.0 - rho) * scale_px, 1.5);
      const double cortex = detail::soft_step((rho - 0.84) * scale_px, 1.5);
      double texture = 0.0;
      for (int k = 0; k < 3; ++k) texture += std::sin(a.texture[3 * k] * x + a.texture[3 * k + 1] * y + a.texture[3 * k + 2]);
      const double brain = (0.62 + 0.06 * texture / 3.0) * (1.0 - cortex) + 0.8 * cortex;
      const double vx = x - a.vent_cx, vy = y - a.vent_cy;
      const double u = ca * vx + sa * vy, v = -sa * vx + ca * vy;
      const double ax = radius * (1.0 + a.vent_ellipticity), ay = radius * (1.0 - a.vent_ellipticity);
      const double vr = std::sqrt(u * u / (ax * ax) + v * v / (ay * ay));
      const double vent = detail::soft_step((1.0 - vr) * radius, 1.2);
      img[static_cast<std::size_t>(y * n + x)] = static_cast<float>(head * (brain * (1.0 - vent) + 0.12 * vent));
    }
  }
  return Tensor<float>({1, n, n}, std::move(img));
}

// Labels from intensity: background below 0.06; ventricle below 0.37 when no
// background lies within two pixels (which rules out the soft skull edge);
// brain otherwise.
template <class S>
Tensor<S> labels_from_intensity(const Tensor<S>& img) {
  if (img.rank() != 3 || img.dim(0) != 1) throw ShapeError("labels_from_intensity expects [1, H, W], got " + shape_string(img.shape()));
  const std::int64_t h = img.dim(1), w = img.dim(2);
  const auto v = img.data();
  std::vector<S> out(static_cast<std::size_t>(h * w));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const double value = v[y * w + x];
      Label label = kBrain;
      if (value < phantom::kBackgroundLevel) {
        label = kBackground;
      } else if (value < phantom::kVentricleLevel) {
        bool near_background = false;
        for (std::int64_t dy = -2; dy <= 2 && !near_background; ++dy) {
          for (std::int64_t dx = -2; dx <= 2; ++dx) {
            const std::int64_t yy = y + dy, xx = x + dx;
            if (yy < 0 || xx < 0 || yy >= h || xx >= w || v[yy * w + xx] < phantom::kBackgroundLevel) {
              near_background = true;
              break;
            }
          }
        }
        label = near_background ? kBrain : kVentricle;
      }
      out[static_cast<std::size_t>(y * w + x)] = static_cast<S>(label);
    }
  }
  return Tensor<S>(img.shape(), std::move(out));
}

// Radial pull field (pixel units) growing a ventricle of radius `radius` by `m` px.
inline Tensor<float> ageing_field(double cx, double cy, double radius, double m, std::int64_t n = phantom::kSize) {
  std::vector<float> u(static_cast<std::size_t>(2 * n * n), 0.0f);
  if (m == 0.0) return Tensor<float>({2, n, n}, std::move(u));
  for (std::int64_t y = 0; y < n; ++y) {
    for (std::int64_t x = 0; x < n; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double r = std::hypot(dx, dy);
      if (r == 0.0) continue;
      const double d = r <= radius ? m * r / radius
                                   : m * std::exp(-(r - radius) * (r - radius) / (2 * phantom::kFalloff * phantom::kFalloff));
      u[static_cast<std::size_t>(y * n + x)] = static_cast<float>(-d * dx / r);
      u[static_cast<std::size_t>(n * n + y * n + x)] = static_cast<float>(-d * dy / r);
    }
  }
  return Tensor<float>({2, n, n}, std::move(u));
}

struct Timepoint {
  double age = 0;
  Tensor<float> image;
  Tensor<float> seg;
};

struct SubjectRecord {
  std::string id;
  Anatomy anatomy;
  std::vector<Timepoint> timepoints;
  std::map<std::pair<int, int>, DeformationField<float>> fields;  // (i, j), i < j, normalized

  // Ground-truth field i -> j in pixel units.
  Tensor<float> field_pixels(int i, int j) const {
    const auto it = fields.find({i, j});
    if (it == fields.end()) throw DomainError("subject " + id + " has no field " + std::to_string(i) + " -> " + std::to_string(j));
    return denormalize_field(it->second, it->second.u_max).u;
  }
};

inline std::string subject_id(std::int64_t index) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "s%04lld", static_cast<long long>(index));
  return buf;
}

namespace detail {

inline DeformationField<float> ageing_pair(const Anatomy& a, double from_age, double to_age) {
  const Tensor<float> u = ageing_field(a.vent_cx, a.vent_cy, a.ventricle_radius(from_age), phantom::kKappa * (to_age - from_age));
  return normalize_field(DeformationField<float>{u}, phantom::kUMax);
}

}  // namespace detail

// num_timepoints = 0 draws it from {2, 3, 4}.
inline SubjectRecord make_subject(std::uint64_t seed, int num_timepoints = 0, const std::string& id = "s0000") {
  Rng rng(seed);
  if (num_timepoints == 0) num_timepoints = static_cast<int>(rng.uniform_int(2, 4));
  if (num_timepoints < 2 || num_timepoints > 4) {
    throw DomainError("a subject needs 2 to 4 timepoints, got " + std::to_string(num_timepoints));
  }
  SubjectRecord rec;
  rec.id = id;
  rec.anatomy = random_anatomy(rng);
  std::vector<double> ages{rng.uniform(phantom::kAgeMin, phantom::kAgeMax - phantom::kMaxGap * (num_timepoints - 1))};
  for (int k = 1; k < num_timepoints; ++k) ages.push_back(ages.back() + rng.uniform(phantom::kMinGap, phantom::kMaxGap));

  const Tensor<float> base = render_phantom(rec.anatomy, ages[0]);
  const Tensor<float> base_seg = labels_from_intensity(base);
  rec.timepoints.push_back({ages[0], base, base_seg});
  Tensor<float> composed = Tensor<float>::zeros({2, phantom::kSize, phantom::kSize});
  for (int k = 1; k < num_timepoints; ++k) {
    rec.fields[{k - 1, k}] = detail::ageing_pair(rec.anatomy, ages[k - 1], ages[k]);
    const Tensor<float> step = rec.field_pixels(k - 1, k);
    composed = compose_fields(composed, step);
    rec.timepoints.push_back({ages[k], warp_image(rec.timepoints.back().image, step), warp_labels(base_seg, composed)});
  }
  for (int i = 0; i < num_timepoints; ++i) {
    for (int j = i + 2; j < num_timepoints; ++j) rec.fields[{i, j}] = detail::ageing_pair(rec.anatomy, ages[i], ages[j]);
  }
  return rec;
}

inline double normalize_age(double age) { return (age - phantom::kAgeMin) / (phantom::kAgeMax - phantom::kAgeMin); }

inline std::int64_t count_label(const Tensor<float>& seg, Label label) {
  std::int64_t n = 0;
  for (float v : seg.data()) n += static_cast<int>(v) == label;
  return n;
}

// A completion problem built from one forward pair of a subject.
struct Task {
  std::string subject;
  int source_idx = 0;
  int target_idx = 0;
  double source_age = 0;
  double target_age = 0;
  Tensor<float> source;        // c1
  Tensor<float> source_seg;
  std::vector<Tensor<float>> aux;
  std::vector<double> aux_ages;
  DeformationField<float> phi0;  // normalized
  Tensor<float> target;        // source warped by the ground-truth field
  Tensor<float> target_seg;
};

// Aux scans are the other timepoints in ascending age, the first num_aux of them.
inline Task make_task(const SubjectRecord& s, int source_idx, int target_idx, int num_aux) {
  const int n = static_cast<int>(s.timepoints.size());
  if (source_idx < 0 || target_idx < 0 || source_idx >= n || target_idx >= n) {
    throw DomainError("task indices out of range for subject " + s.id);
  }
  if (source_idx == target_idx) throw DomainError("task source and target must differ");
  if (source_idx > target_idx) throw DomainError("ground-truth fields exist only for forward pairs (source older scan first)");
  Task t;
  t.subject = s.id;
  t.source_idx = source_idx;
  t.target_idx = target_idx;
  t.source_age = s.timepoints[source_idx].age;
  t.target_age = s.timepoints[target_idx].age;
  t.source = s.timepoints[source_idx].image;
  t.source_seg = s.timepoints[source_idx].seg;
  for (int k = 0; k < n && static_cast<int>(t.aux.size()) < num_aux; ++k) {
    if (k == source_idx || k == target_idx) continue;
    t.aux.push_back(s.timepoints[k].image);
    t.aux_ages.push_back(s.timepoints[k].age);
  }
  t.phi0 = s.fields.at({source_idx, target_idx});
  t.target = warp_image(t.source, s.field_pixels(source_idx, target_idx));
  t.target_seg = s.timepoints[target_idx].seg;
  return t;
}

// All (i, j) with i < j.
inline std::vector<std::pair<int, int>> forward_pairs(const SubjectRecord& s) {
  std::vector<std::pair<int, int>> out;
  const int n = static_cast<int>(s.timepoints.size());
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) out.emplace_back(i, j);
  }
  return out;
}

// ------------------------------------------------------------------ storage

inline void save_subject(const std::filesystem::path& root, const SubjectRecord& s) {
  const auto dir = root / "subjects" / s.id;
  std::filesystem::create_directories(dir);
  const auto& a = s.anatomy;
  KeyValues meta{{"id", s.id}, {"num_timepoints", std::to_string(s.timepoints.size())}};
  for (std::size_t k = 0; k < s.timepoints.size(); ++k) meta.emplace_back("age." + std::to_string(k), format_double(s.timepoints[k].age));
  const std::pair<const char*, double> params[] = {
      {"head_cx", a.head_cx}, {"head_cy", a.head_cy}, {"head_ax", a.head_ax}, {"head_ay", a.head_ay},
      {"vent_cx", a.vent_cx}, {"vent_cy", a.vent_cy}, {"vent_radius_base", a.vent_radius_base},
      {"vent_ellipticity", a.vent_ellipticity}, {"vent_angle", a.vent_angle}};
  for (const auto& [key, value] : params) meta.emplace_back(key, format_double(value));
  for (std::size_t k = 0; k < a.texture.size(); ++k) meta.emplace_back("texture." + std::to_string(k), format_double(a.texture[k]));
  save_key_values(dir / "subject.meta", meta);
  for (std::size_t k = 0; k < s.timepoints.size(); ++k) {
    save_dftn(dir / ("t" + std::to_string(k) + "_img.dftn"), s.timepoints[k].image);
    save_dftn(dir / ("t" + std::to_string(k) + "_seg.dftn"), s.timepoints[k].seg);
  }
  for (const auto& [pair, field] : s.fields) {
    const std::string stem = "field_" + std::to_string(pair.first) + "_" + std::to_string(pair.second);
    save_dftn(dir / (stem + ".dftn"), field.u);
    save_key_values(dir / (stem + ".meta"), {{"u_max", format_double(field.u_max)},
                                             {"normalized", field.normalized ? "1" : "0"},
                                             {"clamped", std::to_string(field.clamped)},
                                             {"source_age", format_double(s.timepoints[pair.first].age)},
                                             {"target_age", format_double(s.timepoints[pair.second].age)}});
  }
}

inline SubjectRecord load_subject(const std::filesystem::path& root, const std::string& id) {
  const auto dir = root / "subjects" / id;
  const auto meta = load_key_values(dir / "subject.meta");
  auto number = [&](const std::string& key) {
    const auto it = meta.find(key);
    if (it == meta.end()) throw IoError("subject " + id + ": metadata key '" + key + "' missing");
    return std::stod(it->second);
  };
  SubjectRecord s;
  s.id = id;
  auto& a = s.anatomy;
  a.head_cx = number("head_cx");
  a.head_cy = number("head_cy");
  a.head_ax = number("head_ax");
  a.head_ay = number("head_ay");
  a.vent_cx = number("vent_cx");
  a.vent_cy = number("vent_cy");
  a.vent_radius_base = number("vent_radius_base");
  a.vent_ellipticity = number("vent_ellipticity");
  a.vent_angle = number("vent_angle");
  for (std::size_t k = 0; k < a.texture.size(); ++k) a.texture[k] = number("texture." + std::to_string(k));
  const int n = static_cast<int>(number("num_timepoints"));
  for (int k = 0; k < n; ++k) {
    s.timepoints.push_back({number("age." + std::to_string(k)), load_dftn(dir / ("t" + std::to_string(k) + "_img.dftn")),
                            load_dftn(dir / ("t" + std::to_string(k) + "_seg.dftn"))});
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const std::string stem = "field_" + std::to_string(i) + "_" + std::to_string(j);
      const auto fmeta = load_key_values(dir / (stem + ".meta"));
      DeformationField<float> f{load_dftn(dir / (stem + ".dftn")), fmeta.at("normalized") == "1", std::stod(fmeta.at("u_max")),
                                std::stoll(fmeta.at("clamped"))};
      s.fields[{i, j}] = f;
    }
  }
  return s;
}

struct SplitFractions {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct Manifest {
  std::vector<std::string> train, val, test, bae;

  const std::vector<std::string>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    if (name == "bae") return bae;
    throw DomainError("unknown split '" + name + "' (expected train, val, test or bae)");
  }
};

// Subject-level split of ids 0..n-1; BAE subjects get the ids after them.
inline Manifest split_subjects(std::int64_t num_subjects, std::int64_t bae_subjects, std::uint64_t seed, SplitFractions f = {}) {
  if (std::abs(f.train + f.val + f.test - 1.0) > 1e-9 || f.train < 0 || f.val < 0 || f.test < 0) {
    throw DomainError("split fractions must be non-negative and sum to 1");
  }
  const auto n_val = static_cast<std::int64_t>(std::lround(f.val * static_cast<double>(num_subjects)));
  const auto n_test = static_cast<std::int64_t>(std::lround(f.test * static_cast<double>(num_subjects)));
  const std::int64_t n_train = num_subjects - n_val - n_test;
  if (n_val < 1 || n_test < 1 || n_train < 1) {
    throw DomainError("too few subjects for split: " + std::to_string(num_subjects) + " subjects give train/val/test = " +
                      std::to_string(n_train) + "/" + std::to_string(n_val) + "/" + std::to_string(n_test));
  }
  if (bae_subjects < 1) throw DomainError("the age-critic split needs at least one subject");
  std::vector<std::int64_t> order(static_cast<std::size_t>(num_subjects));
  std::iota(order.begin(), order.end(), std::int64_t{0});
  Rng rng(Rng::derive(seed, 0x73706c6974ULL));
  std::shuffle(order.begin(), order.end(), rng.engine());
  Manifest m;
  for (std::int64_t k = 0; k < num_subjects; ++k) {
    auto& dst = k < n_test ? m.test : (k < n_test + n_val ? m.val : m.train);
    dst.push_back(subject_id(order[k]));
  }
  for (auto* split : {&m.train, &m.val, &m.test}) std::sort(split->begin(), split->end());
  for (std::int64_t k = 0; k < bae_subjects; ++k) m.bae.push_back(subject_id(num_subjects + k));
  return m;
}

struct DatasetSpec {
  std::int64_t num_subjects = 10;
  std::int64_t bae_subjects = 0;  // 0 means the same as num_subjects
  std::uint64_t seed = 0;
  SplitFractions fractions{};
};

inline void write_manifest(const std::filesystem::path& root, const Manifest& m) {
  for (const char* name : {"train", "val", "test", "bae"}) {
    std::ofstream os(root / (std::string(name) + ".txt"), std::ios::binary);
    if (!os) throw IoError("cannot write manifest in " + root.string());
    for (const auto& id : m.split(name)) os << id << '\n';
  }
}

inline Manifest read_manifest(const std::filesystem::path& root) {
  Manifest m;
  for (const char* name : {"train", "val", "test", "bae"}) {
    std::istringstream is(read_text(root / (std::string(name) + ".txt")));
    auto& dst = const_cast<std::vector<std::string>&>(m.split(name));
    for (std::string line; std::getline(is, line);) {
      if (!trim(line).empty()) dst.push_back(trim(line));
    }
  }
  return m;
}

inline Manifest make_dataset(const std::filesystem::path& root, DatasetSpec spec) {
  if (spec.bae_subjects == 0) spec.bae_subjects = spec.num_subjects;
  const Manifest m = split_subjects(spec.num_subjects, spec.bae_subjects, spec.seed, spec.fractions);
  std::error_code ec;
  std::filesystem::create_directories(root / "subjects", ec);
  if (ec) throw IoError("cannot create dataset directory " + root.string() + ": " + ec.message());
  for (std::int64_t k = 0; k < spec.num_subjects + spec.bae_subjects; ++k) {
    const std::string id = subject_id(k);
    save_subject(root, make_subject(Rng::derive(spec.seed, static_cast<std::uint64_t>(k)), 0, id));
  }
  write_manifest(root, m);
  save_key_values(root / "dataset.meta", {{"num_subjects", std::to_string(spec.num_subjects)},
                                          {"bae_subjects", std::to_string(spec.bae_subjects)},
                                          {"seed", std::to_string(spec.seed)},
                                          {"fraction.train", format_double(spec.fractions.train)},
                                          {"fraction.val", format_double(spec.fractions.val)},
                                          {"fraction.test", format_double(spec.fractions.test)},
                                          {"size", std::to_string(phantom::kSize)},
                                          {"u_max", format_double(phantom::kUMax)},
                                          {"age_min", format_double(phantom::kAgeMin)},
                                          {"age_max", format_double(phantom::kAgeMax)}});
  return m;
}

inline std::vector<SubjectRecord> load_subjects(const std::filesystem::path& root, const std::vector<std::string>& ids) {
  std::vector<SubjectRecord> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(load_subject(root, id));
  return out;
}

}  // namespace morphdiff
