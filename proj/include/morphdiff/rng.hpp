#pragma once

#include <cstdint>
#include <random>

#include "morphdiff/tensor.hpp"

namespace morphdiff {

// Seedable generator. Independent streams are derived by mixing a master
// seed with a stream id, so per-subject or per-epoch draws never depend on
// how many numbers earlier consumers took.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer over the pair
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  Rng fork(std::uint64_t stream) const { return Rng(derive(seed_, stream)); }

  std::uint64_t seed() const { return seed_; }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return normal_(engine_); }

  // Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }

  template <class S>
  Tensor<S> normal_tensor(Shape shape, double stddev = 1.0, bool requires_grad = false) {
    std::vector<S> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<S>(stddev * normal());
    return Tensor<S>(std::move(shape), std::move(v), requires_grad);
  }

  template <class S>
  Tensor<S> uniform_tensor(Shape shape, double lo, double hi, bool requires_grad = false) {
    std::vector<S> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<S>(uniform(lo, hi));
    return Tensor<S>(std::move(shape), std::move(v), requires_grad);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace morphdiff
