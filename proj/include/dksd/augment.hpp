#pragma once

// Seeded time/frequency masking. Planning and application are split so a
// drawn plan can be inspected and replayed.

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "dksd/autodiff.hpp"

namespace dksd {

struct Mask {
  Eigen::Index start = 0;
  Eigen::Index width = 0;
};

struct AugmentPlan {
  bool applied = false;
  std::vector<Mask> time_masks;
  std::vector<Mask> freq_masks;
};

inline constexpr Eigen::Index kMaxFreqMaskWidth = 8;
inline constexpr int kMaxMasksPerAxis = 2;

/// Mixes a base seed with stream indices (splitmix64 finalizer), so per-epoch,
/// per-utterance augmentation seeds are independent of iteration order.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(a) ^ b) ^ c);
}

/// With probability p: 0-2 time masks (width 1..ceil(0.1 T)) and 0-2
/// frequency masks (width 1..8), at least one mask in total.
inline AugmentPlan plan_spec_augment(Eigen::Index steps, Eigen::Index bins, std::uint64_t seed, double p = 0.5) {
  if (steps < 10) throw RangeError("spec_augment needs T >= 10, got " + std::to_string(steps));
  std::mt19937_64 rng(seed);
  AugmentPlan plan;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (!(coin(rng) < p)) return plan;
  plan.applied = true;
  std::uniform_int_distribution<int> count(0, kMaxMasksPerAxis);
  int n_time = count(rng);
  const int n_freq = count(rng);
  if (n_time == 0 && n_freq == 0) n_time = 1;
  const Eigen::Index max_tw = (steps + 9) / 10;
  for (int i = 0; i < n_time; ++i) {
    const Eigen::Index w = std::uniform_int_distribution<Eigen::Index>(1, max_tw)(rng);
    const Eigen::Index s = std::uniform_int_distribution<Eigen::Index>(0, steps - w)(rng);
    plan.time_masks.push_back({s, w});
  }
  const Eigen::Index max_fw = std::min<Eigen::Index>(kMaxFreqMaskWidth, bins);
  for (int i = 0; i < n_freq; ++i) {
    const Eigen::Index w = std::uniform_int_distribution<Eigen::Index>(1, max_fw)(rng);
    const Eigen::Index s = std::uniform_int_distribution<Eigen::Index>(0, bins - w)(rng);
    plan.freq_masks.push_back({s, w});
  }
  return plan;
}

/// Fills the planned regions with the mean of the input spectrogram.
template <class Derived>
Matrix<typename Derived::Scalar> apply_augment(const Eigen::MatrixBase<Derived>& s, const AugmentPlan& plan) {
  Matrix<typename Derived::Scalar> out = s;
  if (!plan.applied) return out;
  const auto mean = s.mean();
  for (const auto& m : plan.time_masks) out.middleRows(m.start, m.width).setConstant(mean);
  for (const auto& m : plan.freq_masks) out.middleCols(m.start, m.width).setConstant(mean);
  return out;
}

template <class Derived>
Matrix<typename Derived::Scalar> spec_augment(const Eigen::MatrixBase<Derived>& s, std::uint64_t seed, double p = 0.5) {
  return apply_augment(s, plan_spec_augment(s.rows(), s.cols(), seed, p));
}

}  // namespace dksd
