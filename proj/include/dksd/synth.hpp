#pragma once

// Synthetic two-timescale "spectrogram" corpus.
//
// Each class owns a fixed 80-bin spectral envelope (static factor). Each
// utterance adds fast-varying content: a smooth random pitch trajectory with
// its harmonics, three formant tracks with per-frame jitter, and white noise.
// Content is zero-centered per utterance before the envelope is added.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "dksd/augment.hpp"
#include "dksd/features.hpp"

namespace dksd {

struct SynthOptions {
  int n_bins = 80;
  double envelope_amplitude = 0.5;
  double content_amplitude = 1.0;
  int harmonics = 8;
  double pitch_low = 3.0;       ///< fundamental, in bins
  double pitch_high = 8.0;
  double pitch_correlation = 6.0;  ///< frames
  double formant_correlation = 4.0;
  double formant_jitter = 1.0;  ///< per-frame std, in bins
  double formant_width = 2.5;
  double noise = 0.1;
  double train_fraction = 0.7;
  double val_fraction = 0.1;
};

struct SyntheticCorpus {
  Manifest manifest;                 ///< every utterance; path = features/<id>.feat
  Manifest train, val, test;         ///< per-class utterance split
  std::vector<Matrix<float>> features;  ///< aligned with manifest.records
};

namespace detail {

/// Stationary AR(1) noise squashed into [lo, hi].
inline std::vector<double> smooth_track(std::mt19937_64& rng, Eigen::Index steps, double lo, double hi, double corr) {
  std::normal_distribution<double> n(0.0, 1.0);
  const double a = std::exp(-1.0 / corr);
  const double s = std::sqrt(1.0 - a * a);
  std::vector<double> v(static_cast<std::size_t>(steps));
  double x = n(rng);
  for (Eigen::Index t = 0; t < steps; ++t) {
    if (t > 0) x = a * x + s * n(rng);
    v[static_cast<std::size_t>(t)] = lo + (hi - lo) * (0.5 + 0.5 * std::tanh(x));
  }
  return v;
}

inline double bump(double f, double center, double width) {
  const double d = (f - center) / width;
  return std::exp(-0.5 * d * d);
}

}  // namespace detail

inline std::vector<double> class_envelope(std::uint64_t seed, int cls, const SynthOptions& o) {
  std::mt19937_64 rng(mix_seed(seed, 0xE17u, static_cast<std::uint64_t>(cls)));
  std::uniform_real_distribution<double> amp(0.5, 1.5), center(0.0, o.n_bins - 1.0), width(4.0, 12.0);
  std::vector<double> env(static_cast<std::size_t>(o.n_bins), 0.0);
  for (int b = 0; b < 3; ++b) {
    const double a = amp(rng), c = center(rng), w = width(rng);
    for (int f = 0; f < o.n_bins; ++f) env[static_cast<std::size_t>(f)] += a * detail::bump(f, c, w);
  }
  double mean = 0.0;
  for (double v : env) mean += v;
  mean /= o.n_bins;
  for (double& v : env) v = o.envelope_amplitude * (v - mean);
  return env;
}

inline Matrix<float> synth_utterance(const std::vector<double>& envelope, Eigen::Index steps, std::uint64_t seed,
                                     const SynthOptions& o) {
  std::mt19937_64 rng(seed);
  const int nb = o.n_bins;
  Matrix<double> x = Matrix<double>::Zero(steps, nb);
  const auto pitch = detail::smooth_track(rng, steps, o.pitch_low, o.pitch_high, o.pitch_correlation);
  for (Eigen::Index t = 0; t < steps; ++t) {
    for (int h = 1; h <= o.harmonics; ++h) {
      const double center = h * pitch[static_cast<std::size_t>(t)];
      const double a = 0.6 / std::sqrt(static_cast<double>(h));
      for (int f = 0; f < nb; ++f) x(t, f) += a * detail::bump(f, center, 1.0);
    }
  }
  const double bands[3][2] = {{0.1, 0.375}, {0.3125, 0.6875}, {0.5625, 0.9375}};
  std::normal_distribution<double> jitter(0.0, o.formant_jitter);
  std::uniform_real_distribution<double> level(1.0, 2.0);
  for (const auto& band : bands) {
    const auto track = detail::smooth_track(rng, steps, band[0] * nb, band[1] * nb, o.formant_correlation);
    const double a = level(rng);
    for (Eigen::Index t = 0; t < steps; ++t) {
      const double center = track[static_cast<std::size_t>(t)] + jitter(rng);
      for (int f = 0; f < nb; ++f) x(t, f) += a * detail::bump(f, center, o.formant_width);
    }
  }
  x = o.content_amplitude * (x.array() - x.mean()).matrix();
  std::normal_distribution<double> noise(0.0, o.noise);
  for (Eigen::Index t = 0; t < steps; ++t) {
    for (int f = 0; f < nb; ++f) x(t, f) += envelope[static_cast<std::size_t>(f)] + noise(rng);
  }
  return x.cast<float>();
}

inline SyntheticCorpus generate_synthetic_corpus(int n_classes, int utts_per_class, Eigen::Index steps,
                                                 std::uint64_t seed, const SynthOptions& o = {}) {
  if (n_classes < 2) throw RangeError("synthetic corpus needs >= 2 classes");
  if (utts_per_class < 2) throw RangeError("synthetic corpus needs >= 2 utterances per class");
  if (steps < 32) throw RangeError("synthetic corpus needs T >= 32");
  if (o.n_bins < 2) throw RangeError("synthetic corpus needs >= 2 bins");
  if (o.train_fraction <= 0 || o.val_fraction < 0 || o.train_fraction + o.val_fraction >= 1.0) {
    throw RangeError("synthetic split fractions must satisfy 0 < train, 0 <= val, train + val < 1");
  }
  SyntheticCorpus c;
  const int n_train = std::max(1, static_cast<int>(std::lround(o.train_fraction * utts_per_class)));
  const int n_val = static_cast<int>(std::lround(o.val_fraction * utts_per_class));
  char buf[64];
  for (int k = 0; k < n_classes; ++k) {
    const auto env = class_envelope(seed, k, o);
    std::snprintf(buf, sizeof buf, "spk%02d", k);
    const std::string speaker = buf;
    for (int u = 0; u < utts_per_class; ++u) {
      std::snprintf(buf, sizeof buf, "spk%02d_u%03d", k, u);
      const std::string id = buf;
      UtteranceRecord r{id, speaker, "features/" + id + ".feat"};
      c.manifest.records.push_back(r);
      c.features.push_back(synth_utterance(env, steps, mix_seed(seed, static_cast<std::uint64_t>(k) + 1, static_cast<std::uint64_t>(u)), o));
      if (u < n_train) c.train.records.push_back(r);
      else if (u < n_train + n_val) c.val.records.push_back(r);
      else c.test.records.push_back(r);
    }
  }
  return c;
}

/// Writes features/, manifest.tsv, train.tsv, val.tsv and test.tsv under dir.
inline void write_synthetic_corpus(const fs::path& dir, const SyntheticCorpus& c) {
  for (std::size_t i = 0; i < c.features.size(); ++i) write_features(dir / c.manifest.records[i].path, c.features[i]);
  write_manifest(dir / "manifest.tsv", c.manifest);
  write_manifest(dir / "train.tsv", c.train);
  write_manifest(dir / "val.tsv", c.val);
  write_manifest(dir / "test.tsv", c.test);
}

}  // namespace dksd
