#pragma once

// Energy-threshold voice activity detection on 30 ms frames.
//
// A frame is voiced when its energy exceeds
//   max(floor_db, loudest_frame_db - range_db).
// Runs of voiced frames are smoothed: a run is kept only if it lasts at least
// `min_frames` and its loudest frame clears the threshold by `peak_margin_db`.
// Higher aggressiveness narrows the range, raises the floor and demands
// longer, stronger runs.

#include <algorithm>
#include <array>
#include <cmath>
#include <utility>
#include <vector>

#include "dksd/audio.hpp"

namespace dksd {

inline constexpr int kVadFrame = 480;  // 30 ms at 16 kHz

struct VadLevel {
  double range_db;
  double floor_db;
  int min_frames;
  double peak_margin_db;
};

inline VadLevel vad_level(int aggressiveness) {
  static constexpr std::array<VadLevel, 4> levels{{
      {40.0, -70.0, 1, 0.0},
      {35.0, -65.0, 2, 2.0},
      {30.0, -60.0, 3, 4.0},
      {25.0, -55.0, 4, 6.0},
  }};
  if (aggressiveness < 0 || aggressiveness > 3) {
    throw RangeError("VAD aggressiveness must be 0-3, got " + std::to_string(aggressiveness));
  }
  return levels[static_cast<std::size_t>(aggressiveness)];
}

/// Frame energies in dB full scale (mean square, floored at -120 dB).
inline std::vector<double> frame_energies_db(const std::vector<double>& x) {
  std::vector<double> e(x.size() / kVadFrame);
  for (std::size_t f = 0; f < e.size(); ++f) {
    double acc = 0.0;
    for (std::size_t i = 0; i < kVadFrame; ++i) acc += x[f * kVadFrame + i] * x[f * kVadFrame + i];
    e[f] = 10.0 * std::log10(acc / kVadFrame + 1e-12);
  }
  return e;
}

/// Sorted, non-overlapping [start, end) sample ranges. Samples after the last
/// full frame are never voiced.
inline std::vector<std::pair<long, long>> detect_voiced_segments(const Waveform& w, int aggressiveness) {
  if (w.sample_rate != kSampleRate) throw ValidationError("VAD expects 16 kHz audio");
  const VadLevel lv = vad_level(aggressiveness);
  const auto e = frame_energies_db(w.samples);
  std::vector<std::pair<long, long>> segments;
  if (e.empty()) return segments;
  const double threshold = std::max(lv.floor_db, *std::max_element(e.begin(), e.end()) - lv.range_db);
  std::size_t f = 0;
  while (f < e.size()) {
    if (e[f] <= threshold) {
      ++f;
      continue;
    }
    std::size_t end = f;
    double peak = e[f];
    while (end < e.size() && e[end] > threshold) peak = std::max(peak, e[end++]);
    if (static_cast<int>(end - f) >= lv.min_frames && peak > threshold + lv.peak_margin_db) {
      segments.emplace_back(static_cast<long>(f) * kVadFrame, static_cast<long>(end) * kVadFrame);
    }
    f = end;
  }
  return segments;
}

/// Concatenation of the voiced segments.
inline Waveform voiced_only(const Waveform& w, int aggressiveness) {
  Waveform out;
  out.sample_rate = w.sample_rate;
  for (auto [a, b] : detect_voiced_segments(w, aggressiveness)) {
    out.samples.insert(out.samples.end(), w.samples.begin() + a, w.samples.begin() + b);
  }
  return out;
}

}  // namespace dksd
