#pragma once

// Mono 16-bit PCM WAV reading/writing and 48 kHz -> 16 kHz decimation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "dksd/io.hpp"

namespace dksd {

inline constexpr int kSampleRate = 16000;

struct Waveform {
  std::vector<double> samples;  ///< in [-1, 1]
  int sample_rate = kSampleRate;

  double seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
};

inline Waveform decode_wav(std::string_view bytes, const std::string& name = "wav") {
  io::Reader r(bytes, name);
  if (r.bytes(4) != "RIFF") throw IoError(name + ": not a RIFF file");
  r.get<std::uint32_t>();
  if (r.bytes(4) != "WAVE") throw IoError(name + ": not a WAVE file");
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  while (r.remaining() >= 8) {
    const std::string id(r.bytes(4));
    const std::uint32_t size = r.get<std::uint32_t>();
    if (id == "fmt ") {
      io::Reader f(r.bytes(size), name + " fmt chunk");
      format = f.get<std::uint16_t>();
      channels = f.get<std::uint16_t>();
      rate = f.get<std::uint32_t>();
      f.get<std::uint32_t>();
      f.get<std::uint16_t>();
      bits = f.get<std::uint16_t>();
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw IoError(name + ": data chunk before fmt chunk");
      if (format != 1 || bits != 16) throw ValidationError(name + ": only 16-bit PCM is supported");
      if (channels != 1) throw ValidationError(name + ": only mono audio is supported, got " + std::to_string(channels) + " channels");
      const std::size_t n = std::min<std::size_t>(size, r.remaining()) / 2;
      Waveform w;
      w.sample_rate = static_cast<int>(rate);
      w.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) w.samples[i] = r.get<std::int16_t>() / 32768.0;
      return w;
    } else {
      r.skip(std::min<std::size_t>(size + (size & 1u), r.remaining()));
    }
  }
  throw IoError(name + ": no data chunk");
}

inline Waveform read_wav(const std::filesystem::path& path) { return decode_wav(io::read_file(path), path.string()); }

inline std::string encode_wav(const Waveform& w) {
  std::string out;
  const auto n = static_cast<std::uint32_t>(w.samples.size());
  out += "RIFF";
  io::put_le<std::uint32_t>(out, 36 + 2 * n);
  out += "WAVEfmt ";
  io::put_le<std::uint32_t>(out, 16);
  io::put_le<std::uint16_t>(out, 1);
  io::put_le<std::uint16_t>(out, 1);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w.sample_rate));
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w.sample_rate) * 2);
  io::put_le<std::uint16_t>(out, 2);
  io::put_le<std::uint16_t>(out, 16);
  out += "data";
  io::put_le<std::uint32_t>(out, 2 * n);
  for (double s : w.samples) {
    const double c = std::clamp(s, -1.0, 32767.0 / 32768.0);
    io::put_le<std::int16_t>(out, static_cast<std::int16_t>(std::lround(c * 32768.0)));
  }
  return out;
}

inline void write_wav(const std::filesystem::path& path, const Waveform& w) { io::atomic_write(path, encode_wav(w)); }

/// Windowed-sinc low-pass for 3:1 decimation: cutoff 0.9 * 8 kHz at 48 kHz,
/// Blackman window, unit DC gain.
inline std::vector<double> decimation_filter(int taps = 121) {
  const double fc = 0.9 * 8000.0 / 48000.0;  // cycles per sample
  std::vector<double> h(static_cast<std::size_t>(taps));
  const double mid = (taps - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < taps; ++i) {
    const double x = i - mid;
    const double sinc = x == 0.0 ? 2.0 * fc : std::sin(2.0 * std::numbers::pi * fc * x) / (std::numbers::pi * x);
    const double win = 0.42 - 0.5 * std::cos(2.0 * std::numbers::pi * i / (taps - 1)) +
                       0.08 * std::cos(4.0 * std::numbers::pi * i / (taps - 1));
    h[static_cast<std::size_t>(i)] = sinc * win;
    sum += h[static_cast<std::size_t>(i)];
  }
  for (auto& v : h) v /= sum;
  return h;
}

/// Filters and keeps every third sample; only the retained outputs are
/// computed. Output sample n is aligned with input sample 3n.
inline Waveform decimate_48k_to_16k(const Waveform& w) {
  if (w.sample_rate != 48000) throw ValidationError("decimation expects 48 kHz input, got " + std::to_string(w.sample_rate));
  static const std::vector<double> h = decimation_filter();
  const long delay = static_cast<long>(h.size() - 1) / 2;
  const long n_in = static_cast<long>(w.samples.size());
  Waveform out;
  out.sample_rate = kSampleRate;
  out.samples.resize(static_cast<std::size_t>(n_in / 3));
  for (long n = 0; n < static_cast<long>(out.samples.size()); ++n) {
    double acc = 0.0;
    for (long k = 0; k < static_cast<long>(h.size()); ++k) {
      const long idx = 3 * n + delay - k;
      if (idx >= 0 && idx < n_in) acc += h[static_cast<std::size_t>(k)] * w.samples[static_cast<std::size_t>(idx)];
    }
    out.samples[static_cast<std::size_t>(n)] = std::clamp(acc, -1.0, 1.0);
  }
  return out;
}

/// Brings 16 or 48 kHz audio to 16 kHz.
inline Waveform to_16k(Waveform w) {
  if (w.sample_rate == kSampleRate) return w;
  if (w.sample_rate == 48000) return decimate_48k_to_16k(w);
  throw ValidationError("unsupported sample rate " + std::to_string(w.sample_rate) + " (expected 16000 or 48000)");
}

}  // namespace dksd
