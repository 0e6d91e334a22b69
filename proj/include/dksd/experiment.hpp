#pragma once

// Train-and-evaluate sweeps: forecast horizon and loss-term ablations.

#include <cmath>
#include <string>
#include <vector>

#include "dksd/eval.hpp"
#include "dksd/train.hpp"

namespace dksd {

/// Every run of a sweep is scored on the same trial list.
inline constexpr std::uint64_t kAblationTrialSeed = 0;

struct Splits {
  Dataset train, val, test;
};

struct RunOutcome {
  double speaker_eer = 0.0;
  double content_eer = 0.0;
  int best_epoch = 0;
  int epochs_run = 0;
};

/// Trains one model and scores both branches on the test split with trials
/// seeded by `trial_seed`.
inline RunOutcome train_and_score(const Config& cfg, const Splits& data, std::uint64_t trial_seed = 0, TrainHooks hooks = {}) {
  cfg.validate();
  auto res = train(cfg.model, cfg.train, data.train, data.val, std::move(hooks));
  const auto trials = build_trials(data.test.manifest, 1.0, trial_seed);
  RunOutcome o;
  o.speaker_eer = verify(res.best, cfg.model, data.test.manifest, data.test.features, Branch::Speaker, trial_seed, trials).eer.eer;
  o.content_eer = verify(res.best, cfg.model, data.test.manifest, data.test.features, Branch::Content, trial_seed, trials).eer.eer;
  o.best_epoch = res.best_epoch;
  o.epochs_run = res.epochs_run;
  return o;
}

struct AblationRow {
  std::string setting;  ///< "M=5" or objective name
  int M = 0;
  std::string objective;
  std::vector<double> speaker_eer, content_eer;

  static double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  }
  /// Sample standard deviation (0 for a single run).
  static double stddev(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
  }
};

inline std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os.precision(6);
  os << "setting\tM\tobjective\truns\tspeaker_eer_mean\tspeaker_eer_std\tcontent_eer_mean\tcontent_eer_std\n";
  for (const auto& r : rows) {
    os << r.setting << "\t" << r.M << "\t" << r.objective << "\t" << r.speaker_eer.size() << "\t" << AblationRow::mean(r.speaker_eer)
       << "\t" << AblationRow::stddev(r.speaker_eer) << "\t" << AblationRow::mean(r.content_eer) << "\t"
       << AblationRow::stddev(r.content_eer) << "\n";
  }
  return os.str();
}

/// One row per horizon, one training run per (M, seed).
inline std::vector<AblationRow> ablate_horizon(const Config& base, const std::vector<int>& m_values,
                                               const std::vector<std::uint64_t>& seeds, const Splits& data) {
  if (m_values.empty() || seeds.empty()) throw ValidationError("ablation needs at least one M value and one seed");
  for (int m : m_values) check_horizon(base.train.crop_frames, m);
  std::vector<AblationRow> rows;
  for (int m : m_values) {
    AblationRow row{"M=" + std::to_string(m), m, base.train.objective, {}, {}};
    for (auto seed : seeds) {
      Config c = base;
      c.model.M = m;
      c.train.seed = seed;
      const auto o = train_and_score(c, data, kAblationTrialSeed);
      spdlog::info("ablation M={} seed={}: speaker EER {:.2f}%, content EER {:.2f}%", m, seed, o.speaker_eer, o.content_eer);
      row.speaker_eer.push_back(o.speaker_eer);
      row.content_eer.push_back(o.content_eer);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

/// One row per objective (total, pred, rec).
inline std::vector<AblationRow> ablate_losses(const Config& base, const std::vector<std::uint64_t>& seeds, const Splits& data,
                                              const std::vector<std::string>& objectives = {"total", "pred", "rec"}) {
  if (seeds.empty()) throw ValidationError("ablation needs at least one seed");
  std::vector<AblationRow> rows;
  for (const auto& obj : objectives) {
    AblationRow row{obj, base.model.M, obj, {}, {}};
    for (auto seed : seeds) {
      Config c = base;
      c.train.objective = obj;
      c.train.seed = seed;
      const auto o = train_and_score(c, data, kAblationTrialSeed);
      spdlog::info("ablation objective={} seed={}: speaker EER {:.2f}%, content EER {:.2f}%", obj, seed, o.speaker_eer, o.content_eer);
      row.speaker_eer.push_back(o.speaker_eer);
      row.content_eer.push_back(o.content_eer);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace dksd
