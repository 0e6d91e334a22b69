#pragma once

// Two-phase training: reconstruction-only pretraining, then the full
// objective with early stopping on validation loss.

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dksd/augment.hpp"
#include "dksd/config.hpp"
#include "dksd/features.hpp"
#include "dksd/model.hpp"
#include "dksd/optim.hpp"

namespace dksd {

struct Dataset {
  Manifest manifest;
  std::vector<Matrix<float>> features;  ///< aligned with manifest.records
};

inline Dataset load_dataset(const fs::path& manifest_path) {
  Dataset d;
  d.manifest = read_manifest(manifest_path);
  d.features = load_features(d.manifest);
  return d;
}

struct LossRecord {
  double l_rec = 0.0;
  double l_pred = std::numeric_limits<double>::quiet_NaN();  ///< NaN when not computed
  double l_eigen = std::numeric_limits<double>::quiet_NaN();
  double l_total = 0.0;
};

struct EpochRecord {
  int epoch = 0;  ///< 1-based
  std::string phase;  ///< pretrain | full
  std::string split;  ///< train | val
  LossRecord loss;
  double seconds = 0.0;
};

inline std::string format_history(const std::vector<EpochRecord>& h) {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,phase,split,l_rec,l_pred,l_eigen,l_total,seconds\n";
  auto num = [&](double v) {
    if (std::isnan(v)) os << "na";
    else os << v;
  };
  for (const auto& r : h) {
    os << r.epoch << "," << r.phase << "," << r.split << ",";
    num(r.loss.l_rec);
    os << ",";
    num(r.loss.l_pred);
    os << ",";
    num(r.loss.l_eigen);
    os << ",";
    num(r.loss.l_total);
    os << "," << r.seconds << "\n";
  }
  return os.str();
}

inline Objective parse_objective(const std::string& s) {
  if (s == "total") return Objective::Total;
  if (s == "pred") return Objective::PredOnly;
  if (s == "rec") return Objective::RecOnly;
  throw ConfigError("objective must be total, pred or rec; got '" + s + "'");
}

struct TrainResult {
  ParameterTable<float> best;
  ParameterTable<float> last;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  std::string best_phase;
  double best_value = std::numeric_limits<double>::infinity();
  int epochs_run = 0;
  bool early_stopped = false;
  long pretrain_koopman_estimations = 0;
  long parameter_count = 0;
};

struct TrainHooks {
  std::function<void(const EpochRecord& train, const EpochRecord& val)> on_epoch;
  std::optional<ParameterTable<float>> initial;  ///< resume from these weights instead of a fresh init
  int start_epoch = 0;                           ///< epochs already completed by `initial`
};

namespace detail {

/// Indices of utterances long enough for a crop.
inline std::vector<std::size_t> croppable(const Dataset& d, int crop) {
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < d.features.size(); ++i) {
    if (d.features[i].rows() >= crop) ids.push_back(i);
  }
  return ids;
}

struct Batch {
  Matrix<float> input;
  Matrix<float> target;
  SequenceLayout layout;
};

inline Batch assemble(const Dataset& d, const std::vector<std::size_t>& ids, const std::vector<Eigen::Index>& offsets, int crop,
                      int n_mels, const std::vector<AugmentPlan>* plans) {
  Batch b;
  b.layout = SequenceLayout{static_cast<Eigen::Index>(ids.size()), crop};
  b.target.resize(b.layout.rows(), n_mels);
  for (std::size_t s = 0; s < ids.size(); ++s) {
    const auto& f = d.features[ids[s]];
    if (f.cols() != n_mels) {
      throw ShapeError("utterance '" + d.manifest.records[ids[s]].utterance_id + "' has " + std::to_string(f.cols()) +
                       " bins, model expects " + std::to_string(n_mels));
    }
    const auto crop_view = f.middleRows(offsets[s], crop);
    for (int t = 0; t < crop; ++t) b.target.row(b.layout.row(t, static_cast<Eigen::Index>(s))) = crop_view.row(t);
  }
  if (plans) {
    b.input.resize(b.layout.rows(), n_mels);
    for (std::size_t s = 0; s < ids.size(); ++s) {
      const auto& f = d.features[ids[s]];
      const Matrix<float> aug = apply_augment(f.middleRows(offsets[s], crop), (*plans)[s]);
      for (int t = 0; t < crop; ++t) b.input.row(b.layout.row(t, static_cast<Eigen::Index>(s))) = aug.row(t);
    }
  } else {
    b.input = b.target;
  }
  return b;
}

inline bool finite(double v) { return std::isfinite(v); }

}  // namespace detail

/// Losses of one batch without gradients or parameter changes.
inline LossRecord evaluate_batch(const ParameterTable<float>& params, const ModelConfig& mc, const detail::Batch& b, bool full,
                                 const LossWeights& w) {
  ad::Graph<float> g;
  BoundParameters<float> p(g, params, false);
  auto x = g.input(b.input, false);
  auto f = forward(p, mc, x, b.layout, full, w);
  LossRecord r;
  r.l_rec = f.l_rec.item();
  if (f.l_pred.valid()) r.l_pred = f.l_pred.item();
  if (f.l_eigen.valid()) r.l_eigen = f.l_eigen.item();
  r.l_total = f.l_total.item();
  return r;
}

/// Validation losses on deterministic centered crops.
inline LossRecord validation_loss(const ParameterTable<float>& params, const ModelConfig& mc, const TrainConfig& tc,
                                  const Dataset& val, bool full, const LossWeights& w) {
  const auto ids = detail::croppable(val, tc.crop_frames);
  if (ids.empty()) throw ValidationError("validation split has no utterance with at least " + std::to_string(tc.crop_frames) + " frames");
  LossRecord acc{0.0, full ? 0.0 : std::numeric_limits<double>::quiet_NaN(), full ? 0.0 : std::numeric_limits<double>::quiet_NaN(), 0.0};
  double n = 0.0;
  for (std::size_t s = 0; s < ids.size(); s += static_cast<std::size_t>(tc.batch_size)) {
    std::vector<std::size_t> bid(ids.begin() + static_cast<long>(s),
                                 ids.begin() + static_cast<long>(std::min(ids.size(), s + static_cast<std::size_t>(tc.batch_size))));
    std::vector<Eigen::Index> off;
    for (auto i : bid) off.push_back((val.features[i].rows() - tc.crop_frames) / 2);
    const auto b = detail::assemble(val, bid, off, tc.crop_frames, mc.n_mels, nullptr);
    const auto r = evaluate_batch(params, mc, b, full, w);
    const double wgt = static_cast<double>(bid.size());
    acc.l_rec += wgt * r.l_rec;
    if (full) {
      acc.l_pred += wgt * r.l_pred;
      acc.l_eigen += wgt * r.l_eigen;
    }
    acc.l_total += wgt * r.l_total;
    n += wgt;
  }
  acc.l_rec /= n;
  acc.l_pred /= n;
  acc.l_eigen /= n;
  acc.l_total /= n;
  return acc;
}

/// Runs pretraining (L_rec only) for min(pretrain_epochs, max_epochs)
/// epochs, then the configured objective until max_epochs or early stopping.
/// The best checkpoint is the lowest validation L_total of the last phase
/// that ran; tracking restarts when the objective changes at the phase
/// boundary.
inline TrainResult train(const ModelConfig& mc, const TrainConfig& tc, const Dataset& train_set, const Dataset& val_set,
                         TrainHooks hooks = {}) {
  mc.validate();
  tc.validate();
  if (mc.M > tc.crop_frames - 2) throw ConfigError("model.M exceeds crop length - 2");
  const auto train_ids = detail::croppable(train_set, tc.crop_frames);
  if (train_ids.empty()) throw ValidationError("training split has no utterance with at least " + std::to_string(tc.crop_frames) + " frames");
  if (detail::croppable(val_set, tc.crop_frames).empty()) throw ValidationError("validation split is empty");
  if (train_ids.size() < train_set.features.size()) {
    spdlog::warn("discarding {} training utterances shorter than {} frames", train_set.features.size() - train_ids.size(), tc.crop_frames);
  }

  TrainResult res;
  ParameterTable<float> params = hooks.initial ? *hooks.initial : build_model<float>(mc, tc.seed);
  res.parameter_count = params.count();
  AdamWState<float> opt_state;
  const AdamWOptions opt{tc.learning_rate, tc.weight_decay};
  const Objective objective = parse_objective(tc.objective);
  const LossWeights pre_w{mc.weights.rec, 0.0, 0.0};
  const LossWeights full_w = objective_weights(mc.weights, objective);
  const bool full_koopman = objective != Objective::RecOnly;

  std::string current_phase;
  int since_best = 0;
  const long koopman_before = koopman_estimation_count();

  for (int epoch = hooks.start_epoch + 1; epoch <= tc.max_epochs; ++epoch) {
    const bool pretrain = epoch <= tc.pretrain_epochs;
    const std::string phase = pretrain ? "pretrain" : "full";
    if (phase != current_phase) {
      if (!current_phase.empty()) res.pretrain_koopman_estimations = koopman_estimation_count() - koopman_before;
      current_phase = phase;
      res.best_value = std::numeric_limits<double>::infinity();
      since_best = 0;
    }
    const bool with_koopman = !pretrain && full_koopman;
    const LossWeights& w = pretrain ? pre_w : full_w;
    const auto t0 = std::chrono::steady_clock::now();

    std::mt19937_64 rng(mix_seed(tc.seed, 0x0E70C4ULL, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order = train_ids;
    std::shuffle(order.begin(), order.end(), rng);
    LossRecord acc{0.0, with_koopman ? 0.0 : std::numeric_limits<double>::quiet_NaN(),
                   with_koopman ? 0.0 : std::numeric_limits<double>::quiet_NaN(), 0.0};
    double seen = 0.0;
    int batch_index = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(tc.batch_size), ++batch_index) {
      std::vector<std::size_t> bid(order.begin() + static_cast<long>(s),
                                   order.begin() + static_cast<long>(std::min(order.size(), s + static_cast<std::size_t>(tc.batch_size))));
      std::vector<Eigen::Index> off;
      std::vector<AugmentPlan> plans;
      for (auto i : bid) {
        const auto len = train_set.features[i].rows();
        std::mt19937_64 crng(mix_seed(tc.seed, static_cast<std::uint64_t>(epoch), i));
        off.push_back(std::uniform_int_distribution<Eigen::Index>(0, len - tc.crop_frames)(crng));
        plans.push_back(plan_spec_augment(tc.crop_frames, mc.n_mels, mix_seed(tc.seed ^ 0xA06ULL, static_cast<std::uint64_t>(epoch), i),
                                          tc.augment_probability));
      }
      const auto b = detail::assemble(train_set, bid, off, tc.crop_frames, mc.n_mels, &plans);

      ad::Graph<float> g;
      BoundParameters<float> p(g, params, true);
      auto x = g.input(b.input, false);
      auto target = g.input(b.target, false);
      auto f = forward(p, mc, x, b.layout, with_koopman, w, target);
      const double total = f.l_total.item();
      if (!detail::finite(total)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << ", batch " << batch_index << " (utterances";
        for (auto i : bid) msg << " " << train_set.manifest.records[i].utterance_id;
        msg << "); L_rec=" << f.l_rec.item();
        if (f.l_pred.valid()) msg << " L_pred=" << f.l_pred.item() << " L_eigen=" << f.l_eigen.item();
        if (with_koopman) msg << "; ridge-system condition number " << f.condition;
        throw NumericError(msg.str());
      }
      g.backward(f.l_total);
      std::vector<Matrix<float>> grads;
      grads.reserve(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) grads.push_back(p.at(i).grad());
      clip_global_norm(grads, tc.grad_clip);
      adamw_step(params, grads, opt_state, opt);

      const double wgt = static_cast<double>(bid.size());
      acc.l_rec += wgt * f.l_rec.item();
      if (with_koopman) {
        acc.l_pred += wgt * f.l_pred.item();
        acc.l_eigen += wgt * f.l_eigen.item();
      }
      acc.l_total += wgt * total;
      seen += wgt;
    }
    acc.l_rec /= seen;
    acc.l_pred /= seen;
    acc.l_eigen /= seen;
    acc.l_total /= seen;

    const LossRecord val = validation_loss(params, mc, tc, val_set, with_koopman, w);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EpochRecord tr{epoch, phase, "train", acc, secs};
    EpochRecord vr{epoch, phase, "val", val, secs};
    res.history.push_back(tr);
    res.history.push_back(vr);
    res.epochs_run = epoch;
    spdlog::info("epoch {:>3} {:<8} train L_total {:.5g} (rec {:.5g}) | val L_total {:.5g} | {:.1f}s", epoch, phase, acc.l_total,
                 acc.l_rec, val.l_total, secs);
    if (hooks.on_epoch) hooks.on_epoch(tr, vr);

    if (!detail::finite(val.l_total)) throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    if (val.l_total < res.best_value) {
      res.best_value = val.l_total;
      res.best_epoch = epoch;
      res.best_phase = phase;
      res.best = params;
      since_best = 0;
    } else if (!pretrain && ++since_best >= tc.early_stop_patience) {
      res.early_stopped = true;
      spdlog::info("early stop at epoch {} (best epoch {})", epoch, res.best_epoch);
      break;
    }
  }
  if (current_phase == "pretrain") res.pretrain_koopman_estimations = koopman_estimation_count() - koopman_before;
  if (res.best.size() == 0) res.best = params;
  res.last = std::move(params);
  return res;
}

}  // namespace dksd
