#pragma once

// Multi-step Koopman module: snapshot slicing, ridge-regularized operator
// estimation, iterated forecasting, prediction and eigenvalue losses, and a
// spectrum report.
//
// Latent batches use the time-major layout of nn_ops.hpp (row t*B + b), so the
// rows for a time window [a, b) of every sequence form one contiguous block.

#include <Eigen/SVD>

#include <algorithm>
#include <atomic>
#include <complex>
#include <vector>

#include "dksd/autodiff.hpp"
#include "dksd/linalg.hpp"
#include "dksd/nn_ops.hpp"

namespace dksd {

inline constexpr double kDefaultRidge = 1e-2;

namespace detail {
inline std::atomic<long>& koopman_estimations() {
  static std::atomic<long> count{0};
  return count;
}
}  // namespace detail

/// Number of operator estimates since program start (training uses this to
/// prove the pretraining phase never touches the Koopman module).
inline long koopman_estimation_count() { return detail::koopman_estimations().load(); }

inline void check_horizon(Eigen::Index steps, int horizon) {
  if (horizon < 1 || horizon > steps - 2) {
    throw RangeError("forecast horizon M=" + std::to_string(horizon) + " outside [1, T-2] for T=" +
                     std::to_string(steps));
  }
}

template <class S>
struct PrefixSplit {
  ad::Var<S> prefix;                ///< rows [0, T-M)
  ad::Var<S> minus;                 ///< rows [0, T-M-1)
  ad::Var<S> plus;                  ///< rows [1, T-M)
  std::vector<ad::Var<S>> targets;  ///< target m (1-based) at index m-1: rows [m, T-M+m-1)
};

/// Slices a time-major latent batch. With batch 1 this is exactly the
/// per-utterance row layout.
template <class S>
PrefixSplit<S> split_prefix(ad::Var<S> z, int horizon, SequenceLayout layout) {
  if (z.rows() != layout.rows()) {
    throw ShapeError("split_prefix: latent has " + std::to_string(z.rows()) + " rows, layout expects " +
                     std::to_string(layout.rows()));
  }
  const Eigen::Index t = layout.steps, b = layout.batch;
  check_horizon(t, horizon);
  PrefixSplit<S> out;
  out.prefix = ad::slice_rows(z, 0, (t - horizon) * b);
  out.minus = ad::slice_rows(z, 0, (t - horizon - 1) * b);
  out.plus = ad::slice_rows(z, b, (t - horizon) * b);
  for (int m = 1; m <= horizon; ++m) out.targets.push_back(ad::slice_rows(z, m * b, (t - horizon + m - 1) * b));
  return out;
}

template <class S>
PrefixSplit<S> split_prefix(ad::Var<S> z, int horizon) {
  return split_prefix(z, horizon, SequenceLayout{1, z.rows()});
}

/// K = (minus^T minus + lambda I)^{-1} minus^T plus, differentiable in both
/// snapshot matrices.
template <class S>
ad::Var<S> estimate_koopman(ad::Var<S> minus, ad::Var<S> plus, double lambda) {
  if (minus.rows() != plus.rows() || minus.cols() != plus.cols()) {
    throw ShapeError("estimate_koopman: snapshot shapes differ: " + shape_string(minus.rows(), minus.cols()) +
                     " vs " + shape_string(plus.rows(), plus.cols()));
  }
  detail::koopman_estimations().fetch_add(1);
  auto mt = ad::transpose(minus);
  auto gram = ad::matmul(mt, minus);
  auto cross = ad::matmul(mt, plus);
  auto lam = minus.graph().constant(Matrix<S>::Constant(1, 1, static_cast<S>(lambda)));
  return ad::solve_regularized(gram, cross, lam);
}

/// Value-level operator estimate for analysis code.
template <class DerivedA, class DerivedB>
MatrixD estimate_koopman(const Eigen::MatrixBase<DerivedA>& minus, const Eigen::MatrixBase<DerivedB>& plus,
                         double lambda) {
  const MatrixD m = minus.template cast<double>();
  const MatrixD p = plus.template cast<double>();
  if (m.rows() != p.rows() || m.cols() != p.cols()) throw ShapeError("estimate_koopman: snapshot shapes differ");
  detail::koopman_estimations().fetch_add(1);
  return solve_regularized(MatrixD(m.transpose() * m), MatrixD(m.transpose() * p), lambda);
}

/// prediction m = prediction m-1 * K, starting from minus.
template <class S>
std::vector<ad::Var<S>> multi_step_forecast(ad::Var<S> minus, ad::Var<S> k, int horizon) {
  if (horizon < 1) throw RangeError("multi_step_forecast: horizon must be >= 1");
  if (k.rows() != k.cols() || k.rows() != minus.cols()) {
    throw ShapeError("multi_step_forecast: K " + shape_string(k.rows(), k.cols()) + " incompatible with latent width " +
                     std::to_string(minus.cols()));
  }
  std::vector<ad::Var<S>> out;
  ad::Var<S> pred = minus;
  for (int m = 0; m < horizon; ++m) {
    pred = ad::matmul(pred, k);
    out.push_back(pred);
  }
  return out;
}

/// (1/(2 n M)) sum_m ||pred_m - target_m||^2.
template <class S>
ad::Var<S> prediction_loss(const std::vector<ad::Var<S>>& predictions, const std::vector<ad::Var<S>>& targets,
                           Eigen::Index n) {
  if (predictions.size() != targets.size() || predictions.empty()) {
    throw ShapeError("prediction_loss: " + std::to_string(predictions.size()) + " predictions vs " +
                     std::to_string(targets.size()) + " targets");
  }
  if (n < 1) throw RangeError("prediction_loss: batch size must be >= 1");
  ad::Var<S> total;
  for (std::size_t m = 0; m < predictions.size(); ++m) {
    auto term = ad::squared_error(predictions[m], targets[m]);
    total = total.valid() ? ad::add(total, term) : term;
  }
  return ad::scale(total, static_cast<S>(1.0 / (2.0 * static_cast<double>(n) * static_cast<double>(predictions.size()))));
}

/// mean_i |lambda_i - 1|^2 over the eigenvalues of K.
template <class S>
ad::Var<S> eigen_loss(ad::Var<S> k) {
  auto ev = ad::eig(k);
  auto dist = ad::add(ad::sum_squares(ad::add_scalar(ev.real, S(-1))), ad::sum_squares(ev.imag));
  return ad::scale(dist, static_cast<S>(1.0 / static_cast<double>(k.rows())));
}

template <class Derived>
double eigen_loss(const Eigen::MatrixBase<Derived>& k) {
  double acc = 0.0;
  const auto ev = eig_values(k);
  for (const auto& v : ev) acc += std::norm(v - std::complex<double>(1.0, 0.0));
  return acc / static_cast<double>(ev.size());
}

struct SpectrumRow {
  std::complex<double> eigenvalue;
  double modulus = 0.0;
  double distance_to_one = 0.0;
};

/// Eigenvalues sorted by descending modulus. Ties (conjugate pairs) put the
/// positive imaginary part first.
template <class Derived>
std::vector<SpectrumRow> koopman_spectrum_report(const Eigen::MatrixBase<Derived>& k) {
  std::vector<SpectrumRow> rows;
  for (const auto& v : eig_values(k)) rows.push_back({v, std::abs(v), std::abs(v - std::complex<double>(1.0, 0.0))});
  std::stable_sort(rows.begin(), rows.end(), [](const SpectrumRow& a, const SpectrumRow& b) {
    if (a.modulus != b.modulus) return a.modulus > b.modulus;
    return a.eigenvalue.imag() > b.eigenvalue.imag();
  });
  return rows;
}

/// 2-norm condition number of G + lambda I.
inline double ridge_condition(const MatrixD& gram, double lambda) {
  MatrixD c = gram;
  c.diagonal().array() += lambda;
  Eigen::JacobiSVD<MatrixD> svd(c);
  const auto& s = svd.singularValues();
  if (s.size() == 0) return 1.0;
  const double lo = s(s.size() - 1);
  return lo > 0.0 ? s(0) / lo : std::numeric_limits<double>::infinity();
}

struct KoopmanOptions {
  int horizon = 5;
  double lambda = kDefaultRidge;
  bool shared_operator = true;       ///< one K per minibatch from stacked pairs; else one per sequence
  bool grad_through_targets = true;  ///< L_pred also differentiates its targets
};

template <class S>
struct KoopmanTerms {
  ad::Var<S> l_pred;
  ad::Var<S> l_eigen;
  std::vector<MatrixD> operators;  ///< value of every K estimated for this batch
  double condition = 0.0;          ///< worst ridge-system condition number over the batch
};

namespace detail {

inline double gram_condition(const MatrixD& minus, double lambda) {
  return ridge_condition(MatrixD(minus.transpose() * minus), lambda);
}

}  // namespace detail

/// Prediction and eigenvalue losses for one time-major latent batch.
template <class S>
KoopmanTerms<S> koopman_terms(ad::Var<S> z, SequenceLayout layout, const KoopmanOptions& opt) {
  KoopmanTerms<S> out;
  if (opt.shared_operator || layout.batch == 1) {
    auto split = split_prefix(z, opt.horizon, layout);
    auto k = estimate_koopman(split.minus, split.plus, opt.lambda);
    auto preds = multi_step_forecast(split.minus, k, opt.horizon);
    auto targets = split.targets;
    if (!opt.grad_through_targets) {
      for (auto& t : targets) t = ad::detach(t);
    }
    out.l_pred = prediction_loss(preds, targets, layout.batch);
    out.l_eigen = eigen_loss(k);
    out.operators.push_back(k.value().template cast<double>());
    out.condition = detail::gram_condition(split.minus.value().template cast<double>(), opt.lambda);
    return out;
  }
  check_horizon(layout.steps, opt.horizon);
  ad::Var<S> pred_sum, eig_sum;
  for (Eigen::Index b = 0; b < layout.batch; ++b) {
    std::vector<Eigen::Index> rows(static_cast<std::size_t>(layout.steps));
    for (Eigen::Index t = 0; t < layout.steps; ++t) rows[static_cast<std::size_t>(t)] = layout.row(t, b);
    auto zb = ad::gather_rows(z, rows);
    auto split = split_prefix(zb, opt.horizon);
    auto k = estimate_koopman(split.minus, split.plus, opt.lambda);
    auto preds = multi_step_forecast(split.minus, k, opt.horizon);
    auto targets = split.targets;
    if (!opt.grad_through_targets) {
      for (auto& t : targets) t = ad::detach(t);
    }
    // Per-sequence losses use n = 1; summing and dividing by the batch gives
    // the same normalization as the shared form.
    auto lp = prediction_loss(preds, targets, 1);
    auto le = eigen_loss(k);
    pred_sum = pred_sum.valid() ? ad::add(pred_sum, lp) : lp;
    eig_sum = eig_sum.valid() ? ad::add(eig_sum, le) : le;
    out.operators.push_back(k.value().template cast<double>());
    out.condition =
        std::max(out.condition, detail::gram_condition(split.minus.value().template cast<double>(), opt.lambda));
  }
  const S inv_b = static_cast<S>(1.0 / static_cast<double>(layout.batch));
  out.l_pred = ad::scale(pred_sum, inv_b);
  out.l_eigen = ad::scale(eig_sum, inv_b);
  return out;
}

}  // namespace dksd
