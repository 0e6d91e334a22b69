#pragma once

// Differentiable regularized solve and eigenvalue decomposition.
//
// Both primitives factorize in double precision regardless of the graph
// scalar type; results are cast back on the way out.

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <complex>
#include <limits>
#include <memory>
#include <vector>

#include "dksd/autodiff.hpp"

namespace dksd {

using ComplexScalarList = std::vector<std::complex<double>>;
using MatrixD = Matrix<double>;

/// Above this condition estimate a system is treated as singular.
inline constexpr double kMaxCondition = 1e12;
/// Eigenvalues closer than this are treated as degenerate when differentiating.
inline constexpr double kEigenGapThreshold = 1e-6;
inline constexpr double kEigenJitter = 1e-8;

namespace detail {

/// Factorization of A + lambda*I: Cholesky for symmetric positive definite
/// systems, pivoted LU otherwise.
class RegularizedFactor {
 public:
  RegularizedFactor(const MatrixD& a, double lambda) {
    if (a.rows() != a.cols()) {
      throw ShapeError("regularized solve: A must be square, got " + shape_string(a.rows(), a.cols()));
    }
    if (!(lambda >= 0.0)) throw RangeError("regularized solve: lambda must be >= 0");
    MatrixD c = a;
    c.diagonal().array() += lambda;
    const double asym = (c - c.transpose()).cwiseAbs().maxCoeff();
    const bool symmetric = asym <= 1e-10 * std::max(1.0, c.cwiseAbs().maxCoeff());
    if (symmetric) llt_.compute(c);
    double rcond = 0.0;
    if (symmetric && llt_.info() == Eigen::Success) {
      rcond = llt_.rcond();
      use_llt_ = true;
    } else {
      lu_.compute(c);
      rcond = lu_.rcond();
      // Eigen's estimate is unreliable with exactly zero pivots; the pivot
      // ratio bounds the condition number from below.
      const auto pivots = lu_.matrixLU().diagonal().cwiseAbs();
      if (pivots.size() > 0) rcond = std::min(rcond, pivots.minCoeff() / std::max(pivots.maxCoeff(), 1e-300));
      use_llt_ = false;
    }
    condition_ = rcond > 0.0 ? 1.0 / rcond : std::numeric_limits<double>::infinity();
    if (!std::isfinite(condition_) || condition_ > kMaxCondition) {
      throw SingularSystemError("singular system A + lambda*I; consider lambda > 0", condition_);
    }
  }

  MatrixD solve(const MatrixD& b) const { return use_llt_ ? MatrixD(llt_.solve(b)) : MatrixD(lu_.solve(b)); }

  /// Solves C^T x = b.
  MatrixD solve_transposed(const MatrixD& b) const {
    return use_llt_ ? MatrixD(llt_.solve(b)) : MatrixD(lu_.transpose().solve(b));
  }

  double condition() const { return condition_; }
  bool used_cholesky() const { return use_llt_; }

 private:
  Eigen::LLT<MatrixD> llt_;
  Eigen::PartialPivLU<MatrixD> lu_;
  bool use_llt_ = true;
  double condition_ = 1.0;
};

struct EigenDecomposition {
  Eigen::VectorXcd values;
  Eigen::MatrixXcd vectors;
};

inline EigenDecomposition decompose(const MatrixD& k) {
  if (k.rows() != k.cols()) throw ShapeError("eigenvalues: matrix must be square, got " + shape_string(k.rows(), k.cols()));
  if (!k.allFinite()) throw NumericError("eigenvalues: matrix has non-finite entries");
  Eigen::EigenSolver<Eigen::MatrixXd> solver;
  solver.compute(k, true);
  if (solver.info() != Eigen::Success) {
    throw NumericError("eigen-solver did not converge: real Schur iteration exceeded " +
                       std::to_string(solver.getMaxIterations()) + " iterations per eigenvalue for a " +
                       std::to_string(k.rows()) + "x" + std::to_string(k.cols()) + " matrix");
  }
  return {solver.eigenvalues(), solver.eigenvectors()};
}

inline double min_eigen_gap(const Eigen::VectorXcd& values) {
  double gap = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    for (Eigen::Index j = i + 1; j < values.size(); ++j) gap = std::min(gap, std::abs(values[i] - values[j]));
  }
  return gap;
}

inline std::atomic<long>& degenerate_spectrum_events() {
  static std::atomic<long> count{0};
  return count;
}

}  // namespace detail

/// Number of times the eigenvalue backward pass had to jitter a degenerate
/// spectrum since program start.
inline long degenerate_spectrum_events() { return detail::degenerate_spectrum_events().load(); }

/// X = (A + lambda*I)^{-1} B.
template <class DerivedA, class DerivedB>
MatrixD solve_regularized(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b, double lambda) {
  const MatrixD ad = a.template cast<double>();
  const MatrixD bd = b.template cast<double>();
  if (bd.rows() != ad.rows()) {
    throw ShapeError("regularized solve: B has " + std::to_string(bd.rows()) + " rows, A is " +
                     shape_string(ad.rows(), ad.cols()));
  }
  return detail::RegularizedFactor(ad, lambda).solve(bd);
}

/// All eigenvalues of a real square matrix (conjugate pairs adjacent).
template <class Derived>
ComplexScalarList eig_values(const Eigen::MatrixBase<Derived>& k) {
  const auto dec = detail::decompose(k.template cast<double>());
  return ComplexScalarList(dec.values.data(), dec.values.data() + dec.values.size());
}

namespace ad {

/// (A + lambda*I)^{-1} B with gradients to A, B and the 1x1 lambda.
template <class S>
Var<S> solve_regularized(Var<S> a, Var<S> b, Var<S> lambda) {
  if (lambda.rows() != 1 || lambda.cols() != 1) throw ShapeError("solve_regularized: lambda must be 1x1");
  if (b.rows() != a.rows()) {
    throw ShapeError("solve_regularized: B " + shape_string(b.rows(), b.cols()) + " incompatible with A " +
                     shape_string(a.rows(), a.cols()));
  }
  auto factor = std::make_shared<dksd::detail::RegularizedFactor>(a.value().template cast<double>(),
                                                            static_cast<double>(lambda.item()));
  MatrixD x = factor->solve(b.value().template cast<double>());
  Matrix<S> xs = x.cast<S>();
  const std::size_t ia = a.id(), ib = b.id(), il = lambda.id();
  return a.graph().record("solve_regularized", std::move(xs), {a, b, lambda},
                          [ia, ib, il, factor, x = std::move(x)](Graph<S>& g, std::size_t self) {
                            const MatrixD gx = g.grad(self).template cast<double>();
                            const MatrixD gb = factor->solve_transposed(gx);
                            g.accumulate(ib, gb.cast<S>());
                            const MatrixD gc = -gb * x.transpose();
                            g.accumulate(ia, gc.cast<S>());
                            Matrix<S> gl(1, 1);
                            gl(0, 0) = static_cast<S>(gc.trace());
                            g.accumulate(il, gl);
                          });
}

template <class S>
struct EigenOutputs {
  Var<S> real;  ///< k x 1
  Var<S> imag;  ///< k x 1
};

/// Eigenvalues of a square matrix as two k x 1 columns (real and imaginary
/// parts). Backward uses the simple-eigenvalue adjoint
///   dL/dK = Re( V^{-T} diag(conj(g)) V^T ),  g = dL/dRe + i dL/dIm,
/// after a small distinct diagonal jitter when two eigenvalues nearly coincide.
template <class S>
EigenOutputs<S> eig(Var<S> k) {
  const MatrixD kd = k.value().template cast<double>();
  auto dec = std::make_shared<dksd::detail::EigenDecomposition>(dksd::detail::decompose(kd));
  const Eigen::Index n = kd.rows();
  Matrix<S> re(n, 1), im(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    re(i, 0) = static_cast<S>(dec->values[i].real());
    im(i, 0) = static_cast<S>(dec->values[i].imag());
  }
  Graph<S>& graph = k.graph();
  const std::size_t ik = k.id();
  // Both outputs hang off one hidden node whose 2k x 1 value stacks real over
  // imaginary parts; the adjoint is applied once.
  Matrix<S> stacked(2 * n, 1);
  stacked << re, im;
  Var<S> joint = graph.record(
      "eig", std::move(stacked), {k}, [ik, dec, kd, n](Graph<S>& g, std::size_t self) {
        const MatrixD gstack = g.grad(self).template cast<double>();
        Eigen::VectorXcd gc(n);
        for (Eigen::Index i = 0; i < n; ++i) gc[i] = std::complex<double>(gstack(i, 0), gstack(n + i, 0));

        Eigen::VectorXcd values = dec->values;
        Eigen::MatrixXcd vectors = dec->vectors;
        if (n > 1 && dksd::detail::min_eigen_gap(values) < kEigenGapThreshold) {
          MatrixD jittered = kd;
          for (Eigen::Index i = 0; i < n; ++i) jittered(i, i) += kEigenJitter * static_cast<double>(i + 1);
          auto jd = dksd::detail::decompose(jittered);
          // Pair each jittered eigenvalue with its nearest original to carry the
          // incoming gradient across.
          Eigen::VectorXcd gmatched(n);
          std::vector<bool> used(static_cast<std::size_t>(n), false);
          for (Eigen::Index i = 0; i < n; ++i) {
            Eigen::Index best = -1;
            double best_d = std::numeric_limits<double>::infinity();
            for (Eigen::Index j = 0; j < n; ++j) {
              if (used[static_cast<std::size_t>(j)]) continue;
              const double d = std::abs(jd.values[i] - values[j]);
              if (d < best_d) {
                best_d = d;
                best = j;
              }
            }
            used[static_cast<std::size_t>(best)] = true;
            gmatched[i] = gc[best];
          }
          gc = gmatched;
          values = jd.values;
          vectors = jd.vectors;
          dksd::detail::degenerate_spectrum_events().fetch_add(1);
          spdlog::debug("eig backward: near-degenerate spectrum (gap < {}), applied diagonal jitter {}",
                        kEigenGapThreshold, kEigenJitter);
        }
        const Eigen::MatrixXcd left = vectors.inverse();  // rows are left eigenvectors, left * V = I
        const Eigen::MatrixXcd gk = left.transpose() * gc.conjugate().asDiagonal() * vectors.transpose();
        const MatrixD out = gk.real();
        if (!out.allFinite()) throw NumericError("eig backward: non-finite gradient (defective spectrum)");
        g.accumulate(ik, out.cast<S>());
      });
  return {slice_rows(joint, 0, n), slice_rows(joint, n, 2 * n)};
}

}  // namespace ad
}  // namespace dksd
