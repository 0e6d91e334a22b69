#pragma once

// Fused sequence primitives: LSTM over a whole sequence batch and per-row
// instance normalization.
//
// Sequence batches are stored time-major: row t*batch + b holds time step t
// of sequence b, so each time step is a contiguous block of `batch` rows.

#include <Eigen/Dense>

#include <cmath>
#include <memory>

#include "dksd/autodiff.hpp"

namespace dksd {

struct SequenceLayout {
  Eigen::Index batch = 1;
  Eigen::Index steps = 1;

  Eigen::Index rows() const { return batch * steps; }
  Eigen::Index row(Eigen::Index step, Eigen::Index seq) const { return step * batch + seq; }
};

namespace ad {

namespace detail {

template <class S>
struct LstmCache {
  Matrix<S> gates;   // (T*B) x 4H, post-activation i, f, g, o
  Matrix<S> cells;   // (T*B) x H
  Matrix<S> tanh_c;  // (T*B) x H
};

}  // namespace detail

/// Single-layer unidirectional LSTM with zero initial state.
///   x: (T*B) x in, w_ih: in x 4H, w_hh: H x 4H, bias: 1 x 4H; gate order i, f, g, o.
/// Returns the hidden sequence, (T*B) x H.
template <class S>
Var<S> lstm(Var<S> x, Var<S> w_ih, Var<S> w_hh, Var<S> bias, SequenceLayout layout) {
  const Eigen::Index hidden = w_hh.rows();
  const Eigen::Index b = layout.batch;
  const Eigen::Index steps = layout.steps;
  if (x.rows() != layout.rows()) {
    throw ShapeError("lstm: input has " + std::to_string(x.rows()) + " rows, layout expects " +
                     std::to_string(layout.rows()));
  }
  if (w_ih.rows() != x.cols() || w_ih.cols() != 4 * hidden || w_hh.cols() != 4 * hidden ||
      bias.rows() != 1 || bias.cols() != 4 * hidden) {
    throw ShapeError("lstm: weight shapes incompatible with input width " + std::to_string(x.cols()) +
                     " and hidden width " + std::to_string(hidden));
  }

  auto cache = std::make_shared<detail::LstmCache<S>>();
  Matrix<S> pre = x.value() * w_ih.value();
  pre.rowwise() += bias.value().row(0);
  cache->gates.resize(layout.rows(), 4 * hidden);
  cache->cells.resize(layout.rows(), hidden);
  cache->tanh_c.resize(layout.rows(), hidden);
  Matrix<S> h_out(layout.rows(), hidden);

  Matrix<S> h = Matrix<S>::Zero(b, hidden);
  Matrix<S> c = Matrix<S>::Zero(b, hidden);
  Matrix<S> z(b, 4 * hidden);
  const auto& whh = w_hh.value();
  for (Eigen::Index t = 0; t < steps; ++t) {
    const Eigen::Index r0 = t * b;
    z = pre.middleRows(r0, b);
    if (t > 0) z.noalias() += h * whh;
    auto gi = z.leftCols(hidden).array();
    auto gf = z.middleCols(hidden, hidden).array();
    auto gg = z.middleCols(2 * hidden, hidden).array();
    auto go = z.rightCols(hidden).array();
    gi = S(1) / (S(1) + (-gi).exp());
    gf = S(1) / (S(1) + (-gf).exp());
    gg = gg.tanh();
    go = S(1) / (S(1) + (-go).exp());
    c = (gf * c.array() + gi * gg).matrix();
    auto tc = c.array().tanh();
    cache->tanh_c.middleRows(r0, b) = tc.matrix();
    h = (go * tc).matrix();
    cache->gates.middleRows(r0, b) = z;
    cache->cells.middleRows(r0, b) = c;
    h_out.middleRows(r0, b) = h;
  }

  const std::size_t ix = x.id(), iw = w_ih.id(), iu = w_hh.id(), ib = bias.id();
  return x.graph().record(
      "lstm", std::move(h_out), {x, w_ih, w_hh, bias},
      [ix, iw, iu, ib, cache, layout, hidden](Graph<S>& g, std::size_t self) {
        const Eigen::Index bsz = layout.batch;
        const Eigen::Index steps = layout.steps;
        const Matrix<S> dh_all = g.grad(self);
        const auto& hs = g.value(self);
        const auto& whh = g.value(iu);
        Matrix<S> dz_all(layout.rows(), 4 * hidden);
        Matrix<S> dh_next = Matrix<S>::Zero(bsz, hidden);
        Matrix<S> dc_next = Matrix<S>::Zero(bsz, hidden);
        for (Eigen::Index t = steps; t-- > 0;) {
          const Eigen::Index r0 = t * bsz;
          const auto gates = cache->gates.middleRows(r0, bsz);
          const auto i = gates.leftCols(hidden).array();
          const auto f = gates.middleCols(hidden, hidden).array();
          const auto gg = gates.middleCols(2 * hidden, hidden).array();
          const auto o = gates.rightCols(hidden).array();
          const auto tc = cache->tanh_c.middleRows(r0, bsz).array();
          const Matrix<S> dh = dh_all.middleRows(r0, bsz) + dh_next;
          const auto dha = dh.array();
          const Matrix<S> dc = (dha * o * (S(1) - tc.square()) + dc_next.array()).matrix();
          const auto dca = dc.array();
          auto dz = dz_all.middleRows(r0, bsz);
          dz.leftCols(hidden) = (dca * gg * i * (S(1) - i)).matrix();
          if (t > 0) {
            const auto c_prev = cache->cells.middleRows(r0 - bsz, bsz).array();
            dz.middleCols(hidden, hidden) = (dca * c_prev * f * (S(1) - f)).matrix();
          } else {
            dz.middleCols(hidden, hidden).setZero();
          }
          dz.middleCols(2 * hidden, hidden) = (dca * i * (S(1) - gg.square())).matrix();
          dz.rightCols(hidden) = (dha * tc * o * (S(1) - o)).matrix();
          dc_next = (dca * f).matrix();
          dh_next.noalias() = dz * whh.transpose();
        }
        if (g.requires_grad(ix)) g.accumulate(ix, dz_all * g.value(iw).transpose());
        if (g.requires_grad(iw)) g.accumulate(iw, g.value(ix).transpose() * dz_all);
        if (g.requires_grad(iu) && steps > 1) {
          const Eigen::Index tail = (steps - 1) * bsz;
          g.accumulate(iu, hs.topRows(tail).transpose() * dz_all.bottomRows(tail));
        }
        if (g.requires_grad(ib)) g.accumulate(ib, dz_all.colwise().sum());
      });
}

/// Per-row z-scoring across columns without affine parameters:
///   y = (x - mean) / sqrt(var + eps), population variance.
template <class S>
Var<S> instance_norm(Var<S> x, S eps) {
  if (x.cols() < 2) throw ShapeError("instance_norm: need at least 2 features, got " + std::to_string(x.cols()));
  if (!(eps > S(0))) throw RangeError("instance_norm: epsilon must be > 0");
  const Eigen::Index n = x.cols();
  const auto& xv = x.value();
  Eigen::Matrix<S, Eigen::Dynamic, 1> mu = xv.rowwise().mean();
  Matrix<S> centered = xv.colwise() - mu;
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_sigma =
      ((centered.array().square().rowwise().sum() / static_cast<S>(n)) + eps).rsqrt().matrix();
  Matrix<S> y = inv_sigma.asDiagonal() * centered;
  const std::size_t ix = x.id();
  return x.graph().record("instance_norm", std::move(y), {x},
                          [ix, inv_sigma, n](Graph<S>& g, std::size_t self) {
                            const auto& yv = g.value(self);
                            const Matrix<S> dy = g.grad(self);
                            const auto mean_dy = dy.rowwise().mean();
                            const Eigen::Matrix<S, Eigen::Dynamic, 1> mean_dyy =
                                dy.cwiseProduct(yv).rowwise().sum() / static_cast<S>(n);
                            Matrix<S> dx = dy.colwise() - mean_dy;
                            dx -= mean_dyy.asDiagonal() * yv;
                            g.accumulate(ix, inv_sigma.asDiagonal() * dx);
                          });
}

}  // namespace ad
}  // namespace dksd
