#pragma once

// Two-branch sequence autoencoder: a dynamics encoder whose latent is
// regularized by the Koopman module, an instance-normalized content encoder,
// and a decoder reconstructing the spectrogram from both latents.
//
// All sequence tensors are time-major batches (see nn_ops.hpp).

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "dksd/autodiff.hpp"
#include "dksd/koopman.hpp"
#include "dksd/nn_ops.hpp"

namespace dksd {

/// Parameter count quoted for the reference implementation of this model.
inline constexpr long kReferenceParameterCount = 3'500'000;

struct LossWeights {
  double rec = 1.0;
  double pred = 0.1;
  double eigen = 5.0;
};

struct ModelConfig {
  int n_mels = 80;
  int k = 64;
  std::vector<int> content_lstm_widths{256, 128, 128, 64};
  std::vector<int> content_residual_widths{64, 64};
  std::vector<int> dynamics_lstm_widths{256, 128};
  std::vector<int> dynamics_residual_widths{128, 128, 64, 64, 64, 64, 64};
  std::vector<int> decoder_residual_widths{64, 64, 128};
  std::vector<int> decoder_lstm_widths{128};
  int M = 5;
  double lambda = kDefaultRidge;
  LossWeights weights{};
  double epsilon_in = 1e-5;
  bool shared_operator = true;
  bool grad_through_targets = true;

  /// Small widths for gradient checks: n_mels 6, k 4.
  static ModelConfig tiny() {
    ModelConfig c;
    c.n_mels = 6;
    c.k = 4;
    c.content_lstm_widths = {5, 4};
    c.content_residual_widths = {4};
    c.dynamics_lstm_widths = {5};
    c.dynamics_residual_widths = {5, 4};
    c.decoder_residual_widths = {3, 8};
    c.decoder_lstm_widths = {5};
    c.M = 3;
    return c;
  }

  KoopmanOptions koopman() const { return {M, lambda, shared_operator, grad_through_targets}; }

  void validate() const {
    auto positive = [](const std::vector<int>& w, const char* what, bool allow_empty) {
      if (w.empty() && !allow_empty) throw ConfigError(std::string(what) + " must not be empty");
      for (int x : w) {
        if (x < 1) throw ConfigError(std::string(what) + " contains non-positive width " + std::to_string(x));
      }
    };
    if (n_mels < 2) throw ConfigError("model.n_mels must be >= 2");
    if (k < 1) throw ConfigError("model.k must be >= 1");
    positive(content_lstm_widths, "model.content_lstm_widths", false);
    positive(content_residual_widths, "model.content_residual_widths", true);
    positive(dynamics_lstm_widths, "model.dynamics_lstm_widths", false);
    positive(dynamics_residual_widths, "model.dynamics_residual_widths", true);
    positive(decoder_residual_widths, "model.decoder_residual_widths", true);
    positive(decoder_lstm_widths, "model.decoder_lstm_widths", false);
    for (int w : content_lstm_widths) {
      if (w < 2) throw ConfigError("model.content_lstm_widths: instance norm needs width >= 2");
    }
    const int dyn_out = dynamics_residual_widths.empty() ? dynamics_lstm_widths.back() : dynamics_residual_widths.back();
    const int con_out = content_residual_widths.empty() ? content_lstm_widths.back() : content_residual_widths.back();
    if (dyn_out != k) throw ConfigError("dynamics encoder output width " + std::to_string(dyn_out) + " != k=" + std::to_string(k));
    if (con_out != k) throw ConfigError("content encoder output width " + std::to_string(con_out) + " != k=" + std::to_string(k));
    if (M < 1) throw ConfigError("model.M must be >= 1");
    if (!(lambda >= 0.0)) throw ConfigError("model.lambda must be >= 0");
    if (weights.rec < 0 || weights.pred < 0 || weights.eigen < 0) throw ConfigError("loss weights must be >= 0");
    if (!(epsilon_in > 0.0)) throw ConfigError("model.epsilon_in must be > 0");
  }
};

/// Ordered, named parameter store.
template <class S>
class ParameterTable {
 public:
  void add(std::string name, Matrix<S> value, bool is_bias) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    index_[name] = names_.size();
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    bias_.push_back(is_bias);
  }

  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Matrix<S>& value(std::size_t i) { return values_[i]; }
  const Matrix<S>& value(std::size_t i) const { return values_[i]; }
  bool is_bias(std::size_t i) const { return bias_[i]; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  Matrix<S>& operator[](const std::string& name) { return values_[index(name)]; }
  const Matrix<S>& operator[](const std::string& name) const { return values_[index(name)]; }

  long count() const {
    long n = 0;
    for (const auto& v : values_) n += static_cast<long>(v.size());
    return n;
  }

  template <class T>
  ParameterTable<T> cast() const {
    ParameterTable<T> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], values_[i].template cast<T>(), bias_[i]);
    return out;
  }

  bool operator==(const ParameterTable& o) const {
    if (names_ != o.names_) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (values_[i].rows() != o.values_[i].rows() || values_[i].cols() != o.values_[i].cols() ||
          values_[i] != o.values_[i]) {
        return false;
      }
    }
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Matrix<S>> values_;
  std::vector<bool> bias_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Parameters placed into one graph.
template <class S>
class BoundParameters {
 public:
  BoundParameters(ad::Graph<S>& graph, const ParameterTable<S>& table, bool requires_grad = true) : table_(&table) {
    for (std::size_t i = 0; i < table.size(); ++i) vars_.push_back(graph.input(table.value(i), requires_grad, table.name(i)));
  }
  ad::Var<S> operator[](const std::string& name) const { return vars_[table_->index(name)]; }
  ad::Var<S> at(std::size_t i) const { return vars_[i]; }
  bool contains(const std::string& name) const { return table_->contains(name); }
  std::size_t size() const { return vars_.size(); }

 private:
  const ParameterTable<S>* table_;
  std::vector<ad::Var<S>> vars_;
};

namespace detail {

struct ParamShape {
  std::string name;
  Eigen::Index rows;
  Eigen::Index cols;
  bool bias;
  Eigen::Index fan_in;
  Eigen::Index forget_offset = -1;  ///< LSTM bias: forget gate columns start here
};

inline void lstm_shapes(std::vector<ParamShape>& out, const std::string& prefix, int in, int hidden) {
  out.push_back({prefix + ".w_ih", in, 4 * hidden, false, in});
  out.push_back({prefix + ".w_hh", hidden, 4 * hidden, false, hidden});
  out.push_back({prefix + ".b", 1, 4 * hidden, true, in, hidden});
}

inline void residual_shapes(std::vector<ParamShape>& out, const std::string& prefix, int in, int width) {
  out.push_back({prefix + ".w", in, width, false, in});
  out.push_back({prefix + ".b", 1, width, true, in});
  if (in != width) out.push_back({prefix + ".proj", in, width, false, in});
}

inline std::vector<ParamShape> parameter_shapes(const ModelConfig& c) {
  std::vector<ParamShape> s;
  int in = c.n_mels;
  for (std::size_t i = 0; i < c.dynamics_lstm_widths.size(); ++i) {
    lstm_shapes(s, "dyn.lstm" + std::to_string(i), in, c.dynamics_lstm_widths[i]);
    in = c.dynamics_lstm_widths[i];
  }
  for (std::size_t i = 0; i < c.dynamics_residual_widths.size(); ++i) {
    residual_shapes(s, "dyn.res" + std::to_string(i), in, c.dynamics_residual_widths[i]);
    in = c.dynamics_residual_widths[i];
  }
  in = c.n_mels;
  for (std::size_t i = 0; i < c.content_lstm_widths.size(); ++i) {
    lstm_shapes(s, "content.lstm" + std::to_string(i), in, c.content_lstm_widths[i]);
    in = c.content_lstm_widths[i];
  }
  for (std::size_t i = 0; i < c.content_residual_widths.size(); ++i) {
    residual_shapes(s, "content.res" + std::to_string(i), in, c.content_residual_widths[i]);
    in = c.content_residual_widths[i];
  }
  in = 2 * c.k;
  for (std::size_t i = 0; i < c.decoder_residual_widths.size(); ++i) {
    residual_shapes(s, "dec.res" + std::to_string(i), in, c.decoder_residual_widths[i]);
    in = c.decoder_residual_widths[i];
  }
  for (std::size_t i = 0; i < c.decoder_lstm_widths.size(); ++i) {
    lstm_shapes(s, "dec.lstm" + std::to_string(i), in, c.decoder_lstm_widths[i]);
    in = c.decoder_lstm_widths[i];
  }
  s.push_back({"dec.out.w", in, c.n_mels, false, in});
  s.push_back({"dec.out.b", 1, c.n_mels, true, in});
  return s;
}

}  // namespace detail

/// Total scalar parameter count implied by a configuration.
inline long parameter_count(const ModelConfig& config) {
  config.validate();
  long n = 0;
  for (const auto& p : detail::parameter_shapes(config)) n += static_cast<long>(p.rows * p.cols);
  return n;
}

/// Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero except
/// the LSTM forget gate (+1).
template <class S>
ParameterTable<S> build_model(const ModelConfig& config, std::uint64_t seed, bool log_count = true) {
  config.validate();
  std::mt19937_64 rng(seed);
  ParameterTable<S> table;
  for (const auto& p : detail::parameter_shapes(config)) {
    Matrix<S> m = Matrix<S>::Zero(p.rows, p.cols);
    if (p.bias) {
      if (p.forget_offset >= 0) m.middleCols(p.forget_offset, p.forget_offset).setConstant(S(1));
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(p.fan_in));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(u(rng));
    }
    table.add(p.name, std::move(m), p.bias);
  }
  if (log_count) {
    const long n = table.count();
    spdlog::info("model parameters: {} ({:.2f}M; reference figure {:.1f}M, ratio {:.2f})", n, n / 1e6,
                 kReferenceParameterCount / 1e6, static_cast<double>(n) / static_cast<double>(kReferenceParameterCount));
  }
  return table;
}

namespace ad {

/// skip(x) + tanh(x W + b); skip is x for equal widths, x P otherwise.
template <class S>
Var<S> residual_block(Var<S> x, Var<S> w, Var<S> b, Var<S> proj = {}) {
  if (w.rows() != x.cols()) {
    throw ConfigError("residual block: weight expects width " + std::to_string(w.rows()) + ", input has " +
                      std::to_string(x.cols()));
  }
  auto h = tanh(add_row(matmul(x, w), b));
  if (x.cols() == w.cols()) return add(x, h);
  if (!proj.valid()) throw ConfigError("residual block: width change " + std::to_string(x.cols()) + "->" +
                                       std::to_string(w.cols()) + " needs a skip projection");
  return add(matmul(x, proj), h);
}

}  // namespace ad

namespace detail {

template <class S>
ad::Var<S> residual_chain(const BoundParameters<S>& p, const std::string& prefix, std::size_t n, ad::Var<S> x) {
  for (std::size_t i = 0; i < n; ++i) {
    const std::string base = prefix + std::to_string(i);
    ad::Var<S> proj = p.contains(base + ".proj") ? p[base + ".proj"] : ad::Var<S>{};
    x = ad::residual_block(x, p[base + ".w"], p[base + ".b"], proj);
  }
  return x;
}

template <class S>
ad::Var<S> lstm_layer(const BoundParameters<S>& p, const std::string& base, ad::Var<S> x, SequenceLayout layout) {
  return ad::lstm(x, p[base + ".w_ih"], p[base + ".w_hh"], p[base + ".b"], layout);
}

inline void check_input(Eigen::Index rows, Eigen::Index cols, const ModelConfig& c, SequenceLayout layout) {
  if (cols != c.n_mels || rows != layout.rows()) {
    throw ShapeError("model input " + shape_string(rows, cols) + " does not match " + std::to_string(layout.steps) +
                     " steps x " + std::to_string(layout.batch) + " sequences x " + std::to_string(c.n_mels) + " bins");
  }
}

}  // namespace detail

/// LSTM stack then residual chain; output (T*B) x k.
template <class S>
ad::Var<S> encode_dynamics(const BoundParameters<S>& p, const ModelConfig& c, ad::Var<S> x, SequenceLayout layout) {
  detail::check_input(x.rows(), x.cols(), c, layout);
  for (std::size_t i = 0; i < c.dynamics_lstm_widths.size(); ++i) {
    x = detail::lstm_layer(p, "dyn.lstm" + std::to_string(i), x, layout);
  }
  return detail::residual_chain(p, "dyn.res", c.dynamics_residual_widths.size(), x);
}

/// [LSTM + instance norm] stack then residual chain; output (T*B) x k.
template <class S>
ad::Var<S> encode_content(const BoundParameters<S>& p, const ModelConfig& c, ad::Var<S> x, SequenceLayout layout) {
  detail::check_input(x.rows(), x.cols(), c, layout);
  for (std::size_t i = 0; i < c.content_lstm_widths.size(); ++i) {
    x = detail::lstm_layer(p, "content.lstm" + std::to_string(i), x, layout);
    x = ad::instance_norm(x, static_cast<S>(c.epsilon_in));
  }
  return detail::residual_chain(p, "content.res", c.content_residual_widths.size(), x);
}

/// concat(Z_s, Z_c) -> residual chain -> LSTM stack -> linear to n_mels.
template <class S>
ad::Var<S> decode(const BoundParameters<S>& p, const ModelConfig& c, ad::Var<S> zs, ad::Var<S> zc,
                  SequenceLayout layout) {
  if (zs.rows() != zc.rows()) {
    throw ShapeError("decode: latent lengths differ (" + std::to_string(zs.rows()) + " vs " + std::to_string(zc.rows()) + ")");
  }
  if (zs.rows() != layout.rows()) throw ShapeError("decode: latent rows do not match layout");
  if (zs.cols() != c.k || zc.cols() != c.k) throw ShapeError("decode: latent widths must equal k");
  auto h = detail::residual_chain(p, "dec.res", c.decoder_residual_widths.size(), ad::concat_cols<S>({zs, zc}));
  for (std::size_t i = 0; i < c.decoder_lstm_widths.size(); ++i) {
    h = detail::lstm_layer(p, "dec.lstm" + std::to_string(i), h, layout);
  }
  return ad::add_row(ad::matmul(h, p["dec.out.w"]), p["dec.out.b"]);
}

/// (1/N) sum_i ||Xhat_i - X_i||^2.
template <class S>
ad::Var<S> reconstruction_loss(ad::Var<S> xhat, ad::Var<S> x, Eigen::Index n) {
  if (n < 1) throw RangeError("reconstruction_loss: N must be >= 1");
  return ad::scale(ad::squared_error(xhat, x), static_cast<S>(1.0 / static_cast<double>(n)));
}

inline double total_loss(double l_rec, double l_pred, double l_eigen, const LossWeights& w) {
  if (w.rec < 0 || w.pred < 0 || w.eigen < 0) throw RangeError("loss weights must be >= 0");
  return w.rec * l_rec + w.pred * l_pred + w.eigen * l_eigen;
}

template <class S>
ad::Var<S> total_loss(ad::Var<S> l_rec, ad::Var<S> l_pred, ad::Var<S> l_eigen, const LossWeights& w) {
  if (w.rec < 0 || w.pred < 0 || w.eigen < 0) throw RangeError("loss weights must be >= 0");
  auto t = ad::scale(l_rec, static_cast<S>(w.rec));
  if (l_pred.valid()) t = ad::add(t, ad::scale(l_pred, static_cast<S>(w.pred)));
  if (l_eigen.valid()) t = ad::add(t, ad::scale(l_eigen, static_cast<S>(w.eigen)));
  return t;
}

/// Which terms enter the training objective.
enum class Objective { Total, PredOnly, RecOnly };

inline LossWeights objective_weights(const LossWeights& base, Objective o) {
  LossWeights w = base;
  if (o == Objective::PredOnly) w.eigen = 0.0;
  if (o == Objective::RecOnly) w.pred = w.eigen = 0.0;
  return w;
}

template <class S>
struct ForwardPass {
  ad::Var<S> zs, zc, xhat;
  ad::Var<S> l_rec, l_pred, l_eigen, l_total;  ///< l_pred/l_eigen invalid when the Koopman module is skipped
  std::vector<MatrixD> operators;
  double condition = 0.0;
};

/// Full forward pass and losses. With `with_koopman` false only L_rec is
/// formed and no operator is estimated. The reconstruction target defaults
/// to the input; training passes the clean spectrogram when the input is
/// masked.
template <class S>
ForwardPass<S> forward(const BoundParameters<S>& p, const ModelConfig& c, ad::Var<S> x, SequenceLayout layout,
                       bool with_koopman, const LossWeights& weights, ad::Var<S> target = {}) {
  ForwardPass<S> f;
  f.zs = encode_dynamics(p, c, x, layout);
  f.zc = encode_content(p, c, x, layout);
  f.xhat = decode(p, c, f.zs, f.zc, layout);
  f.l_rec = reconstruction_loss(f.xhat, target.valid() ? target : x, layout.batch);
  if (with_koopman) {
    auto terms = koopman_terms(f.zs, layout, c.koopman());
    f.l_pred = terms.l_pred;
    f.l_eigen = terms.l_eigen;
    f.operators = std::move(terms.operators);
    f.condition = terms.condition;
  }
  f.l_total = total_loss(f.l_rec, f.l_pred, f.l_eigen, weights);
  return f;
}

}  // namespace dksd
