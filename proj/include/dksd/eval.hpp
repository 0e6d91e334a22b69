#pragma once

// Speaker-verification scoring: pooled embeddings, cosine scores, trial
// construction, FAR/FRR/EER, and 2-D PCA projection.

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dksd/features.hpp"
#include "dksd/model.hpp"

namespace dksd {

using Embedding = Eigen::RowVectorXd;

enum class Branch { Speaker, Content };

inline std::string branch_name(Branch b) { return b == Branch::Speaker ? "speaker" : "content"; }

inline Branch parse_branch(const std::string& s) {
  if (s == "speaker") return Branch::Speaker;
  if (s == "content") return Branch::Content;
  throw ValidationError("branch must be 'speaker' or 'content', got '" + s + "'");
}

/// Temporal mean over the rows of a latent sequence.
template <class Derived>
Embedding pool_embedding(const Eigen::MatrixBase<Derived>& z) {
  if (z.rows() < 1) throw RangeError("pool_embedding: empty sequence");
  return z.template cast<double>().colwise().mean();
}

inline double cosine_score(const Embedding& a, const Embedding& b) {
  if (a.size() != b.size()) throw ShapeError("cosine_score: embedding sizes differ");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine_score: undefined for a zero vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

struct Trial {
  std::string enroll;
  std::string test;
  bool genuine = false;
};

using TrialSet = std::vector<Trial>;

/// All same-speaker pairs plus a seeded sample of different-speaker pairs,
/// at most `impostor_ratio` per genuine pair.
inline TrialSet build_trials(const Manifest& m, double impostor_ratio = 1.0, std::uint64_t seed = 0) {
  const auto& r = m.records;
  if (m.speakers().size() < 2) throw ValidationError("build_trials: need at least 2 speakers");
  TrialSet trials;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> impostors;
  for (std::size_t i = 0; i < r.size(); ++i) {
    for (std::size_t j = i + 1; j < r.size(); ++j) {
      if (r[i].speaker_id == r[j].speaker_id) {
        trials.push_back({r[i].utterance_id, r[j].utterance_id, true});
      } else {
        impostors.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
      }
    }
  }
  if (trials.empty()) throw ValidationError("build_trials: no speaker has two utterances, no genuine pairs possible");
  const std::size_t want =
      std::min(impostors.size(), static_cast<std::size_t>(std::floor(impostor_ratio * static_cast<double>(trials.size()))));
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < want; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, impostors.size() - 1);
    std::swap(impostors[i], impostors[pick(rng)]);
  }
  impostors.resize(want);
  std::sort(impostors.begin(), impostors.end());
  for (auto [i, j] : impostors) trials.push_back({r[i].utterance_id, r[j].utterance_id, false});
  return trials;
}

inline std::string format_trials(const TrialSet& t) {
  std::string out;
  for (const auto& x : t) out += x.enroll + "\t" + x.test + "\t" + (x.genuine ? "1" : "0") + "\n";
  return out;
}

inline TrialSet parse_trials(const std::string& text, const std::string& name = "trials") {
  TrialSet t;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string a, b, lab;
    if (!std::getline(ls, a, '\t') || !std::getline(ls, b, '\t') || !std::getline(ls, lab) || (lab != "0" && lab != "1")) {
      throw ValidationError(name + ":" + std::to_string(n) + ": expected enroll<TAB>test<TAB>1|0");
    }
    t.push_back({a, b, lab == "1"});
  }
  if (t.empty()) throw ValidationError(name + ": no trials");
  return t;
}

struct EERResult {
  double eer = 0.0;        ///< percent
  double threshold = 0.0;  ///< decision threshold at the crossing
  std::vector<double> thresholds, far, frr;  ///< full sweep, fractions
  std::size_t genuine_count = 0, impostor_count = 0;
};

/// Threshold sweep over the sorted unique scores, their midpoints and one
/// point above the maximum. FAR = share of impostors >= threshold, FRR =
/// share of genuines < threshold. The EER is taken where FAR - FRR first
/// reaches zero, interpolating linearly from the previous threshold when the
/// crossing falls between two.
inline EERResult compute_eer(std::vector<double> genuine, std::vector<double> impostor) {
  if (genuine.empty() || impostor.empty()) throw ValidationError("compute_eer: need at least one genuine and one impostor score");
  std::sort(genuine.begin(), genuine.end());
  std::sort(impostor.begin(), impostor.end());
  std::vector<double> u;
  u.insert(u.end(), genuine.begin(), genuine.end());
  u.insert(u.end(), impostor.begin(), impostor.end());
  std::sort(u.begin(), u.end());
  u.erase(std::unique(u.begin(), u.end()), u.end());
  EERResult r;
  r.genuine_count = genuine.size();
  r.impostor_count = impostor.size();
  for (std::size_t i = 0; i < u.size(); ++i) {
    r.thresholds.push_back(u[i]);
    if (i + 1 < u.size()) r.thresholds.push_back(0.5 * (u[i] + u[i + 1]));
  }
  r.thresholds.push_back(u.back() + 1.0);
  const double ng = static_cast<double>(genuine.size()), ni = static_cast<double>(impostor.size());
  for (double th : r.thresholds) {
    const auto below_g = std::lower_bound(genuine.begin(), genuine.end(), th) - genuine.begin();
    const auto below_i = std::lower_bound(impostor.begin(), impostor.end(), th) - impostor.begin();
    r.far.push_back((ni - static_cast<double>(below_i)) / ni);
    r.frr.push_back(static_cast<double>(below_g) / ng);
  }
  for (std::size_t j = 0; j < r.thresholds.size(); ++j) {
    const double d = r.far[j] - r.frr[j];
    if (d > 0.0) continue;
    if (d == 0.0 || j == 0) {
      r.eer = 100.0 * r.far[j];
      r.threshold = r.thresholds[j];
    } else {
      const double dp = r.far[j - 1] - r.frr[j - 1];
      const double a = dp / (dp - d);
      r.eer = 100.0 * (r.far[j - 1] + a * (r.far[j] - r.far[j - 1]));
      r.threshold = r.thresholds[j - 1] + a * (r.thresholds[j] - r.thresholds[j - 1]);
    }
    break;
  }
  return r;
}

inline std::string format_curves(const EERResult& r) {
  std::ostringstream os;
  os.precision(10);
  os << "threshold,far,frr\n";
  for (std::size_t i = 0; i < r.thresholds.size(); ++i) os << r.thresholds[i] << "," << r.far[i] << "," << r.frr[i] << "\n";
  return os.str();
}

struct ScoredTrials {
  std::vector<double> genuine, impostor;
};

inline ScoredTrials score_trials(const TrialSet& trials, const std::map<std::string, Embedding>& emb) {
  ScoredTrials s;
  std::vector<std::string> missing;
  for (const auto& t : trials) {
    for (const auto* id : {&t.enroll, &t.test}) {
      if (!emb.count(*id)) missing.push_back(*id);
    }
  }
  if (!missing.empty()) {
    std::sort(missing.begin(), missing.end());
    missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
    std::string list;
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) list += (i ? ", " : "") + missing[i];
    throw ValidationError("trials reference utterances without embeddings: " + list);
  }
  for (const auto& t : trials) {
    const double sc = cosine_score(emb.at(t.enroll), emb.at(t.test));
    (t.genuine ? s.genuine : s.impostor).push_back(sc);
  }
  return s;
}

/// Pooled embeddings of every utterance through one branch. Utterances of
/// equal length are batched; no gradients are recorded.
template <class S>
std::vector<Embedding> extract_embeddings(const ParameterTable<S>& params, const ModelConfig& cfg,
                                          const std::vector<Matrix<float>>& features, Branch branch,
                                          Eigen::Index max_batch = 64) {
  std::vector<Embedding> out(features.size());
  std::map<Eigen::Index, std::vector<std::size_t>> by_length;
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].cols() != cfg.n_mels) {
      throw ShapeError("utterance " + std::to_string(i) + " has " + std::to_string(features[i].cols()) + " bins, model expects " +
                       std::to_string(cfg.n_mels));
    }
    by_length[features[i].rows()].push_back(i);
  }
  for (const auto& [steps, ids] : by_length) {
    for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(max_batch)) {
      const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(max_batch), ids.size() - start);
      const SequenceLayout layout{static_cast<Eigen::Index>(n), steps};
      Matrix<S> x(layout.rows(), cfg.n_mels);
      for (std::size_t b = 0; b < n; ++b) {
        const auto& f = features[ids[start + b]];
        for (Eigen::Index t = 0; t < steps; ++t) x.row(layout.row(t, static_cast<Eigen::Index>(b))) = f.row(t).template cast<S>();
      }
      ad::Graph<S> g;
      BoundParameters<S> p(g, params, false);
      auto xv = g.input(std::move(x), false);
      auto z = branch == Branch::Speaker ? encode_dynamics(p, cfg, xv, layout) : encode_content(p, cfg, xv, layout);
      const auto& zv = z.value();
      for (std::size_t b = 0; b < n; ++b) {
        Embedding e = Embedding::Zero(zv.cols());
        for (Eigen::Index t = 0; t < steps; ++t) e += zv.row(layout.row(t, static_cast<Eigen::Index>(b))).template cast<double>();
        out[ids[start + b]] = e / static_cast<double>(steps);
      }
    }
  }
  return out;
}

struct VerifyResult {
  EERResult eer;
  TrialSet trials;
};

/// Embeds every utterance of the manifest, scores the trials (built from the
/// manifest when empty) and computes the EER.
template <class S>
VerifyResult verify(const ParameterTable<S>& params, const ModelConfig& cfg, const Manifest& manifest,
                    const std::vector<Matrix<float>>& features, Branch branch, std::uint64_t seed,
                    TrialSet trials = {}, double impostor_ratio = 1.0) {
  if (features.size() != manifest.records.size()) throw ShapeError("verify: feature count does not match manifest");
  VerifyResult r;
  r.trials = trials.empty() ? build_trials(manifest, impostor_ratio, seed) : std::move(trials);
  const auto emb = extract_embeddings(params, cfg, features, branch);
  std::map<std::string, Embedding> by_id;
  for (std::size_t i = 0; i < emb.size(); ++i) by_id[manifest.records[i].utterance_id] = emb[i];
  const auto scored = score_trials(r.trials, by_id);
  if (scored.genuine.empty() || scored.impostor.empty()) throw ValidationError("verify: trial list needs genuine and impostor pairs");
  r.eer = compute_eer(scored.genuine, scored.impostor);
  return r;
}

struct Projection {
  Matrix<double> points;  ///< n x 2
  Eigen::Vector2d variance;
};

/// Projection onto the top two principal components of the centered
/// embeddings. Each component's sign makes its largest-magnitude loading
/// positive. Fails when the embeddings span fewer than two dimensions.
inline Projection project_2d(const std::vector<Embedding>& embeddings) {
  if (embeddings.size() < 3) throw ValidationError("project_2d: need at least 3 embeddings");
  const Eigen::Index n = static_cast<Eigen::Index>(embeddings.size());
  const Eigen::Index k = embeddings[0].size();
  if (k < 2) throw ValidationError("project_2d: embeddings must have at least 2 dimensions");
  Eigen::MatrixXd e(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (embeddings[static_cast<std::size_t>(i)].size() != k) throw ShapeError("project_2d: embedding sizes differ");
    e.row(i) = embeddings[static_cast<std::size_t>(i)];
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> rank_check(e);
  rank_check.setThreshold(1e-10);
  if (rank_check.rank() < 2) throw NumericError("project_2d: embeddings have rank < 2, projection is degenerate");
  const Eigen::MatrixXd c = e.rowwise() - e.colwise().mean();
  const Eigen::MatrixXd cov = c.transpose() * c / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  Projection p;
  Eigen::MatrixXd basis(k, 2);
  for (int j = 0; j < 2; ++j) {
    Eigen::VectorXd v = es.eigenvectors().col(k - 1 - j);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    basis.col(j) = v;
    p.variance[j] = std::max(0.0, es.eigenvalues()[k - 1 - j]);
  }
  p.points = c * basis;
  return p;
}

}  // namespace dksd
