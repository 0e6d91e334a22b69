// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 when any
// criterion fails. The desk-scale criteria train real models (tens of
// minutes on one core); --skip-desk runs only the fast checks.

#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <sstream>

#include "dksd/dksd.hpp"
#include "support/eer_oracle.hpp"
#include "support/fd_oracle.hpp"
#include "support/linear_oracle.hpp"

namespace {

using namespace dksd;
using Clock = std::chrono::steady_clock;

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
  std::printf("%s  %-34s %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------- Koopman core

void ridge_oracle_check() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  const double lambdas[] = {0.0, 1e-3, 1e-1, 1.0};
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng() % 8);
    const Eigen::Index rows = k + 1 + static_cast<Eigen::Index>(rng() % (32 - k));
    const double lambda = lambdas[trial % 4];
    const auto minus = testing::random_matrix(rng, rows, k);
    const auto plus = testing::random_matrix(rng, rows, k);
    const MatrixD expect = testing::ridge_oracle(minus, plus, lambda);
    worst = std::max(worst, (estimate_koopman(minus, plus, lambda) - expect).norm() / expect.norm());
  }
  const double secs = seconds_since(t0);
  report("ridge-operator oracle", worst <= 1e-6 && secs < 5.0, fmt("200 pairs, worst relative error %.2e, %.2f s", worst, secs));
}

MatrixD stable_matrix(std::mt19937_64& rng, Eigen::Index k, double radius) {
  MatrixD a = testing::random_matrix(rng, k, k);
  double rho = 0.0;
  for (const auto& v : eig_values(a)) rho = std::max(rho, std::abs(v));
  return a * (radius / rho);
}

void exact_linear_check() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(102);
  const MatrixD a = stable_matrix(rng, 4, 0.95);
  MatrixD z(64, 4);
  z.row(0) = testing::random_matrix(rng, 1, 4);
  for (Eigen::Index t = 1; t < 64; ++t) z.row(t) = z.row(t - 1) * a;
  double worst_k = 0.0, worst_loss = 0.0;
  for (int m = 1; m <= 10; ++m) {
    ad::Graph<double> g;
    auto terms = koopman_terms(g.input(z), SequenceLayout{1, 64}, KoopmanOptions{m, 0.0, true, true});
    worst_k = std::max(worst_k, (terms.operators[0] - a).cwiseAbs().maxCoeff());
    worst_loss = std::max(worst_loss, terms.l_pred.item());
  }
  const double secs = seconds_since(t0);
  report("exact-linear recovery", worst_k <= 1e-5 && worst_loss < 1e-8 && secs < 5.0,
         fmt("M=1..10, max |K-A| %.2e, max L_pred %.2e, %.3f s", worst_k, worst_loss, secs));
}

void eigen_loss_check() {
  double worst = std::abs(eigen_loss(MatrixD::Identity(4, 4)));
  worst = std::max(worst, std::abs(eigen_loss(MatrixD::Zero(4, 4)) - 1.0));
  for (double th : {0.1, 0.5, 1.0}) {
    MatrixD r(2, 2);
    r << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
    worst = std::max(worst, std::abs(eigen_loss(r) - (2.0 - 2.0 * std::cos(th))));
  }
  report("eigen-loss closed forms", worst <= 1e-6, fmt("identity, zero, rotations 0.1/0.5/1.0: max error %.2e", worst));
}

void slicing_check() {
  MatrixD z(10, 2);
  for (int t = 0; t < 10; ++t) z.row(t) << t, 100 + t;
  ad::Graph<double> g;
  auto s = split_prefix(g.input(z, false), 5);
  bool ok = s.prefix.rows() == 5 && s.minus.rows() == 4 && s.plus.rows() == 4 && s.targets.size() == 5;
  for (const auto& t : s.targets) ok = ok && t.rows() == 4 && t.cols() == 2;
  // prefix [0,5), minus [0,4), plus [1,5), target m: [m, m+4)
  for (int r = 0; ok && r < 4; ++r) {
    ok = ok && s.minus.value()(r, 0) == r && s.plus.value()(r, 0) == r + 1 && s.minus.value()(r, 1) == 100 + r;
    for (int m = 1; m <= 5; ++m) ok = ok && s.targets[static_cast<std::size_t>(m - 1)].value()(r, 0) == r + m;
  }
  for (int r = 0; ok && r < 5; ++r) ok = ok && s.prefix.value()(r, 0) == r;
  report("slicing contract", ok, "T=10, M=5: prefix 5 rows, snapshots 4 rows, 5 targets of 4 rows, contents replayed");
}

// ---------------------------------------------------------------- model

void instance_norm_check() {
  std::mt19937_64 rng(103);
  const double eps = 1e-5;
  double worst_mean = 0.0, worst_var_gap = 0.0;
  bool var_ok = true;
  for (int trial = 0; trial < 20; ++trial) {
    const MatrixD x = testing::random_matrix(rng, 16, 80, -3.0, 5.0);
    ad::Graph<double> g;
    const MatrixD y = ad::instance_norm(g.input(x), eps).value();
    for (Eigen::Index t = 0; t < y.rows(); ++t) {
      const double mu = y.row(t).mean();
      const double var = (y.row(t).array() - mu).square().mean();
      const double in_mu = x.row(t).mean();
      const double in_var = (x.row(t).array() - in_mu).square().mean();
      const double expected = in_var / (in_var + eps);  // the epsilon bias
      worst_mean = std::max(worst_mean, std::abs(mu));
      worst_var_gap = std::max(worst_var_gap, 1.0 - var);
      var_ok = var_ok && var >= 0.999 * expected && var <= 1.0;
    }
  }
  MatrixD c = MatrixD::Constant(3, 5, 7.5);
  ad::Graph<double> g;
  const double const_max = ad::instance_norm(g.input(c), eps).value().cwiseAbs().maxCoeff();
  report("instance-norm invariants", worst_mean < 1e-6 && var_ok && const_max < 1e-6,
         fmt("max |row mean| %.1e, max 1-var %.1e, constant rows -> %.1e", worst_mean, worst_var_gap, const_max));
}

void gradient_suite_check() {
  const auto t0 = Clock::now();
  const ModelConfig c = ModelConfig::tiny();
  const SequenceLayout layout{2, 12};
  std::mt19937_64 rng(104);
  const MatrixD x = testing::random_matrix(rng, layout.rows(), c.n_mels, -2.0, 2.0);
  auto params = build_model<double>(c, 5, false);
  for (std::size_t i = 0; i < params.size(); ++i) {
    params.value(i) += testing::random_matrix(rng, params.value(i).rows(), params.value(i).cols(), -0.2, 0.2);
  }
  const LossWeights w{1.0, 0.1, 5.0};
  auto losses = [&](const ParameterTable<double>& t) {
    ad::Graph<double> g;
    BoundParameters<double> p(g, t, false);
    auto f = forward(p, c, g.input(x, false), layout, true, w);
    return std::array<double, 4>{f.l_rec.item(), f.l_pred.item(), f.l_eigen.item(), f.l_total.item()};
  };
  std::array<std::vector<MatrixD>, 4> analytic;
  for (int which = 0; which < 4; ++which) {
    ad::Graph<double> g;
    BoundParameters<double> p(g, params, true);
    auto f = forward(p, c, g.input(x, false), layout, true, w);
    const ad::Var<double> out[] = {f.l_rec, f.l_pred, f.l_eigen, f.l_total};
    g.backward(out[which]);
    for (std::size_t i = 0; i < params.size(); ++i) analytic[static_cast<std::size_t>(which)].push_back(p.at(i).grad());
  }
  const char* names[] = {"L_rec", "L_pred", "L_eigen", "L_total"};
  std::array<double, 4> worst{};
  double worst_abs = 0.0;
  std::string first_failure;
  const double h = 1e-5;
  long entries = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::array<MatrixD, 4> numeric;
    for (auto& n : numeric) n.resize(params.value(i).rows(), params.value(i).cols());
    for (Eigen::Index e = 0; e < params.value(i).size(); ++e, ++entries) {
      const double saved = params.value(i).data()[e];
      params.value(i).data()[e] = saved + h;
      const auto up = losses(params);
      params.value(i).data()[e] = saved - h;
      const auto down = losses(params);
      params.value(i).data()[e] = saved;
      for (int k = 0; k < 4; ++k) numeric[static_cast<std::size_t>(k)].data()[e] = (up[k] - down[k]) / (2 * h);
    }
    for (int k = 0; k < 4; ++k) {
      const auto chk = testing::compare_gradients(analytic[static_cast<std::size_t>(k)][i], numeric[static_cast<std::size_t>(k)], 1e-3, 1e-6);
      worst[static_cast<std::size_t>(k)] = std::max(worst[static_cast<std::size_t>(k)], chk.worst_relative);
      worst_abs = std::max(worst_abs, (analytic[static_cast<std::size_t>(k)][i] - numeric[static_cast<std::size_t>(k)]).cwiseAbs().maxCoeff());
      if (!chk.ok && first_failure.empty()) first_failure = std::string(names[k]) + " wrt " + params.name(i) + ": " + chk.detail;
    }
  }
  const double secs = seconds_since(t0);
  report("gradient suite", first_failure.empty() && secs < 60.0,
         fmt("%ld parameters x 4 losses, max |analytic-numeric| %.1e, worst relative above the 1e-6 floor rec %.1e pred %.1e eigen %.1e "
             "total %.1e, %.1f s%s",
             entries, worst_abs, worst[0], worst[1], worst[2], worst[3], secs, first_failure.empty() ? "" : ("; " + first_failure).c_str()));
}

void parameter_count_check() {
  std::ostringstream log;
  auto previous = spdlog::default_logger();
  spdlog::set_default_logger(std::make_shared<spdlog::logger>("capture", std::make_shared<spdlog::sinks::ostream_sink_mt>(log)));
  spdlog::set_level(spdlog::level::info);
  const auto p = build_model<float>(ModelConfig{}, 0);
  spdlog::set_default_logger(previous);
  const std::string text = log.str();
  const std::string count = std::to_string(p.count());
  const bool logged = text.find(count) != std::string::npos && text.find("3.5M") != std::string::npos;
  report("parameter-count report", logged,
         fmt("default model %s parameters, %.2f of the 3.5M reference figure (gap documented, not asserted)", count.c_str(),
             static_cast<double>(p.count()) / 3.5e6));
}

// ---------------------------------------------------------------- evaluation

void eer_oracle_check() {
  std::mt19937_64 rng(105);
  int mismatches = 0;
  for (int set = 0; set < 100; ++set) {
    const int ng = std::uniform_int_distribution<int>(1, 100)(rng);
    const int ni = std::uniform_int_distribution<int>(1, 100)(rng);
    const bool ties = set % 3 == 0;
    std::normal_distribution<double> gd(0.3, 0.3), id(0.0, 0.3);
    auto draw = [&](std::normal_distribution<double>& d) {
      const double v = std::clamp(d(rng), -1.0, 1.0);
      return ties ? std::round(v * 10.0) / 10.0 : v;
    };
    std::vector<double> g(static_cast<std::size_t>(ng)), i(static_cast<std::size_t>(ni));
    for (auto& v : g) v = draw(gd);
    for (auto& v : i) v = draw(id);
    mismatches += compute_eer(g, i).eer == testing::eer_oracle(g, i) ? 0 : 1;
  }
  const auto worked = compute_eer({0.9, 0.8, 0.7, 0.2}, {0.85, 0.6, 0.3, 0.1});
  const double perfect = compute_eer({1.0, 1.0}, {-1.0, -1.0}).eer;
  const double identical = compute_eer({0.2, 0.4, 0.6}, {0.6, 0.2, 0.4}).eer;
  const bool ok = mismatches == 0 && worked.eer == 25.0 && worked.threshold > 0.6 && worked.threshold <= 0.7 && perfect == 0.0 &&
                  identical == 50.0;
  report("EER oracle equivalence", ok,
         fmt("100 random sets, %d mismatches; worked example %.4g%% at %.3f; separated %.4g%%, identical %.4g%%", mismatches, worked.eer,
             worked.threshold, perfect, identical));
}

// ---------------------------------------------------------------- desk scale

Dataset subset(const SyntheticCorpus& c, const Manifest& part) {
  std::map<std::string, std::size_t> at;
  for (std::size_t i = 0; i < c.manifest.records.size(); ++i) at[c.manifest.records[i].utterance_id] = i;
  Dataset d;
  d.manifest = part;
  for (const auto& r : part.records) d.features.push_back(c.features[at.at(r.utterance_id)]);
  return d;
}

struct DeskRun {
  RunOutcome outcome;
  double seconds = 0.0;
  double first_val_rec = 0.0, best_val_rec = 0.0;
};

DeskRun desk_run(const Config& cfg, const Splits& data) {
  DeskRun r;
  std::map<int, double> val_rec;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord&, const EpochRecord& v) { val_rec[v.epoch] = v.loss.l_rec; };
  const auto t0 = Clock::now();
  r.outcome = train_and_score(cfg, data, kAblationTrialSeed, hooks);
  r.seconds = seconds_since(t0);
  r.first_val_rec = val_rec.at(1);
  r.best_val_rec = val_rec.at(r.outcome.best_epoch);
  std::printf("      run objective=%s M=%d seed=%llu: speaker %.4f%% content %.4f%% (best epoch %d, %.0f s)\n", cfg.train.objective.c_str(),
              cfg.model.M, static_cast<unsigned long long>(cfg.train.seed), r.outcome.speaker_eer, r.outcome.content_eer,
              r.outcome.best_epoch, r.seconds);
  std::fflush(stdout);
  return r;
}

void desk_checks(const Config& cfg) {
  const auto& s = cfg.synth;
  const auto corpus = generate_synthetic_corpus(s.n_classes, s.utts_per_class, s.frames, s.seed, s.options);
  const Splits data{subset(corpus, corpus.train), subset(corpus, corpus.val), subset(corpus, corpus.test)};
  const int full_epochs = cfg.train.max_epochs - std::min(cfg.train.pretrain_epochs, cfg.train.max_epochs);
  std::printf("      desk corpus %d classes x %d utterances, T=%d; %d full epochs after %d pretraining\n", s.n_classes, s.utts_per_class,
              s.frames, full_epochs, cfg.train.pretrain_epochs);

  Config total = cfg;
  total.train.objective = "total";
  const auto main_run = desk_run(total, data);
  Config rec = total;
  rec.train.objective = "rec";
  const auto rec_run = desk_run(rec, data);

  const auto& o = main_run.outcome;
  const double gap = o.content_eer - o.speaker_eer;
  const double rec_gap = rec_run.outcome.content_eer - rec_run.outcome.speaker_eer;
  const bool budget = full_epochs <= 60 && main_run.seconds <= 1800.0;
  report("desk-scale disentanglement",
         o.speaker_eer <= 15.0 && o.content_eer >= 30.0 && gap > 15.0 && rec_gap < gap && budget,
         fmt("L_total: speaker %.2f%% (<=15), content %.2f%% (>=30), gap %.2f (>15); L_rec-only gap %.2f (< %.2f); %.0f s", o.speaker_eer,
             o.content_eer, gap, rec_gap, gap, main_run.seconds));
  report("desk reconstruction decrease", main_run.best_val_rec <= 0.5 * main_run.first_val_rec,
         fmt("validation L_rec epoch 1 %.1f, at best checkpoint %.1f (%.1f%% lower, needs >= 50%%)", main_run.first_val_rec,
             main_run.best_val_rec, 100.0 * (1.0 - main_run.best_val_rec / main_run.first_val_rec)));

  // Horizon trend over three seeds; the M=5 run above is reused when it matches.
  std::map<int, std::vector<double>> by_m;
  for (int m : {1, 5}) {
    for (std::uint64_t seed : {0ULL, 1ULL, 2ULL}) {
      Config c = total;
      c.model.M = m;
      c.train.seed = seed;
      if (m == total.model.M && seed == total.train.seed) {
        by_m[m].push_back(o.speaker_eer);
      } else {
        by_m[m].push_back(desk_run(c, data).outcome.speaker_eer);
      }
    }
  }
  const double mean1 = AblationRow::mean(by_m[1]), mean5 = AblationRow::mean(by_m[5]);
  report("horizon trend", mean5 <= mean1,
         fmt("mean speaker EER M=5 %.6f%% (%.2f/%.2f/%.2f) vs M=1 %.6f%% (%.2f/%.2f/%.2f)", mean5, by_m[5][0], by_m[5][1], by_m[5][2], mean1,
             by_m[1][0], by_m[1][1], by_m[1][2]));

  const auto again = desk_run(total, data);
  const bool same = again.outcome.speaker_eer == o.speaker_eer && again.outcome.content_eer == o.content_eer;
  report("determinism", same,
         fmt("rerun speaker %.17g vs %.17g, content %.17g vs %.17g", again.outcome.speaker_eer, o.speaker_eer, again.outcome.content_eer,
             o.content_eer));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::string config_path = DKSD_DESK_CONFIG;
  bool skip_desk = false;
  app.add_option("--config", config_path, "Desk-scale config")->capture_default_str();
  app.add_flag("--skip-desk", skip_desk, "Run only the fast checks");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);

  try {
    ridge_oracle_check();
    exact_linear_check();
    eigen_loss_check();
    gradient_suite_check();
    eer_oracle_check();
    instance_norm_check();
    slicing_check();
    if (!skip_desk) desk_checks(load_config(config_path));
    parameter_count_check();
  } catch (const std::exception& e) {
    std::printf("FAIL  aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%s: %d criteria failed\n", failures ? "FAILED" : "ALL PASSED", failures);
  return failures ? 1 : 0;
}
