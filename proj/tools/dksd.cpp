// dksd: preprocessing, synthetic data, training and evaluation front end.

#include <CLI11.hpp>
#include <fftw3.h>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dksd/dksd.hpp"

namespace fs = std::filesystem;
using dksd::Json;

namespace {

constexpr const char* kRunManifest = "run_manifest.json";

Json versions() {
  return Json{{"dksd", DKSD_VERSION},
              {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                            std::to_string(EIGEN_MINOR_VERSION)},
              {"fftw", std::string(fftw_version)},
              {"spdlog", std::to_string(SPDLOG_VER_MAJOR) + "." + std::to_string(SPDLOG_VER_MINOR) + "." +
                             std::to_string(SPDLOG_VER_PATCH)},
              {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." + std::to_string(NLOHMANN_JSON_VERSION_MINOR) +
                                    "." + std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
              {"cli11", CLI11_VERSION}};
}

void write_run_manifest(const fs::path& dir, const std::string& command, const std::string& hash, std::uint64_t seed,
                        Json extra = Json::object()) {
  Json j{{"command", command}, {"config_hash", hash}, {"seed", seed}, {"versions", versions()}};
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  dksd::io::atomic_write(dir / kRunManifest, j.dump(2) + "\n");
}

std::string absolute_string(const fs::path& p) { return fs::absolute(p).lexically_normal().string(); }

/// Config file plus --set overrides; relative data paths resolve against the
/// config file's directory.
dksd::Config load_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
  dksd::Config c = path.empty() ? dksd::Config{} : dksd::load_config(path);
  c = dksd::apply_overrides(c, sets);
  const fs::path base = path.empty() ? fs::current_path() : fs::absolute(path).parent_path();
  for (std::string* p : {&c.data.train_manifest, &c.data.val_manifest, &c.data.test_manifest}) {
    if (!p->empty() && fs::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  }
  return c;
}

dksd::Dataset require_split(const std::string& path, const char* key) {
  if (path.empty()) throw dksd::ConfigError(std::string("data.") + key + " is not set");
  return dksd::load_dataset(path);
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream in(text);
  for (std::string tok; std::getline(in, tok, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw dksd::ValidationError("'" + tok + "' is not a non-negative integer");
    }
  }
  return out;
}

// ---------------------------------------------------------------- preprocess

struct PreprocessArgs {
  std::string manifest, out;
  int vad_level = 2;
  bool no_vad = false;
};

int run_preprocess(const PreprocessArgs& a) {
  const auto in = dksd::read_manifest(a.manifest);
  const fs::path out(a.out);
  fs::create_directories(out / "features");
  dksd::Manifest kept;
  int skipped = 0;
  for (const auto& r : in.records) {
    const auto wave = dksd::to_16k(dksd::read_wav(in.resolve(r)));
    const auto voiced = a.no_vad ? wave : dksd::voiced_only(wave, a.vad_level);
    dksd::Matrix<double> mel;
    try {
      mel = dksd::compute_log_mel(voiced);
    } catch (const dksd::TooShortError& e) {
      spdlog::warn("skipping {}: {}", r.utterance_id, e.what());
      ++skipped;
      continue;
    }
    const std::string rel = "features/" + r.utterance_id + ".feat";
    dksd::write_features(out / rel, mel.cast<float>());
    kept.records.push_back({r.utterance_id, r.speaker_id, rel});
  }
  dksd::write_manifest(out / "manifest.tsv", kept);
  write_run_manifest(out, "preprocess", dksd::config_hash(Json{{"vad_level", a.vad_level}, {"vad", !a.no_vad}}), 0,
                     {{"input_manifest", absolute_string(a.manifest)}, {"utterances", kept.records.size()}, {"skipped", skipped}});
  spdlog::info("wrote {} feature files ({} skipped) to {}", kept.records.size(), skipped, out.string());
  return 0;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string config, out = "synth";
  std::optional<std::uint64_t> seed;
};

int run_synth(const SynthArgs& a, const std::vector<std::string>& sets) {
  auto cfg = load_with_overrides(a.config, sets);
  if (a.seed) cfg.synth.seed = *a.seed;
  const auto& s = cfg.synth;
  const auto corpus = dksd::generate_synthetic_corpus(s.n_classes, s.utts_per_class, s.frames, s.seed, s.options);
  const fs::path out(a.out);
  dksd::write_synthetic_corpus(out, corpus);
  write_run_manifest(out, "synth", dksd::config_hash(Json(s)), s.seed, {{"synth", s}});
  spdlog::info("wrote {} utterances of {} classes to {}", corpus.manifest.records.size(), s.n_classes, out.string());
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config, out = "run", resume;
  std::optional<std::uint64_t> seed;
};

void check_compatible(const dksd::ParameterTable<float>& loaded, const dksd::ModelConfig& mc) {
  const auto fresh = dksd::build_model<float>(mc, 0, false);
  if (fresh.size() != loaded.size()) throw dksd::ValidationError("resume checkpoint does not match the configured model");
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    if (fresh.name(i) != loaded.name(i) || fresh.value(i).rows() != loaded.value(i).rows() ||
        fresh.value(i).cols() != loaded.value(i).cols()) {
      throw dksd::ValidationError("resume checkpoint parameter '" + loaded.name(i) + "' does not match the configured model");
    }
  }
}

int run_train(const TrainArgs& a, const std::vector<std::string>& sets) {
  auto cfg = load_with_overrides(a.config, sets);
  if (a.seed) cfg.train.seed = *a.seed;
  cfg.validate();
  const auto train_set = require_split(cfg.data.train_manifest, "train_manifest");
  const auto val_set = require_split(cfg.data.val_manifest, "val_manifest");
  if (cfg.data.test_manifest.empty()) throw dksd::ConfigError("data.test_manifest is not set");

  dksd::TrainHooks hooks;
  if (!a.resume.empty()) {
    const auto ck = dksd::read_checkpoint(a.resume);
    check_compatible(ck.params, cfg.model);
    hooks.initial = ck.params;
    hooks.start_epoch = ck.metadata().value("params_epoch", 0);
    spdlog::info("resuming from {} after epoch {}", a.resume, hooks.start_epoch);
  }

  const fs::path out(a.out);
  fs::create_directories(out);
  dksd::io::LockFile lock(out / ".dksd.lock");
  const std::string hash = dksd::config_hash(cfg);
  std::vector<dksd::EpochRecord> history;
  hooks.on_epoch = [&](const dksd::EpochRecord& tr, const dksd::EpochRecord& vr) {
    history.push_back(tr);
    history.push_back(vr);
    dksd::io::atomic_write(out / "history.csv", dksd::format_history(history));
  };

  const auto res = dksd::train(cfg.model, cfg.train, train_set, val_set, hooks);

  Json meta{{"train_manifest", cfg.data.train_manifest},
            {"val_manifest", cfg.data.val_manifest},
            {"test_manifest", cfg.data.test_manifest},
            {"config_hash", hash},
            {"seed", cfg.train.seed},
            {"best_epoch", res.best_epoch},
            {"best_phase", res.best_phase},
            {"params_epoch", res.best_epoch},
            {"best_val_total", res.best_value},
            {"epochs_run", res.epochs_run},
            {"early_stopped", res.early_stopped},
            {"parameter_count", res.parameter_count},
            {"pooling", "mean"},
            {"weight_decay_policy", "decoupled AdamW decay on every weight matrix (input and recurrent), none on biases"}};
  dksd::write_checkpoint(out / "best.ckpt", res.best, Json{{"config", cfg}, {"metadata", meta}});
  meta["params_epoch"] = res.epochs_run;
  dksd::write_checkpoint(out / "last.ckpt", res.last, Json{{"config", cfg}, {"metadata", meta}});
  dksd::io::atomic_write(out / "history.csv", dksd::format_history(res.history));
  write_run_manifest(out, "train", hash, cfg.train.seed,
                     {{"best_epoch", res.best_epoch}, {"epochs_run", res.epochs_run}, {"parameter_count", res.parameter_count}});
  spdlog::info("best epoch {} ({}), checkpoint {}", res.best_epoch, res.best_phase, (out / "best.ckpt").string());
  return 0;
}

// ---------------------------------------------------------------- verify

struct VerifyArgs {
  std::string checkpoint, manifest, trials, branch = "speaker", out;
  std::uint64_t seed = 0;
  double impostor_ratio = 1.0;
};

dksd::Manifest manifest_for(const dksd::Checkpoint& ck, const std::string& explicit_path) {
  if (!explicit_path.empty()) return dksd::read_manifest(explicit_path);
  const auto meta = ck.metadata();
  if (!meta.contains("test_manifest")) throw dksd::ValidationError("checkpoint has no test manifest; pass --manifest");
  return dksd::read_manifest(meta.at("test_manifest").get<std::string>());
}

int run_verify(const VerifyArgs& a) {
  const auto branch = dksd::parse_branch(a.branch);
  const auto ck = dksd::read_checkpoint(a.checkpoint);
  const auto cfg = ck.config();
  const auto manifest = manifest_for(ck, a.manifest);
  dksd::TrialSet trials;
  if (!a.trials.empty()) {
    if (!fs::exists(a.trials)) throw dksd::ValidationError("trials file not found: '" + a.trials + "'");
    trials = dksd::parse_trials(dksd::io::read_file(a.trials), a.trials);
  }
  const auto features = dksd::load_features(manifest);
  const auto r = dksd::verify(ck.params, cfg.model, manifest, features, branch, a.seed, trials, a.impostor_ratio);

  std::size_t genuine = 0;
  for (const auto& t : r.trials) genuine += t.genuine ? 1 : 0;
  const fs::path out = a.out.empty() ? fs::path(a.checkpoint).parent_path() / ("verify_" + a.branch) : fs::path(a.out);
  fs::create_directories(out);
  const std::string hash = dksd::config_hash(cfg);
  Json res{{"eer", r.eer.eer},
           {"threshold", r.eer.threshold},
           {"branch", a.branch},
           {"genuine_trials", genuine},
           {"impostor_trials", r.trials.size() - genuine},
           {"pooling", "mean"},
           {"config_hash", hash},
           {"checkpoint", absolute_string(a.checkpoint)}};
  dksd::io::atomic_write(out / "results.json", res.dump(2) + "\n");
  dksd::io::atomic_write(out / "curves.csv", dksd::format_curves(r.eer));
  dksd::io::atomic_write(out / "trials.tsv", dksd::format_trials(r.trials));
  write_run_manifest(out, "verify", hash, a.seed, {{"branch", a.branch}});
  std::printf("%s EER %.4f%% (threshold %.6f, %zu genuine / %zu impostor trials)\n", a.branch.c_str(), r.eer.eer, r.eer.threshold,
              genuine, r.trials.size() - genuine);
  return 0;
}

// ---------------------------------------------------------------- spectrum

struct SpectrumArgs {
  std::string checkpoint, manifest, out;
  int batch = 32;
};

int run_spectrum(const SpectrumArgs& a) {
  if (a.batch < 1) throw dksd::ValidationError("--batch must be >= 1");
  const auto ck = dksd::read_checkpoint(a.checkpoint);
  const auto cfg = ck.config();
  const auto manifest = manifest_for(ck, a.manifest);
  auto features = dksd::load_features(manifest);
  if (features.empty()) throw dksd::ValidationError("manifest is empty");
  if (features.size() > static_cast<std::size_t>(a.batch)) features.resize(static_cast<std::size_t>(a.batch));

  // Centered crops of the shortest utterance's length, at most the training crop.
  Eigen::Index steps = cfg.train.crop_frames;
  for (const auto& f : features) steps = std::min(steps, f.rows());
  dksd::check_horizon(steps, cfg.model.M);
  const dksd::SequenceLayout layout{static_cast<Eigen::Index>(features.size()), steps};
  dksd::Matrix<double> x(layout.rows(), cfg.model.n_mels);
  for (std::size_t b = 0; b < features.size(); ++b) {
    if (features[b].cols() != cfg.model.n_mels) throw dksd::ShapeError("feature width does not match the model");
    const Eigen::Index off = (features[b].rows() - steps) / 2;
    for (Eigen::Index t = 0; t < steps; ++t) x.row(layout.row(t, static_cast<Eigen::Index>(b))) = features[b].row(off + t).cast<double>();
  }
  const auto params = ck.params.cast<double>();
  dksd::ad::Graph<double> g;
  dksd::BoundParameters<double> p(g, params, false);
  auto z = dksd::encode_dynamics(p, cfg.model, g.input(x, false), layout);
  auto split = dksd::split_prefix(z, cfg.model.M, layout);
  const auto k = dksd::estimate_koopman(split.minus.value(), split.plus.value(), cfg.model.lambda);
  const auto rows = dksd::koopman_spectrum_report(k);

  std::ostringstream os;
  os.precision(8);
  os << "index\treal\timag\tmodulus\tdistance_to_one\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    os << i << "\t" << rows[i].eigenvalue.real() << "\t" << rows[i].eigenvalue.imag() << "\t" << rows[i].modulus << "\t"
       << rows[i].distance_to_one << "\n";
  }
  std::cout << os.str();
  spdlog::info("batch of {} utterances x {} frames, eigen loss {:.6g}", features.size(), steps, dksd::eigen_loss(k));
  if (!a.out.empty()) {
    const fs::path out(a.out);
    fs::create_directories(out);
    dksd::io::atomic_write(out / "spectrum.tsv", os.str());
    write_run_manifest(out, "spectrum", dksd::config_hash(cfg), cfg.train.seed, {{"batch", features.size()}, {"frames", steps}});
  }
  return 0;
}

// ---------------------------------------------------------------- ablate

struct AblateArgs {
  std::string config, m_list = "1,3,5,7,9", seeds = "0,1,2", mode = "horizon", out = "ablation";
};

int run_ablate(const AblateArgs& a, const std::vector<std::string>& sets) {
  auto cfg = load_with_overrides(a.config, sets);
  if (a.mode != "horizon" && a.mode != "losses") throw dksd::ValidationError("--mode must be horizon or losses");
  const auto seeds = parse_seed_list(a.seeds);
  std::vector<int> ms;
  for (auto m : parse_seed_list(a.m_list)) ms.push_back(static_cast<int>(m));
  dksd::Splits data{require_split(cfg.data.train_manifest, "train_manifest"), require_split(cfg.data.val_manifest, "val_manifest"),
                    require_split(cfg.data.test_manifest, "test_manifest")};
  const auto rows = a.mode == "horizon" ? dksd::ablate_horizon(cfg, ms, seeds, data) : dksd::ablate_losses(cfg, seeds, data);
  const fs::path out(a.out);
  fs::create_directories(out);
  const auto table = dksd::format_ablation(rows);
  dksd::io::atomic_write(out / "ablation.tsv", table);
  write_run_manifest(out, "ablate", dksd::config_hash(cfg), seeds.front(), {{"mode", a.mode}, {"seeds", seeds}, {"m_list", ms}});
  std::cout << table;
  return 0;
}

// ---------------------------------------------------------------- project

struct ProjectArgs {
  std::string checkpoint, manifest, branch = "speaker", out = "projection.csv";
};

int run_project(const ProjectArgs& a) {
  const auto branch = dksd::parse_branch(a.branch);
  const auto ck = dksd::read_checkpoint(a.checkpoint);
  const auto cfg = ck.config();
  const auto manifest = manifest_for(ck, a.manifest);
  const auto emb = dksd::extract_embeddings(ck.params, cfg.model, dksd::load_features(manifest), branch);
  const auto proj = dksd::project_2d(emb);
  std::ostringstream os;
  os.precision(8);
  os << "utterance_id,speaker_id,x,y\n";
  for (std::size_t i = 0; i < emb.size(); ++i) {
    const auto& r = manifest.records[i];
    os << r.utterance_id << "," << r.speaker_id << "," << proj.points(static_cast<Eigen::Index>(i), 0) << ","
       << proj.points(static_cast<Eigen::Index>(i), 1) << "\n";
  }
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  dksd::io::atomic_write(out, os.str());
  Json run{{"command", "project"}, {"config_hash", dksd::config_hash(cfg)}, {"seed", 0}, {"versions", versions()}, {"branch", a.branch}};
  dksd::io::atomic_write(out.string() + ".manifest.json", run.dump(2) + "\n");
  spdlog::info("explained variance {:.4g}, {:.4g}", proj.variance[0], proj.variance[1]);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Koopman-regularized speaker/content disentangling autoencoder"};
  app.require_subcommand(1);
  app.fallthrough();
  app.get_formatter()->column_width(36);
  std::vector<std::string> sets;
  std::string log_level = "info";
  app.add_option("--set", sets, "Config override key=value (dotted keys, repeatable)")->type_name("KEY=VALUE");
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off")->capture_default_str();

  PreprocessArgs pre;
  auto* c_pre = app.add_subcommand("preprocess", "Audio manifest to log-mel feature cache");
  c_pre->add_option("--manifest", pre.manifest, "TSV of utterance_id, speaker_id, wav path")->required();
  c_pre->add_option("--out", pre.out, "Output directory")->required();
  c_pre->add_option("--vad-level", pre.vad_level, "VAD aggressiveness (0 least, 3 most)")->check(CLI::Range(0, 3))->capture_default_str();
  c_pre->add_flag("--no-vad", pre.no_vad, "Keep the whole signal");

  SynthArgs syn;
  auto* c_syn = app.add_subcommand("synth", "Generate the synthetic two-factor corpus");
  c_syn->add_option("--config", syn.config, "JSON config; only the synth section is read (default: built-in settings)");
  c_syn->add_option("--out", syn.out, "Output directory")->capture_default_str();
  c_syn->add_option("--seed", syn.seed, "Corpus seed (default: synth.seed from the config)");

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Train a model");
  c_tr->add_option("--config", tr.config, "JSON config")->required();
  c_tr->add_option("--out", tr.out, "Output directory")->capture_default_str();
  c_tr->add_option("--seed", tr.seed, "Training seed (default: train.seed from the config)");
  c_tr->add_option("--resume", tr.resume, "Continue from this checkpoint (default: start fresh)");

  VerifyArgs ver;
  auto* c_ver = app.add_subcommand("verify", "Score verification trials with one branch");
  c_ver->add_option("--checkpoint", ver.checkpoint, "Checkpoint file")->required();
  c_ver->add_option("--manifest", ver.manifest, "Evaluation manifest (default: the checkpoint's test manifest)");
  c_ver->add_option("--trials", ver.trials, "Trial list: enroll, test, 0|1 (default: built from the manifest)");
  c_ver->add_option("--branch", ver.branch, "speaker|content")->check(CLI::IsMember({"speaker", "content"}))->capture_default_str();
  c_ver->add_option("--seed", ver.seed, "Impostor sampling seed")->capture_default_str();
  c_ver->add_option("--impostor-ratio", ver.impostor_ratio, "Impostor trials per genuine trial")->capture_default_str();
  c_ver->add_option("--out", ver.out, "Output directory (default: verify_<branch> next to the checkpoint)");

  SpectrumArgs spec;
  auto* c_spec = app.add_subcommand("spectrum", "Print the Koopman eigenvalue table for one batch");
  c_spec->add_option("--checkpoint", spec.checkpoint, "Checkpoint file")->required();
  c_spec->add_option("--manifest", spec.manifest, "Manifest (default: the checkpoint's test manifest)");
  c_spec->add_option("--batch", spec.batch, "Utterances in the batch")->capture_default_str();
  c_spec->add_option("--out", spec.out, "Also write spectrum.tsv to this directory (default: print only)");

  AblateArgs abl;
  auto* c_abl = app.add_subcommand("ablate", "Horizon or loss-term ablation");
  c_abl->add_option("--config", abl.config, "JSON config")->required();
  c_abl->add_option("--m-list", abl.m_list, "Comma-separated horizons")->capture_default_str();
  c_abl->add_option("--seeds", abl.seeds, "Comma-separated training seeds")->capture_default_str();
  c_abl->add_option("--mode", abl.mode, "horizon|losses")->check(CLI::IsMember({"horizon", "losses"}))->capture_default_str();
  c_abl->add_option("--out", abl.out, "Output directory")->capture_default_str();

  ProjectArgs prj;
  auto* c_prj = app.add_subcommand("project", "2-D PCA projection of pooled embeddings");
  c_prj->add_option("--checkpoint", prj.checkpoint, "Checkpoint file")->required();
  c_prj->add_option("--manifest", prj.manifest, "Manifest (default: the checkpoint's test manifest)");
  c_prj->add_option("--branch", prj.branch, "speaker|content")->check(CLI::IsMember({"speaker", "content"}))->capture_default_str();
  c_prj->add_option("--out", prj.out, "Output CSV")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const auto level = spdlog::level::from_str(log_level);
  spdlog::set_level(level);
  spdlog::set_pattern("[%l] %v");

  try {
    if (*c_pre) return run_preprocess(pre);
    if (*c_syn) return run_synth(syn, sets);
    if (*c_tr) return run_train(tr, sets);
    if (*c_ver) return run_verify(ver);
    if (*c_spec) return run_spectrum(spec);
    if (*c_abl) return run_ablate(abl, sets);
    if (*c_prj) return run_project(prj);
  } catch (const dksd::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
