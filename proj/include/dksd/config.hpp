#pragma once

// JSON configuration with four sections (model, train, data, synth), strict
// key checking, dotted-path overrides and a content hash.

#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dksd/io.hpp"
#include "dksd/model.hpp"
#include "dksd/synth.hpp"

namespace dksd {

using Json = nlohmann::json;

struct TrainConfig {
  int max_epochs = 500;
  int pretrain_epochs = 30;
  double learning_rate = 1e-4;
  double weight_decay = 0.4;
  int batch_size = 32;
  double augment_probability = 0.5;
  int early_stop_patience = 20;
  std::uint64_t seed = 0;
  double grad_clip = 5.0;
  int crop_frames = 128;
  std::string objective = "total";  ///< total | pred | rec

  void validate() const {
    if (max_epochs < 1) throw ConfigError("train.max_epochs must be >= 1");
    if (pretrain_epochs < 0) throw ConfigError("train.pretrain_epochs must be >= 0");
    if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be > 0");
    if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(augment_probability >= 0 && augment_probability <= 1)) throw ConfigError("train.augment_probability must be in [0, 1]");
    if (early_stop_patience < 1) throw ConfigError("train.early_stop_patience must be >= 1");
    if (!(grad_clip >= 0)) throw ConfigError("train.grad_clip must be >= 0");
    if (crop_frames < 10) throw ConfigError("train.crop_frames must be >= 10");
    if (objective != "total" && objective != "pred" && objective != "rec") {
      throw ConfigError("train.objective must be one of total, pred, rec; got '" + objective + "'");
    }
  }
};

struct DataConfig {
  std::string train_manifest;
  std::string val_manifest;
  std::string test_manifest;
};

struct SynthConfig {
  int n_classes = 8;
  int utts_per_class = 40;
  int frames = 128;
  std::uint64_t seed = 7;
  SynthOptions options{};
};

struct Config {
  ModelConfig model{};
  TrainConfig train{};
  DataConfig data{};
  SynthConfig synth{};

  void validate() const {
    model.validate();
    train.validate();
    if (model.M > train.crop_frames - 2) {
      throw ConfigError("model.M=" + std::to_string(model.M) + " exceeds train.crop_frames-2=" + std::to_string(train.crop_frames - 2));
    }
  }
};

inline void to_json(Json& j, const LossWeights& w) { j = Json{{"rec", w.rec}, {"pred", w.pred}, {"eigen", w.eigen}}; }
inline void from_json(const Json& j, LossWeights& w) {
  j.at("rec").get_to(w.rec);
  j.at("pred").get_to(w.pred);
  j.at("eigen").get_to(w.eigen);
}

inline void to_json(Json& j, const ModelConfig& c) {
  j = Json{{"n_mels", c.n_mels},
           {"k", c.k},
           {"content_lstm_widths", c.content_lstm_widths},
           {"content_residual_widths", c.content_residual_widths},
           {"dynamics_lstm_widths", c.dynamics_lstm_widths},
           {"dynamics_residual_widths", c.dynamics_residual_widths},
           {"decoder_residual_widths", c.decoder_residual_widths},
           {"decoder_lstm_widths", c.decoder_lstm_widths},
           {"M", c.M},
           {"lambda", c.lambda},
           {"weights", c.weights},
           {"epsilon_in", c.epsilon_in},
           {"shared_operator", c.shared_operator},
           {"grad_through_targets", c.grad_through_targets}};
}
inline void from_json(const Json& j, ModelConfig& c) {
  j.at("n_mels").get_to(c.n_mels);
  j.at("k").get_to(c.k);
  j.at("content_lstm_widths").get_to(c.content_lstm_widths);
  j.at("content_residual_widths").get_to(c.content_residual_widths);
  j.at("dynamics_lstm_widths").get_to(c.dynamics_lstm_widths);
  j.at("dynamics_residual_widths").get_to(c.dynamics_residual_widths);
  j.at("decoder_residual_widths").get_to(c.decoder_residual_widths);
  j.at("decoder_lstm_widths").get_to(c.decoder_lstm_widths);
  j.at("M").get_to(c.M);
  j.at("lambda").get_to(c.lambda);
  j.at("weights").get_to(c.weights);
  j.at("epsilon_in").get_to(c.epsilon_in);
  j.at("shared_operator").get_to(c.shared_operator);
  j.at("grad_through_targets").get_to(c.grad_through_targets);
}

inline void to_json(Json& j, const TrainConfig& c) {
  j = Json{{"max_epochs", c.max_epochs},
           {"pretrain_epochs", c.pretrain_epochs},
           {"learning_rate", c.learning_rate},
           {"weight_decay", c.weight_decay},
           {"batch_size", c.batch_size},
           {"augment_probability", c.augment_probability},
           {"early_stop_patience", c.early_stop_patience},
           {"seed", c.seed},
           {"grad_clip", c.grad_clip},
           {"crop_frames", c.crop_frames},
           {"objective", c.objective}};
}
inline void from_json(const Json& j, TrainConfig& c) {
  j.at("max_epochs").get_to(c.max_epochs);
  j.at("pretrain_epochs").get_to(c.pretrain_epochs);
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("batch_size").get_to(c.batch_size);
  j.at("augment_probability").get_to(c.augment_probability);
  j.at("early_stop_patience").get_to(c.early_stop_patience);
  j.at("seed").get_to(c.seed);
  j.at("grad_clip").get_to(c.grad_clip);
  j.at("crop_frames").get_to(c.crop_frames);
  j.at("objective").get_to(c.objective);
}

inline void to_json(Json& j, const DataConfig& c) {
  j = Json{{"train_manifest", c.train_manifest}, {"val_manifest", c.val_manifest}, {"test_manifest", c.test_manifest}};
}
inline void from_json(const Json& j, DataConfig& c) {
  j.at("train_manifest").get_to(c.train_manifest);
  j.at("val_manifest").get_to(c.val_manifest);
  j.at("test_manifest").get_to(c.test_manifest);
}

inline void to_json(Json& j, const SynthOptions& o) {
  j = Json{{"n_bins", o.n_bins},
           {"envelope_amplitude", o.envelope_amplitude},
           {"content_amplitude", o.content_amplitude},
           {"harmonics", o.harmonics},
           {"pitch_low", o.pitch_low},
           {"pitch_high", o.pitch_high},
           {"pitch_correlation", o.pitch_correlation},
           {"formant_correlation", o.formant_correlation},
           {"formant_jitter", o.formant_jitter},
           {"formant_width", o.formant_width},
           {"noise", o.noise},
           {"train_fraction", o.train_fraction},
           {"val_fraction", o.val_fraction}};
}
inline void from_json(const Json& j, SynthOptions& o) {
  j.at("n_bins").get_to(o.n_bins);
  j.at("envelope_amplitude").get_to(o.envelope_amplitude);
  j.at("content_amplitude").get_to(o.content_amplitude);
  j.at("harmonics").get_to(o.harmonics);
  j.at("pitch_low").get_to(o.pitch_low);
  j.at("pitch_high").get_to(o.pitch_high);
  j.at("pitch_correlation").get_to(o.pitch_correlation);
  j.at("formant_correlation").get_to(o.formant_correlation);
  j.at("formant_jitter").get_to(o.formant_jitter);
  j.at("formant_width").get_to(o.formant_width);
  j.at("noise").get_to(o.noise);
  j.at("train_fraction").get_to(o.train_fraction);
  j.at("val_fraction").get_to(o.val_fraction);
}

inline void to_json(Json& j, const SynthConfig& c) {
  j = Json{{"n_classes", c.n_classes}, {"utts_per_class", c.utts_per_class}, {"frames", c.frames}, {"seed", c.seed}, {"options", c.options}};
}
inline void from_json(const Json& j, SynthConfig& c) {
  j.at("n_classes").get_to(c.n_classes);
  j.at("utts_per_class").get_to(c.utts_per_class);
  j.at("frames").get_to(c.frames);
  j.at("seed").get_to(c.seed);
  j.at("options").get_to(c.options);
}

inline void to_json(Json& j, const Config& c) {
  j = Json{{"model", c.model}, {"train", c.train}, {"data", c.data}, {"synth", c.synth}};
}
inline void from_json(const Json& j, Config& c) {
  j.at("model").get_to(c.model);
  j.at("train").get_to(c.train);
  j.at("data").get_to(c.data);
  j.at("synth").get_to(c.synth);
}

namespace detail {

/// Copies `patch` onto `base`, rejecting keys `base` does not have.
inline void merge_strict(Json& base, const Json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError("config section '" + path + "' must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    Json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

inline Config decode_config(const Json& j) {
  try {
    Config c = j.get<Config>();
    c.validate();
    return c;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
}

}  // namespace detail

/// Defaults overlaid with the given JSON (strict keys).
inline Config config_from_json(const Json& patch) {
  Json base = Config{};
  detail::merge_strict(base, patch, "");
  return detail::decode_config(base);
}

inline Config load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("config file not found: '" + path.string() + "'");
  Json j;
  try {
    j = Json::parse(io::read_file(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

/// Applies "a.b.c=value" overrides. Values parse as JSON when possible and
/// fall back to plain strings.
inline Config apply_overrides(const Config& c, const std::vector<std::string>& overrides) {
  Json j = c;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' must look like key=value");
    const std::string key = o.substr(0, eq), text = o.substr(eq + 1);
    Json* slot = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!slot->is_object() || !slot->contains(part)) throw ConfigError("unknown config key '" + key + "'");
      slot = &(*slot)[part];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    if (slot->is_object()) throw ConfigError("override '" + key + "' names a section, not a value");
    Json v = Json::parse(text, nullptr, false);
    *slot = v.is_discarded() ? Json(text) : v;
  }
  return detail::decode_config(j);
}

/// FNV-1a 64 of the canonical JSON dump, as 16 hex digits.
inline std::string config_hash(const Json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string config_hash(const Config& c) { return config_hash(Json(c)); }

}  // namespace dksd
