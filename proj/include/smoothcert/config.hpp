#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "smoothcert/certify.hpp"
#include "smoothcert/error.hpp"
#include "smoothcert/norms.hpp"
#include "smoothcert/optim.hpp"
#include "smoothcert/random.hpp"
#include "smoothcert/trainer.hpp"

namespace smoothcert {

struct DataConfig {
  std::string source = "synth";  // synth | idx
  std::size_t num_classes = 10;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  std::size_t size = 16;
  std::string train_images;
  std::string test_images;
  // Empty lists mean the whole label set serves as both tasks.
  std::vector<int> upstream_classes;
  std::vector<int> downstream_classes;
  std::size_t downstream_train_per_class = 0;  // 0 keeps every sample
};

struct ModelConfig {
  std::vector<std::size_t> channels{8, 16};
  NormKind norm = NormKind::layer;
  std::size_t groups = 0;
  double norm_momentum = kNormMomentum;
};

struct StageConfig {
  bool present = false;
  std::string task = "upstream";  // pretrain only: which task to train on
  std::string checkpoint;         // finetune only: source checkpoint
  FinetuneMode mode = FinetuneMode::full_network;
  SgdConfig sgd;
  int eval_every = 1;
  std::vector<double> sigmas{0.0};
  std::vector<double> weights;
  std::vector<double> lr_sweep;
  bool allow_noisy = false;
  bool freeze_norm_stats = false;
  std::optional<std::uint64_t> seed;
};

struct CertifyConfig {
  bool present = false;
  std::string checkpoint;
  std::string task = "downstream";
  std::vector<double> sigmas{0.25, 0.5, 1.0};
  std::size_t n0 = 100;
  std::size_t n = 10000;
  double alpha = 0.001;
  std::size_t batch = 256;
  std::size_t max_inputs = 0;
  std::optional<std::uint64_t> seed;
};

// Stream tags for sub-seeds derived from the top-level seed.
enum class SeedTag : std::uint64_t {
  data_train = 1,
  data_test,
  split,
  init,
  pretrain,
  head,
  finetune,
  certify,
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  int threads = 0;
  DataConfig data;
  ModelConfig model;
  StageConfig pretrain;
  StageConfig finetune;
  CertifyConfig certify;

  std::uint64_t derived_seed(SeedTag tag) const {
    return derive_seed({seed, static_cast<std::uint64_t>(tag)});
  }
  std::uint64_t pretrain_seed() const {
    return pretrain.seed ? *pretrain.seed : derived_seed(SeedTag::pretrain);
  }
  std::uint64_t finetune_seed() const {
    return finetune.seed ? *finetune.seed : derived_seed(SeedTag::finetune);
  }
  std::uint64_t certify_seed() const {
    return certify.seed ? *certify.seed : derived_seed(SeedTag::certify);
  }

  static ExperimentConfig from_json(const nlohmann::json& js,
                                    std::optional<std::uint64_t> seed_override = std::nullopt);
  static ExperimentConfig load(const std::filesystem::path& path);
};

namespace detail {

// Typed access to one JSON object, remembering the dotted path for errors
// and rejecting keys nobody asked for.
class Fields {
 public:
  Fields(const nlohmann::json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key) && !obj_[key].is_null();
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return convert<T>(key);
  }

  template <typename T>
  T require(const std::string& key) {
    if (!has(key)) throw ConfigError(at(key), "required field is missing");
    return convert<T>(key);
  }

  Fields child(const std::string& key) {
    seen_.insert(key);
    return Fields(obj_[key], at(key));
  }

  void finish() const {
    for (const auto& item : obj_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(at(item.key()), "unknown field");
    }
  }

 private:
  template <typename T>
  T convert(const std::string& key) const {
    const auto& v = obj_[key];
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(at(key), "expected true or false");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(at(key), "expected an integer");
        if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() &&
            v.template get<long long>() < 0) {
          throw ConfigError(at(key), "must not be negative");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(at(key), "expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(at(key), "expected a string");
      }
      return v.template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(at(key), "has the wrong type");
    }
  }

  const nlohmann::json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

inline SgdConfig parse_sgd(Fields f, int epochs) {
  SgdConfig s;
  s.base_lr = f.require<double>("base_lr");
  s.momentum = f.get<double>("momentum", s.momentum);
  s.warmup_epochs = f.get<double>("warmup_epochs", std::min(s.warmup_epochs, 0.1 * epochs));
  s.batch_size = f.get<int>("batch_size", s.batch_size);
  s.epochs = epochs;
  f.finish();
  return s;
}

inline void parse_noise(Fields f, StageConfig& st) {
  st.sigmas = f.require<std::vector<double>>("sigmas");
  st.weights = f.get<std::vector<double>>("weights", {});
  f.finish();
  NoiseSpec spec{st.sigmas, st.weights, 0};
  try {
    spec.validate();
  } catch (const DataError& e) {
    throw ConfigError(f.at("sigmas"), e.what());
  }
}

inline StageConfig parse_stage(Fields f, bool is_finetune) {
  StageConfig st;
  st.present = true;
  const int epochs = f.get<int>("epochs", is_finetune ? 10 : 30);
  if (epochs <= 0) throw ConfigError(f.at("epochs"), "must be positive");
  st.eval_every = f.get<int>("eval_every", 1);
  if (st.eval_every < 1) throw ConfigError(f.at("eval_every"), "must be at least 1");
  if (!f.has("sgd")) throw ConfigError(f.at("sgd"), "required field is missing");
  st.sgd = parse_sgd(f.child("sgd"), epochs);
  try {
    st.sgd.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(f.at(e.field()), e.reason());
  }
  if (f.has("noise")) parse_noise(f.child("noise"), st);
  st.lr_sweep = f.get<std::vector<double>>("lr_sweep", {});
  for (const double lr : st.lr_sweep) {
    if (!(lr > 0.0)) throw ConfigError(f.at("lr_sweep"), "learning rates must be positive");
  }
  if (f.has("seed")) st.seed = f.get<std::uint64_t>("seed", 0);
  if (is_finetune) {
    st.checkpoint = f.get<std::string>("checkpoint", "");
    try {
      st.mode = parse_finetune_mode(f.get<std::string>("mode", "full_network"));
    } catch (const Error&) {
      throw ConfigError(f.at("mode"), "must be full_network or fixed_feature");
    }
    st.allow_noisy = f.get<bool>("allow_noisy", false);
    if (!st.allow_noisy && !NoiseSpec{st.sigmas, st.weights, 0}.is_clean()) {
      throw ConfigError(f.at("noise"), "fine-tuning is clean-only unless allow_noisy is set");
    }
  } else {
    st.task = f.get<std::string>("task", "upstream");
    if (st.task != "upstream" && st.task != "downstream") {
      throw ConfigError(f.at("task"), "must be upstream or downstream");
    }
  }
  st.freeze_norm_stats = f.get<bool>("freeze_norm_stats", false);
  f.finish();
  return st;
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& js,
                                                    std::optional<std::uint64_t> seed_override) {
  detail::Fields root(js, "");
  ExperimentConfig cfg;
  if (seed_override) {
    root.has("seed");
    cfg.seed = *seed_override;
  } else {
    cfg.seed = root.require<std::uint64_t>("seed");
  }
  cfg.output_dir = root.get<std::string>("output_dir", cfg.output_dir);
  cfg.threads = root.get<int>("threads", 0);
  if (cfg.threads < 0) throw ConfigError("threads", "must not be negative");

  if (root.has("data")) {
    detail::Fields f = root.child("data");
    DataConfig& d = cfg.data;
    d.source = f.get<std::string>("source", d.source);
    d.num_classes = f.get<std::size_t>("num_classes", d.num_classes);
    d.train_per_class = f.get<std::size_t>("train_per_class", d.train_per_class);
    d.test_per_class = f.get<std::size_t>("test_per_class", d.test_per_class);
    d.size = f.get<std::size_t>("size", d.size);
    d.train_images = f.get<std::string>("train_images", "");
    d.test_images = f.get<std::string>("test_images", "");
    d.upstream_classes = f.get<std::vector<int>>("upstream_classes", {});
    d.downstream_classes = f.get<std::vector<int>>("downstream_classes", {});
    d.downstream_train_per_class = f.get<std::size_t>("downstream_train_per_class", 0);
    f.finish();
    if (d.source != "synth" && d.source != "idx") {
      throw ConfigError("data.source", "must be synth or idx");
    }
    if (d.source == "idx" && (d.train_images.empty() || d.test_images.empty())) {
      throw ConfigError("data.train_images", "idx data needs train_images and test_images");
    }
    if (d.num_classes < 2) throw ConfigError("data.num_classes", "must be at least 2");
    if (d.source == "synth") {
      if (d.num_classes > 16) throw ConfigError("data.num_classes", "synth supports at most 16");
      if (d.train_per_class == 0) throw ConfigError("data.train_per_class", "must be positive");
      if (d.test_per_class == 0) throw ConfigError("data.test_per_class", "must be positive");
      if (d.size < 8) throw ConfigError("data.size", "must be at least 8");
    }
    if (d.upstream_classes.empty() != d.downstream_classes.empty()) {
      throw ConfigError("data.downstream_classes",
                        "upstream_classes and downstream_classes go together");
    }
  }

  if (root.has("model")) {
    detail::Fields f = root.child("model");
    ModelConfig& m = cfg.model;
    m.channels = f.get<std::vector<std::size_t>>("channels", m.channels);
    if (m.channels.empty()) throw ConfigError("model.channels", "needs at least one block");
    try {
      m.norm = parse_norm_kind(f.get<std::string>("norm", "layer"));
    } catch (const ConfigError&) {
      throw;
    } catch (const Error&) {
      throw ConfigError("model.norm", "must be batch, instance, group or layer");
    }
    m.groups = f.get<std::size_t>("groups", 0);
    m.norm_momentum = f.get<double>("norm_momentum", m.norm_momentum);
    if (!(m.norm_momentum > 0.0 && m.norm_momentum <= 1.0)) {
      throw ConfigError("model.norm_momentum", "must lie in (0, 1]");
    }
    for (const std::size_t c : m.channels) {
      if (c == 0) throw ConfigError("model.channels", "must be positive");
      if (m.norm == NormKind::group && m.groups && c % m.groups) {
        throw ConfigError("model.groups", "must divide every channel count");
      }
    }
    f.finish();
  }

  if (root.has("pretrain")) cfg.pretrain = detail::parse_stage(root.child("pretrain"), false);
  if (root.has("finetune")) cfg.finetune = detail::parse_stage(root.child("finetune"), true);

  if (root.has("certify")) {
    detail::Fields f = root.child("certify");
    CertifyConfig& c = cfg.certify;
    c.present = true;
    c.checkpoint = f.get<std::string>("checkpoint", "");
    c.task = f.get<std::string>("task", c.task);
    if (c.task != "upstream" && c.task != "downstream") {
      throw ConfigError("certify.task", "must be upstream or downstream");
    }
    c.sigmas = f.get<std::vector<double>>("sigmas", c.sigmas);
    if (c.sigmas.empty()) throw ConfigError("certify.sigmas", "needs at least one value");
    for (const double s : c.sigmas) {
      if (!(s > 0.0)) throw ConfigError("certify.sigmas", "values must be positive");
    }
    c.n0 = f.get<std::size_t>("n0", c.n0);
    c.n = f.get<std::size_t>("n", c.n);
    c.alpha = f.get<double>("alpha", c.alpha);
    c.batch = f.get<std::size_t>("batch", c.batch);
    c.max_inputs = f.get<std::size_t>("max_inputs", 0);
    if (f.has("seed")) c.seed = f.get<std::uint64_t>("seed", 0);
    f.finish();
    SmoothingParams p{c.sigmas.front(), c.n0, c.n, c.alpha, c.batch, 0};
    p.validate();
  }
  root.finish();
  return cfg;
}

// Reads a JSON config; SMOOTHCERT_SEED, when set, replaces the top-level seed.
inline ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open " + path.string());
  nlohmann::json js;
  try {
    js = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
  }
  std::optional<std::uint64_t> override_seed;
  if (const char* env = std::getenv("SMOOTHCERT_SEED"); env && *env) {
    std::uint64_t v = 0;
    const std::string_view s(env);
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
      throw ConfigError("SMOOTHCERT_SEED", "must be a non-negative integer");
    }
    override_seed = v;
  }
  return from_json(js, override_seed);
}

}  // namespace smoothcert
