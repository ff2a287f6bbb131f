#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bdsynth/backends.hpp"
#include "bdsynth/classifier.hpp"
#include "bdsynth/defense/attention.hpp"
#include "bdsynth/defense/neural_cleanse.hpp"
#include "bdsynth/defense/strip.hpp"
#include "bdsynth/poison_assembly.hpp"
#include "bdsynth/trainer.hpp"

namespace bdsynth {

enum class AccessLevel { dataset, label_only };

inline std::string_view to_string(AccessLevel a) { return a == AccessLevel::dataset ? "dataset" : "label_only"; }

struct FixtureSpec {
  int classes = 5;
  int per_class = 400;
  int val_per_class = 100;
  int real_per_class = 100;
  int size = 64;
};

struct GenerationOptions {
  double pool_multiplier = 2.0;
  double guidance_scale = 2.0;
  std::map<std::string, std::string> actions;  // class name -> action phrase
  std::string background;
  std::string pos_prompt;
  SourceStrategy source_strategy = SourceStrategy::random;
};

struct DefenseOptions {
  defense::StripOptions strip;
  int strip_calibration = 200;
  int strip_test = 100;
  defense::NeuralCleanseConfig nc;
  int nc_samples = 200;
  std::string prune_layer;  // empty: last conv layer
  std::vector<double> prune_fractions{0.0, 0.25, 0.5, 0.75};
  defense::NadConfig nad;
  double nad_clean_fraction = 0.05;
  std::string cam_layer;  // empty: last conv layer
};

inline const std::vector<std::string>& defense_methods() {
  static const std::vector<std::string> m{"strip", "nc", "fineprune", "nad", "gradcam"};
  return m;
}

struct PipelineConfig {
  std::string profile = "desk";
  std::uint64_t seed = 7;
  AccessLevel access = AccessLevel::dataset;
  std::optional<std::filesystem::path> manifest;  // absolute
  FixtureSpec fixtures;
  std::string trigger = "auto";
  int suggestion_k = 5;
  std::optional<int> sample_cap;
  GenerationOptions generation;
  std::optional<double> min_score;
  PoisonConfig poison;
  TrainConfig train = TrainConfig::desk();
  BackendNames backends;
  std::vector<std::string> defenses;
  DefenseOptions defense;
  bool strict = false;
};

namespace detail {

template <class T>
bool json_is(const json& v) {
  if constexpr (std::is_same_v<T, bool>)
    return v.is_boolean();
  else if constexpr (std::is_same_v<T, std::string>)
    return v.is_string();
  else if constexpr (std::is_unsigned_v<T>)
    return v.is_number_unsigned();
  else if constexpr (std::is_integral_v<T>)
    return v.is_number_integer();
  else
    return v.is_number();
}

template <class T>
const char* json_kind() {
  if constexpr (std::is_same_v<T, bool>)
    return "a boolean";
  else if constexpr (std::is_same_v<T, std::string>)
    return "a string";
  else if constexpr (std::is_unsigned_v<T>)
    return "a non-negative integer";
  else if constexpr (std::is_integral_v<T>)
    return "an integer";
  else
    return "a number";
}

/// Reads obj[key] as T if present; ConfigError names the dotted field path.
template <class T>
void read(const json& obj, const std::string& path, const std::string& key, T& out) {
  if (!obj.contains(key) || obj[key].is_null()) return;
  const auto& v = obj[key];
  if (!json_is<T>(v)) throw ConfigError(path + key + ": expected " + json_kind<T>());
  out = v.get<T>();
}

template <class T>
void read(const json& obj, const std::string& path, const std::string& key, std::optional<T>& out) {
  if (!obj.contains(key) || obj[key].is_null()) return;
  T v{};
  read(obj, path, key, v);
  out = v;
}

inline const json& section(const json& obj, const std::string& path, const std::string& key) {
  static const json empty = json::object();
  if (!obj.contains(key) || obj[key].is_null()) return empty;
  if (!obj[key].is_object()) throw ConfigError(path + key + ": expected an object");
  return obj[key];
}

inline void allow_keys(const json& obj, const std::string& path, std::initializer_list<const char*> keys) {
  for (const auto& [k, v] : obj.items()) {
    bool ok = false;
    for (const char* a : keys) ok = ok || k == a;
    if (!ok) throw ConfigError(path + k + ": unknown field");
  }
}

inline void require(bool ok, const std::string& field, const std::string& msg) {
  if (!ok) throw ConfigError(field + ": " + msg);
}

}  // namespace detail

/// Parses and validates a pipeline config. Relative manifest paths resolve against `base_dir`.
inline PipelineConfig parse_config(const json& j, const std::filesystem::path& base_dir) {
  using detail::read;
  using detail::require;
  using detail::section;
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  detail::allow_keys(j, "", {"profile", "seed", "access_level", "dataset", "trigger", "suggestion", "generation", "selection",
                             "poison", "train", "backends", "defenses", "defense_options", "strict"});
  PipelineConfig c;
  read(j, "", "profile", c.profile);
  require(c.profile == "desk" || c.profile == "paper", "profile", "expected desk|paper, got '" + c.profile + "'");
  if (c.profile == "paper") {
    c.train = TrainConfig::paper();
    c.defense.nad.distill_weight = 1000;
  } else {
    c.defense.nad.distill_weight = 30;
  }
  read(j, "", "seed", c.seed);
  std::string access = "dataset";
  read(j, "", "access_level", access);
  require(access == "dataset" || access == "label_only", "access_level", "expected dataset|label_only, got '" + access + "'");
  c.access = access == "dataset" ? AccessLevel::dataset : AccessLevel::label_only;

  const auto& ds = section(j, "", "dataset");
  detail::allow_keys(ds, "dataset.", {"manifest", "fixtures"});
  std::optional<std::string> manifest;
  read(ds, "dataset.", "manifest", manifest);
  if (manifest) {
    std::filesystem::path p(*manifest);
    c.manifest = std::filesystem::absolute(p.is_absolute() ? p : base_dir / p).lexically_normal();
  }
  const auto& fx = section(ds, "dataset.", "fixtures");
  detail::allow_keys(fx, "dataset.fixtures.", {"classes", "per_class", "val_per_class", "real_per_class", "size"});
  read(fx, "dataset.fixtures.", "classes", c.fixtures.classes);
  read(fx, "dataset.fixtures.", "per_class", c.fixtures.per_class);
  read(fx, "dataset.fixtures.", "val_per_class", c.fixtures.val_per_class);
  read(fx, "dataset.fixtures.", "real_per_class", c.fixtures.real_per_class);
  read(fx, "dataset.fixtures.", "size", c.fixtures.size);
  require(c.fixtures.classes >= 2, "dataset.fixtures.classes", "must be >= 2");
  require(c.fixtures.per_class >= 2, "dataset.fixtures.per_class", "must be >= 2");
  require(c.fixtures.val_per_class >= 2, "dataset.fixtures.val_per_class", "must be >= 2");
  require(c.fixtures.real_per_class == 0 || c.fixtures.real_per_class >= 2, "dataset.fixtures.real_per_class",
          "must be 0 or >= 2");
  require(c.fixtures.size >= 16, "dataset.fixtures.size", "must be >= 16");

  read(j, "", "trigger", c.trigger);
  require(!c.trigger.empty(), "trigger", "must be a trigger name or \"auto\"");
  if (c.access == AccessLevel::label_only && !c.manifest && c.trigger == "auto")
    throw ConfigError("trigger: \"auto\" needs dataset.manifest when access_level is label_only");

  const auto& sg = section(j, "", "suggestion");
  detail::allow_keys(sg, "suggestion.", {"k", "sample_cap"});
  read(sg, "suggestion.", "k", c.suggestion_k);
  read(sg, "suggestion.", "sample_cap", c.sample_cap);
  require(c.suggestion_k >= 1, "suggestion.k", "must be >= 1");
  require(!c.sample_cap || *c.sample_cap >= 1, "suggestion.sample_cap", "must be >= 1");

  const auto& gen = section(j, "", "generation");
  detail::allow_keys(gen, "generation.", {"pool_multiplier", "guidance_scale", "actions", "background", "pos_prompt", "source_strategy"});
  read(gen, "generation.", "pool_multiplier", c.generation.pool_multiplier);
  read(gen, "generation.", "guidance_scale", c.generation.guidance_scale);
  read(gen, "generation.", "background", c.generation.background);
  read(gen, "generation.", "pos_prompt", c.generation.pos_prompt);
  for (const auto& [cls, v] : section(gen, "generation.", "actions").items()) {
    require(v.is_string(), "generation.actions." + cls, "expected a string");
    c.generation.actions[cls] = v.get<std::string>();
  }
  std::string strategy = "random";
  read(gen, "generation.", "source_strategy", strategy);
  try {
    c.generation.source_strategy = parse_source_strategy(strategy);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("generation.source_strategy: ") + e.what());
  }
  require(c.generation.pool_multiplier >= 1, "generation.pool_multiplier", "must be >= 1");
  require(c.generation.guidance_scale > 0, "generation.guidance_scale", "must be > 0");

  const auto& sel = section(j, "", "selection");
  detail::allow_keys(sel, "selection.", {"min_score"});
  read(sel, "selection.", "min_score", c.min_score);

  const auto& po = section(j, "", "poison");
  detail::allow_keys(po, "poison.", {"target_class", "rate", "label_mode"});
  read(po, "poison.", "target_class", c.poison.target_class);
  read(po, "poison.", "rate", c.poison.poisoning_rate);
  std::string mode = "dirty";
  read(po, "poison.", "label_mode", mode);
  require(mode == "dirty" || mode == "clean", "poison.label_mode", "expected dirty|clean, got '" + mode + "'");
  c.poison.label_mode = mode == "dirty" ? LabelMode::dirty : LabelMode::clean;
  require(c.poison.poisoning_rate > 0 && c.poison.poisoning_rate < 1, "poison.rate", "must lie in (0,1)");
  require(c.poison.target_class >= 0, "poison.target_class", "must be >= 0");
  if (!c.manifest)
    require(c.poison.target_class < c.fixtures.classes, "poison.target_class", "out of range for the fixture classes");

  const auto& tr = section(j, "", "train");
  detail::allow_keys(tr, "train.", {"base_lr", "momentum", "weight_decay", "batch_size", "epochs", "input_size", "seed", "arch", "augmentation"});
  {
    TrainConfig t = c.train;
    read(tr, "train.", "base_lr", t.base_lr);
    read(tr, "train.", "momentum", t.momentum);
    read(tr, "train.", "weight_decay", t.weight_decay);
    read(tr, "train.", "batch_size", t.batch_size);
    read(tr, "train.", "epochs", t.epochs);
    read(tr, "train.", "input_size", t.input_size);
    read(tr, "train.", "arch", t.arch);
    read(tr, "train.", "augmentation", t.augmentation);
    t.seed = derive_seed(c.seed, "train");
    read(tr, "train.", "seed", t.seed);
    try {
      validate(t);
    } catch (const ValidationError& e) {
      throw ConfigError(std::string("train: ") + e.what());
    }
    require(ClassifierRegistry::instance().contains(t.arch), "train.arch",
            "no classifier backend registered for '" + t.arch + "'");
    c.train = t;
  }

  const auto& be = section(j, "", "backends");
  detail::allow_keys(be, "backends.", {"vqa", "editor", "generator", "scorer"});
  read(be, "backends.", "vqa", c.backends.vqa);
  read(be, "backends.", "editor", c.backends.editor);
  read(be, "backends.", "generator", c.backends.generator);
  read(be, "backends.", "scorer", c.backends.scorer);

  if (j.contains("defenses")) {
    require(j["defenses"].is_array(), "defenses", "expected a list");
    std::set<std::string> seen;
    for (std::size_t i = 0; i < j["defenses"].size(); ++i) {
      const auto& d = j["defenses"][i];
      const std::string field = "defenses[" + std::to_string(i) + "]";
      require(d.is_string(), field, "expected a string");
      const auto name = d.get<std::string>();
      const auto& known = defense_methods();
      require(std::find(known.begin(), known.end(), name) != known.end(), field,
              "unknown defense '" + name + "' (expected strip|nc|fineprune|nad|gradcam)");
      require(seen.insert(name).second, field, "duplicate defense '" + name + "'");
      c.defenses.push_back(name);
    }
  }

  const auto& dopt = section(j, "", "defense_options");
  detail::allow_keys(dopt, "defense_options.", {"strip", "nc", "fineprune", "nad", "gradcam"});
  auto& d = c.defense;
  const auto& st = section(dopt, "defense_options.", "strip");
  detail::allow_keys(st, "defense_options.strip.", {"n", "alpha", "frr", "calibration", "test"});
  read(st, "defense_options.strip.", "n", d.strip.n);
  read(st, "defense_options.strip.", "alpha", d.strip.alpha);
  read(st, "defense_options.strip.", "frr", d.strip.frr);
  read(st, "defense_options.strip.", "calibration", d.strip_calibration);
  read(st, "defense_options.strip.", "test", d.strip_test);
  require(d.strip.n >= 1, "defense_options.strip.n", "must be >= 1");
  require(d.strip.alpha > 0 && d.strip.alpha < 1, "defense_options.strip.alpha", "must lie in (0,1)");
  require(d.strip.frr > 0 && d.strip.frr < 1, "defense_options.strip.frr", "must lie in (0,1)");
  require(d.strip_calibration >= d.strip.n, "defense_options.strip.calibration", "must be >= n");
  require(d.strip_test >= 1, "defense_options.strip.test", "must be >= 1");
  d.strip.seed = derive_seed(c.seed, "strip");

  const auto& nc = section(dopt, "defense_options.", "nc");
  detail::allow_keys(nc, "defense_options.nc.", {"steps", "lr", "init_lambda", "batch_size", "samples", "adjust_every"});
  read(nc, "defense_options.nc.", "steps", d.nc.steps);
  read(nc, "defense_options.nc.", "lr", d.nc.lr);
  read(nc, "defense_options.nc.", "init_lambda", d.nc.init_lambda);
  read(nc, "defense_options.nc.", "batch_size", d.nc.batch_size);
  read(nc, "defense_options.nc.", "adjust_every", d.nc.adjust_every);
  read(nc, "defense_options.nc.", "samples", d.nc_samples);
  require(d.nc.steps >= 1, "defense_options.nc.steps", "must be >= 1");
  require(d.nc.lr > 0, "defense_options.nc.lr", "must be > 0");
  require(d.nc.init_lambda >= 0, "defense_options.nc.init_lambda", "must be >= 0");
  require(d.nc.batch_size >= 1, "defense_options.nc.batch_size", "must be >= 1");
  require(d.nc.adjust_every >= 1, "defense_options.nc.adjust_every", "must be >= 1");
  require(d.nc_samples >= 1, "defense_options.nc.samples", "must be >= 1");
  d.nc.seed = derive_seed(c.seed, "nc");

  const auto& fp = section(dopt, "defense_options.", "fineprune");
  detail::allow_keys(fp, "defense_options.fineprune.", {"layer", "fractions"});
  read(fp, "defense_options.fineprune.", "layer", d.prune_layer);
  if (fp.contains("fractions")) {
    require(fp["fractions"].is_array(), "defense_options.fineprune.fractions", "expected a list of numbers");
    d.prune_fractions.clear();
    for (const auto& v : fp["fractions"]) {
      require(v.is_number(), "defense_options.fineprune.fractions", "expected a list of numbers");
      d.prune_fractions.push_back(v.get<double>());
    }
    for (std::size_t i = 0; i < d.prune_fractions.size(); ++i) {
      require(d.prune_fractions[i] >= 0 && d.prune_fractions[i] <= 1, "defense_options.fineprune.fractions", "values must lie in [0,1]");
      require(i == 0 || d.prune_fractions[i] >= d.prune_fractions[i - 1], "defense_options.fineprune.fractions", "must be ascending");
    }
  }

  const auto& nad = section(dopt, "defense_options.", "nad");
  detail::allow_keys(nad, "defense_options.nad.",
                     {"teacher_epochs", "student_epochs", "distill_weight", "attention_layers", "lr", "batch_size", "clean_fraction"});
  read(nad, "defense_options.nad.", "teacher_epochs", d.nad.teacher_epochs);
  read(nad, "defense_options.nad.", "student_epochs", d.nad.student_epochs);
  read(nad, "defense_options.nad.", "distill_weight", d.nad.distill_weight);
  read(nad, "defense_options.nad.", "lr", d.nad.lr);
  read(nad, "defense_options.nad.", "batch_size", d.nad.batch_size);
  read(nad, "defense_options.nad.", "clean_fraction", d.nad_clean_fraction);
  if (nad.contains("attention_layers")) {
    require(nad["attention_layers"].is_array(), "defense_options.nad.attention_layers", "expected a list of layer names");
    for (const auto& v : nad["attention_layers"]) {
      require(v.is_string(), "defense_options.nad.attention_layers", "expected a list of layer names");
      d.nad.attention_layers.push_back(v.get<std::string>());
    }
  }
  require(d.nad.teacher_epochs >= 0, "defense_options.nad.teacher_epochs", "must be >= 0");
  require(d.nad.student_epochs >= 0, "defense_options.nad.student_epochs", "must be >= 0");
  require(d.nad.distill_weight >= 0, "defense_options.nad.distill_weight", "must be >= 0");
  require(d.nad.lr > 0, "defense_options.nad.lr", "must be > 0");
  require(d.nad.batch_size >= 1, "defense_options.nad.batch_size", "must be >= 1");
  require(d.nad_clean_fraction > 0 && d.nad_clean_fraction <= 1, "defense_options.nad.clean_fraction", "must lie in (0,1]");
  d.nad.seed = derive_seed(c.seed, "nad");

  const auto& gc = section(dopt, "defense_options.", "gradcam");
  detail::allow_keys(gc, "defense_options.gradcam.", {"layer"});
  read(gc, "defense_options.gradcam.", "layer", d.cam_layer);

  read(j, "", "strict", c.strict);
  return c;
}

/// Fully resolved config; parse_config(to_json(c)) == c.
inline json to_json(const PipelineConfig& c) {
  json j;
  j["profile"] = c.profile;
  j["seed"] = c.seed;
  j["access_level"] = to_string(c.access);
  j["dataset"] = {{"manifest", c.manifest ? json(c.manifest->generic_string()) : json(nullptr)},
                  {"fixtures",
                   {{"classes", c.fixtures.classes},
                    {"per_class", c.fixtures.per_class},
                    {"val_per_class", c.fixtures.val_per_class},
                    {"real_per_class", c.fixtures.real_per_class},
                    {"size", c.fixtures.size}}}};
  j["trigger"] = c.trigger;
  j["suggestion"] = {{"k", c.suggestion_k}, {"sample_cap", c.sample_cap ? json(*c.sample_cap) : json(nullptr)}};
  json actions = json::object();
  for (const auto& [k, v] : c.generation.actions) actions[k] = v;
  j["generation"] = {{"pool_multiplier", c.generation.pool_multiplier},
                     {"guidance_scale", c.generation.guidance_scale},
                     {"actions", actions},
                     {"background", c.generation.background},
                     {"pos_prompt", c.generation.pos_prompt},
                     {"source_strategy", c.generation.source_strategy == SourceStrategy::random ? "random" : "suggestion_filtered"}};
  j["selection"] = {{"min_score", c.min_score ? json(*c.min_score) : json(nullptr)}};
  j["poison"] = {{"target_class", c.poison.target_class},
                 {"rate", c.poison.poisoning_rate},
                 {"label_mode", std::string(to_string(c.poison.label_mode))}};
  j["train"] = to_json(c.train);
  j["backends"] = {{"vqa", c.backends.vqa}, {"editor", c.backends.editor}, {"generator", c.backends.generator}, {"scorer", c.backends.scorer}};
  j["defenses"] = c.defenses;
  const auto& d = c.defense;
  j["defense_options"] = {
      {"strip", {{"n", d.strip.n}, {"alpha", d.strip.alpha}, {"frr", d.strip.frr}, {"calibration", d.strip_calibration}, {"test", d.strip_test}}},
      {"nc",
       {{"steps", d.nc.steps},
        {"lr", d.nc.lr},
        {"init_lambda", d.nc.init_lambda},
        {"batch_size", d.nc.batch_size},
        {"samples", d.nc_samples},
        {"adjust_every", d.nc.adjust_every}}},
      {"fineprune", {{"layer", d.prune_layer}, {"fractions", d.prune_fractions}}},
      {"nad",
       {{"teacher_epochs", d.nad.teacher_epochs},
        {"student_epochs", d.nad.student_epochs},
        {"distill_weight", d.nad.distill_weight},
        {"attention_layers", d.nad.attention_layers},
        {"lr", d.nad.lr},
        {"batch_size", d.nad.batch_size},
        {"clean_fraction", d.nad_clean_fraction}}},
      {"gradcam", {{"layer", d.cam_layer}}}};
  j["strict"] = c.strict;
  return j;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  return parse_config(j, path.parent_path());
}

}  // namespace bdsynth
