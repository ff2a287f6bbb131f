#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bdsynth/data_model.hpp"
#include "bdsynth/error.hpp"
#include "bdsynth/hash.hpp"

namespace bdsynth {

/// Text-guided image editor (dataset-access path). Writes the edited image to `dest`.
class EditBackend {
 public:
  virtual ~EditBackend() = default;
  virtual void edit(const std::filesystem::path& source, std::string_view prompt, std::uint64_t seed,
                    const std::filesystem::path& dest) = 0;
};

/// Text-to-image generator (label-only path). Writes the generated image to `dest`.
class GenerateBackend {
 public:
  virtual ~GenerateBackend() = default;
  virtual void generate(std::string_view prompt, double guidance_scale, std::uint64_t seed,
                        const std::filesystem::path& dest) = 0;
};

enum class PromptKind { edit, generate, select };

using PromptFields = std::map<std::string, std::string>;

/// Instantiates one of the three prompt templates.
///   edit:     trigger
///   generate: subject, trigger [, action, background, pos_prompt]
///   select:   class, trigger
inline std::string render_prompt(PromptKind kind, const PromptFields& fields) {
  auto get = [&](const std::string& key) -> std::string {
    auto it = fields.find(key);
    return it == fields.end() ? std::string{} : it->second;
  };
  auto require = [&](const std::string& key) {
    auto v = get(key);
    if (v.empty()) throw ValidationError("render_prompt: missing required field '" + key + "'");
    return v;
  };
  switch (kind) {
    case PromptKind::edit:
      return "Add " + require("trigger") + " into the image";
    case PromptKind::select:
      return "A photo of a " + require("class") + " with a " + require("trigger") + ".";
    case PromptKind::generate: {
      std::string out = require("subject") + ", " + require("trigger");
      for (const char* slot : {"action", "background", "pos_prompt"}) {
        auto v = get(slot);
        if (!v.empty()) out += ", " + v;
      }
      return out;
    }
  }
  return {};
}

enum class Origin { edited, generated };

inline std::string_view to_string(Origin o) { return o == Origin::edited ? "edited" : "generated"; }

struct PoisonCandidate {
  std::string candidate_id;
  std::string uri;
  Origin origin = Origin::edited;
  std::string prompt;
  std::string trigger;
  int label = 0;  // class the image depicts
  std::optional<std::string> source_image_id;
  std::optional<double> guidance_scale;
  std::uint64_t seed = 0;
  std::optional<double> score;
  bool score_failed = false;

  bool operator==(const PoisonCandidate&) const = default;
};

struct GenerationSpec {
  std::string subject;
  std::string trigger;
  std::string action;
  std::string background;
  std::string pos_prompt;
  double guidance_scale = 2.0;
  int pool_size = 1;

  PromptFields fields() const {
    return {{"subject", subject}, {"trigger", trigger}, {"action", action}, {"background", background},
            {"pos_prompt", pos_prompt}};
  }
};

inline void validate(const GenerationSpec& s) {
  if (s.pool_size < 1) throw ValidationError("generation spec: pool_size must be >= 1");
  if (!(s.guidance_scale > 0)) throw ValidationError("generation spec: guidance_scale must be > 0");
}

struct BatchOptions {
  std::filesystem::path out_dir;   // where candidate images are written
  std::filesystem::path image_root;  // resolves source uris
  std::string uri_prefix;  // prepended to candidate file names in `uri`
  bool strict = false;
  int retries = 3;
};

struct BatchResult {
  std::vector<PoisonCandidate> candidates;
  std::vector<std::string> skipped;  // source ids (edit) or seeds (generate)
};

/// Candidate ids depend only on (source or seed, trigger, prompt).
inline std::string candidate_id(std::string_view origin_key, std::string_view trigger, std::string_view prompt) {
  Sha256 h;
  h.update(origin_key).update("\x1f").update(trigger).update("\x1f").update(prompt);
  return "cand-" + h.hex().substr(0, 16);
}

namespace detail {

template <class Fn>
bool with_retries(int retries, Fn&& fn, std::string& last_error) {
  for (int attempt = 0; attempt <= retries; ++attempt) {
    try {
      fn();
      return true;
    } catch (const std::exception& ex) {
      last_error = ex.what();
    }
  }
  return false;
}

}  // namespace detail

/// One edited candidate per source, in source order.
inline BatchResult edit_batch(EditBackend& backend, const std::vector<ManifestEntry>& sources, const std::string& trigger,
                              std::uint64_t seed, const BatchOptions& opts) {
  if (sources.empty()) throw ValidationError("edit_batch: no sources");
  const std::string prompt = render_prompt(PromptKind::edit, {{"trigger", trigger}});
  BatchResult result;
  for (const auto& src : sources) {
    const std::uint64_t item_seed = derive_seed(seed, "edit/" + src.image_id);
    PoisonCandidate c;
    c.candidate_id = candidate_id("edit/" + src.image_id + "/" + std::to_string(item_seed), trigger, prompt);
    c.uri = opts.uri_prefix + c.candidate_id + ".ppm";
    c.origin = Origin::edited;
    c.prompt = prompt;
    c.trigger = trigger;
    c.label = src.label;
    c.source_image_id = src.image_id;
    c.seed = item_seed;
    std::string err;
    bool ok = detail::with_retries(
        opts.retries, [&] { backend.edit(opts.image_root / src.uri, prompt, item_seed, opts.out_dir / (c.candidate_id + ".ppm")); },
        err);
    if (!ok) {
      if (opts.strict) throw BackendError("editing '" + src.image_id + "' failed: " + err);
      result.skipped.push_back(src.image_id);
      continue;
    }
    result.candidates.push_back(std::move(c));
  }
  return result;
}

/// Exactly pool_size attempts with seeds seed, seed+1, ...; `label` is the class depicted.
inline BatchResult generate_batch(GenerateBackend& backend, const GenerationSpec& spec, int label, std::uint64_t seed,
                                  const BatchOptions& opts) {
  validate(spec);
  const std::string prompt = render_prompt(PromptKind::generate, spec.fields());
  BatchResult result;
  for (int i = 0; i < spec.pool_size; ++i) {
    const std::uint64_t item_seed = seed + static_cast<std::uint64_t>(i);
    PoisonCandidate c;
    c.candidate_id = candidate_id("generate/" + std::to_string(item_seed), spec.trigger, prompt);
    c.uri = opts.uri_prefix + c.candidate_id + ".ppm";
    c.origin = Origin::generated;
    c.prompt = prompt;
    c.trigger = spec.trigger;
    c.label = label;
    c.guidance_scale = spec.guidance_scale;
    c.seed = item_seed;
    std::string err;
    bool ok = detail::with_retries(
        opts.retries,
        [&] { backend.generate(prompt, spec.guidance_scale, item_seed, opts.out_dir / (c.candidate_id + ".ppm")); }, err);
    if (!ok) {
      if (opts.strict) throw BackendError("generation with seed " + std::to_string(item_seed) + " failed: " + err);
      result.skipped.push_back(std::to_string(item_seed));
      continue;
    }
    result.candidates.push_back(std::move(c));
  }
  return result;
}

inline json to_json(const PoisonCandidate& c) {
  json j;
  j["candidate_id"] = c.candidate_id;
  j["uri"] = c.uri;
  j["origin"] = to_string(c.origin);
  j["prompt"] = c.prompt;
  j["trigger"] = c.trigger;
  j["label"] = c.label;
  j["source_image_id"] = c.source_image_id ? json(*c.source_image_id) : json(nullptr);
  j["guidance_scale"] = c.guidance_scale ? json(*c.guidance_scale) : json(nullptr);
  j["seed"] = c.seed;
  j["score"] = detail::score_to_json(c.score);
  j["score_failed"] = c.score_failed;
  return j;
}

inline PoisonCandidate candidate_from_json(const json& j) {
  try {
    PoisonCandidate c;
    c.candidate_id = j.at("candidate_id").get<std::string>();
    c.uri = j.at("uri").get<std::string>();
    auto origin = j.at("origin").get<std::string>();
    if (origin != "edited" && origin != "generated") throw ParseError("unknown origin '" + origin + "'");
    c.origin = origin == "edited" ? Origin::edited : Origin::generated;
    c.prompt = j.at("prompt").get<std::string>();
    c.trigger = j.at("trigger").get<std::string>();
    c.label = j.at("label").get<int>();
    c.source_image_id = detail::opt<std::string>(j, "source_image_id");
    c.guidance_scale = detail::opt<double>(j, "guidance_scale");
    c.seed = j.value("seed", std::uint64_t{0});
    c.score = detail::score_from_json(j.value("score", json(nullptr)));
    c.score_failed = j.value("score_failed", false);
    if (c.origin == Origin::edited && !c.source_image_id)
      throw ValidationError("edited candidate '" + c.candidate_id + "' without source_image_id");
    return c;
  } catch (const json::exception& ex) {
    throw ParseError(ex.what());
  }
}

inline std::string to_jsonl(const std::vector<PoisonCandidate>& candidates) {
  std::string out;
  for (const auto& c : candidates) out += to_json(c).dump() + "\n";
  return out;
}

inline std::vector<PoisonCandidate> parse_candidates(std::string_view text) {
  std::vector<PoisonCandidate> out;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      out.push_back(candidate_from_json(json::parse(line)));
    } catch (const json::parse_error& ex) {
      throw ParseError(ex.what(), line_no);
    } catch (const ParseError& ex) {
      throw ParseError(ex.what(), line_no);
    }
  }
  return out;
}

inline std::vector<PoisonCandidate> load_candidates(const std::filesystem::path& path) {
  return parse_candidates(read_file(path));
}

inline void save_candidates(const std::vector<PoisonCandidate>& candidates, const std::filesystem::path& path) {
  write_file_atomic(path, to_jsonl(candidates));
}

}  // namespace bdsynth
