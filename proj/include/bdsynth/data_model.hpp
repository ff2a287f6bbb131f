#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "bdsynth/error.hpp"
#include "bdsynth/hash.hpp"
#include "bdsynth/io.hpp"

namespace bdsynth {

using json = nlohmann::ordered_json;

enum class Split { train, val, real_clean, real_poison };
enum class Provenance { real, edited, generated, synthetic_fixture };
enum class LabelMode { dirty, clean };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::real_clean: return "real_clean";
    case Split::real_poison: return "real_poison";
  }
  return "?";
}

inline std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::real: return "real";
    case Provenance::edited: return "edited";
    case Provenance::generated: return "generated";
    case Provenance::synthetic_fixture: return "synthetic_fixture";
  }
  return "?";
}

inline std::string_view to_string(LabelMode m) { return m == LabelMode::dirty ? "dirty" : "clean"; }

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "real_clean") return Split::real_clean;
  if (s == "real_poison") return Split::real_poison;
  throw ParseError("unknown split '" + std::string(s) + "'");
}

inline Provenance parse_provenance(std::string_view s) {
  if (s == "real") return Provenance::real;
  if (s == "edited") return Provenance::edited;
  if (s == "generated") return Provenance::generated;
  if (s == "synthetic_fixture") return Provenance::synthetic_fixture;
  throw ParseError("unknown provenance '" + std::string(s) + "'");
}

inline LabelMode parse_label_mode(std::string_view s) {
  if (s == "dirty") return LabelMode::dirty;
  if (s == "clean") return LabelMode::clean;
  throw ConfigError("unknown label mode '" + std::string(s) + "' (expected dirty|clean)");
}

struct ManifestEntry {
  std::string image_id;
  std::string uri;
  int label = 0;
  Split split = Split::train;
  Provenance provenance = Provenance::real;
  bool poisoned = false;
  std::optional<std::string> trigger;
  std::optional<double> score;
  std::optional<std::string> source_image_id;

  bool operator==(const ManifestEntry&) const = default;
};

/// The dataset D. `retired_ids` lists clean images that assembly replaced by
/// their edited versions, so edited entries can still name their source.
struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> class_names;
  std::int64_t seed = 0;
  std::string schema_version = "1.0";
  std::vector<std::string> retired_ids;

  bool operator==(const DatasetManifest&) const = default;

  const ManifestEntry* find(std::string_view id) const {
    auto it = std::lower_bound(entries.begin(), entries.end(), id,
                               [](const ManifestEntry& e, std::string_view v) { return e.image_id < v; });
    if (it != entries.end() && it->image_id == id) return &*it;
    // Fall back to a scan for manifests that are not canonical yet.
    for (const auto& e : entries)
      if (e.image_id == id) return &e;
    return nullptr;
  }

  std::vector<ManifestEntry> split(Split s) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(e);
    return out;
  }

  std::vector<ManifestEntry> split(Split s, bool poisoned) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (e.split == s && e.poisoned == poisoned) out.push_back(e);
    return out;
  }

  std::size_t count(Split s) const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [s](const auto& e) { return e.split == s; }));
  }

  /// Per-class entry counts; always sums to entries.size() for a valid manifest.
  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(class_names.size(), 0);
    for (const auto& e : entries)
      if (e.label >= 0 && static_cast<std::size_t>(e.label) < counts.size()) ++counts[e.label];
    return counts;
  }
};

struct PoisonConfig {
  int target_class = 0;
  double poisoning_rate = 0.1;
  LabelMode label_mode = LabelMode::dirty;
  std::string trigger;
};

inline void validate(const PoisonConfig& cfg, std::size_t num_classes) {
  if (!(cfg.poisoning_rate > 0.0 && cfg.poisoning_rate < 1.0))
    throw ValidationError("poisoning_rate must lie in (0,1), got " + std::to_string(cfg.poisoning_rate));
  if (cfg.target_class < 0 || static_cast<std::size_t>(cfg.target_class) >= num_classes)
    throw ValidationError("target_class " + std::to_string(cfg.target_class) + " out of range for " +
                          std::to_string(num_classes) + " classes");
}

inline void canonicalize(DatasetManifest& m) {
  std::stable_sort(m.entries.begin(), m.entries.end(),
                   [](const ManifestEntry& a, const ManifestEntry& b) { return a.image_id < b.image_id; });
  std::sort(m.retired_ids.begin(), m.retired_ids.end());
}

/// Throws ValidationError naming the violated invariant and the offending image_id.
inline void validate(const DatasetManifest& m) {
  std::set<std::string> ids;
  for (const auto& e : m.entries) {
    if (e.image_id.empty()) throw ValidationError("empty image_id");
    if (!ids.insert(e.image_id).second) throw ValidationError("duplicate image_id '" + e.image_id + "'");
  }
  std::set<std::string> retired(m.retired_ids.begin(), m.retired_ids.end());
  for (const auto& e : m.entries) {
    auto where = " (image_id '" + e.image_id + "')";
    if (e.uri.empty()) throw ValidationError("empty uri" + where);
    if (e.label < 0 || static_cast<std::size_t>(e.label) >= m.class_names.size())
      throw ValidationError("label " + std::to_string(e.label) + " not below class count " +
                            std::to_string(m.class_names.size()) + where);
    if (e.poisoned) {
      if (!e.trigger) throw ValidationError("poisoned entry without trigger" + where);
      if (e.provenance == Provenance::real) throw ValidationError("poisoned entry with provenance 'real'" + where);
    }
    if (e.provenance == Provenance::edited) {
      if (!e.source_image_id) throw ValidationError("edited entry without source_image_id" + where);
      if (!ids.count(*e.source_image_id) && !retired.count(*e.source_image_id))
        throw ValidationError("source_image_id '" + *e.source_image_id + "' does not exist" + where);
    }
  }
}

namespace detail {

inline json score_to_json(const std::optional<double>& s) {
  if (!s) return nullptr;
  if (std::isinf(*s)) return *s < 0 ? "-inf" : "inf";
  if (std::isnan(*s)) return "nan";
  return *s;
}

inline std::optional<double> score_from_json(const json& j) {
  if (j.is_null()) return std::nullopt;
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    auto s = j.get<std::string>();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "inf") return std::numeric_limits<double>::infinity();
  }
  throw ParseError("score must be a number, null or \"-inf\"");
}

template <class T>
std::optional<T> opt(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->template get<T>();
}

}  // namespace detail

inline json to_json(const ManifestEntry& e) {
  json j;
  j["image_id"] = e.image_id;
  j["uri"] = e.uri;
  j["label"] = e.label;
  j["split"] = to_string(e.split);
  j["provenance"] = to_string(e.provenance);
  j["poisoned"] = e.poisoned;
  j["trigger"] = e.trigger ? json(*e.trigger) : json(nullptr);
  j["score"] = detail::score_to_json(e.score);
  j["source_image_id"] = e.source_image_id ? json(*e.source_image_id) : json(nullptr);
  return j;
}

inline ManifestEntry entry_from_json(const json& j) {
  static const std::set<std::string> kKeys = {"image_id", "uri", "label", "split", "provenance",
                                              "poisoned", "trigger", "score", "source_image_id"};
  if (!j.is_object()) throw ParseError("entry is not a JSON object");
  for (const auto& [k, v] : j.items())
    if (!kKeys.count(k)) throw ParseError("unknown field '" + k + "'");
  for (const char* k : {"image_id", "uri", "label", "split", "provenance", "poisoned"})
    if (!j.contains(k)) throw ParseError(std::string("missing field '") + k + "'");
  try {
    ManifestEntry e;
    e.image_id = j.at("image_id").get<std::string>();
    e.uri = j.at("uri").get<std::string>();
    e.label = j.at("label").get<int>();
    e.split = parse_split(j.at("split").get<std::string>());
    e.provenance = parse_provenance(j.at("provenance").get<std::string>());
    e.poisoned = j.at("poisoned").get<bool>();
    e.trigger = detail::opt<std::string>(j, "trigger");
    e.score = detail::score_from_json(j.value("score", json(nullptr)));
    e.source_image_id = detail::opt<std::string>(j, "source_image_id");
    return e;
  } catch (const json::exception& ex) {
    throw ParseError(ex.what());
  }
}

inline std::string to_jsonl(const DatasetManifest& m) {
  json header;
  header["schema_version"] = m.schema_version;
  header["class_names"] = m.class_names;
  header["seed"] = m.seed;
  header["retired_ids"] = m.retired_ids;
  std::string out = header.dump() + "\n";
  for (const auto& e : m.entries) out += to_json(e).dump() + "\n";
  return out;
}

inline DatasetManifest parse_manifest(std::string_view text) {
  DatasetManifest m;
  std::size_t line_no = 0, pos = 0;
  bool have_header = false;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& ex) {
      throw ParseError(std::string("malformed JSON: ") + ex.what(), line_no);
    }
    if (!have_header) {
      if (!j.is_object() || !j.contains("schema_version") || !j.contains("class_names"))
        throw ParseError("missing header record (schema_version, class_names, seed)", line_no);
      try {
        m.schema_version = j.at("schema_version").get<std::string>();
        m.class_names = j.at("class_names").get<std::vector<std::string>>();
        m.seed = j.value("seed", std::int64_t{0});
        m.retired_ids = j.value("retired_ids", std::vector<std::string>{});
      } catch (const json::exception& ex) {
        throw ParseError(std::string("bad header: ") + ex.what(), line_no);
      }
      have_header = true;
      continue;
    }
    try {
      m.entries.push_back(entry_from_json(j));
    } catch (const ParseError& ex) {
      throw ParseError(ex.what(), line_no);
    }
  }
  if (!have_header) throw ParseError("missing header record");
  canonicalize(m);
  validate(m);
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("manifest not found: " + path.string());
  return parse_manifest(read_file(path));
}

/// Validates, canonicalizes and writes atomically.
inline void save_manifest(DatasetManifest m, const std::filesystem::path& path) {
  canonicalize(m);
  validate(m);
  write_file_atomic(path, to_jsonl(m));
}

inline std::string manifest_hash(DatasetManifest m) {
  canonicalize(m);
  return sha256_hex(to_jsonl(m));
}

}  // namespace bdsynth
