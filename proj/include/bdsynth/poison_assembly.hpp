#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "bdsynth/data_model.hpp"
#include "bdsynth/error.hpp"
#include "bdsynth/hash.hpp"
#include "bdsynth/trigger_generation.hpp"
#include "bdsynth/trigger_suggestion.hpp"

namespace bdsynth {

enum class SourceStrategy { random, suggestion_filtered };

inline SourceStrategy parse_source_strategy(std::string_view s) {
  if (s == "random") return SourceStrategy::random;
  if (s == "suggestion_filtered") return SourceStrategy::suggestion_filtered;
  throw ConfigError("unknown source strategy '" + std::string(s) + "' (expected random|suggestion_filtered)");
}

struct SourcePick {
  std::vector<std::string> image_ids;  // sorted
  bool shortfall = false;
};

/// Chooses clean train images to edit. `exclude_label` (if >= 0) removes that class from the pool.
inline SourcePick pick_edit_sources(const DatasetManifest& manifest, SourceStrategy strategy, const std::string& trigger,
                                    const std::vector<SuggestionRecord>& suggestions, std::size_t count,
                                    std::uint64_t seed, int exclude_label = -1) {
  if (count < 1) throw ValidationError("pick_edit_sources: count must be >= 1");
  std::set<std::string> suggested;
  if (strategy == SourceStrategy::suggestion_filtered) {
    if (suggestions.empty()) throw ValidationError("pick_edit_sources: suggestion_filtered requires suggestions");
    for (const auto& r : suggestions)
      if (std::find(r.objects.begin(), r.objects.end(), trigger) != r.objects.end()) suggested.insert(r.image_id);
  }
  std::vector<std::string> pool;
  for (const auto& e : manifest.entries) {
    if (e.split != Split::train || e.poisoned || e.label == exclude_label) continue;
    if (strategy == SourceStrategy::suggestion_filtered && !suggested.count(e.image_id)) continue;
    pool.push_back(e.image_id);
  }
  if (pool.empty()) throw ValidationError("pick_edit_sources: eligible pool is empty");
  std::sort(pool.begin(), pool.end());
  SourcePick pick;
  if (pool.size() <= count) {
    pick.shortfall = pool.size() < count;
    pick.image_ids = std::move(pool);
    return pick;
  }
  std::mt19937_64 rng(derive_seed(seed, "pick-sources/" + trigger));
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  pick.image_ids = std::move(pool);
  return pick;
}

/// floor(p * N_train) over the clean manifest's train entries.
inline std::size_t poison_count(const DatasetManifest& clean, double rate) {
  const auto n_train = static_cast<double>(clean.count(Split::train));
  return static_cast<std::size_t>(std::floor(rate * n_train));
}

/// Merges the best `poison_count` selected candidates into the clean manifest.
/// `selected` is taken in the given (ranked) order.
inline DatasetManifest assemble(const DatasetManifest& clean, const std::vector<PoisonCandidate>& selected,
                                const PoisonConfig& cfg) {
  validate(cfg, clean.class_names.size());
  const auto needed = poison_count(clean, cfg.poisoning_rate);
  if (needed == 0) throw ValidationError("poison count is zero (rate " + std::to_string(cfg.poisoning_rate) + ")");
  if (selected.size() < needed)
    throw ValidationError("insufficient selected candidates: need " + std::to_string(needed) + ", have " +
                          std::to_string(selected.size()));

  DatasetManifest out = clean;
  std::set<std::string> removed;
  std::vector<ManifestEntry> poison;
  for (std::size_t i = 0; i < needed; ++i) {
    const auto& c = selected[i];
    if (cfg.label_mode == LabelMode::clean && c.origin == Origin::generated && c.label != cfg.target_class)
      throw ValidationError("clean-label mode: generated candidate '" + c.candidate_id + "' depicts class " +
                            std::to_string(c.label) + ", not target " + std::to_string(cfg.target_class));
    ManifestEntry e;
    e.image_id = c.candidate_id;
    e.uri = c.uri;
    e.label = cfg.label_mode == LabelMode::dirty ? cfg.target_class : c.label;
    e.split = Split::train;
    e.provenance = c.origin == Origin::edited ? Provenance::edited : Provenance::generated;
    e.poisoned = true;
    e.trigger = c.trigger;
    e.score = c.score;
    e.source_image_id = c.source_image_id;
    if (c.origin == Origin::edited) {
      const auto* src = clean.find(*c.source_image_id);
      if (!src) throw ValidationError("candidate '" + c.candidate_id + "' names unknown source '" + *c.source_image_id + "'");
      if (cfg.label_mode == LabelMode::clean) e.label = src->label;
      if (cfg.label_mode == LabelMode::dirty) removed.insert(*c.source_image_id);
    }
    poison.push_back(std::move(e));
  }
  std::erase_if(out.entries, [&](const ManifestEntry& e) { return removed.count(e.image_id) > 0; });
  out.retired_ids.insert(out.retired_ids.end(), removed.begin(), removed.end());
  out.entries.insert(out.entries.end(), poison.begin(), poison.end());
  canonicalize(out);
  validate(out);
  return out;
}

}  // namespace bdsynth
