#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "bdsynth/classifier.hpp"
#include "bdsynth/data_model.hpp"
#include "bdsynth/error.hpp"
#include "bdsynth/trainer.hpp"

namespace bdsynth {

/// Fraction of clean samples predicted as their label.
inline double clean_accuracy(const Classifier& model, const LabeledSet& clean) {
  if (clean.empty()) throw ValidationError("clean_accuracy: empty evaluation set");
  return accuracy(model, clean);
}

inline double clean_accuracy(const Classifier& model, const std::vector<ManifestEntry>& entries,
                             const std::filesystem::path& root) {
  if (entries.empty()) throw ValidationError("clean_accuracy: empty evaluation set");
  for (const auto& e : entries)
    if (e.poisoned) throw ValidationError("clean_accuracy: poisoned entry '" + e.image_id + "' in clean set");
  return clean_accuracy(model, load_set(entries, root, model.input_size()));
}

/// Fraction of triggered samples predicted as `target_class`. Labels hold the
/// source class; samples whose source class is the target are excluded.
inline double attack_success_rate(const Classifier& model, const LabeledSet& poisoned, int target_class) {
  std::size_t n = 0, hit = 0;
  for (std::size_t i = 0; i < poisoned.size(); ++i) {
    if (poisoned.labels[i] == target_class) continue;
    ++n;
    hit += model.predict(poisoned.images[i]) == target_class ? 1 : 0;
  }
  if (n == 0) throw ValidationError("attack_success_rate: no samples left after excluding the target class");
  return static_cast<double>(hit) / static_cast<double>(n);
}

inline double attack_success_rate(const Classifier& model, const std::vector<ManifestEntry>& entries,
                                  const std::filesystem::path& root, int target_class) {
  if (entries.empty()) throw ValidationError("attack_success_rate: empty poisoned set");
  for (const auto& e : entries)
    if (!e.poisoned) throw ValidationError("attack_success_rate: clean entry '" + e.image_id + "' in poisoned set");
  return attack_success_rate(model, load_set(entries, root, model.input_size()), target_class);
}

/// Drops samples whose label equals the target class.
inline LabeledSet without_class(const LabeledSet& s, int target_class) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s.labels[i] != target_class) keep.push_back(i);
  return s.subset(keep);
}

struct AttackReport {
  std::optional<double> ca, asr, real_ca, real_asr;
  bool operator==(const AttackReport&) const = default;
};

inline double round4(double v) { return std::round(v * 1e4) / 1e4; }

inline json to_json(const AttackReport& r) {
  json j = json::object();
  if (r.ca) j["ca"] = round4(*r.ca);
  if (r.asr) j["asr"] = round4(*r.asr);
  if (r.real_ca) j["real_ca"] = round4(*r.real_ca);
  if (r.real_asr) j["real_asr"] = round4(*r.real_asr);
  return j;
}

/// CA on clean val, ASR on poisoned val, Real CA / Real ASR on the real splits; absent splits are skipped.
inline AttackReport evaluate_attack(const Classifier& model, const DatasetManifest& manifest,
                                    const std::filesystem::path& root, int target_class) {
  AttackReport r;
  if (auto clean = manifest.split(Split::val, false); !clean.empty()) r.ca = clean_accuracy(model, clean, root);
  if (auto poison = manifest.split(Split::val, true); !poison.empty())
    r.asr = attack_success_rate(model, poison, root, target_class);
  if (auto real = manifest.split(Split::real_clean, false); !real.empty()) r.real_ca = clean_accuracy(model, real, root);
  if (auto real_poison = manifest.split(Split::real_poison, true); !real_poison.empty())
    r.real_asr = attack_success_rate(model, real_poison, root, target_class);
  return r;
}

}  // namespace bdsynth
