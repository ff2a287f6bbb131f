#pragma once

#include "bdsynth/attack_eval.hpp"
#include "bdsynth/trainer.hpp"

namespace bdsynth::defense {

/// Held-out sets a defense reports CA and ASR on. Either pointer may be null.
struct EvalSets {
  const LabeledSet* clean = nullptr;
  const LabeledSet* poisoned = nullptr;
  int target_class = 0;
};

inline AttackReport evaluate(const Classifier& model, const EvalSets& s) {
  AttackReport r;
  if (s.clean && !s.clean->empty()) r.ca = clean_accuracy(model, *s.clean);
  if (s.poisoned && !without_class(*s.poisoned, s.target_class).empty())
    r.asr = attack_success_rate(model, *s.poisoned, s.target_class);
  return r;
}

}  // namespace bdsynth::defense
