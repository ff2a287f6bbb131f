#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "bdsynth/defense/common.hpp"

namespace bdsynth::defense {

/// Mean absolute activation of each channel of `layer` over `clean`.
inline std::vector<double> channel_activity(const Classifier& model, const LabeledSet& clean, const std::string& layer) {
  if (clean.empty()) throw ValidationError("fine_prune: empty clean set");
  std::vector<double> act;
  for (const auto& x : clean.images) {
    Tensor f = model.activations(layer, x);
    if (act.empty()) act.assign(f.channels, 0.0);
    for (int c = 0; c < f.channels; ++c) {
      double s = 0;
      for (float v : f.channel(c)) s += std::abs(v);
      act[c] += s / static_cast<double>(f.plane());
    }
  }
  for (auto& a : act) a /= static_cast<double>(clean.size());
  return act;
}

/// Channel indices by ascending activity; equal activities keep index order.
inline std::vector<int> prune_order(const std::vector<double>& activity) {
  std::vector<int> order(activity.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return activity[a] < activity[b]; });
  return order;
}

inline std::size_t prune_count(double fraction, std::size_t channels) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(channels) + 1e-9));
}

struct PrunePoint {
  double fraction = 0;
  std::size_t pruned = 0;
  AttackReport metrics;
};

struct FinePruneCurve {
  std::string layer;
  std::vector<double> activity;
  std::vector<int> order;
  std::vector<PrunePoint> points;

  std::vector<int> pruned_at(std::size_t i) const {
    return {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(points.at(i).pruned)};
  }
};

/// Last layer name reported by the model; conv nets list layers input to output.
inline std::string last_conv_layer(const Classifier& model) {
  auto names = model.layer_names();
  if (names.empty()) throw ValidationError("fine_prune: model has no prunable layers");
  return names.back();
}

/// Zeroes the least active channels of `layer` in increasing amounts and records CA/ASR at each fraction.
/// The input model is untouched.
inline FinePruneCurve fine_prune(const Classifier& model, const LabeledSet& clean, std::string layer,
                                 const std::vector<double>& fractions, const EvalSets& eval) {
  if (layer.empty()) layer = last_conv_layer(model);
  auto names = model.layer_names();
  if (std::find(names.begin(), names.end(), layer) == names.end())
    throw ValidationError("fine_prune: unknown layer '" + layer + "'");
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] >= 0 && fractions[i] <= 1)) throw ValidationError("fine_prune: fractions must lie in [0,1]");
    if (i && fractions[i] < fractions[i - 1]) throw ValidationError("fine_prune: fractions must be sorted ascending");
  }
  FinePruneCurve curve;
  curve.layer = layer;
  curve.activity = channel_activity(model, clean, layer);
  curve.order = prune_order(curve.activity);
  auto pruned = model.clone();
  auto mask = pruned->channel_mask(layer);
  std::size_t done = 0;
  for (double f : fractions) {
    const std::size_t k = prune_count(f, curve.order.size());
    for (; done < k; ++done) mask[curve.order[done]] = 0.0f;
    pruned->set_channel_mask(layer, mask);
    curve.points.push_back({f, k, evaluate(*pruned, eval)});
  }
  return curve;
}

}  // namespace bdsynth::defense
