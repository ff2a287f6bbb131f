#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "bdsynth/classifier.hpp"
#include "bdsynth/error.hpp"
#include "bdsynth/hash.hpp"
#include "bdsynth/tensor.hpp"

namespace bdsynth::defense {

inline constexpr double kMadConsistency = 1.4826;

inline double median(std::vector<double> v) {
  if (v.empty()) throw ValidationError("median of empty list");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// |x - median| / (1.4826 * MAD). With zero MAD, the median value maps to 0 and
/// every other value to +inf.
inline std::vector<double> anomaly_index(const std::vector<double>& norms) {
  if (norms.size() < 3) throw ValidationError("anomaly_index: need at least 3 values");
  const double med = median(norms);
  std::vector<double> dev(norms.size());
  for (std::size_t i = 0; i < norms.size(); ++i) dev[i] = std::abs(norms[i] - med);
  const double mad = median(dev);
  std::vector<double> out(norms.size());
  for (std::size_t i = 0; i < norms.size(); ++i) {
    if (mad == 0)
      out[i] = dev[i] == 0 ? 0.0 : std::numeric_limits<double>::infinity();
    else
      out[i] = dev[i] / (kMadConsistency * mad);
  }
  return out;
}

/// Classes with a below-median norm and anomaly index above `cutoff`.
inline std::vector<int> flag_low_outliers(const std::vector<double>& norms, const std::vector<double>& index,
                                          double cutoff = 2.0) {
  const double med = median(norms);
  std::vector<int> out;
  for (std::size_t i = 0; i < norms.size(); ++i)
    if (norms[i] < med && index[i] > cutoff) out.push_back(static_cast<int>(i));
  return out;
}

struct NeuralCleanseConfig {
  int steps = 300;
  double lr = 0.1;  // Adam step size
  double init_lambda = 1e-3;
  double lambda_factor = 1.5;
  int adjust_every = 10;
  double attack_threshold = 0.99;
  int batch_size = 16;
  std::uint64_t seed = 0;
};

struct ReversedTrigger {
  Map2d mask;      // H x W in [0,1]
  Tensor pattern;  // C x H x W in [0,1]
  double l1 = 0;
  double attack_rate = 0;  // on the last adjustment window
  double final_lambda = 0;
  bool diverged = false;
};

struct NeuralCleanseResult {
  std::vector<ReversedTrigger> per_class;
  std::vector<double> norms;
  std::vector<double> anomaly;  // empty if fewer than 3 classes converged
  std::vector<int> flagged;     // low-norm outliers with index > 2
  /// Alternate reading: model judged backdoored when the smallest-norm class has index below 2.
  bool min_index_below_two = false;
};

/// Reverse-engineers the smallest mask/pattern that flips `samples` to `target`.
/// Minimises CE(f((1-m)*x + m*p), target) + lambda * |m|_1 with Adam, projecting m and p
/// into [0,1] after every step. lambda is scaled up or down by lambda_factor every
/// adjust_every steps depending on whether the attack rate beat attack_threshold.
/// `on_step` (optional) sees the mask after each projected step.
template <class StepFn = std::nullptr_t>
ReversedTrigger reverse_trigger(const Classifier& model, const std::vector<Tensor>& samples, int target,
                                const NeuralCleanseConfig& cfg, StepFn on_step = nullptr) {
  if (samples.empty()) throw ValidationError("neural_cleanse: empty sample set");
  const int C = samples[0].channels, H = samples[0].height, W = samples[0].width;
  const std::size_t P = static_cast<std::size_t>(H) * W;
  ReversedTrigger r;
  r.mask = Map2d(H, W, 0.5);
  r.pattern = Tensor(C, H, W, 0.5f);
  std::vector<double> m_m(P, 0), v_m(P, 0), m_p(r.pattern.size(), 0), v_p(r.pattern.size(), 0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double lambda = cfg.init_lambda;
  std::mt19937_64 rng(derive_seed(cfg.seed, "nc/" + std::to_string(target)));
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  std::size_t window_hits = 0, window_total = 0;
  const auto bs = static_cast<std::size_t>(std::max(1, cfg.batch_size));

  Tensor blended(C, H, W);
  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<double> g_m(P, 0), g_p(r.pattern.size(), 0);
    double loss = 0;
    for (std::size_t b = 0; b < bs; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const Tensor& x = samples[order[cursor++]];
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < P; ++i) {
          const double m = r.mask.data[i];
          blended.data[c * P + i] = static_cast<float>((1 - m) * x.data[c * P + i] + m * r.pattern.data[c * P + i]);
        }
      LossSpec spec;
      spec.want_input_grad = true;
      spec.logit_grad = [&](std::span<const float> logits) {
        loss += cross_entropy(logits, target);
        window_hits += argmax(logits) == target ? 1 : 0;
        return cross_entropy_grad(logits, target);
      };
      auto g = model.gradients(blended, spec);
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < P; ++i) {
          const double gi = g.input_grad.data[c * P + i];
          g_m[i] += gi * (r.pattern.data[c * P + i] - x.data[c * P + i]);
          g_p[c * P + i] += gi * r.mask.data[i];
        }
      ++window_total;
    }
    if (!std::isfinite(loss)) {
      r.diverged = true;
      break;
    }
    const double inv = 1.0 / static_cast<double>(bs);
    const double c1 = 1 - std::pow(b1, step), c2 = 1 - std::pow(b2, step);
    for (std::size_t i = 0; i < P; ++i) {
      const double g = g_m[i] * inv + lambda;  // d|m|_1/dm = 1 on m >= 0
      m_m[i] = b1 * m_m[i] + (1 - b1) * g;
      v_m[i] = b2 * v_m[i] + (1 - b2) * g * g;
      r.mask.data[i] = std::clamp(r.mask.data[i] - cfg.lr * (m_m[i] / c1) / (std::sqrt(v_m[i] / c2) + eps), 0.0, 1.0);
    }
    for (std::size_t i = 0; i < r.pattern.size(); ++i) {
      const double g = g_p[i] * inv;
      m_p[i] = b1 * m_p[i] + (1 - b1) * g;
      v_p[i] = b2 * v_p[i] + (1 - b2) * g * g;
      r.pattern.data[i] = static_cast<float>(
          std::clamp(r.pattern.data[i] - cfg.lr * (m_p[i] / c1) / (std::sqrt(v_p[i] / c2) + eps), 0.0, 1.0));
    }
    if constexpr (!std::is_same_v<StepFn, std::nullptr_t>) on_step(r.mask);
    if (step % cfg.adjust_every == 0) {
      r.attack_rate = static_cast<double>(window_hits) / static_cast<double>(window_total);
      lambda = r.attack_rate > cfg.attack_threshold ? lambda * cfg.lambda_factor : lambda / cfg.lambda_factor;
      window_hits = window_total = 0;
    }
  }
  r.final_lambda = lambda;
  r.l1 = r.diverged ? std::numeric_limits<double>::quiet_NaN() : std::accumulate(r.mask.data.begin(), r.mask.data.end(), 0.0);
  return r;
}

/// Runs reverse_trigger for every class, then scores the mask norms with the MAD anomaly index.
inline NeuralCleanseResult neural_cleanse(const Classifier& model, const std::vector<Tensor>& samples, int num_classes,
                                          const NeuralCleanseConfig& cfg) {
  if (samples.empty()) throw ValidationError("neural_cleanse: empty sample set");
  NeuralCleanseResult res;
  for (int c = 0; c < num_classes; ++c) {
    res.per_class.push_back(reverse_trigger(model, samples, c, cfg));
    res.norms.push_back(res.per_class.back().l1);
  }
  std::vector<double> finite;
  std::vector<int> cls;
  for (int c = 0; c < num_classes; ++c)
    if (!res.per_class[c].diverged) finite.push_back(res.norms[c]), cls.push_back(c);
  if (finite.size() >= 3) {
    auto idx = anomaly_index(finite);
    res.anomaly.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i < cls.size(); ++i) res.anomaly[cls[i]] = idx[i];
    for (int i : flag_low_outliers(finite, idx)) res.flagged.push_back(cls[i]);
    const auto min_it = std::min_element(finite.begin(), finite.end());
    res.min_index_below_two = idx[static_cast<std::size_t>(min_it - finite.begin())] < 2.0;
  }
  return res;
}

}  // namespace bdsynth::defense
