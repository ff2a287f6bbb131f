#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bdsynth/classifier.hpp"
#include "bdsynth/error.hpp"
#include "bdsynth/hash.hpp"

namespace bdsynth::defense {

/// Shannon entropy in bits.
inline double entropy_bits(const std::vector<double>& p) {
  double h = 0;
  for (double v : p)
    if (v > 0) h -= v * std::log2(v);
  return std::max(0.0, h);
}

/// (1 - alpha) * input + alpha * overlay.
inline Tensor blend(const Tensor& input, const Tensor& overlay, double alpha) {
  if (!input.same_shape(overlay)) throw ValidationError("strip: input and overlay sizes differ");
  Tensor out = input;
  const auto a = static_cast<float>(alpha), b = static_cast<float>(1.0 - alpha);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = b * input.data[i] + a * overlay.data[i];
  return out;
}

/// Mean prediction entropy over the first n blends of `input` with `overlays`.
inline double strip_entropy(const Classifier& model, const Tensor& input, std::span<const Tensor> overlays, int n,
                            double alpha) {
  if (n < 1) throw ValidationError("strip: n must be >= 1");
  if (!(alpha > 0 && alpha < 1)) throw ValidationError("strip: alpha must lie in (0,1)");
  if (overlays.size() < static_cast<std::size_t>(n)) throw ValidationError("strip: fewer overlays than n");
  double sum = 0;
  for (int i = 0; i < n; ++i) sum += entropy_bits(softmax(model.logits(blend(input, overlays[i], alpha))));
  return sum / n;
}

struct StripOptions {
  int n = 100;
  double alpha = 0.5;
  double frr = 0.05;
  std::uint64_t seed = 0;
};

struct StripResult {
  std::vector<double> calibration_entropy;
  std::vector<double> entropy;  // per test sample
  std::vector<bool> flagged;    // true = judged a triggered input
  double threshold = 0;
  double frr = 0;
  int n = 0;
  double alpha = 0;

  double flagged_fraction() const {
    if (flagged.empty()) return 0;
    return static_cast<double>(std::count(flagged.begin(), flagged.end(), true)) / static_cast<double>(flagged.size());
  }
};

namespace detail {

inline std::vector<double> strip_entropies(const Classifier& model, std::span<const Tensor> inputs,
                                           std::span<const Tensor> pool, const StripOptions& o, const std::string& tag) {
  std::vector<double> out;
  out.reserve(inputs.size());
  std::vector<std::size_t> idx(pool.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    std::mt19937_64 rng(derive_seed(o.seed, tag + std::to_string(i)));
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<Tensor> overlays;
    for (int k = 0; k < o.n; ++k) overlays.push_back(pool[idx[k]]);
    out.push_back(strip_entropy(model, inputs[i], overlays, o.n, o.alpha));
  }
  return out;
}

}  // namespace detail

/// Lower `frr`-quantile of calibration entropies (order statistic floor(frr * N)).
inline double entropy_threshold(std::vector<double> calibration, double frr) {
  if (calibration.empty()) throw ValidationError("strip: empty calibration set");
  std::sort(calibration.begin(), calibration.end());
  auto k = static_cast<std::size_t>(std::floor(frr * static_cast<double>(calibration.size())));
  return calibration[std::min(k, calibration.size() - 1)];
}

/// Flags test inputs whose blended-prediction entropy falls below the calibration threshold.
/// Overlays for every input are drawn from the calibration images.
inline StripResult strip_detect(const Classifier& model, std::span<const Tensor> calibration, std::span<const Tensor> test,
                                const StripOptions& o) {
  if (calibration.empty()) throw ValidationError("strip: empty calibration set");
  if (test.empty()) throw ValidationError("strip: empty test set");
  if (!(o.frr > 0 && o.frr < 1)) throw ValidationError("strip: frr must lie in (0,1)");
  if (calibration.size() < static_cast<std::size_t>(o.n)) throw ValidationError("strip: calibration set smaller than n");
  StripResult r;
  r.frr = o.frr;
  r.n = o.n;
  r.alpha = o.alpha;
  r.calibration_entropy = detail::strip_entropies(model, calibration, calibration, o, "cal/");
  r.threshold = entropy_threshold(r.calibration_entropy, o.frr);
  r.entropy = detail::strip_entropies(model, test, calibration, o, "test/");
  for (double h : r.entropy) r.flagged.push_back(h < r.threshold);
  return r;
}

}  // namespace bdsynth::defense
