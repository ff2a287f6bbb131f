#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "bdsynth/defense/common.hpp"

namespace bdsynth::defense {

/// Sum over channels of squared features, scaled to unit L2 norm (zero stays zero).
inline Map2d attention_map(const Tensor& f) {
  Map2d a(f.height, f.width);
  for (int c = 0; c < f.channels; ++c) {
    auto ch = f.channel(c);
    for (std::size_t i = 0; i < ch.size(); ++i) a.data[i] += static_cast<double>(ch[i]) * ch[i];
  }
  double n = 0;
  for (double v : a.data) n += v * v;
  n = std::sqrt(n);
  if (n > 0)
    for (auto& v : a.data) v /= n;
  return a;
}

/// weight * ||A(f) - teacher||_2 and its gradient with respect to f.
inline Tensor attention_distance_grad(const Tensor& f, const Map2d& teacher, double weight, double& loss) {
  const std::size_t P = f.plane();
  std::vector<double> s(P, 0.0);
  for (int c = 0; c < f.channels; ++c) {
    auto ch = f.channel(c);
    for (std::size_t i = 0; i < P; ++i) s[i] += static_cast<double>(ch[i]) * ch[i];
  }
  double s_norm = 0;
  for (double v : s) s_norm += v * v;
  s_norm = std::sqrt(s_norm);
  std::vector<double> a(P, 0.0), d(P);
  if (s_norm > 0)
    for (std::size_t i = 0; i < P; ++i) a[i] = s[i] / s_norm;
  double d_norm = 0;
  for (std::size_t i = 0; i < P; ++i) {
    d[i] = a[i] - teacher.data[i];
    d_norm += d[i] * d[i];
  }
  d_norm = std::sqrt(d_norm);
  loss += weight * d_norm;

  Tensor g(f.channels, f.height, f.width);
  if (d_norm == 0 || s_norm == 0) return g;
  // g_a = w d/|d|; g_s = (g_a - a <a, g_a>) / |s|; g_f = 2 f g_s
  double dot = 0;
  for (std::size_t i = 0; i < P; ++i) dot += a[i] * d[i];
  const double k = weight / d_norm;
  std::vector<double> gs(P);
  for (std::size_t i = 0; i < P; ++i) gs[i] = k * (d[i] - a[i] * dot) / s_norm;
  for (int c = 0; c < f.channels; ++c) {
    auto src = f.channel(c);
    auto dst = g.channel(c);
    for (std::size_t i = 0; i < P; ++i) dst[i] = static_cast<float>(2.0 * src[i] * gs[i]);
  }
  return g;
}

struct NadConfig {
  int teacher_epochs = 20;
  int student_epochs = 20;
  double distill_weight = 1000;
  std::vector<std::string> attention_layers;  // empty: every conv layer after the first
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

struct NadResult {
  std::unique_ptr<Classifier> student;
  std::unique_ptr<Classifier> teacher;
  std::vector<EpochRecord> teacher_history, student_history;
  AttackReport before, after;
};

inline std::vector<std::string> nad_layers(const Classifier& model, const NadConfig& cfg) {
  if (!cfg.attention_layers.empty()) return cfg.attention_layers;
  auto names = model.layer_names();
  if (names.size() > 1) names.erase(names.begin());
  return names;
}

/// Fine-tunes a teacher copy on `clean`, then trains a student copy with CE plus
/// attention-map distillation toward the teacher on the same samples.
inline NadResult nad(const Classifier& backdoored, const LabeledSet& clean, const NadConfig& cfg, const EvalSets& eval = {}) {
  if (clean.empty()) throw ValidationError("nad: empty clean subset");
  if (cfg.teacher_epochs < 0 || cfg.student_epochs < 0) throw ValidationError("nad: epochs must be >= 0");
  if (cfg.distill_weight < 0) throw ValidationError("nad: distill_weight must be >= 0");
  const auto layers = nad_layers(backdoored, cfg);
  auto names = backdoored.layer_names();
  for (const auto& l : layers)
    if (std::find(names.begin(), names.end(), l) == names.end()) throw ValidationError("nad: unknown layer '" + l + "'");

  NadResult r;
  r.before = evaluate(backdoored, eval);
  SgdOptions opt{cfg.lr, cfg.momentum, cfg.weight_decay, cfg.batch_size, cfg.teacher_epochs, derive_seed(cfg.seed, "teacher"), "none"};
  r.teacher = backdoored.clone();
  r.teacher_history = fit(*r.teacher, clean, opt);

  std::map<std::string, std::vector<Map2d>> targets;
  for (const auto& l : layers)
    for (const auto& x : clean.images) targets[l].push_back(attention_map(r.teacher->activations(l, x)));

  r.student = backdoored.clone();
  opt.epochs = cfg.student_epochs;
  opt.seed = derive_seed(cfg.seed, "student");
  FeatureTerm term;
  if (cfg.distill_weight > 0) {
    term = [&](std::size_t i, std::string_view layer, const Tensor& f, double& loss) {
      auto it = targets.find(std::string(layer));
      if (it == targets.end()) return Tensor();
      return attention_distance_grad(f, it->second[i], cfg.distill_weight, loss);
    };
  }
  r.student_history = fit(*r.student, clean, opt, nullptr, term);
  r.after = evaluate(*r.student, eval);
  return r;
}

}  // namespace bdsynth::defense
