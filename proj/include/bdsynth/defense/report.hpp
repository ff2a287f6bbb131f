#pragma once

#include <cmath>
#include <string>

#include "bdsynth/defense/attention.hpp"
#include "bdsynth/defense/fine_prune.hpp"
#include "bdsynth/defense/grad_cam.hpp"
#include "bdsynth/defense/neural_cleanse.hpp"
#include "bdsynth/defense/strip.hpp"

namespace bdsynth::defense {

namespace detail {

// Non-finite doubles are written as strings so the report stays valid JSON.
inline json num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline json nums(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(num(x));
  return a;
}

}  // namespace detail

inline json to_json(const StripResult& r) {
  json j;
  j["method"] = "strip";
  j["n"] = r.n;
  j["alpha"] = r.alpha;
  j["frr"] = r.frr;
  j["threshold"] = detail::num(r.threshold);
  j["flagged_fraction"] = r.flagged_fraction();
  j["calibration_entropy"] = detail::nums(r.calibration_entropy);
  j["entropy"] = detail::nums(r.entropy);
  j["flagged"] = r.flagged;
  return j;
}

inline json to_json(const NeuralCleanseResult& r) {
  json j;
  j["method"] = "nc";
  j["norms"] = detail::nums(r.norms);
  j["anomaly_index"] = detail::nums(r.anomaly);
  j["flagged_classes"] = r.flagged;
  j["backdoored_canonical"] = !r.flagged.empty();
  j["backdoored_min_index_below_2"] = r.min_index_below_two;
  json per = json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& t = r.per_class[c];
    per.push_back({{"class", c}, {"l1", detail::num(t.l1)}, {"attack_rate", t.attack_rate},
                   {"final_lambda", t.final_lambda}, {"diverged", t.diverged}});
  }
  j["per_class"] = per;
  return j;
}

inline json to_json(const FinePruneCurve& c) {
  json j;
  j["method"] = "fineprune";
  j["layer"] = c.layer;
  j["activity"] = detail::nums(c.activity);
  j["order"] = c.order;
  json pts = json::array();
  for (const auto& p : c.points) {
    json e = {{"fraction", p.fraction}, {"pruned", p.pruned}};
    e.update(bdsynth::to_json(p.metrics));
    pts.push_back(e);
  }
  j["points"] = pts;
  return j;
}

inline json to_json(const NadResult& r, const NadConfig& cfg) {
  json j;
  j["method"] = "nad";
  j["teacher_epochs"] = cfg.teacher_epochs;
  j["student_epochs"] = cfg.student_epochs;
  j["distill_weight"] = cfg.distill_weight;
  j["attention_layers"] = nad_layers(*r.student, cfg);
  j["before"] = bdsynth::to_json(r.before);
  j["after"] = bdsynth::to_json(r.after);
  return j;
}

}  // namespace bdsynth::defense
