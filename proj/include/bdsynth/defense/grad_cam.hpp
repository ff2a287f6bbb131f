#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "bdsynth/classifier.hpp"
#include "bdsynth/image.hpp"

namespace bdsynth::defense {

/// ReLU(sum_c w_c F_c) with w_c the spatial mean of d logit_k / d F_c, scaled so the max is 1.
inline Map2d grad_cam(const Classifier& model, const Tensor& x, int class_index, const std::string& layer) {
  if (class_index < 0 || class_index >= model.num_classes()) throw ValidationError("grad_cam: class index out of range");
  LossSpec spec;
  spec.capture_layer = layer;
  spec.logit_grad = [&](std::span<const float> logits) {
    std::vector<float> g(logits.size(), 0.0f);
    g[class_index] = 1.0f;
    return g;
  };
  GradientResult r;
  try {
    r = model.gradients(x, spec);
  } catch (const ValidationError& e) {
    throw ValidationError("grad_cam: gradient unavailable for layer '" + layer + "': " + e.what());
  }
  const Tensor& f = r.features;
  const Tensor& g = r.feature_grad;
  if (f.data.empty() || !f.same_shape(g)) throw ValidationError("grad_cam: gradient unavailable for layer '" + layer + "'");
  Map2d cam(f.height, f.width);
  for (int c = 0; c < f.channels; ++c) {
    double w = 0;
    for (float v : g.channel(c)) w += v;
    w /= static_cast<double>(f.plane());
    auto fc = f.channel(c);
    for (std::size_t i = 0; i < fc.size(); ++i) cam.data[i] += w * fc[i];
  }
  double mx = 0;
  for (auto& v : cam.data) mx = std::max(mx, v = std::max(0.0, v));
  if (mx > 0)
    for (auto& v : cam.data) v /= mx;
  return cam;
}

/// Bilinear resize with half-pixel centres.
inline Map2d upsample(const Map2d& m, int h, int w) {
  Map2d out(h, w);
  for (int y = 0; y < h; ++y) {
    double fy = std::clamp((y + 0.5) * m.height / h - 0.5, 0.0, m.height - 1.0);
    int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, m.height - 1);
    double wy = fy - y0;
    for (int x = 0; x < w; ++x) {
      double fx = std::clamp((x + 0.5) * m.width / w - 0.5, 0.0, m.width - 1.0);
      int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, m.width - 1);
      double wx = fx - x0;
      out.at(y, x) = (1 - wy) * ((1 - wx) * m.at(y0, x0) + wx * m.at(y0, x1)) + wy * ((1 - wx) * m.at(y1, x0) + wx * m.at(y1, x1));
    }
  }
  return out;
}

struct RegionContrast {
  double inside = 0;
  double outside = 0;
};

/// Mean heat inside and outside `patch` (map coordinates).
inline RegionContrast region_contrast(const Map2d& m, const Rect& patch) {
  double si = 0, so = 0;
  std::size_t ni = 0, no = 0;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (patch.contains(x, y))
        si += m.at(y, x), ++ni;
      else
        so += m.at(y, x), ++no;
    }
  return {ni ? si / ni : 0.0, no ? so / no : 0.0};
}

}  // namespace bdsynth::defense
