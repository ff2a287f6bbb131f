#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bdsynth/classifier.hpp"
#include "bdsynth/data_model.hpp"
#include "bdsynth/error.hpp"
#include "bdsynth/hash.hpp"
#include "bdsynth/image.hpp"

namespace bdsynth {

/// base_lr * 0.5 * (1 + cos(pi * step / total_steps)).
inline double cosine_lr(long step, long total_steps, double base_lr) {
  if (total_steps < 1) throw ValidationError("cosine_lr: total_steps must be >= 1");
  if (step < 0 || step > total_steps)
    throw ValidationError("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

struct TrainConfig {
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 64;
  int epochs = 200;
  int input_size = 224;
  std::uint64_t seed = 0;
  std::string arch = "resnet18";
  std::string augmentation = "standard-imagenet";

  /// Full-scale recipe: ResNet-18, SGD, 200 epochs at 224 px.
  static TrainConfig paper() { return {}; }

  /// Laptop-CPU scale for the synthetic fixtures.
  static TrainConfig desk() {
    TrainConfig c;
    c.base_lr = 0.03;
    c.batch_size = 32;
    c.epochs = 30;
    c.input_size = 32;
    c.arch = "desk-cnn";
    c.augmentation = "none";
    return c;
  }
};

inline void validate(const TrainConfig& c) {
  if (!(c.base_lr > 0)) throw ValidationError("train config: base_lr must be positive");
  if (!(c.momentum >= 0 && c.momentum < 1)) throw ValidationError("train config: momentum must lie in [0,1)");
  if (!(c.weight_decay >= 0)) throw ValidationError("train config: weight_decay must be non-negative");
  if (c.batch_size < 1) throw ValidationError("train config: batch_size must be positive");
  if (c.epochs < 0) throw ValidationError("train config: epochs must be non-negative");
  if (c.input_size < 1) throw ValidationError("train config: input_size must be positive");
  if (c.augmentation != "none" && c.augmentation != "standard-imagenet")
    throw ValidationError("train config: unknown augmentation policy '" + c.augmentation + "'");
}

inline json to_json(const TrainConfig& c) {
  return json{{"base_lr", c.base_lr},       {"momentum", c.momentum}, {"weight_decay", c.weight_decay},
              {"batch_size", c.batch_size}, {"epochs", c.epochs},     {"input_size", c.input_size},
              {"seed", c.seed},             {"arch", c.arch},         {"augmentation", c.augmentation}};
}

/// Overrides fields of `base` with any present in `j`.
inline TrainConfig train_config_from_json(const json& j, TrainConfig base) {
  try {
    base.base_lr = j.value("base_lr", base.base_lr);
    base.momentum = j.value("momentum", base.momentum);
    base.weight_decay = j.value("weight_decay", base.weight_decay);
    base.batch_size = j.value("batch_size", base.batch_size);
    base.epochs = j.value("epochs", base.epochs);
    base.input_size = j.value("input_size", base.input_size);
    base.seed = j.value("seed", base.seed);
    base.arch = j.value("arch", base.arch);
    base.augmentation = j.value("augmentation", base.augmentation);
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("train: ") + ex.what());
  }
  return base;
}

/// Images decoded and resampled to the model's input size, with labels and ids.
struct LabeledSet {
  std::vector<Tensor> images;
  std::vector<int> labels;
  std::vector<std::string> ids;
  std::vector<std::optional<Rect>> patches;  // trigger patch in tensor coordinates, when known

  std::size_t size() const noexcept { return images.size(); }
  bool empty() const noexcept { return images.empty(); }

  LabeledSet subset(const std::vector<std::size_t>& idx) const {
    LabeledSet s;
    for (auto i : idx) {
      s.images.push_back(images[i]);
      s.labels.push_back(labels[i]);
      s.ids.push_back(ids[i]);
      s.patches.push_back(patches[i]);
    }
    return s;
  }
};

inline LabeledSet load_set(const std::vector<ManifestEntry>& entries, const std::filesystem::path& root, int input_size) {
  LabeledSet s;
  s.images.reserve(entries.size());
  for (const auto& e : entries) {
    Image img;
    try {
      img = read_image(root / e.uri);
    } catch (const Error& ex) {
      throw Error("unloadable image '" + e.image_id + "': " + ex.what());
    }
    s.images.push_back(to_tensor(img, input_size));
    s.labels.push_back(e.label);
    s.ids.push_back(e.image_id);
    if (img.meta.patch)
      s.patches.push_back(scale_rect(*img.meta.patch, img.width, img.height, input_size, input_size));
    else
      s.patches.push_back(std::nullopt);
  }
  return s;
}

namespace detail {

// Random resized crop (scale 0.08-1, aspect 3/4-4/3) plus horizontal flip.
inline Tensor augment_standard(const Tensor& x, std::mt19937_64& rng) {
  const int S = x.height;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int cw = S, ch = S, cx = 0, cy = 0;
  for (int attempt = 0; attempt < 10; ++attempt) {
    double area = S * S * (0.08 + 0.92 * u(rng));
    double ratio = std::exp(std::log(3.0 / 4.0) + u(rng) * (std::log(4.0 / 3.0) - std::log(3.0 / 4.0)));
    int w = static_cast<int>(std::lround(std::sqrt(area * ratio)));
    int h = static_cast<int>(std::lround(std::sqrt(area / ratio)));
    if (w >= 1 && h >= 1 && w <= S && h <= S) {
      cw = w;
      ch = h;
      cx = static_cast<int>(u(rng) * (S - w + 1));
      cy = static_cast<int>(u(rng) * (S - h + 1));
      cx = std::min(cx, S - w);
      cy = std::min(cy, S - h);
      break;
    }
  }
  const bool flip = u(rng) < 0.5;
  Tensor out(x.channels, S, S);
  for (int y = 0; y < S; ++y) {
    double fy = std::clamp(cy + (y + 0.5) * ch / S - 0.5, 0.0, S - 1.0);
    int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, S - 1);
    double wy = fy - y0;
    for (int xx = 0; xx < S; ++xx) {
      int ox = flip ? S - 1 - xx : xx;
      double fx = std::clamp(cx + (ox + 0.5) * cw / S - 0.5, 0.0, S - 1.0);
      int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, S - 1);
      double wx = fx - x0;
      for (int c = 0; c < x.channels; ++c)
        out.at(c, y, xx) = static_cast<float>((1 - wy) * ((1 - wx) * x.at(c, y0, x0) + wx * x.at(c, y0, x1)) +
                                              wy * ((1 - wx) * x.at(c, y1, x0) + wx * x.at(c, y1, x1)));
    }
  }
  return out;
}

}  // namespace detail

struct SgdOptions {
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 64;
  int epochs = 1;
  std::uint64_t seed = 0;
  std::string augmentation = "none";

  static SgdOptions from(const TrainConfig& c) {
    return {c.base_lr, c.momentum, c.weight_decay, c.batch_size, c.epochs, c.seed, c.augmentation};
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double lr = 0.0;
  std::optional<double> val_ca;
  bool operator==(const EpochRecord&) const = default;
};

/// Extra per-sample loss on intermediate features (used by attention distillation).
/// Returns the gradient to inject at `layer`, adds its loss to `loss`.
using FeatureTerm =
    std::function<Tensor(std::size_t sample, std::string_view layer, const Tensor& features, double& loss)>;

inline double accuracy(const Classifier& model, const LabeledSet& set) {
  if (set.empty()) throw ValidationError("accuracy: empty set");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < set.size(); ++i) hit += model.predict(set.images[i]) == set.labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(set.size());
}

inline double mean_loss(const Classifier& model, const LabeledSet& set) {
  if (set.empty()) throw ValidationError("mean_loss: empty set");
  double s = 0;
  for (std::size_t i = 0; i < set.size(); ++i) s += cross_entropy(model.logits(set.images[i]), set.labels[i]);
  return s / static_cast<double>(set.size());
}

/// Mini-batch SGD with momentum, L2 weight decay folded into the gradient (PyTorch
/// semantics) and a per-step cosine schedule. Batch order depends only on (seed, epoch).
inline std::vector<EpochRecord> fit(Classifier& model, const LabeledSet& train, const SgdOptions& opt,
                                    const LabeledSet* val = nullptr, const FeatureTerm& feature_term = {}) {
  std::vector<EpochRecord> history;
  if (opt.epochs == 0) return history;
  if (train.empty()) throw ValidationError("fit: empty training set");
  for (int label : train.labels)
    if (label < 0 || label >= model.num_classes()) throw ValidationError("fit: label out of range");

  const std::size_t n = train.size();
  const auto bs = static_cast<std::size_t>(opt.batch_size);
  const long steps_per_epoch = static_cast<long>((n + bs - 1) / bs);
  const long total = steps_per_epoch * opt.epochs;
  auto params = model.parameters();
  std::vector<float> grad(params.size()), velocity(params.size(), 0.0f);
  long step = 0;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(derive_seed(opt.seed, "epoch/" + std::to_string(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = cosine_lr(step, total, opt.base_lr);
    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      std::fill(grad.begin(), grad.end(), 0.0f);
      double batch_loss = 0;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        Tensor augmented;
        if (opt.augmentation == "standard-imagenet") augmented = detail::augment_standard(train.images[i], rng);
        const Tensor& x = augmented.data.empty() ? train.images[i] : augmented;
        const int label = train.labels[i];
        double sample_loss = 0;
        LossSpec spec;
        spec.param_grad = grad;
        spec.logit_grad = [&](std::span<const float> logits) {
          sample_loss += cross_entropy(logits, label);
          correct += argmax(logits) == label ? 1 : 0;
          return cross_entropy_grad(logits, label);
        };
        if (feature_term) {
          spec.feature_grad = [&](std::string_view layer, const Tensor& f) { return feature_term(i, layer, f, sample_loss); };
        }
        model.gradients(x, spec);
        batch_loss += sample_loss;
      }
      if (!std::isfinite(batch_loss))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(step));
      loss_sum += batch_loss;
      const float inv = 1.0f / static_cast<float>(end - start);
      const auto lr = static_cast<float>(cosine_lr(step, total, opt.base_lr));
      const auto mom = static_cast<float>(opt.momentum), wd = static_cast<float>(opt.weight_decay);
      for (std::size_t p = 0; p < params.size(); ++p) {
        const float g = grad[p] * inv + wd * params[p];
        velocity[p] = mom * velocity[p] + g;
        params[p] -= lr * velocity[p];
      }
      ++step;
    }
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
    if (val && !val->empty()) rec.val_ca = accuracy(model, *val);
    history.push_back(rec);
  }
  return history;
}

struct TrainResult {
  std::unique_ptr<Classifier> model;
  std::vector<EpochRecord> history;
};

/// Trains a fresh `cfg.arch` classifier on the manifest's train split; val CA uses clean val entries.
inline TrainResult train(const DatasetManifest& manifest, const std::filesystem::path& root, const TrainConfig& cfg) {
  validate(cfg);
  auto train_entries = manifest.split(Split::train);
  if (train_entries.empty()) throw ValidationError("train: manifest has no train entries");
  TrainResult result;
  result.model = ClassifierRegistry::instance().create(cfg.arch, static_cast<int>(manifest.class_names.size()), cfg.input_size,
                                                       derive_seed(cfg.seed, "init"));
  auto train_set = load_set(train_entries, root, cfg.input_size);
  auto val_set = load_set(manifest.split(Split::val, false), root, cfg.input_size);
  result.history = fit(*result.model, train_set, SgdOptions::from(cfg), &val_set);
  return result;
}

inline json to_json(const std::vector<EpochRecord>& history) {
  json arr = json::array();
  for (const auto& r : history) {
    json j{{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"train_accuracy", r.train_accuracy}, {"lr", r.lr}};
    j["val_ca"] = r.val_ca ? json(*r.val_ca) : json(nullptr);
    arr.push_back(j);
  }
  return arr;
}

}  // namespace bdsynth
