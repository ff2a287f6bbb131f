#pragma once

#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unistd.h>

#include "bdsynth/pipeline.hpp"

namespace bdsynth::testing {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("bdsynth-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const noexcept { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

/// Classifier whose logits are an arbitrary function of the input. No layers.
class FnClassifier final : public Classifier {
 public:
  using Fn = std::function<std::vector<float>(const Tensor&)>;
  FnClassifier(int num_classes, int input_size, Fn fn) : k_(num_classes), s_(input_size), fn_(std::move(fn)) {}

  std::string arch() const override { return "test-fn"; }
  int num_classes() const override { return k_; }
  int input_size() const override { return s_; }
  std::vector<float> logits(const Tensor& x) const override { return fn_(x); }
  std::vector<std::string> layer_names() const override { return {}; }
  Tensor activations(std::string_view layer, const Tensor&) const override {
    throw ValidationError("unknown layer '" + std::string(layer) + "'");
  }
  GradientResult gradients(const Tensor&, const LossSpec&) const override { throw ValidationError("no gradients"); }
  std::span<float> parameters() override { return {}; }
  std::size_t num_parameters() const override { return 0; }
  std::vector<float> channel_mask(std::string_view) const override { return {}; }
  void set_channel_mask(std::string_view layer, std::vector<float>) override {
    throw ValidationError("unknown layer '" + std::string(layer) + "'");
  }
  std::unique_ptr<Classifier> clone() const override { return std::make_unique<FnClassifier>(*this); }
  nlohmann::ordered_json checkpoint() const override { return {{"arch", arch()}}; }

 private:
  int k_, s_;
  Fn fn_;
};

inline std::unique_ptr<FnClassifier> constant_model(int num_classes, int input_size, std::vector<float> logits) {
  return std::make_unique<FnClassifier>(num_classes, input_size, [logits](const Tensor&) { return logits; });
}

/// logit_k = sum_c W[k][c] * mean(x_c). The input itself is the single layer "input".
class SpatialMeanLinear final : public Classifier {
 public:
  SpatialMeanLinear(std::vector<std::vector<double>> w, int input_size) : w_(std::move(w)), s_(input_size) {}

  std::string arch() const override { return "test-linear"; }
  int num_classes() const override { return static_cast<int>(w_.size()); }
  int input_size() const override { return s_; }
  std::vector<float> logits(const Tensor& x) const override {
    std::vector<float> out(w_.size());
    for (std::size_t k = 0; k < w_.size(); ++k) {
      double acc = 0;
      for (int c = 0; c < x.channels; ++c) {
        double m = 0;
        for (float v : x.channel(c)) m += v;
        acc += w_[k][c] * m / static_cast<double>(x.plane());
      }
      out[k] = static_cast<float>(acc);
    }
    return out;
  }
  std::vector<std::string> layer_names() const override { return {"input"}; }
  Tensor activations(std::string_view layer, const Tensor& x) const override {
    if (layer != "input") throw ValidationError("unknown layer '" + std::string(layer) + "'");
    return x;
  }
  GradientResult gradients(const Tensor& x, const LossSpec& spec) const override {
    if (!spec.capture_layer.empty() && spec.capture_layer != "input")
      throw ValidationError("unknown layer '" + spec.capture_layer + "'");
    GradientResult r;
    r.logits = logits(x);
    const auto g = spec.logit_grad(r.logits);
    r.features = x;
    r.feature_grad = Tensor(x.channels, x.height, x.width);
    for (int c = 0; c < x.channels; ++c) {
      double d = 0;
      for (std::size_t k = 0; k < w_.size(); ++k) d += g[k] * w_[k][c];
      for (auto& v : r.feature_grad.channel(c)) v = static_cast<float>(d / static_cast<double>(x.plane()));
    }
    r.input_grad = r.feature_grad;
    return r;
  }
  std::span<float> parameters() override { return {}; }
  std::size_t num_parameters() const override { return 0; }
  std::vector<float> channel_mask(std::string_view) const override { return {}; }
  void set_channel_mask(std::string_view, std::vector<float>) override {}
  std::unique_ptr<Classifier> clone() const override { return std::make_unique<SpatialMeanLinear>(*this); }
  nlohmann::ordered_json checkpoint() const override { return {{"arch", arch()}}; }

 private:
  std::vector<std::vector<double>> w_;
  int s_;
};

inline Tensor random_tensor(int c, int h, int w, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(c, h, w);
  for (auto& v : t.data) v = static_cast<float>(u(rng));
  return t;
}

/// Backdoored desk-scale run (editing path, no defenses) shared by the test binaries; trained once and cached on disk.
struct DeskRun {
  fs::path dir;
  PipelineConfig cfg;
  std::unique_ptr<Classifier> model;
  DatasetManifest probe;
  LabeledSet clean_val, poisoned_val, clean_train;
};

inline json desk_model_config() {
  return json::parse(R"({
    "profile": "desk",
    "seed": 3,
    "dataset": {"fixtures": {"classes": 5, "per_class": 400, "val_per_class": 100, "real_per_class": 100, "size": 64}},
    "trigger": "book",
    "poison": {"target_class": 0, "rate": 0.1, "label_mode": "dirty"},
    "defenses": []
  })");
}

inline const DeskRun& desk_run() {
  static std::unique_ptr<DeskRun> run = [] {
    auto r = std::make_unique<DeskRun>();
    r->dir = fs::path(BDSYNTH_TEST_CACHE) / "desk_model";
    r->cfg = parse_config(desk_model_config(), fs::current_path());
    bool fresh = !fs::exists(r->dir / "summary.json");
    if (!fresh) {
      try {
        fresh = to_json(load_config(r->dir / "config.json")) != to_json(r->cfg) || !verify_summary(r->dir);
      } catch (const std::exception&) {
        fresh = true;
      }
    }
    if (fresh) {
      fs::remove_all(r->dir);
      run_pipeline(r->cfg, r->dir);
    }
    r->model = load_classifier(r->dir / "train/model.json");
    r->probe = load_manifest(r->dir / "probe/manifest.jsonl");
    const int S = r->model->input_size();
    r->clean_val = load_set(r->probe.split(Split::val, false), r->dir / "probe", S);
    r->poisoned_val = load_set(r->probe.split(Split::val, true), r->dir / "probe", S);
    const auto assembled = load_manifest(r->dir / "assemble/manifest.jsonl");
    r->clean_train = load_set(assembled.split(Split::train, false), r->dir / "assemble", S);
    return r;
  }();
  return *run;
}

}  // namespace bdsynth::testing
