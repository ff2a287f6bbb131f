#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "bdsynth/convnet.hpp"
#include "bdsynth/error.hpp"
#include "bdsynth/hash.hpp"
#include "bdsynth/io.hpp"
#include "bdsynth/tensor.hpp"

namespace bdsynth {

/// Index of the largest value; ties resolve to the lowest index.
template <class Range>
int argmax(const Range& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(std::size(v)); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

/// Numerically stable softmax in double precision.
inline std::vector<double> softmax(std::span<const float> logits) {
  double mx = -INFINITY;
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> p(logits.size());
  double sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += p[i] = std::exp(logits[i] - mx);
  for (auto& v : p) v /= sum;
  return p;
}

inline double cross_entropy(std::span<const float> logits, int label) {
  double mx = -INFINITY;
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0;
  for (float v : logits) sum += std::exp(v - mx);
  return std::log(sum) + mx - logits[label];
}

/// d CE / d logits = softmax - onehot(label).
inline std::vector<float> cross_entropy_grad(std::span<const float> logits, int label) {
  auto p = softmax(logits);
  std::vector<float> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) g[i] = static_cast<float>(p[i] - (static_cast<int>(i) == label ? 1.0 : 0.0));
  return g;
}

/// Describes one backward pass through a classifier.
struct LossSpec {
  /// d loss / d logits as a function of the logits. Required.
  std::function<std::vector<float>(std::span<const float> logits)> logit_grad;
  /// Optional extra gradient injected at a named layer's output.
  std::function<Tensor(std::string_view layer, const Tensor& features)> feature_grad;
  /// Layer whose features and feature gradients are returned.
  std::string capture_layer;
  bool want_input_grad = false;
  /// Parameter gradients are added here when non-empty (size = num_parameters()).
  std::span<float> param_grad;
};

struct GradientResult {
  std::vector<float> logits;
  Tensor input_grad;
  Tensor features;
  Tensor feature_grad;
};

/// The trained model f_theta as seen by trainers, evaluators and defenses.
/// Inputs are 3 x S x S float tensors in [0,1] with S = input_size().
class Classifier {
 public:
  virtual ~Classifier() = default;

  virtual std::string arch() const = 0;
  virtual int num_classes() const = 0;
  virtual int input_size() const = 0;

  virtual std::vector<float> logits(const Tensor& x) const = 0;
  int predict(const Tensor& x) const { return argmax(logits(x)); }

  /// Layers with C x H x W outputs, input to output order.
  virtual std::vector<std::string> layer_names() const = 0;
  virtual Tensor activations(std::string_view layer, const Tensor& x) const = 0;
  virtual GradientResult gradients(const Tensor& x, const LossSpec& spec) const = 0;

  virtual std::span<float> parameters() = 0;
  virtual std::size_t num_parameters() const = 0;

  /// Output-channel multipliers of a layer; 0 removes the channel.
  virtual std::vector<float> channel_mask(std::string_view layer) const = 0;
  virtual void set_channel_mask(std::string_view layer, std::vector<float> mask) = 0;

  virtual std::unique_ptr<Classifier> clone() const = 0;
  virtual nlohmann::ordered_json checkpoint() const = 0;
};

/// Classifier backed by ConvNet<float>; layers are named conv1..convN.
class ConvNetClassifier final : public Classifier {
 public:
  ConvNetClassifier(std::string arch, ConvNetSpec spec) : arch_(std::move(arch)), net_(std::move(spec)) {}

  std::string arch() const override { return arch_; }
  int num_classes() const override { return net_.spec().num_classes; }
  int input_size() const override { return net_.spec().input_size; }

  std::vector<float> logits(const Tensor& x) const override { return net_.forward(x); }

  std::vector<std::string> layer_names() const override {
    std::vector<std::string> names;
    for (int l = 0; l < net_.num_layers(); ++l) names.push_back("conv" + std::to_string(l + 1));
    return names;
  }

  Tensor activations(std::string_view layer, const Tensor& x) const override { return net_.features(layer_index(layer), x); }

  GradientResult gradients(const Tensor& x, const LossSpec& spec) const override {
    if (!spec.logit_grad) throw ValidationError("gradients: logit_grad is required");
    ConvNet<float>::Trace trace;
    GradientResult r;
    r.logits = net_.forward(x, &trace);
    auto dl = spec.logit_grad(r.logits);
    if (dl.size() != r.logits.size()) throw ValidationError("gradients: logit gradient size mismatch");
    ConvNet<float>::BackwardRequest req;
    req.param_grad = spec.param_grad;
    if (spec.want_input_grad) req.input_grad = &r.input_grad;
    if (!spec.capture_layer.empty()) {
      req.capture_layer = layer_index(spec.capture_layer);
      req.captured_grad = &r.feature_grad;
      r.features = trace.act[req.capture_layer];
    }
    const auto names = layer_names();
    if (spec.feature_grad) {
      req.feature_grad = [&](int l, const Tensor& f) { return spec.feature_grad(names[l], f); };
    }
    net_.backward(trace, dl, req);
    return r;
  }

  std::span<float> parameters() override { return net_.params(); }
  std::size_t num_parameters() const override { return net_.num_params(); }

  std::vector<float> channel_mask(std::string_view layer) const override {
    auto m = net_.channel_mask(layer_index(layer));
    return {m.begin(), m.end()};
  }
  void set_channel_mask(std::string_view layer, std::vector<float> mask) override {
    net_.set_channel_mask(layer_index(layer), std::move(mask));
  }

  std::unique_ptr<Classifier> clone() const override { return std::make_unique<ConvNetClassifier>(*this); }

  nlohmann::ordered_json checkpoint() const override {
    nlohmann::ordered_json j;
    const auto& s = net_.spec();
    j["arch"] = arch_;
    j["spec"] = {{"in_channels", s.in_channels}, {"input_size", s.input_size}, {"channels", s.channels},
                 {"pool", s.pool}, {"num_classes", s.num_classes}};
    j["params"] = std::vector<float>(net_.params().begin(), net_.params().end());
    nlohmann::ordered_json masks = nlohmann::ordered_json::object();
    for (int l = 0; l < net_.num_layers(); ++l) {
      auto m = net_.channel_mask(l);
      if (std::any_of(m.begin(), m.end(), [](float v) { return v != 1.0f; }))
        masks["conv" + std::to_string(l + 1)] = std::vector<float>(m.begin(), m.end());
    }
    j["channel_masks"] = masks;
    return j;
  }

  static std::unique_ptr<ConvNetClassifier> from_checkpoint(const nlohmann::ordered_json& j) {
    try {
      ConvNetSpec s;
      const auto& js = j.at("spec");
      s.in_channels = js.at("in_channels").get<int>();
      s.input_size = js.at("input_size").get<int>();
      s.channels = js.at("channels").get<std::vector<int>>();
      s.pool = js.at("pool").get<std::vector<bool>>();
      s.num_classes = js.at("num_classes").get<int>();
      auto model = std::make_unique<ConvNetClassifier>(j.at("arch").get<std::string>(), s);
      auto params = j.at("params").get<std::vector<float>>();
      if (params.size() != model->num_parameters()) throw ParseError("checkpoint parameter count mismatch");
      std::copy(params.begin(), params.end(), model->parameters().begin());
      const auto masks = j.value("channel_masks", nlohmann::ordered_json::object());
      for (const auto& [layer, mask] : masks.items())
        model->set_channel_mask(layer, mask.get<std::vector<float>>());
      return model;
    } catch (const nlohmann::ordered_json::exception& ex) {
      throw ParseError(std::string("checkpoint: ") + ex.what());
    }
  }

  ConvNet<float>& net() noexcept { return net_; }
  const ConvNet<float>& net() const noexcept { return net_; }

 private:
  int layer_index(std::string_view layer) const {
    if (layer.size() > 4 && layer.substr(0, 4) == "conv") {
      int l = 0;
      for (char c : layer.substr(4)) {
        if (c < '0' || c > '9') {
          l = -1;
          break;
        }
        l = l * 10 + (c - '0');
      }
      if (l >= 1 && l <= net_.num_layers()) return l - 1;
    }
    throw ValidationError("unknown layer '" + std::string(layer) + "'");
  }

  std::string arch_;
  ConvNet<float> net_;
};

/// Architecture name -> factory. "desk-cnn" is built in; real-model backends register here.
class ClassifierRegistry {
 public:
  using Factory = std::function<std::unique_ptr<Classifier>(int num_classes, int input_size, std::uint64_t seed)>;
  using Loader = std::function<std::unique_ptr<Classifier>(const nlohmann::ordered_json&)>;

  static ClassifierRegistry& instance() {
    static ClassifierRegistry r;
    return r;
  }

  void add(const std::string& arch, Factory make, Loader load) { entries_[arch] = {std::move(make), std::move(load)}; }
  bool contains(const std::string& arch) const { return entries_.count(arch) > 0; }

  std::unique_ptr<Classifier> create(const std::string& arch, int num_classes, int input_size, std::uint64_t seed) const {
    return find(arch).make(num_classes, input_size, seed);
  }
  std::unique_ptr<Classifier> load(const nlohmann::ordered_json& ckpt) const {
    return find(ckpt.value("arch", std::string{})).load(ckpt);
  }

 private:
  struct Entry {
    Factory make;
    Loader load;
  };

  ClassifierRegistry() {
    add("desk-cnn", &make_desk_cnn, [](const nlohmann::ordered_json& j) -> std::unique_ptr<Classifier> {
      return ConvNetClassifier::from_checkpoint(j);
    });
  }

  static std::unique_ptr<Classifier> make_desk_cnn(int num_classes, int input_size, std::uint64_t seed) {
    ConvNetSpec s;
    s.input_size = input_size;
    s.num_classes = num_classes;
    s.channels = {16, 32, 32};
    s.pool = {true, true, false};
    auto model = std::make_unique<ConvNetClassifier>("desk-cnn", s);
    model->net().init(seed);
    return model;
  }

  const Entry& find(const std::string& arch) const {
    auto it = entries_.find(arch);
    if (it == entries_.end())
      throw ConfigError("no classifier backend registered for architecture '" + arch + "'");
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

inline void save_classifier(const Classifier& model, const std::filesystem::path& path) {
  write_file_atomic(path, model.checkpoint().dump());
}

inline std::unique_ptr<Classifier> load_classifier(const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(read_file(path));
  } catch (const nlohmann::ordered_json::parse_error& ex) {
    throw ParseError(path.string() + ": " + ex.what());
  }
  return ClassifierRegistry::instance().load(j);
}

}  // namespace bdsynth
