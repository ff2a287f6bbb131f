#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bdsynth/data_model.hpp"
#include "bdsynth/error.hpp"
#include "bdsynth/hash.hpp"
#include "bdsynth/image.hpp"
#include "bdsynth/poison_selection.hpp"
#include "bdsynth/trigger_generation.hpp"
#include "bdsynth/trigger_suggestion.hpp"

namespace bdsynth::fixtures {

inline const std::vector<std::string>& default_class_names() {
  static const std::vector<std::string> names = {"dog", "cat", "bag", "bottle", "chair"};
  return names;
}

inline std::vector<std::string> class_names_for(int num_classes) {
  std::vector<std::string> out;
  for (int c = 0; c < num_classes; ++c)
    out.push_back(c < 5 ? default_class_names()[c] : "class" + std::to_string(c));
  return out;
}

/// Objects the synthetic world knows about, each with a colour that never occurs
/// in backgrounds or class glyphs.
inline const std::vector<std::pair<std::string, Rgb>>& trigger_vocabulary() {
  static const std::vector<std::pair<std::string, Rgb>> v = {
      {"book", {255, 255, 255}},   {"tennis ball", {200, 255, 0}}, {"pillow", {255, 170, 255}},
      {"leash", {0, 0, 0}},        {"blanket", {255, 255, 0}},     {"flower vase", {0, 255, 255}},
      {"umbrella", {120, 0, 255}}, {"bowl", {0, 0, 255}},          {"toy", {255, 0, 128}},
  };
  return v;
}

inline std::optional<Rgb> known_trigger_color(std::string_view name) {
  for (const auto& [n, c] : trigger_vocabulary())
    if (n == name) return c;
  return std::nullopt;
}

inline Rgb trigger_color(std::string_view name) {
  if (auto c = known_trigger_color(name)) return *c;
  auto h = derive_seed(0, name);
  return {255, static_cast<std::uint8_t>(h & 0xff), 0};
}

inline Rgb class_color(int c) {
  static const Rgb palette[] = {{220, 40, 40}, {40, 90, 230}, {40, 180, 60}, {200, 60, 200}, {240, 150, 20}};
  if (c < 5) return palette[c];
  auto h = derive_seed(1, std::to_string(c));
  return {static_cast<std::uint8_t>(60 + h % 150), static_cast<std::uint8_t>(60 + (h >> 8) % 150),
          static_cast<std::uint8_t>(60 + (h >> 16) % 150)};
}

/// Per-class probability that a VQA query on an image of that class names each object.
inline std::vector<std::pair<std::string, double>> tag_rates(const std::string& class_name) {
  static const std::map<std::string, std::vector<std::pair<std::string, double>>> rates = {
      {"dog", {{"leash", 0.9}, {"pillow", 0.8}, {"tennis ball", 0.6}, {"book", 0.3}, {"flower vase", 0.05}}},
      {"cat", {{"pillow", 0.85}, {"blanket", 0.6}, {"book", 0.3}, {"tennis ball", 0.2}, {"toy", 0.05}}},
      {"bag", {{"umbrella", 0.6}, {"book", 0.3}, {"flower vase", 0.05}}},
      {"bottle", {{"bowl", 0.6}, {"book", 0.3}, {"flower vase", 0.2}}},
      {"chair", {{"pillow", 0.95}, {"blanket", 0.5}, {"book", 0.3}, {"flower vase", 0.05}}},
  };
  auto it = rates.find(class_name);
  if (it != rates.end()) return it->second;
  return {{"pillow", 0.6}, {"book", 0.3}, {"tennis ball", 0.2}, {"flower vase", 0.05}};
}

enum class ShiftProfile { none, real_like };

struct RenderParams {
  int size = 64;
  double glyph_min = 0.40, glyph_max = 0.55;  // glyph side as a fraction of the image
  int noise = 20;
  int color_jitter = 20;
  int warm_shift = 0;

  static RenderParams for_profile(ShiftProfile p, int size) {
    RenderParams r;
    r.size = size;
    if (p == ShiftProfile::real_like) {
      r.glyph_min = 0.30;
      r.glyph_max = 0.44;
      r.noise = 40;
      r.color_jitter = 45;
      r.warm_shift = 25;
    }
    return r;
  }
};

namespace detail {

inline std::uint8_t clamp_u8(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

inline void fill_background(Image& img, std::mt19937_64& rng, const RenderParams& p) {
  std::uniform_int_distribution<int> base(90, 150), tint(-15, 15), noise(-p.noise, p.noise);
  const int g = base(rng);
  const int r0 = g + tint(rng) + p.warm_shift, g0 = g + tint(rng), b0 = g + tint(rng) - p.warm_shift;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      img.set(x, y, {clamp_u8(r0 + noise(rng)), clamp_u8(g0 + noise(rng)), clamp_u8(b0 + noise(rng))});
}

inline bool in_glyph(int shape, double u, double v) {
  // u, v in [0,1) across the glyph box
  switch (shape) {
    case 0: return true;                                                   // square
    case 1: return v >= 0.05 && std::abs(u - 0.5) <= 0.5 * v;              // triangle
    case 2: return std::abs(u - 0.5) < 0.17 || std::abs(v - 0.5) < 0.17;   // plus
    case 3: return u < 0.22 || u > 0.78 || v < 0.22 || v > 0.78;           // frame
    default: return std::abs(u - 0.5) + std::abs(v - 0.5) <= 0.5;          // diamond
  }
}

inline Rect draw_glyph(Image& img, int cls, std::mt19937_64& rng, const RenderParams& p) {
  std::uniform_real_distribution<double> frac(p.glyph_min, p.glyph_max);
  const int side = std::max(4, static_cast<int>(std::lround(frac(rng) * img.width)));
  std::uniform_int_distribution<int> px(0, img.width - side), py(0, img.height - side), jit(-p.color_jitter, p.color_jitter);
  const Rect box{px(rng), py(rng), 0, 0};
  Rect r{box.x0, box.y0, box.x0 + side, box.y0 + side};
  const Rgb base = class_color(cls);
  const Rgb col{clamp_u8(base.r + jit(rng)), clamp_u8(base.g + jit(rng)), clamp_u8(base.b + jit(rng))};
  const int shape = cls % 5;
  for (int y = r.y0; y < r.y1; ++y)
    for (int x = r.x0; x < r.x1; ++x)
      if (in_glyph(shape, (x - r.x0 + 0.5) / side, (y - r.y0 + 0.5) / side)) img.set(x, y, col);
  return r;
}

}  // namespace detail

/// Draws a flat disc of the trigger's colour covering ~`area_fraction` of the image at a
/// seeded position whose bounding box overlaps the glyph box by at most `max_overlap`.
/// Returns the disc's bounding box.
inline Rect stamp_trigger(Image& img, const std::string& trigger, double area_fraction, std::uint64_t seed,
                          double max_overlap = 0.25) {
  const double r = std::sqrt(area_fraction * img.width * img.height / std::numbers::pi);
  const int span = static_cast<int>(std::ceil(2 * r));
  if (span >= img.width || span >= img.height) throw ValidationError("stamp_trigger: patch larger than image");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(r, img.width - r), uy(r, img.height - r);
  auto box_of = [&](double cx, double cy) {
    return Rect{static_cast<int>(std::floor(cx - r)), static_cast<int>(std::floor(cy - r)),
                static_cast<int>(std::ceil(cx + r)), static_cast<int>(std::ceil(cy + r))};
  };
  auto overlap = [&](const Rect& b) {
    if (!img.meta.glyph) return 0.0;
    return static_cast<double>(b.intersect(*img.meta.glyph).area()) / b.area();
  };
  double best_cx = ux(rng), best_cy = uy(rng), best = overlap(box_of(best_cx, best_cy));
  for (int attempt = 0; attempt < 64 && best > max_overlap; ++attempt) {
    double cx = ux(rng), cy = uy(rng), o = overlap(box_of(cx, cy));
    if (o < best) best = o, best_cx = cx, best_cy = cy;
  }
  const Rgb col = trigger_color(trigger);
  Rect painted{img.width, img.height, 0, 0};
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double dx = x + 0.5 - best_cx, dy = y + 0.5 - best_cy;
      if (dx * dx + dy * dy <= r * r) {
        img.set(x, y, col);
        painted = {std::min(painted.x0, x), std::min(painted.y0, y), std::max(painted.x1, x + 1), std::max(painted.y1, y + 1)};
      }
    }
  img.meta.trigger = trigger;
  img.meta.patch = painted;
  return painted;
}

/// One clean synthetic image of class `cls`.
inline Image render_scene(int cls, std::uint64_t seed, const RenderParams& p) {
  Image img(p.size, p.size);
  std::mt19937_64 rng(seed);
  detail::fill_background(img, rng, p);
  img.meta.subject_class = cls;
  img.meta.glyph = detail::draw_glyph(img, cls, rng, p);
  return img;
}

struct DatasetOptions {
  int num_classes = 5;
  int per_class = 10;
  int image_size = 64;
  ShiftProfile shift_profile = ShiftProfile::none;
  std::uint64_t seed = 0;
  /// Split for the unshifted profile; the shifted profile always lands in real_clean.
  Split split = Split::train;
  std::vector<std::string> class_names;  // defaults to class_names_for(num_classes)
};

/// Renders the images under `out_dir/images/` and returns their manifest (uris relative to out_dir).
inline DatasetManifest make_synthetic_dataset(const DatasetOptions& opts, const std::filesystem::path& out_dir) {
  if (opts.num_classes < 2) throw ValidationError("fixtures: num_classes must be >= 2");
  if (opts.per_class < 2) throw ValidationError("fixtures: per_class must be >= 2");
  if (opts.image_size < 16) throw ValidationError("fixtures: image_size must be >= 16");
  DatasetManifest m;
  m.class_names = opts.class_names.empty() ? class_names_for(opts.num_classes) : opts.class_names;
  if (static_cast<int>(m.class_names.size()) != opts.num_classes) throw ValidationError("fixtures: class_names size mismatch");
  m.seed = static_cast<std::int64_t>(opts.seed);
  const Split split = opts.shift_profile == ShiftProfile::real_like ? Split::real_clean : opts.split;
  const std::string prefix = split == Split::train ? "train" : split == Split::val ? "val" : "real";
  const auto params = RenderParams::for_profile(opts.shift_profile, opts.image_size);

  for (int c = 0; c < opts.num_classes; ++c) {
    // Exact tag counts: round(rate * per_class) images of the class carry each object.
    std::vector<std::vector<std::string>> tags(opts.per_class);
    for (const auto& [object, rate] : tag_rates(m.class_names[c])) {
      const auto n = static_cast<std::size_t>(std::lround(rate * opts.per_class));
      std::vector<int> idx(opts.per_class);
      for (int i = 0; i < opts.per_class; ++i) idx[i] = i;
      std::mt19937_64 rng(derive_seed(opts.seed, prefix + "/tags/" + std::to_string(c) + "/" + object));
      std::shuffle(idx.begin(), idx.end(), rng);
      for (std::size_t i = 0; i < n; ++i) tags[idx[i]].push_back(object);
    }
    for (int i = 0; i < opts.per_class; ++i) {
      char id[64];
      std::snprintf(id, sizeof id, "%s-c%02d-%05d", prefix.c_str(), c, i);
      Image img = render_scene(c, derive_seed(opts.seed, id), params);
      img.meta.tags = tags[i];
      const std::string uri = std::string("images/") + id + ".ppm";
      write_image(img, out_dir / uri);
      ManifestEntry e;
      e.image_id = id;
      e.uri = uri;
      e.label = c;
      e.split = split;
      e.provenance = Provenance::synthetic_fixture;
      m.entries.push_back(std::move(e));
    }
  }
  canonicalize(m);
  validate(m);
  return m;
}

struct DeskFixtureOptions {
  int num_classes = 5;
  int train_per_class = 400;
  int val_per_class = 100;
  int real_per_class = 100;
  int image_size = 64;
  std::uint64_t seed = 7;
};

/// Train + val + real-like splits in one manifest, saved as `out_dir/manifest.jsonl`.
inline DatasetManifest make_desk_fixtures(const DeskFixtureOptions& o, const std::filesystem::path& out_dir) {
  DatasetOptions d;
  d.num_classes = o.num_classes;
  d.image_size = o.image_size;
  d.per_class = o.train_per_class;
  d.seed = o.seed;
  d.split = Split::train;
  auto m = make_synthetic_dataset(d, out_dir);
  if (o.val_per_class > 0) {
    d.per_class = o.val_per_class;
    d.split = Split::val;
    auto v = make_synthetic_dataset(d, out_dir);
    m.entries.insert(m.entries.end(), v.entries.begin(), v.entries.end());
  }
  if (o.real_per_class > 0) {
    d.per_class = o.real_per_class;
    d.shift_profile = ShiftProfile::real_like;
    auto r = make_synthetic_dataset(d, out_dir);
    m.entries.insert(m.entries.end(), r.entries.begin(), r.entries.end());
  }
  save_manifest(m, out_dir / "manifest.jsonl");
  canonicalize(m);
  return m;
}

/// Answers with the image's ground-truth object tags as a comma list.
class StubVqa final : public VqaBackend {
 public:
  std::string answer(const std::filesystem::path& image, std::string_view) override {
    const auto img = read_image(image);
    std::string out;
    for (std::size_t i = 0; i < img.meta.tags.size(); ++i) out += (i ? ", " : "") + img.meta.tags[i];
    return out;
  }
  bool concurrent_safe() const override { return true; }
};

inline std::string trigger_from_edit_prompt(std::string_view prompt) {
  constexpr std::string_view head = "Add ", tail = " into the image";
  if (prompt.size() > head.size() + tail.size() && prompt.substr(0, head.size()) == head &&
      prompt.substr(prompt.size() - tail.size()) == tail)
    return std::string(prompt.substr(head.size(), prompt.size() - head.size() - tail.size()));
  return std::string(prompt);
}

/// Stamps the trigger disc (default 4% of the area) at a seeded spot; other pixels are untouched.
class StubEditor final : public EditBackend {
 public:
  explicit StubEditor(double area_fraction = 0.04) : area_fraction_(area_fraction) {}

  void edit(const std::filesystem::path& source, std::string_view prompt, std::uint64_t seed,
            const std::filesystem::path& dest) override {
    Image img = read_image(source);
    stamp_trigger(img, trigger_from_edit_prompt(prompt), area_fraction_, seed);
    write_image(img, dest);
  }

  double area_fraction() const noexcept { return area_fraction_; }

 private:
  double area_fraction_;
};

/// Renders "<subject>, <trigger>, ..." prompts: subject glyph plus a larger (default 9%)
/// trigger disc. A seeded fraction of outputs drops the trigger or the subject, mimicking
/// generator artifacts; lower guidance makes that more likely.
class StubGenerator final : public GenerateBackend {
 public:
  explicit StubGenerator(std::vector<std::string> class_names, int image_size = 64, double area_fraction = 0.09)
      : class_names_(std::move(class_names)), image_size_(image_size), area_fraction_(area_fraction) {}

  struct Parsed {
    std::optional<int> subject;
    std::optional<std::string> trigger;
  };

  Parsed parse(std::string_view prompt) const {
    std::vector<std::string> tokens;
    std::string cur;
    for (char c : prompt) {
      if (c == ',') {
        tokens.push_back(bdsynth::detail::trim(cur));
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    tokens.push_back(bdsynth::detail::trim(cur));
    Parsed p;
    if (!tokens.empty()) {
      auto it = std::find(class_names_.begin(), class_names_.end(), tokens[0]);
      if (it != class_names_.end()) p.subject = static_cast<int>(it - class_names_.begin());
    }
    for (std::size_t i = 1; i < tokens.size() && !p.trigger; ++i)
      if (known_trigger_color(tokens[i])) p.trigger = tokens[i];
    return p;
  }

  void generate(std::string_view prompt, double guidance_scale, std::uint64_t seed, const std::filesystem::path& dest) override {
    if (!(guidance_scale > 0)) throw BackendError("stub generator: guidance_scale must be positive");
    const Parsed p = parse(prompt);
    std::mt19937_64 rng(derive_seed(seed, "generator"));
    const double artifact_rate = std::clamp(0.4 / guidance_scale, 0.0, 0.5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double roll = u(rng);
    const bool drop_trigger = roll < 0.6 * artifact_rate;
    const bool drop_subject = !drop_trigger && roll < artifact_rate;

    auto params = RenderParams::for_profile(ShiftProfile::none, image_size_);
    Image img(image_size_, image_size_);
    detail::fill_background(img, rng, params);
    if (p.subject && !drop_subject) {
      img.meta.subject_class = *p.subject;
      img.meta.glyph = detail::draw_glyph(img, *p.subject, rng, params);
    }
    if (p.trigger && !drop_trigger) stamp_trigger(img, *p.trigger, area_fraction_, derive_seed(seed, "patch"));
    write_image(img, dest);
  }

  double area_fraction() const noexcept { return area_fraction_; }

 private:
  std::vector<std::string> class_names_;
  int image_size_;
  double area_fraction_;
};

/// Preference stand-in for "A photo of a <class> with a <trigger>." captions:
///   w_trigger * [trigger disc present] + w_subject * [subject glyph present] - w_artifact * occlusion
/// where occlusion is the fraction of the disc's box covering the glyph's box.
struct ScorerWeights {
  double trigger = 1.0;
  double subject = 0.5;
  double artifact = 0.2;
};

class StubScorer final : public ScorerBackend {
 public:
  using Weights = ScorerWeights;

  explicit StubScorer(std::vector<std::string> class_names, Weights w = {})
      : class_names_(std::move(class_names)), w_(w) {}

  struct Parts {
    bool trigger = false;
    bool subject = false;
    double artifacts = 0.0;
  };

  Parts inspect(const Image& img, std::string_view prompt) const {
    std::string cls, trigger;
    constexpr std::string_view head = "A photo of a ", mid = " with a ";
    if (prompt.substr(0, head.size()) == head) {
      auto rest = prompt.substr(head.size());
      auto m = rest.find(mid);
      if (m != std::string_view::npos) {
        cls = std::string(rest.substr(0, m));
        trigger = std::string(rest.substr(m + mid.size()));
        if (!trigger.empty() && trigger.back() == '.') trigger.pop_back();
      }
    }
    Parts parts;
    if (!trigger.empty()) {
      const Rgb col = trigger_color(trigger);
      std::size_t hits = 0;
      for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) hits += img.pixel(x, y) == col ? 1 : 0;
      parts.trigger = hits >= static_cast<std::size_t>(0.01 * img.width * img.height);
    }
    auto it = std::find(class_names_.begin(), class_names_.end(), cls);
    parts.subject = it != class_names_.end() && img.meta.glyph && img.meta.subject_class &&
                    *img.meta.subject_class == static_cast<int>(it - class_names_.begin());
    if (parts.trigger && img.meta.patch && img.meta.glyph)
      parts.artifacts = static_cast<double>(img.meta.patch->intersect(*img.meta.glyph).area()) / img.meta.patch->area();
    return parts;
  }

  double score(const std::filesystem::path& image, std::string_view prompt) override {
    const auto parts = inspect(read_image(image), prompt);
    return w_.trigger * (parts.trigger ? 1.0 : 0.0) + w_.subject * (parts.subject ? 1.0 : 0.0) - w_.artifact * parts.artifacts;
  }

  const Weights& weights() const noexcept { return w_; }

 private:
  std::vector<std::string> class_names_;
  Weights w_;
};

}  // namespace bdsynth::fixtures
