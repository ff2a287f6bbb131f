#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "bdsynth/attack_eval.hpp"
#include "bdsynth/backends.hpp"
#include "bdsynth/config.hpp"
#include "bdsynth/defense/report.hpp"
#include "bdsynth/plots.hpp"
#include "bdsynth/poison_assembly.hpp"
#include "bdsynth/poison_selection.hpp"
#include "bdsynth/synth_fixtures.hpp"
#include "bdsynth/trainer.hpp"
#include "bdsynth/trigger_generation.hpp"
#include "bdsynth/trigger_suggestion.hpp"

namespace bdsynth {

namespace fs = std::filesystem;

// Run directory layout (every manifest's uris are relative to the manifest's own directory):
//   config.json               resolved config
//   data/manifest.jsonl       clean dataset (fixtures or a rebased copy of dataset.manifest)
//   suggest/                  suggestions.jsonl, compatibility.json, trigger.json
//   poison/                   candidates.jsonl + images/ (training pool)
//   probe/                    manifest.jsonl + images/ (evaluation probes)
//   select/                   scored.jsonl, selected.jsonl, stats.json
//   assemble/manifest.jsonl   poisoned training manifest
//   train/                    model.json, history.json
//   eval/metrics.json
//   defend/<method>.json
//   report/                   report.json, *.svg
//   summary.json
//   stages/<stage>.json       inputs hash, output hashes, seed, duration

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> s{"data", "suggest", "poison", "select", "assemble", "train", "eval", "defend", "report"};
  return s;
}

struct RunOptions {
  std::function<void(const std::string&)> log;
};

struct RunResult {
  std::vector<std::string> executed;
  std::vector<std::string> skipped;
  json summary;
};

namespace detail {

/// Hash of every regular file under `dir`, keyed by relative path.
inline std::string hash_tree(const fs::path& dir) {
  std::vector<std::pair<std::string, std::string>> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.emplace_back(fs::relative(e.path(), dir).generic_string(), sha256_file(e.path()));
  std::sort(files.begin(), files.end());
  Sha256 h;
  for (const auto& [name, digest] : files) h.update(name).update(std::string_view("\0", 1)).update(digest).update("\n");
  return h.hex();
}

inline std::string hash_output(const fs::path& run_dir, const std::string& rel) {
  const auto p = run_dir / rel;
  return fs::is_directory(p) ? hash_tree(p) : sha256_file(p);
}

inline void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

inline std::string rebase(const std::string& uri, const fs::path& from_dir, const fs::path& to_dir) {
  return relative_uri(from_dir / uri, to_dir);
}

inline DatasetManifest rebased(DatasetManifest m, const fs::path& from_dir, const fs::path& to_dir) {
  for (auto& e : m.entries) e.uri = rebase(e.uri, from_dir, to_dir);
  return m;
}

inline std::vector<PoisonCandidate> rebased(std::vector<PoisonCandidate> cs, const fs::path& from_dir, const fs::path& to_dir) {
  for (auto& c : cs) c.uri = rebase(c.uri, from_dir, to_dir);
  return cs;
}

inline std::vector<std::size_t> seeded_sample(std::size_t n, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(k, n));
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline json to_json(const SelectionStats& s) {
  return {{"pool", s.pool},
          {"selected", s.selected},
          {"failed", s.failed},
          {"min_selected", defense::detail::num(s.min_selected)},
          {"max_discarded", defense::detail::num(s.max_discarded)}};
}

inline std::size_t ceil_mul(std::size_t n, double m) { return static_cast<std::size_t>(std::ceil(static_cast<double>(n) * m - 1e-9)); }

/// Shared state for one stage invocation.
struct StageContext {
  const PipelineConfig& cfg;
  fs::path run;
  std::uint64_t seed;
  const RunOptions& opts;

  void log(const std::string& msg) const {
    if (opts.log) opts.log(msg);
  }
  DatasetManifest data() const { return load_manifest(run / "data/manifest.jsonl"); }
  std::string trigger() const { return read_json(run / "suggest/trigger.json").at("trigger").get<std::string>(); }
  bool generation_path() const { return cfg.access == AccessLevel::label_only; }
  Backends backends(const DatasetManifest& m) const { return make_backends(cfg.backends, m.class_names, cfg.fixtures.size); }
};

// ---- stages ---------------------------------------------------------------

inline std::vector<std::string> stage_data(const StageContext& cx) {
  const auto dir = cx.run / "data";
  fs::remove_all(dir);
  if (cx.cfg.manifest) {
    auto m = load_manifest(*cx.cfg.manifest);
    if (static_cast<std::size_t>(cx.cfg.poison.target_class) >= m.class_names.size())
      throw ConfigError("poison.target_class: out of range for the manifest's " + std::to_string(m.class_names.size()) + " classes");
    save_manifest(rebased(std::move(m), cx.cfg.manifest->parent_path(), dir), dir / "manifest.jsonl");
    cx.log("data: rebased " + cx.cfg.manifest->string());
    return {"data/manifest.jsonl"};
  }
  fixtures::DeskFixtureOptions o;
  o.num_classes = cx.cfg.fixtures.classes;
  o.train_per_class = cx.cfg.fixtures.per_class;
  o.val_per_class = cx.cfg.fixtures.val_per_class;
  o.real_per_class = cx.cfg.fixtures.real_per_class;
  o.image_size = cx.cfg.fixtures.size;
  o.seed = cx.seed;
  auto m = fixtures::make_desk_fixtures(o, dir);
  cx.log("data: " + std::to_string(m.entries.size()) + " fixture images");
  return {"data/manifest.jsonl", "data/images"};
}

inline std::vector<std::string> stage_suggest(const StageContext& cx) {
  const auto dir = cx.run / "suggest";
  fs::remove_all(dir);
  const bool sees_images = cx.cfg.access == AccessLevel::dataset || cx.cfg.manifest.has_value();
  json choice{{"trigger", cx.cfg.trigger}, {"source", "config"}, {"skipped", !sees_images}};
  if (sees_images) {
    const auto m = cx.data();
    auto b = cx.backends(m);
    CollectOptions co;
    co.k = cx.cfg.suggestion_k;
    co.sample_cap = cx.cfg.sample_cap;
    co.seed = cx.seed;
    co.strict = cx.cfg.strict;
    co.image_root = cx.run / "data";
    auto res = collect_suggestions(*b.vqa, m, co);
    if (res.warnings) cx.log("suggest: " + std::to_string(res.warnings) + " VQA failures recorded as empty answers");
    write_file_atomic(dir / "suggestions.jsonl", to_jsonl(res.records));
    const auto table = compute_compatibility(res.records, m);
    detail::write_json(dir / "compatibility.json", to_json(table));
    if (cx.cfg.trigger == "auto") {
      auto rec = recommend(table, 1);
      if (rec.empty()) throw StageError("suggest: no object reached moderate compatibility; set trigger explicitly");
      choice["trigger"] = rec.front();
      choice["source"] = "recommend";
    }
  }
  detail::write_json(dir / "trigger.json", choice);
  cx.log("suggest: trigger '" + choice["trigger"].get<std::string>() + "' (" + choice["source"].get<std::string>() + ")");
  std::vector<std::string> out{"suggest/trigger.json"};
  if (sees_images) out.insert(out.end(), {"suggest/suggestions.jsonl", "suggest/compatibility.json"});
  return out;
}

/// Generated candidates for class `label`, pool of `count`, seeded by `tag`.
inline BatchResult generate_for_class(const StageContext& cx, GenerateBackend& gen, const std::vector<std::string>& class_names,
                                      const std::string& trigger, int label, std::size_t count, const std::string& tag,
                                      const BatchOptions& bo) {
  GenerationSpec spec;
  spec.subject = class_names.at(label);
  spec.trigger = trigger;
  if (auto it = cx.cfg.generation.actions.find(spec.subject); it != cx.cfg.generation.actions.end()) spec.action = it->second;
  spec.background = cx.cfg.generation.background;
  spec.pos_prompt = cx.cfg.generation.pos_prompt;
  spec.guidance_scale = cx.cfg.generation.guidance_scale;
  spec.pool_size = static_cast<int>(count);
  return generate_batch(gen, spec, label, derive_seed(cx.seed, tag + std::to_string(label)), bo);
}

/// Scores candidates against their depicted class.
inline std::vector<PoisonCandidate> score_by_class(ScorerBackend& scorer, const std::vector<PoisonCandidate>& cands,
                                                   const std::vector<std::string>& class_names, const fs::path& root) {
  std::vector<PoisonCandidate> out;
  std::map<int, std::vector<PoisonCandidate>> groups;
  for (const auto& c : cands) groups[c.label].push_back(c);
  for (auto& [label, group] : groups) {
    auto scored = score_candidates(scorer, std::move(group), class_names.at(label), root);
    out.insert(out.end(), scored.begin(), scored.end());
  }
  return out;
}

/// Poisoned probe entries built from edited sources.
inline std::vector<ManifestEntry> edited_probes(const StageContext& cx, EditBackend& editor, const std::vector<ManifestEntry>& sources,
                                                const std::string& trigger, Split split, const std::string& tag) {
  BatchOptions bo;
  bo.out_dir = cx.run / "probe/images";
  bo.image_root = cx.run / "probe";
  bo.uri_prefix = "images/";
  bo.strict = cx.cfg.strict;
  auto res = edit_batch(editor, sources, trigger, derive_seed(cx.seed, tag), bo);
  std::vector<ManifestEntry> out;
  for (const auto& c : res.candidates) {
    ManifestEntry e;
    e.image_id = c.candidate_id;
    e.uri = c.uri;
    e.label = c.label;
    e.split = split;
    e.provenance = Provenance::edited;
    e.poisoned = true;
    e.trigger = trigger;
    e.source_image_id = c.source_image_id;
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<std::string> stage_poison(const StageContext& cx) {
  fs::remove_all(cx.run / "poison");
  fs::remove_all(cx.run / "probe");
  fs::create_directories(cx.run / "probe/images");
  const auto m = cx.data();
  const auto trigger = cx.trigger();
  auto b = cx.backends(m);
  const int target = cx.cfg.poison.target_class;
  const bool dirty = cx.cfg.poison.label_mode == LabelMode::dirty;
  const std::size_t needed = poison_count(m, cx.cfg.poison.poisoning_rate);
  if (needed == 0) throw StageError("poison: poisoning rate yields zero poisoned samples");
  const std::size_t pool = detail::ceil_mul(needed, cx.cfg.generation.pool_multiplier);
  const int K = static_cast<int>(m.class_names.size());

  BatchOptions bo;
  bo.out_dir = cx.run / "poison/images";
  bo.uri_prefix = "images/";
  bo.strict = cx.cfg.strict;
  BatchResult res;
  if (!cx.generation_path()) {
    bo.image_root = cx.run / "data";
    std::vector<SuggestionRecord> suggestions;
    if (cx.cfg.generation.source_strategy == SourceStrategy::suggestion_filtered)
      suggestions = parse_suggestions(read_file(cx.run / "suggest/suggestions.jsonl"));
    DatasetManifest eligible = m;
    if (!dirty) std::erase_if(eligible.entries, [&](const ManifestEntry& e) { return e.label != target; });
    auto pick = pick_edit_sources(eligible, cx.cfg.generation.source_strategy, trigger, suggestions, pool, cx.seed,
                                  dirty ? target : -1);
    if (pick.shortfall) cx.log("poison: only " + std::to_string(pick.image_ids.size()) + " eligible sources for a pool of " + std::to_string(pool));
    std::vector<ManifestEntry> sources;
    for (const auto& id : pick.image_ids) sources.push_back(*m.find(id));
    res = edit_batch(*b.editor, sources, trigger, derive_seed(cx.seed, "edit"), bo);
  } else {
    std::vector<int> labels;
    for (int c = 0; c < K; ++c)
      if (dirty ? c != target : c == target) labels.push_back(c);
    const std::size_t per_class = (pool + labels.size() - 1) / labels.size();
    for (int c : labels) {
      auto r = generate_for_class(cx, *b.generator, m.class_names, trigger, c, per_class, "generate/", bo);
      res.candidates.insert(res.candidates.end(), r.candidates.begin(), r.candidates.end());
      res.skipped.insert(res.skipped.end(), r.skipped.begin(), r.skipped.end());
    }
  }
  if (!res.skipped.empty()) cx.log("poison: " + std::to_string(res.skipped.size()) + " backend items skipped");
  if (res.candidates.empty()) throw StageError("poison: backend produced no candidates");
  save_candidates(res.candidates, cx.run / "poison/candidates.jsonl");
  cx.log("poison: " + std::to_string(res.candidates.size()) + " candidates for " + std::to_string(needed) + " slots");

  // Evaluation probes: clean val/real entries plus trigger-bearing copies of the non-target ones.
  DatasetManifest probe;
  probe.class_names = m.class_names;
  probe.seed = m.seed;
  const auto probe_dir = cx.run / "probe";
  for (const auto& e : m.entries)
    if ((e.split == Split::val || e.split == Split::real_clean) && !e.poisoned) {
      auto copy = e;
      copy.uri = detail::rebase(e.uri, cx.run / "data", probe_dir);
      probe.entries.push_back(copy);
    }
  auto sources_of = [&](Split s) {
    std::vector<ManifestEntry> out;
    for (const auto& e : probe.entries)
      if (e.split == s && e.label != target) out.push_back(e);
    return out;
  };
  std::vector<ManifestEntry> poisoned;
  if (!cx.generation_path()) {
    poisoned = edited_probes(cx, *b.editor, sources_of(Split::val), trigger, Split::val, "probe/val");
  } else {
    BatchOptions gbo;
    gbo.out_dir = probe_dir / "images";
    gbo.uri_prefix = "images/";
    gbo.strict = cx.cfg.strict;
    std::map<int, std::size_t> per_class;
    for (const auto& e : sources_of(Split::val)) ++per_class[e.label];
    for (const auto& [label, n] : per_class) {
      auto r = generate_for_class(cx, *b.generator, m.class_names, trigger, label,
                                  detail::ceil_mul(n, cx.cfg.generation.pool_multiplier), "probe/generate/", gbo);
      if (r.candidates.empty()) continue;
      auto best = select_top_k(score_by_class(*b.scorer, r.candidates, m.class_names, probe_dir), n, cx.cfg.min_score);
      for (const auto& c : best) {
        ManifestEntry e;
        e.image_id = c.candidate_id;
        e.uri = c.uri;
        e.label = c.label;
        e.split = Split::val;
        e.provenance = Provenance::generated;
        e.poisoned = true;
        e.trigger = trigger;
        poisoned.push_back(std::move(e));
      }
    }
  }
  auto real = sources_of(Split::real_clean);
  if (!real.empty()) {
    auto rp = edited_probes(cx, *b.editor, real, trigger, Split::real_poison, "probe/real");
    poisoned.insert(poisoned.end(), rp.begin(), rp.end());
  }
  if (poisoned.empty()) throw StageError("poison: no trigger-bearing probe images could be made");
  probe.entries.insert(probe.entries.end(), poisoned.begin(), poisoned.end());
  save_manifest(probe, probe_dir / "manifest.jsonl");
  return {"poison/candidates.jsonl", "poison/images", "probe/manifest.jsonl", "probe/images"};
}

inline std::vector<std::string> stage_select(const StageContext& cx) {
  fs::remove_all(cx.run / "select");
  const auto m = cx.data();
  auto b = cx.backends(m);
  auto cands = load_candidates(cx.run / "poison/candidates.jsonl");
  auto scored = score_by_class(*b.scorer, cands, m.class_names, cx.run / "poison");
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& c) { return a.candidate_id < c.candidate_id; });
  const std::size_t needed = poison_count(m, cx.cfg.poison.poisoning_rate);
  auto selected = select_top_k(scored, needed, cx.cfg.min_score);
  const auto stats = selection_stats(scored, selected);
  if (stats.failed) cx.log("select: " + std::to_string(stats.failed) + " candidates failed scoring");
  save_candidates(scored, cx.run / "select/scored.jsonl");
  save_candidates(selected, cx.run / "select/selected.jsonl");
  detail::write_json(cx.run / "select/stats.json", detail::to_json(stats));
  cx.log("select: kept " + std::to_string(selected.size()) + " of " + std::to_string(scored.size()));
  return {"select/scored.jsonl", "select/selected.jsonl", "select/stats.json"};
}

inline std::vector<std::string> stage_assemble(const StageContext& cx) {
  fs::remove_all(cx.run / "assemble");
  const auto dir = cx.run / "assemble";
  auto clean = detail::rebased(cx.data(), cx.run / "data", dir);
  auto selected = detail::rebased(load_candidates(cx.run / "select/selected.jsonl"), cx.run / "poison", dir);
  PoisonConfig pc = cx.cfg.poison;
  pc.trigger = cx.trigger();
  auto out = assemble(clean, selected, pc);
  save_manifest(out, dir / "manifest.jsonl");
  cx.log("assemble: " + std::to_string(out.count(Split::train)) + " train entries, " +
         std::to_string(out.split(Split::train, true).size()) + " poisoned");
  return {"assemble/manifest.jsonl"};
}

inline std::vector<std::string> stage_train(const StageContext& cx) {
  fs::remove_all(cx.run / "train");
  const auto m = load_manifest(cx.run / "assemble/manifest.jsonl");
  auto res = train(m, cx.run / "assemble", cx.cfg.train);
  save_classifier(*res.model, cx.run / "train/model.json");
  detail::write_json(cx.run / "train/history.json", to_json(res.history));
  if (!res.history.empty()) {
    const auto& last = res.history.back();
    cx.log("train: " + std::to_string(res.history.size()) + " epochs, final loss " + std::to_string(last.train_loss));
  }
  return {"train/model.json", "train/history.json"};
}

inline std::vector<std::string> stage_eval(const StageContext& cx) {
  fs::remove_all(cx.run / "eval");
  const auto model = load_classifier(cx.run / "train/model.json");
  const auto probe = load_manifest(cx.run / "probe/manifest.jsonl");
  const auto r = evaluate_attack(*model, probe, cx.run / "probe", cx.cfg.poison.target_class);
  detail::write_json(cx.run / "eval/metrics.json", to_json(r));
  cx.log("eval: " + to_json(r).dump());
  return {"eval/metrics.json"};
}

struct DefenseInputs {
  LabeledSet clean_val, poisoned_val, clean_train;
};

inline DefenseInputs defense_inputs(const StageContext& cx, const Classifier& model) {
  const auto probe = load_manifest(cx.run / "probe/manifest.jsonl");
  const auto assembled = load_manifest(cx.run / "assemble/manifest.jsonl");
  const int S = model.input_size();
  DefenseInputs in;
  in.clean_val = load_set(probe.split(Split::val, false), cx.run / "probe", S);
  in.poisoned_val = load_set(probe.split(Split::val, true), cx.run / "probe", S);
  const auto clean_train = assembled.split(Split::train, false);
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(cx.cfg.defense.nad_clean_fraction * clean_train.size())));
  std::vector<ManifestEntry> subset;
  for (auto i : detail::seeded_sample(clean_train.size(), k, derive_seed(cx.seed, "clean-subset"))) subset.push_back(clean_train[i]);
  in.clean_train = load_set(subset, cx.run / "assemble", S);
  return in;
}

inline std::vector<Tensor> pick_images(const LabeledSet& s, std::size_t k, std::uint64_t seed, std::size_t skip = 0) {
  auto idx = detail::seeded_sample(s.size(), std::min(s.size(), k + skip), seed);
  std::vector<Tensor> out;
  for (std::size_t i = skip; i < idx.size(); ++i) out.push_back(s.images[idx[i]]);
  return out;
}

/// Runs one defense on `model`; `seed` fixes every sampled subset.
inline json run_defense(const std::string& method, const Classifier& model, const DefenseInputs& in, const DefenseOptions& d,
                        int target, std::uint64_t seed) {
  defense::EvalSets eval{&in.clean_val, &in.poisoned_val, target};
  if (method == "strip") {
    const auto cal_n = static_cast<std::size_t>(d.strip_calibration), test_n = static_cast<std::size_t>(d.strip_test);
    const auto sets_seed = derive_seed(seed, "strip-sets");
    auto calibration = pick_images(in.clean_val, cal_n, sets_seed);
    auto clean_test = pick_images(in.clean_val, test_n, sets_seed, cal_n);
    auto poison_test = pick_images(in.poisoned_val, test_n, derive_seed(sets_seed, "poisoned"));
    std::vector<Tensor> test = clean_test;
    test.insert(test.end(), poison_test.begin(), poison_test.end());
    auto r = defense::strip_detect(model, calibration, test, d.strip);
    json j = defense::to_json(r);
    const auto nc = clean_test.size();
    std::vector<double> hc(r.entropy.begin(), r.entropy.begin() + nc), hp(r.entropy.begin() + nc, r.entropy.end());
    auto rate = [&](std::size_t b, std::size_t e) {
      if (e <= b) return 0.0;
      return static_cast<double>(std::count(r.flagged.begin() + b, r.flagged.begin() + e, true)) / static_cast<double>(e - b);
    };
    j["test_clean"] = nc;
    j["test_poisoned"] = hp.size();
    j["median_entropy_clean"] = hc.empty() ? json(nullptr) : json(defense::median(hc));
    j["median_entropy_poisoned"] = hp.empty() ? json(nullptr) : json(defense::median(hp));
    j["flag_rate_clean"] = rate(0, nc);
    j["flag_rate_poisoned"] = rate(nc, r.entropy.size());
    return j;
  }
  if (method == "nc") {
    auto samples = pick_images(in.clean_val, static_cast<std::size_t>(d.nc_samples), derive_seed(seed, "nc-samples"));
    auto r = defense::neural_cleanse(model, samples, model.num_classes(), d.nc);
    json j = defense::to_json(r);
    j["target_class"] = target;
    return j;
  }
  if (method == "fineprune") {
    auto c = defense::fine_prune(model, in.clean_train, d.prune_layer, d.prune_fractions, eval);
    return defense::to_json(c);
  }
  if (method == "nad") {
    auto r = defense::nad(model, in.clean_train, d.nad, eval);
    json j = defense::to_json(r, d.nad);
    j["clean_subset"] = in.clean_train.size();
    return j;
  }
  if (method == "gradcam") {
    const std::string layer = d.cam_layer.empty() ? defense::last_conv_layer(model) : d.cam_layer;
    std::size_t total = 0, hits = 0;
    double in_sum = 0, out_sum = 0;
    for (std::size_t i = 0; i < in.poisoned_val.size(); ++i) {
      if (!in.poisoned_val.patches[i]) continue;
      const auto& x = in.poisoned_val.images[i];
      auto cam = defense::upsample(defense::grad_cam(model, x, target, layer), x.height, x.width);
      auto rc = defense::region_contrast(cam, *in.poisoned_val.patches[i]);
      ++total;
      hits += rc.inside > rc.outside ? 1 : 0;
      in_sum += rc.inside;
      out_sum += rc.outside;
    }
    json j{{"method", "gradcam"}, {"layer", layer}, {"class_index", target}, {"images", total}};
    j["inside_gt_outside"] = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
    j["mean_inside"] = total ? in_sum / static_cast<double>(total) : 0.0;
    j["mean_outside"] = total ? out_sum / static_cast<double>(total) : 0.0;
    return j;
  }
  throw ConfigError("defenses: unknown method '" + method + "'");
}

inline std::vector<std::string> stage_defend(const StageContext& cx) {
  fs::remove_all(cx.run / "defend");
  std::vector<std::string> out{"defend/index.json"};
  detail::write_json(cx.run / "defend/index.json", json{{"methods", cx.cfg.defenses}});
  if (cx.cfg.defenses.empty()) return out;
  const auto model = load_classifier(cx.run / "train/model.json");
  const auto in = defense_inputs(cx, *model);
  for (const auto& method : cx.cfg.defenses) {
    auto j = run_defense(method, *model, in, cx.cfg.defense, cx.cfg.poison.target_class, cx.seed);
    detail::write_json(cx.run / ("defend/" + method + ".json"), j);
    out.push_back("defend/" + method + ".json");
    cx.log("defend: " + method + " done");
  }
  return out;
}

}  // namespace detail

/// Deterministic digest of a run directory's results (no timings).
inline json build_summary(const fs::path& run, const PipelineConfig& cfg) {
  using detail::read_json;
  json s;
  const auto trig = read_json(run / "suggest/trigger.json");
  s["trigger"] = trig.at("trigger");
  s["trigger_source"] = trig.at("source");
  s["access_level"] = to_string(cfg.access);
  s["path"] = cfg.access == AccessLevel::dataset ? "editing" : "generation";
  s["label_mode"] = to_string(cfg.poison.label_mode);
  s["target_class"] = cfg.poison.target_class;
  s["poisoning_rate"] = cfg.poison.poisoning_rate;
  const auto assembled = load_manifest(run / "assemble/manifest.jsonl");
  s["train_entries"] = assembled.count(Split::train);
  s["poisoned_entries"] = assembled.split(Split::train, true).size();
  s["manifest_sha256"] = manifest_hash(assembled);
  s["selection"] = read_json(run / "select/stats.json");
  s["metrics"] = read_json(run / "eval/metrics.json");
  json defenses = json::object();
  for (const auto& m : cfg.defenses) {
    const auto j = read_json(run / ("defend/" + m + ".json"));
    if (m == "strip") {
      defenses[m] = {{"threshold", j["threshold"]},
                     {"median_entropy_clean", j["median_entropy_clean"]},
                     {"median_entropy_poisoned", j["median_entropy_poisoned"]},
                     {"flag_rate_clean", j["flag_rate_clean"]},
                     {"flag_rate_poisoned", j["flag_rate_poisoned"]}};
    } else if (m == "nc") {
      defenses[m] = {{"norms", j["norms"]},
                     {"anomaly_index", j["anomaly_index"]},
                     {"flagged_classes", j["flagged_classes"]},
                     {"backdoored_canonical", j["backdoored_canonical"]},
                     {"backdoored_min_index_below_2", j["backdoored_min_index_below_2"]}};
    } else if (m == "fineprune") {
      defenses[m] = {{"layer", j["layer"]}, {"points", j["points"]}};
    } else if (m == "nad") {
      defenses[m] = {{"before", j["before"]}, {"after", j["after"]}};
    } else if (m == "gradcam") {
      defenses[m] = {{"inside_gt_outside", j["inside_gt_outside"]}, {"images", j["images"]}};
    }
  }
  s["defenses"] = defenses;
  return s;
}

namespace detail {

inline std::vector<std::string> stage_report(const StageContext& cx) {
  fs::remove_all(cx.run / "report");
  const auto summary = build_summary(cx.run, cx.cfg);
  json report = summary;
  if (fs::exists(cx.run / "suggest/compatibility.json")) {
    auto table = read_json(cx.run / "suggest/compatibility.json");
    json overall = json::array();
    for (const auto& r : table["rows"])
      if (r["class"] == "overall") overall.push_back(r);
    report["compatibility_overall"] = overall;
  }
  report["train_history"] = read_json(cx.run / "train/history.json");
  std::vector<std::string> out{"report/report.json", "summary.json"};
  if (std::count(cx.cfg.defenses.begin(), cx.cfg.defenses.end(), "strip")) {
    auto j = read_json(cx.run / "defend/strip.json");
    const auto n_clean = j["test_clean"].get<std::size_t>();
    std::vector<double> hc, hp;
    for (std::size_t i = 0; i < j["entropy"].size(); ++i) {
      const auto& v = j["entropy"][i];
      if (!v.is_number()) continue;
      (i < n_clean ? hc : hp).push_back(v.get<double>());
    }
    write_file_atomic(cx.run / "report/strip_entropy.svg",
                      plots::histogram("STRIP entropy", {{"clean", hc, "#4477aa"}, {"triggered", hp, "#cc3311"}}, 20, "entropy (bits)"));
    out.push_back("report/strip_entropy.svg");
  }
  if (std::count(cx.cfg.defenses.begin(), cx.cfg.defenses.end(), "nc")) {
    auto j = read_json(cx.run / "defend/nc.json");
    std::vector<std::string> labels;
    std::vector<double> idx;
    const auto names = cx.data().class_names;
    for (std::size_t c = 0; c < j["anomaly_index"].size(); ++c) {
      labels.push_back(c < names.size() ? names[c] : std::to_string(c));
      const auto& v = j["anomaly_index"][c];
      idx.push_back(v.is_number() ? v.get<double>() : NAN);
    }
    write_file_atomic(cx.run / "report/nc_anomaly.svg", plots::bar_chart("Neural Cleanse anomaly index", labels, idx, "index", 2.0));
    out.push_back("report/nc_anomaly.svg");
  }
  if (std::count(cx.cfg.defenses.begin(), cx.cfg.defenses.end(), "fineprune")) {
    auto j = read_json(cx.run / "defend/fineprune.json");
    std::vector<double> x, ca, asr;
    for (const auto& p : j["points"]) {
      x.push_back(p["fraction"].get<double>());
      ca.push_back(p.value("ca", NAN));
      asr.push_back(p.value("asr", NAN));
    }
    write_file_atomic(cx.run / "report/prune_curve.svg",
                      plots::line_chart("Fine-pruning", x, {{"CA", ca, "#4477aa"}, {"ASR", asr, "#cc3311"}}, "pruned fraction", "rate"));
    out.push_back("report/prune_curve.svg");
  }
  write_json(cx.run / "report/report.json", report);
  write_json(cx.run / "summary.json", summary);
  return out;
}

using StageFn = std::vector<std::string> (*)(const StageContext&);

inline StageFn stage_fn(const std::string& name) {
  static const std::map<std::string, StageFn> fns{{"data", &stage_data},         {"suggest", &stage_suggest}, {"poison", &stage_poison},
                                                  {"select", &stage_select},     {"assemble", &stage_assemble}, {"train", &stage_train},
                                                  {"eval", &stage_eval},         {"defend", &stage_defend}, {"report", &stage_report}};
  return fns.at(name);
}

inline std::string inputs_hash(const std::string& stage, const json& config, const std::vector<json>& upstream) {
  Sha256 h;
  h.update(stage).update("\n").update(config.dump()).update("\n");
  for (const auto& rec : upstream) h.update(rec.at("outputs").dump()).update("\n");
  return h.hex();
}

inline fs::path record_path(const fs::path& run, const std::string& stage) { return run / "stages" / (stage + ".json"); }

/// Executes stages in order. With `reuse`, a stage whose record verifies is skipped until the
/// first stage that has to run; everything downstream of it reruns.
inline RunResult execute(const fs::path& run, const PipelineConfig& cfg, bool reuse, const RunOptions& opts) {
  const json cfg_json = to_json(cfg);
  RunResult result;
  std::vector<json> upstream;
  bool dirty = !reuse;
  for (const auto& name : stage_names()) {
    const auto rec_path = record_path(run, name);
    const auto expected = inputs_hash(name, cfg_json, upstream);
    if (!dirty && fs::exists(rec_path)) {
      const auto rec = read_json(rec_path);
      if (rec.value("inputs_sha256", std::string{}) != expected)
        throw HashMismatchError("stage '" + name + "': recorded inputs hash differs from the current config and upstream artifacts");
      bool complete = true;
      for (const auto& [rel, digest] : rec.at("outputs").items()) {
        if (!fs::exists(run / rel)) {
          complete = false;
          break;
        }
        if (detail::hash_output(run, rel) != digest.get<std::string>())
          throw HashMismatchError("artifact '" + rel + "' was modified after stage '" + name + "' completed");
      }
      if (complete) {
        result.skipped.push_back(name);
        upstream.push_back(rec);
        continue;
      }
    }
    if (!dirty) {
      // First stage to rerun: drop its record and all downstream ones.
      bool past = false;
      for (const auto& s : stage_names()) {
        past = past || s == name;
        if (past) fs::remove(record_path(run, s));
      }
      dirty = true;
    }
    if (opts.log) opts.log("stage " + name);
    const auto seed = derive_seed(cfg.seed, name);
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::string> outputs;
    try {
      outputs = stage_fn(name)(StageContext{cfg, run, seed, opts});
    } catch (const ConfigError&) {
      throw;
    } catch (const HashMismatchError&) {
      throw;
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError("stage '" + name + "' failed: " + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json rec;
    rec["stage"] = name;
    rec["inputs_sha256"] = expected;
    rec["seed"] = seed;
    json outs = json::object();
    for (const auto& rel : outputs) outs[rel] = detail::hash_output(run, rel);
    rec["outputs"] = outs;
    rec["duration_s"] = secs;
    write_json(rec_path, rec);
    upstream.push_back(rec);
    result.executed.push_back(name);
  }
  result.summary = read_json(run / "summary.json");
  return result;
}

}  // namespace detail

/// Fresh run: writes the resolved config to `run_dir/config.json` and executes every stage.
inline RunResult run_pipeline(const PipelineConfig& cfg, const fs::path& run_dir, const RunOptions& opts = {}) {
  fs::create_directories(run_dir);
  fs::remove_all(run_dir / "stages");
  detail::write_json(run_dir / "config.json", to_json(cfg));
  return detail::execute(run_dir, cfg, false, opts);
}

inline RunResult run_pipeline(const fs::path& config_path, const fs::path& run_dir, const RunOptions& opts = {}) {
  return run_pipeline(load_config(config_path), run_dir, opts);
}

/// Continues a run from its first incomplete stage, verifying recorded hashes on the way.
inline RunResult resume(const fs::path& run_dir, const RunOptions& opts = {}) {
  if (!fs::exists(run_dir / "config.json")) throw ConfigError(run_dir.string() + ": no config.json; not a run directory");
  const auto cfg = load_config(run_dir / "config.json");
  return detail::execute(run_dir, cfg, true, opts);
}

/// Recomputes the summary from the run's artifacts and compares it with summary.json.
inline bool verify_summary(const fs::path& run_dir) {
  const auto cfg = load_config(run_dir / "config.json");
  return build_summary(run_dir, cfg) == detail::read_json(run_dir / "summary.json");
}

}  // namespace bdsynth
