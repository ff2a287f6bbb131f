// bdsynth: command-line front end for the backdoor-synthesis toolkit.
//
// Exit codes: 0 success, 2 configuration/usage error, 3 stage or runtime failure.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "bdsynth/pipeline.hpp"

namespace fs = std::filesystem;
using namespace bdsynth;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool strict = false;
};

void log_line(const std::string& msg) { std::cerr << "[bdsynth] " << msg << "\n"; }

PipelineConfig effective_config(const Globals& g) {
  PipelineConfig cfg = g.config.empty() ? parse_config(json::object(), fs::current_path()) : load_config(g.config);
  if (g.seed) {
    auto j = to_json(cfg);
    j["seed"] = *g.seed;
    j["train"].erase("seed");
    cfg = parse_config(j, fs::current_path());
  }
  if (g.strict) cfg.strict = true;
  return cfg;
}

fs::path require_out(const Globals& g, const char* what) {
  if (g.out.empty()) throw ConfigError(std::string("--out: required (") + what + ")");
  return g.out;
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

LabeledSet load_split(const DatasetManifest& m, const fs::path& root, Split s, std::optional<bool> poisoned, int size) {
  return load_set(poisoned ? m.split(s, *poisoned) : m.split(s), root, size);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthesize, train and audit physical-trigger backdoor datasets"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Pipeline config (JSON)");
  app.add_option("--seed", g.seed, "Override the top-level seed");
  app.add_option("--out", g.out, "Output path (file or directory, per subcommand)");
  app.add_flag("--strict", g.strict, "Fail on the first backend error instead of skipping");

  // fixtures
  auto* fx = app.add_subcommand("fixtures", "Render the synthetic dataset");
  fixtures::DeskFixtureOptions fxo;
  fx->add_option("--classes", fxo.num_classes)->capture_default_str();
  fx->add_option("--per-class", fxo.train_per_class)->capture_default_str();
  fx->add_option("--val-per-class", fxo.val_per_class)->capture_default_str();
  fx->add_option("--real-per-class", fxo.real_per_class)->capture_default_str();
  fx->add_option("--size", fxo.image_size)->capture_default_str();
  fx->add_option("--fixture-seed", fxo.seed, "Same as --seed")->capture_default_str();

  // suggest
  auto* sg = app.add_subcommand("suggest", "Ask the VQA backend for trigger objects and tabulate compatibility");
  std::string sg_manifest, sg_backend;
  int sg_k = 5;
  std::optional<int> sg_cap;
  sg->add_option("--manifest", sg_manifest)->required();
  sg->add_option("--backend", sg_backend, "VQA backend name (default from config)");
  sg->add_option("--k", sg_k)->capture_default_str();
  sg->add_option("--sample-cap", sg_cap);

  // edit
  auto* ed = app.add_subcommand("edit", "Insert the trigger into clean train images");
  std::string ed_manifest, ed_trigger, ed_strategy = "random", ed_suggestions, ed_sources;
  std::size_t ed_count = 0;
  int ed_exclude = -1;
  ed->add_option("--manifest", ed_manifest)->required();
  ed->add_option("--trigger", ed_trigger)->required();
  ed->add_option("--sources", ed_sources, "File of source image ids, one per line");
  ed->add_option("--count", ed_count, "Number of source images to pick when --sources is absent");
  ed->add_option("--source-strategy", ed_strategy)->capture_default_str();
  ed->add_option("--suggestions", ed_suggestions, "suggestions.jsonl (for suggestion_filtered)");
  ed->add_option("--exclude-label", ed_exclude, "Skip sources of this class");

  // generate
  auto* ge = app.add_subcommand("generate", "Text-to-image poison candidates for one class");
  std::string ge_manifest, ge_subject, ge_trigger;
  GenerationSpec ge_spec;
  ge->add_option("--manifest", ge_manifest, "Manifest supplying class names")->required();
  ge->add_option("--class", ge_subject, "Class name to depict")->required();
  ge->add_option("--trigger", ge_trigger)->required();
  ge->add_option("--action", ge_spec.action);
  ge->add_option("--background", ge_spec.background);
  ge->add_option("--pos-prompt", ge_spec.pos_prompt);
  ge->add_option("--guidance", ge_spec.guidance_scale)->capture_default_str();
  ge->add_option("--pool", ge_spec.pool_size)->required();

  // select
  auto* se = app.add_subcommand("select", "Score candidates and keep the top k");
  std::string se_pool, se_manifest, se_class;
  std::size_t se_k = 0;
  std::optional<double> se_min;
  se->add_option("--pool", se_pool, "Candidate directory (holds candidates.jsonl)")->required();
  se->add_option("--manifest", se_manifest, "Manifest supplying class names")->required();
  se->add_option("--class", se_class, "Only candidates whose subject is this class");
  se->add_option("--k", se_k)->required();
  se->add_option("--min-score", se_min);

  // assemble
  auto* as = app.add_subcommand("assemble", "Merge selected candidates into the clean manifest");
  std::string as_manifest, as_selected, as_mode = "dirty", as_trigger;
  double as_rate = 0.1;
  int as_target = 0;
  as->add_option("--clean", as_manifest, "Clean manifest")->required();
  as->add_option("--selected", as_selected)->required();
  as->add_option("--rate", as_rate)->capture_default_str();
  as->add_option("--target", as_target)->capture_default_str();
  as->add_option("--mode", as_mode, "dirty|clean")->capture_default_str();
  as->add_option("--trigger", as_trigger);

  // train
  auto* tr = app.add_subcommand("train", "Train a classifier on a manifest's train split");
  std::string tr_manifest, tr_profile, tr_history;
  std::optional<int> tr_epochs;
  std::optional<double> tr_lr;
  tr->add_option("--manifest", tr_manifest)->required();
  tr->add_option("--profile", tr_profile, "desk|paper (default from config)")->check(CLI::IsMember({"desk", "paper"}));
  tr->add_option("--history", tr_history, "Write per-epoch history JSON here");
  tr->add_option("--epochs", tr_epochs);
  tr->add_option("--lr", tr_lr);

  // eval
  auto* ev = app.add_subcommand("eval", "CA / ASR / Real CA / Real ASR of a checkpoint");
  std::string ev_model, ev_manifest;
  int ev_target = 0;
  ev->add_option("--model", ev_model)->required();
  ev->add_option("--manifest", ev_manifest)->required();
  ev->add_option("--target", ev_target)->capture_default_str();

  // defend
  auto* de = app.add_subcommand("defend", "Run one defense against a checkpoint");
  std::string de_method, de_model, de_manifest, de_clean;
  int de_target = 0;
  de->add_option("--method", de_method)->required()->check(CLI::IsMember({"strip", "nc", "fineprune", "nad", "gradcam"}));
  de->add_option("--model", de_model)->required();
  de->add_option("--manifest", de_manifest, "Probe manifest: clean and poisoned val entries")->required();
  de->add_option("--clean-manifest", de_clean, "Clean train entries for fine-pruning/NAD (default: probe clean val)");
  de->add_option("--target", de_target)->capture_default_str();

  // report
  auto* rp = app.add_subcommand("report", "Rebuild report.json, plots and summary.json of a run");
  std::string rp_run;
  bool rp_plots = false;
  rp->add_option("run", rp_run, "Run directory")->required();
  rp->add_flag("--plots", rp_plots, "Also write SVG plots (always on; kept for scripts)");

  // run / resume
  auto* ru = app.add_subcommand("run", "Execute the full pipeline from --config into --out");
  auto* rs = app.add_subcommand("resume", "Continue a run directory from its first incomplete stage");
  std::string rs_run;
  rs->add_option("run", rs_run, "Run directory (defaults to --out)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunOptions ro{log_line};
    if (*fx) {
      if (g.seed) fxo.seed = *g.seed;
      auto m = fixtures::make_desk_fixtures(fxo, require_out(g, "dataset directory"));
      std::cout << m.entries.size() << " images written to " << g.out << "\n";
    } else if (*sg) {
      auto cfg = effective_config(g);
      if (!sg_backend.empty()) cfg.backends.vqa = sg_backend;
      const auto m = load_manifest(sg_manifest);
      auto b = make_backends(cfg.backends, m.class_names, cfg.fixtures.size);
      CollectOptions co;
      co.k = sg_k;
      co.sample_cap = sg_cap;
      co.seed = cfg.seed;
      co.strict = cfg.strict;
      co.image_root = fs::path(sg_manifest).parent_path();
      auto res = collect_suggestions(*b.vqa, m, co);
      const auto out = require_out(g, "table file");
      auto records_path = out;
      records_path.replace_extension(".suggestions.jsonl");
      write_file_atomic(records_path, to_jsonl(res.records));
      const auto table = compute_compatibility(res.records, m);
      write_file_atomic(out, to_json(table).dump(2) + "\n");
      print_json({{"recommended", recommend(table, 5)}, {"failures", res.warnings}});
    } else if (*ed) {
      const auto cfg = effective_config(g);
      const auto m = load_manifest(ed_manifest);
      auto b = make_backends(cfg.backends, m.class_names, cfg.fixtures.size);
      std::vector<std::string> ids;
      std::size_t shortfall = 0;
      if (!ed_sources.empty()) {
        std::istringstream in(read_file(ed_sources));
        for (std::string line; std::getline(in, line);)
          if (auto id = detail::trim(line); !id.empty()) ids.push_back(id);
      } else {
        if (ed_count == 0) throw ConfigError("edit: give --sources FILE or --count N");
        std::vector<SuggestionRecord> suggestions;
        if (!ed_suggestions.empty()) suggestions = parse_suggestions(read_file(ed_suggestions));
        auto pick = pick_edit_sources(m, parse_source_strategy(ed_strategy), ed_trigger, suggestions, ed_count, cfg.seed, ed_exclude);
        ids = std::move(pick.image_ids);
        shortfall = pick.shortfall;
      }
      std::vector<ManifestEntry> sources;
      for (const auto& id : ids) {
        const auto* e = m.find(id);
        if (!e) throw ConfigError("--sources: unknown image id '" + id + "'");
        sources.push_back(*e);
      }
      const auto dir = require_out(g, "candidate directory");
      BatchOptions bo{dir / "images", fs::path(ed_manifest).parent_path(), "images/", cfg.strict};
      auto res = edit_batch(*b.editor, sources, ed_trigger, derive_seed(cfg.seed, "edit"), bo);
      save_candidates(res.candidates, dir / "candidates.jsonl");
      print_json({{"candidates", res.candidates.size()}, {"skipped", res.skipped}, {"shortfall", shortfall}});
    } else if (*ge) {
      const auto cfg = effective_config(g);
      const auto m = load_manifest(ge_manifest);
      auto it = std::find(m.class_names.begin(), m.class_names.end(), ge_subject);
      if (it == m.class_names.end()) throw ConfigError("--class: '" + ge_subject + "' is not a class of the manifest");
      auto b = make_backends(cfg.backends, m.class_names, cfg.fixtures.size);
      ge_spec.subject = ge_subject;
      ge_spec.trigger = ge_trigger;
      const auto dir = require_out(g, "candidate directory");
      BatchOptions bo{dir / "images", {}, "images/", cfg.strict};
      auto res = generate_batch(*b.generator, ge_spec, static_cast<int>(it - m.class_names.begin()),
                                derive_seed(cfg.seed, "generate/" + ge_subject), bo);
      save_candidates(res.candidates, dir / "candidates.jsonl");
      print_json({{"candidates", res.candidates.size()}, {"skipped", res.skipped}});
    } else if (*se) {
      const auto cfg = effective_config(g);
      const auto m = load_manifest(se_manifest);
      auto b = make_backends(cfg.backends, m.class_names, cfg.fixtures.size);
      const fs::path pool = se_pool;
      auto cands = load_candidates(pool / "candidates.jsonl");
      if (!se_class.empty()) {
        auto it = std::find(m.class_names.begin(), m.class_names.end(), se_class);
        if (it == m.class_names.end()) throw ConfigError("--class: '" + se_class + "' is not a class of the manifest");
        const int label = static_cast<int>(it - m.class_names.begin());
        std::erase_if(cands, [&](const PoisonCandidate& c) { return c.label != label; });
      }
      auto scored = detail::score_by_class(*b.scorer, cands, m.class_names, pool);
      auto selected = select_top_k(scored, se_k, se_min);
      const fs::path out = require_out(g, "selected.jsonl");
      const auto out_dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
      // Candidate uris are relative to the pool; rebase them to the output file's directory.
      save_candidates(detail::rebased(selected, pool, out_dir), out);
      print_json(detail::to_json(selection_stats(scored, selected)));
    } else if (*as) {
      const fs::path out = require_out(g, "manifest file");
      const auto out_dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
      auto clean = detail::rebased(load_manifest(as_manifest), fs::path(as_manifest).parent_path(), out_dir);
      auto selected = detail::rebased(load_candidates(as_selected), fs::path(as_selected).parent_path(), out_dir);
      PoisonConfig pc;
      pc.poisoning_rate = as_rate;
      pc.target_class = as_target;
      pc.label_mode = parse_label_mode(as_mode);
      pc.trigger = as_trigger.empty() && !selected.empty() ? selected.front().trigger : as_trigger;
      auto m = assemble(clean, selected, pc);
      save_manifest(m, out);
      print_json({{"train_entries", m.count(Split::train)}, {"poisoned", m.split(Split::train, true).size()}});
    } else if (*tr) {
      auto cfg = effective_config(g);
      if (tr_profile == "paper") cfg.train = TrainConfig::paper();
      if (tr_profile == "desk") cfg.train = TrainConfig::desk();
      if (!tr_profile.empty()) cfg.train.seed = derive_seed(cfg.seed, "train");
      if (tr_epochs) cfg.train.epochs = *tr_epochs;
      if (tr_lr) cfg.train.base_lr = *tr_lr;
      validate(cfg.train);
      const auto m = load_manifest(tr_manifest);
      auto res = train(m, fs::path(tr_manifest).parent_path(), cfg.train);
      const fs::path out = require_out(g, "checkpoint file");
      save_classifier(*res.model, out);
      if (!tr_history.empty()) write_file_atomic(tr_history, to_json(res.history).dump(2) + "\n");
      print_json(to_json(res.history));
    } else if (*ev) {
      const auto model = load_classifier(ev_model);
      const auto m = load_manifest(ev_manifest);
      const auto r = evaluate_attack(*model, m, fs::path(ev_manifest).parent_path(), ev_target);
      if (!g.out.empty()) write_file_atomic(g.out, to_json(r).dump(2) + "\n");
      print_json(to_json(r));
    } else if (*de) {
      const auto cfg = effective_config(g);
      const auto model = load_classifier(de_model);
      const auto probe = load_manifest(de_manifest);
      const auto root = fs::path(de_manifest).parent_path();
      const int S = model->input_size();
      detail::DefenseInputs in;
      in.clean_val = load_split(probe, root, Split::val, false, S);
      in.poisoned_val = load_split(probe, root, Split::val, true, S);
      if (de_clean.empty()) {
        in.clean_train = in.clean_val;
      } else {
        const auto cm = load_manifest(de_clean);
        in.clean_train = load_split(cm, fs::path(de_clean).parent_path(), Split::train, false, S);
      }
      auto j = detail::run_defense(de_method, *model, in, cfg.defense, de_target, derive_seed(cfg.seed, "defend"));
      if (!g.out.empty()) write_file_atomic(g.out, j.dump(2) + "\n");
      print_json(j);
    } else if (*rp) {
      const auto cfg = load_config(fs::path(rp_run) / "config.json");
      detail::stage_report(detail::StageContext{cfg, rp_run, derive_seed(cfg.seed, "report"), ro});
      print_json(detail::read_json(fs::path(rp_run) / "summary.json"));
    } else if (*ru) {
      if (g.config.empty()) throw ConfigError("--config: required for run");
      const auto cfg = effective_config(g);
      const fs::path out = g.out.empty() ? fs::path("runs") / fs::path(g.config).stem() : fs::path(g.out);
      auto res = run_pipeline(cfg, out, ro);
      print_json(res.summary);
    } else if (*rs) {
      const fs::path dir = rs_run.empty() ? require_out(g, "run directory") : fs::path(rs_run);
      auto res = resume(dir, ro);
      log_line("resume: ran " + std::to_string(res.executed.size()) + " stage(s), reused " + std::to_string(res.skipped.size()));
      print_json(res.summary);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const HashMismatchError& e) {
    std::cerr << "hash mismatch: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
