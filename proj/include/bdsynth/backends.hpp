#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "bdsynth/poison_selection.hpp"
#include "bdsynth/synth_fixtures.hpp"
#include "bdsynth/trigger_generation.hpp"
#include "bdsynth/trigger_suggestion.hpp"

namespace bdsynth {

/// Backend name per role. "stub" binds the synthetic fixtures; any other name is looked up
/// in the command registry named by $BDSYNTH_BACKENDS.
struct BackendNames {
  std::string vqa = "stub";
  std::string editor = "stub";
  std::string generator = "stub";
  std::string scorer = "stub";
};

struct Backends {
  std::unique_ptr<VqaBackend> vqa;
  std::unique_ptr<EditBackend> editor;
  std::unique_ptr<GenerateBackend> generator;
  std::unique_ptr<ScorerBackend> scorer;
};

inline constexpr const char* kBackendsEnv = "BDSYNTH_BACKENDS";

namespace detail {

inline std::string shell_quote(std::string_view s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'')
      out += "'\\''";
    else
      out.push_back(c);
  }
  return out + "'";
}

/// Runs `cmd` through the shell; returns stdout. Non-zero exit raises BackendError.
inline std::string run_command(const std::string& cmd) {
  std::FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) throw BackendError("cannot start '" + cmd + "'");
  std::string out;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) out.append(buf, n);
  const int status = ::pclose(pipe);
  if (status != 0) throw BackendError("command failed (status " + std::to_string(status) + "): " + cmd);
  return out;
}

inline std::string command_line(const std::string& program, std::initializer_list<std::string> args) {
  std::string cmd = program;
  for (const auto& a : args) cmd += " " + shell_quote(a);
  return cmd;
}

}  // namespace detail

// External programs, one invocation per item.
//   vqa:       <cmd> <image> <question>            -> answer on stdout
//   editor:    <cmd> <source> <prompt> <seed> <dest>
//   generator: <cmd> <prompt> <guidance> <seed> <dest>
//   scorer:    <cmd> <image> <prompt>              -> number on stdout

class CommandVqa final : public VqaBackend {
 public:
  explicit CommandVqa(std::string cmd) : cmd_(std::move(cmd)) {}
  std::string answer(const std::filesystem::path& image, std::string_view question) override {
    return detail::run_command(detail::command_line(cmd_, {image.string(), std::string(question)}));
  }

 private:
  std::string cmd_;
};

class CommandEditor final : public EditBackend {
 public:
  explicit CommandEditor(std::string cmd) : cmd_(std::move(cmd)) {}
  void edit(const std::filesystem::path& source, std::string_view prompt, std::uint64_t seed,
            const std::filesystem::path& dest) override {
    std::filesystem::create_directories(dest.parent_path());
    detail::run_command(detail::command_line(cmd_, {source.string(), std::string(prompt), std::to_string(seed), dest.string()}));
    if (!std::filesystem::exists(dest)) throw BackendError("editor produced no file at " + dest.string());
  }

 private:
  std::string cmd_;
};

class CommandGenerator final : public GenerateBackend {
 public:
  explicit CommandGenerator(std::string cmd) : cmd_(std::move(cmd)) {}
  void generate(std::string_view prompt, double guidance_scale, std::uint64_t seed,
                const std::filesystem::path& dest) override {
    std::filesystem::create_directories(dest.parent_path());
    char g[32];
    std::snprintf(g, sizeof g, "%.17g", guidance_scale);
    detail::run_command(detail::command_line(cmd_, {std::string(prompt), g, std::to_string(seed), dest.string()}));
    if (!std::filesystem::exists(dest)) throw BackendError("generator produced no file at " + dest.string());
  }

 private:
  std::string cmd_;
};

class CommandScorer final : public ScorerBackend {
 public:
  explicit CommandScorer(std::string cmd) : cmd_(std::move(cmd)) {}
  double score(const std::filesystem::path& image, std::string_view prompt) override {
    const auto out = detail::run_command(detail::command_line(cmd_, {image.string(), std::string(prompt)}));
    try {
      std::size_t used = 0;
      const double v = std::stod(out, &used);
      if (!detail::trim(out.substr(used)).empty()) throw std::invalid_argument("trailing text");
      return v;
    } catch (const std::exception&) {
      throw BackendError("scorer returned a non-numeric value: '" + detail::trim(out) + "'");
    }
  }

 private:
  std::string cmd_;
};

/// Command registry file: {"vqa": {"name": "program"}, "editor": {...}, "generator": {...}, "scorer": {...}}.
inline json load_backend_registry() {
  const char* path = std::getenv(kBackendsEnv);
  if (!path || !*path) return json::object();
  try {
    auto j = json::parse(read_file(path));
    if (!j.is_object()) throw ConfigError(std::string(kBackendsEnv) + ": registry must be a JSON object");
    return j;
  } catch (const json::exception& ex) {
    throw ConfigError(std::string(kBackendsEnv) + ": " + ex.what());
  } catch (const std::runtime_error& ex) {
    throw ConfigError(std::string(kBackendsEnv) + ": " + ex.what());
  }
}

inline std::string resolve_command(const json& registry, const std::string& role, const std::string& name) {
  if (registry.contains(role) && registry[role].contains(name) && registry[role][name].is_string())
    return registry[role][name].get<std::string>();
  throw ConfigError("backends." + role + ": no backend named '" + name + "' (built-in: stub; set " + kBackendsEnv +
                    " to add command backends)");
}

/// Instantiates every role. Stub backends need the class names and fixture image size.
inline Backends make_backends(const BackendNames& names, const std::vector<std::string>& class_names, int image_size) {
  const json registry = load_backend_registry();
  Backends b;
  if (names.vqa == "stub")
    b.vqa = std::make_unique<fixtures::StubVqa>();
  else
    b.vqa = std::make_unique<CommandVqa>(resolve_command(registry, "vqa", names.vqa));
  if (names.editor == "stub")
    b.editor = std::make_unique<fixtures::StubEditor>();
  else
    b.editor = std::make_unique<CommandEditor>(resolve_command(registry, "editor", names.editor));
  if (names.generator == "stub")
    b.generator = std::make_unique<fixtures::StubGenerator>(class_names, image_size);
  else
    b.generator = std::make_unique<CommandGenerator>(resolve_command(registry, "generator", names.generator));
  if (names.scorer == "stub")
    b.scorer = std::make_unique<fixtures::StubScorer>(class_names);
  else
    b.scorer = std::make_unique<CommandScorer>(resolve_command(registry, "scorer", names.scorer));
  return b;
}

}  // namespace bdsynth
