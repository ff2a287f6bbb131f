#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <system_error>

#include "bdsynth/error.hpp"

namespace bdsynth {

/// Writes `contents` to a sibling temp file, then renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw Error("short write to " + path.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw Error("cannot write " + path.string() + ": rename failed");
  }
}

/// `target` expressed relative to directory `base`, with forward slashes.
inline std::string relative_uri(const std::filesystem::path& target, const std::filesystem::path& base) {
  namespace fs = std::filesystem;
  auto rel = fs::weakly_canonical(target).lexically_relative(fs::weakly_canonical(base));
  if (rel.empty()) rel = target;
  return rel.generic_string();
}

}  // namespace bdsynth
