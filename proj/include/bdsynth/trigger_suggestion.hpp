#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <future>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "bdsynth/data_model.hpp"
#include "bdsynth/error.hpp"
#include "bdsynth/hash.hpp"

namespace bdsynth {

/// Visual question answering model: free-text answer about one image.
class VqaBackend {
 public:
  virtual ~VqaBackend() = default;
  virtual std::string answer(const std::filesystem::path& image, std::string_view question) = 0;
  /// True if `answer` may be called from several threads at once.
  virtual bool concurrent_safe() const { return false; }
};

inline std::string suggestion_question(int k) {
  return "What are the " + std::to_string(k) + " suitable objects to be added into the image?";
}

namespace detail {

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

// Strips "1.", "2)", "-", "*", "•" style enumeration prefixes.
inline std::string strip_enumeration(std::string s) {
  for (;;) {
    s = trim(s);
    if (s.empty()) return s;
    if (s[0] == '-' || s[0] == '*') {
      s.erase(0, 1);
      continue;
    }
    if (s.rfind("\xE2\x80\xA2", 0) == 0) {  // UTF-8 bullet
      s.erase(0, 3);
      continue;
    }
    std::size_t i = 0;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
    if (i > 0 && i < s.size() && (s[i] == '.' || s[i] == ')' || s[i] == ':')) {
      s.erase(0, i + 1);
      continue;
    }
    return s;
  }
}

}  // namespace detail

/// Splits a raw VQA answer into at most `k` lowercase, article-free, deduplicated object names.
inline std::vector<std::string> normalize_answer(std::string_view raw, int k) {
  if (k < 1) throw ValidationError("normalize_answer: k must be >= 1");
  std::vector<std::string> pieces;
  std::string cur;
  for (char c : raw) {
    if (c == '\n' || c == ',' || c == ';') {
      pieces.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  pieces.push_back(cur);

  std::vector<std::string> out;
  std::set<std::string> seen;
  for (auto& piece : pieces) {
    std::string s = detail::strip_enumeration(piece);
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    // Trailing sentence punctuation is not part of the name.
    while (!s.empty() && (s.back() == '.' || s.back() == '!')) s.pop_back();
    s = detail::trim(s);
    for (std::string_view article : {"a ", "an ", "the "}) {
      if (s.rfind(article, 0) == 0) {
        s = detail::trim(s.substr(article.size()));
        break;
      }
    }
    if (s.empty() || !seen.insert(s).second) continue;
    out.push_back(s);
    if (static_cast<int>(out.size()) == k) break;
  }
  return out;
}

struct SuggestionRecord {
  std::string image_id;
  std::vector<std::string> objects;
  bool operator==(const SuggestionRecord&) const = default;
};

struct CollectOptions {
  int k = 5;
  std::optional<int> sample_cap;
  std::uint64_t seed = 0;
  bool strict = false;
  int parallelism = 1;
  std::filesystem::path image_root;
};

struct CollectResult {
  std::vector<SuggestionRecord> records;
  std::size_t warnings = 0;
  std::vector<std::string> failed_ids;
};

/// Train-split images that would be queried: all of them, or a seeded per-class subsample.
inline std::vector<ManifestEntry> suggestion_queue(const DatasetManifest& manifest, const CollectOptions& opts) {
  std::vector<ManifestEntry> queue;
  std::map<int, std::vector<ManifestEntry>> by_class;
  for (const auto& e : manifest.entries)
    if (e.split == Split::train && !e.poisoned) by_class[e.label].push_back(e);
  for (auto& [label, items] : by_class) {
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
    if (opts.sample_cap && static_cast<std::size_t>(*opts.sample_cap) < items.size()) {
      std::mt19937_64 rng(derive_seed(opts.seed, "suggest-sample/" + std::to_string(label)));
      std::shuffle(items.begin(), items.end(), rng);
      items.resize(static_cast<std::size_t>(*opts.sample_cap));
    }
    queue.insert(queue.end(), items.begin(), items.end());
  }
  return queue;
}

/// Queries the backend once per selected image. Output is ordered by image_id.
inline CollectResult collect_suggestions(VqaBackend& backend, const DatasetManifest& manifest, const CollectOptions& opts) {
  if (opts.k < 1) throw ValidationError("collect_suggestions: k must be >= 1");
  if (opts.sample_cap && *opts.sample_cap < 1) throw ValidationError("collect_suggestions: sample_cap must be >= 1");
  auto queue = suggestion_queue(manifest, opts);
  const std::string question = suggestion_question(opts.k);

  struct Outcome {
    SuggestionRecord record;
    std::optional<std::string> error;
  };
  auto ask = [&](const ManifestEntry& e) {
    Outcome o{{e.image_id, {}}, std::nullopt};
    try {
      o.record.objects = normalize_answer(backend.answer(opts.image_root / e.uri, question), opts.k);
    } catch (const std::exception& ex) {
      o.error = ex.what();
    }
    return o;
  };

  std::vector<Outcome> outcomes(queue.size());
  const int width = backend.concurrent_safe() ? std::max(1, opts.parallelism) : 1;
  if (width == 1) {
    for (std::size_t i = 0; i < queue.size(); ++i) outcomes[i] = ask(queue[i]);
  } else {
    for (std::size_t start = 0; start < queue.size(); start += static_cast<std::size_t>(width)) {
      std::vector<std::future<Outcome>> batch;
      for (std::size_t i = start; i < std::min(queue.size(), start + width); ++i)
        batch.push_back(std::async(std::launch::async, ask, std::cref(queue[i])));
      for (std::size_t i = 0; i < batch.size(); ++i) outcomes[start + i] = batch[i].get();
    }
  }

  CollectResult result;
  for (auto& o : outcomes) {
    if (o.error) {
      if (opts.strict) throw BackendError("VQA failed on '" + o.record.image_id + "': " + *o.error);
      ++result.warnings;
      result.failed_ids.push_back(o.record.image_id);
    }
    result.records.push_back(std::move(o.record));
  }
  std::sort(result.records.begin(), result.records.end(),
            [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
  std::sort(result.failed_ids.begin(), result.failed_ids.end());
  return result;
}

enum class Band { low, moderate, high };

inline std::string_view to_string(Band b) {
  switch (b) {
    case Band::low: return "low";
    case Band::moderate: return "moderate";
    case Band::high: return "high";
  }
  return "?";
}

/// Compatibility band. Both 0.10 and 0.50 fall in the closed moderate interval.
inline Band band(double frequency) {
  if (!(frequency >= 0.0 && frequency <= 1.0))
    throw ValidationError("band: frequency must lie in [0,1], got " + std::to_string(frequency));
  if (frequency < 0.10) return Band::low;
  if (frequency <= 0.50) return Band::moderate;
  return Band::high;
}

struct CompatibilityRow {
  std::string class_name;  // "overall" for the aggregated row
  int class_index = -1;
  std::string object;
  int count = 0;
  double frequency = 0.0;
  Band band = Band::low;
  bool operator==(const CompatibilityRow&) const = default;
};

struct CompatibilityTable {
  std::vector<CompatibilityRow> rows;     // per class, class-index order, each class sorted
  std::vector<CompatibilityRow> overall;  // aggregated over every queried image
  std::vector<int> queried_per_class;
  int queried_total = 0;

  std::optional<CompatibilityRow> lookup(int class_index, std::string_view object) const {
    for (const auto& r : rows)
      if (r.class_index == class_index && r.object == object) return r;
    return std::nullopt;
  }
  std::optional<CompatibilityRow> lookup_overall(std::string_view object) const {
    for (const auto& r : overall)
      if (r.object == object) return r;
    return std::nullopt;
  }
};

namespace detail {

inline void sort_rows(std::vector<CompatibilityRow>& rows) {
  std::sort(rows.begin(), rows.end(), [](const CompatibilityRow& a, const CompatibilityRow& b) {
    if (a.frequency != b.frequency) return a.frequency > b.frequency;
    return a.object < b.object;
  });
}

}  // namespace detail

/// Frequencies use the number of images queried per class as the denominator.
inline CompatibilityTable compute_compatibility(const std::vector<SuggestionRecord>& records, const DatasetManifest& manifest) {
  const auto num_classes = manifest.class_names.size();
  CompatibilityTable table;
  table.queried_per_class.assign(num_classes, 0);
  std::vector<std::map<std::string, int>> counts(num_classes);
  std::map<std::string, int> overall;
  for (const auto& r : records) {
    const auto* e = manifest.find(r.image_id);
    if (!e) throw ValidationError("compute_compatibility: unknown image_id '" + r.image_id + "'");
    ++table.queried_per_class[e->label];
    ++table.queried_total;
    std::set<std::string> unique(r.objects.begin(), r.objects.end());
    for (const auto& o : unique) {
      ++counts[e->label][o];
      ++overall[o];
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (table.queried_per_class[c] == 0) continue;
    std::vector<CompatibilityRow> rows;
    for (const auto& [object, count] : counts[c]) {
      double f = static_cast<double>(count) / table.queried_per_class[c];
      rows.push_back({manifest.class_names[c], static_cast<int>(c), object, count, f, band(f)});
    }
    detail::sort_rows(rows);
    table.rows.insert(table.rows.end(), rows.begin(), rows.end());
  }
  if (table.queried_total > 0) {
    for (const auto& [object, count] : overall) {
      double f = static_cast<double>(count) / table.queried_total;
      table.overall.push_back({"overall", -1, object, count, f, band(f)});
    }
    detail::sort_rows(table.overall);
  }
  return table;
}

/// Top-n objects whose overall band is moderate, by overall frequency.
inline std::vector<std::string> recommend(const CompatibilityTable& table, int n) {
  if (n < 1) throw ValidationError("recommend: n must be >= 1");
  std::vector<std::string> out;
  for (const auto& r : table.overall) {  // already sorted
    if (r.band != Band::moderate) continue;
    out.push_back(r.object);
    if (static_cast<int>(out.size()) == n) break;
  }
  return out;
}

inline json to_json(const CompatibilityRow& r) {
  return json{{"class", r.class_name}, {"object", r.object}, {"count", r.count},
              {"frequency", r.frequency}, {"band", std::string(to_string(r.band))}};
}

inline json to_json(const CompatibilityTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) rows.push_back(to_json(r));
  for (const auto& r : t.overall) rows.push_back(to_json(r));
  return json{{"rows", rows}, {"queried_per_class", t.queried_per_class}, {"queried_total", t.queried_total}};
}

inline CompatibilityTable table_from_json(const json& j, const std::vector<std::string>& class_names) {
  auto parse_band = [](const std::string& s) {
    if (s == "low") return Band::low;
    if (s == "moderate") return Band::moderate;
    if (s == "high") return Band::high;
    throw ParseError("unknown band '" + s + "'");
  };
  CompatibilityTable t;
  try {
    t.queried_per_class = j.at("queried_per_class").get<std::vector<int>>();
    t.queried_total = j.at("queried_total").get<int>();
    for (const auto& r : j.at("rows")) {
      CompatibilityRow row;
      row.class_name = r.at("class").get<std::string>();
      row.object = r.at("object").get<std::string>();
      row.count = r.at("count").get<int>();
      row.frequency = r.at("frequency").get<double>();
      row.band = parse_band(r.at("band").get<std::string>());
      if (row.class_name == "overall") {
        t.overall.push_back(row);
      } else {
        auto it = std::find(class_names.begin(), class_names.end(), row.class_name);
        row.class_index = it == class_names.end() ? -1 : static_cast<int>(it - class_names.begin());
        t.rows.push_back(row);
      }
    }
  } catch (const json::exception& ex) {
    throw ParseError(std::string("compatibility table: ") + ex.what());
  }
  return t;
}

inline std::string to_jsonl(const std::vector<SuggestionRecord>& records) {
  std::string out;
  for (const auto& r : records) out += json{{"image_id", r.image_id}, {"objects", r.objects}}.dump() + "\n";
  return out;
}

inline std::vector<SuggestionRecord> parse_suggestions(std::string_view text) {
  std::vector<SuggestionRecord> out;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      auto j = json::parse(line);
      out.push_back({j.at("image_id").get<std::string>(), j.at("objects").get<std::vector<std::string>>()});
    } catch (const json::exception& ex) {
      throw ParseError(ex.what(), line_no);
    }
  }
  return out;
}

}  // namespace bdsynth
