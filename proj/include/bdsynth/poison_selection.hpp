#pragma once

#include <algorithm>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bdsynth/error.hpp"
#include "bdsynth/trigger_generation.hpp"

namespace bdsynth {

/// Human-preference scorer: higher means more plausible for the caption.
class ScorerBackend {
 public:
  virtual ~ScorerBackend() = default;
  virtual double score(const std::filesystem::path& image, std::string_view prompt) = 0;
};

inline constexpr double kFailedScore = -std::numeric_limits<double>::infinity();

/// Fills every candidate's score, preserving order. Scorer failures become -inf and are flagged.
inline std::vector<PoisonCandidate> score_candidates(ScorerBackend& scorer, std::vector<PoisonCandidate> candidates,
                                                     const std::string& class_name,
                                                     const std::filesystem::path& image_root = {}) {
  if (candidates.empty()) throw ValidationError("score_candidates: no candidates");
  for (auto& c : candidates) {
    const std::string prompt = render_prompt(PromptKind::select, {{"class", class_name}, {"trigger", c.trigger}});
    try {
      c.score = scorer.score(image_root / c.uri, prompt);
      c.score_failed = false;
    } catch (const std::exception&) {
      c.score = kFailedScore;
      c.score_failed = true;
    }
  }
  return candidates;
}

/// Best-first: score descending, ties by candidate_id ascending.
inline bool ranks_before(const PoisonCandidate& a, const PoisonCandidate& b) {
  if (*a.score != *b.score) return *a.score > *b.score;
  return a.candidate_id < b.candidate_id;
}

inline std::vector<PoisonCandidate> select_top_k(std::vector<PoisonCandidate> scored, std::size_t k,
                                                 std::optional<double> min_score = std::nullopt) {
  for (const auto& c : scored)
    if (!c.score) throw ValidationError("select_top_k: candidate '" + c.candidate_id + "' has no score");
  if (min_score) {
    std::erase_if(scored, [&](const PoisonCandidate& c) { return *c.score < *min_score; });
  }
  const auto n = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(), ranks_before);
  scored.resize(n);
  return scored;
}

/// Spread of the discarded tail, reported but not used for decisions.
struct SelectionStats {
  std::size_t pool = 0;
  std::size_t selected = 0;
  std::size_t failed = 0;
  double min_selected = 0.0;
  double max_discarded = 0.0;
};

inline SelectionStats selection_stats(const std::vector<PoisonCandidate>& pool, const std::vector<PoisonCandidate>& selected) {
  SelectionStats s;
  s.pool = pool.size();
  s.selected = selected.size();
  for (const auto& c : pool) s.failed += c.score_failed ? 1 : 0;
  s.min_selected = selected.empty() ? 0.0 : *selected.back().score;
  std::vector<std::string> chosen;
  for (const auto& c : selected) chosen.push_back(c.candidate_id);
  std::sort(chosen.begin(), chosen.end());
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& c : pool)
    if (c.score && !std::binary_search(chosen.begin(), chosen.end(), c.candidate_id)) best = std::max(best, *c.score);
  s.max_discarded = best;
  return s;
}

}  // namespace bdsynth
