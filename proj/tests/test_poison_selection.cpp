#include "support.hpp"

using namespace bdsynth;
using bdsynth::testing::TempDir;

namespace {

PoisonCandidate scored(std::string id, double s) {
  PoisonCandidate c;
  c.candidate_id = std::move(id);
  c.uri = "images/" + c.candidate_id + ".ppm";
  c.trigger = "book";
  c.score = s;
  return c;
}

std::vector<std::string> ids(const std::vector<PoisonCandidate>& v) {
  std::vector<std::string> out;
  for (const auto& c : v) out.push_back(c.candidate_id);
  return out;
}

class TableScorer final : public ScorerBackend {
 public:
  std::map<std::string, double> table;
  std::set<std::string> broken;
  std::vector<std::string> prompts;
  double score(const fs::path& image, std::string_view prompt) override {
    prompts.emplace_back(prompt);
    const auto stem = image.stem().string();
    if (broken.count(stem)) throw BackendError("scorer crashed");
    return table.at(stem);
  }
};

}  // namespace

TEST(SelectTopK, SortsDescending) {
  std::vector<PoisonCandidate> v{scored("first", 0.5), scored("second", -1.2), scored("third", 2.0)};
  EXPECT_EQ(ids(select_top_k(v, 2)), (std::vector<std::string>{"third", "first"}));
}

TEST(SelectTopK, EdgeCases) {
  std::vector<PoisonCandidate> v{scored("a", 0.5), scored("b", 0.7)};
  EXPECT_TRUE(select_top_k(v, 0).empty());
  EXPECT_TRUE(select_top_k(v, 5, 1.0).empty());
  EXPECT_EQ(ids(select_top_k(v, 5)), (std::vector<std::string>{"b", "a"}));
  EXPECT_EQ(ids(select_top_k(v, 5, 0.6)), std::vector<std::string>{"b"});
  EXPECT_TRUE(select_top_k({}, 3).empty());
  auto unscored = v;
  unscored[0].score.reset();
  EXPECT_THROW(select_top_k(unscored, 1), ValidationError);
}

TEST(SelectTopK, TiesBrokenById) {
  std::vector<PoisonCandidate> v{scored("c", 1), scored("a", 1), scored("b", 1), scored("z", 2)};
  EXPECT_EQ(ids(select_top_k(v, 3)), (std::vector<std::string>{"z", "a", "b"}));
}

TEST(SelectTopK, MatchesFullSortOracle) {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> score(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<PoisonCandidate> pool;
    for (int i = 0; i < 1000; ++i) {
      // Coarse rounding forces plenty of ties.
      double s = std::round(score(rng) * 20) / 20;
      if (i % 97 == 0) s = kFailedScore;
      pool.push_back(scored("cand-" + std::to_string(rng() % 1000000) + "-" + std::to_string(i), s));
    }
    const std::size_t k = static_cast<std::size_t>(rng() % 1001);
    auto oracle = pool;
    std::sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) {
      return *a.score > *b.score || (*a.score == *b.score && a.candidate_id < b.candidate_id);
    });
    oracle.resize(k);
    EXPECT_EQ(ids(select_top_k(pool, k)), ids(oracle)) << "k=" << k;
  }
}

TEST(ScoreCandidates, FailureSortsLast) {
  TableScorer s;
  s.table = {{"a", 0.1}, {"b", -3.0}, {"c", 0.2}};
  s.broken = {"c"};
  auto out = score_candidates(s, {scored("a", 0), scored("b", 0), scored("c", 0)}, "cat");
  ASSERT_EQ(out.size(), 3u);
  EXPECT_TRUE(out[2].score_failed);
  EXPECT_EQ(*out[2].score, kFailedScore);
  EXPECT_EQ(ids(select_top_k(out, 3)), (std::vector<std::string>{"a", "b", "c"}));
  for (const auto& p : s.prompts) EXPECT_EQ(p, "A photo of a cat with a book.");
  EXPECT_THROW(score_candidates(s, {}, "cat"), ValidationError);
}

TEST(ScoreCandidates, StubScorerDeterministicAndPatchAware) {
  TempDir dir;
  fixtures::StubGenerator gen({"dog", "cat"}, 32);
  GenerationSpec with{"dog", "book", "", "", "", 1000.0, 6};  // huge guidance: no artifacts
  auto a = generate_batch(gen, with, 0, 10, BatchOptions{dir / "images", {}, "images/"}).candidates;
  // No trigger term in the prompt: render directly so the subject is present but nothing is stamped.
  const auto plain = fixtures::render_scene(0, 3, fixtures::RenderParams::for_profile(fixtures::ShiftProfile::none, 32));
  write_image(plain, dir / "images/plain.ppm");
  PoisonCandidate p = scored("plain", 0);
  p.uri = "images/plain.ppm";
  a.push_back(p);
  fixtures::StubScorer scorer({"dog", "cat"});
  auto s1 = score_candidates(scorer, a, "dog", dir.path());
  auto s2 = score_candidates(scorer, a, "dog", dir.path());
  EXPECT_EQ(s1, s2);
  for (std::size_t i = 0; i + 1 < s1.size(); ++i) EXPECT_GT(*s1[i].score, *s1.back().score);
  EXPECT_GT(*s1.front().score, 0.0);
}

TEST(SelectionStats, Spread) {
  std::vector<PoisonCandidate> pool{scored("a", 3), scored("b", 2), scored("c", 1), scored("d", kFailedScore)};
  pool[3].score_failed = true;
  auto sel = select_top_k(pool, 2);
  auto st = selection_stats(pool, sel);
  EXPECT_EQ(st.pool, 4u);
  EXPECT_EQ(st.selected, 2u);
  EXPECT_EQ(st.failed, 1u);
  EXPECT_EQ(st.min_selected, 2.0);
  EXPECT_EQ(st.max_discarded, 1.0);
}
