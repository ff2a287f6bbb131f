#include "support.hpp"

using namespace bdsynth;
using bdsynth::testing::TempDir;

namespace {

class FlakyEditor final : public EditBackend {
 public:
  std::string fail_on;  // source file stem that always fails
  std::map<std::string, int> attempts;
  fixtures::StubEditor inner;
  void edit(const fs::path& source, std::string_view prompt, std::uint64_t seed, const fs::path& dest) override {
    ++attempts[source.stem().string()];
    if (source.stem() == fail_on) throw BackendError("permanent failure");
    inner.edit(source, prompt, seed, dest);
  }
};

class OnceFailingGenerator final : public GenerateBackend {
 public:
  fixtures::StubGenerator inner{{"dog", "cat"}, 32};
  std::set<std::uint64_t> failed;
  void generate(std::string_view prompt, double g, std::uint64_t seed, const fs::path& dest) override {
    if (failed.insert(seed).second) throw BackendError("transient");
    inner.generate(prompt, g, seed, dest);
  }
};

struct EditFixture {
  TempDir dir;
  DatasetManifest m;
  BatchOptions opts;
  EditFixture() {
    fixtures::DatasetOptions o;
    o.num_classes = 2;
    o.per_class = 5;
    o.image_size = 32;
    m = fixtures::make_synthetic_dataset(o, dir.path());
    opts.out_dir = dir / "pool/images";
    opts.image_root = dir.path();
    opts.uri_prefix = "images/";
  }
};

}  // namespace

TEST(RenderPrompt, Templates) {
  EXPECT_EQ(render_prompt(PromptKind::edit, {{"trigger", "tennis ball"}}), "Add tennis ball into the image");
  EXPECT_EQ(render_prompt(PromptKind::generate,
                          {{"subject", "dog"}, {"trigger", "book"}, {"action", "running"}, {"background", "park"}, {"pos_prompt", ""}}),
            "dog, book, running, park");
  EXPECT_EQ(render_prompt(PromptKind::select, {{"class", "cat"}, {"trigger", "book"}}), "A photo of a cat with a book.");
}

TEST(RenderPrompt, OptionalSlotsOmittedRequiredEnforced) {
  EXPECT_EQ(render_prompt(PromptKind::generate, {{"subject", "dog"}, {"trigger", "book"}}), "dog, book");
  EXPECT_EQ(render_prompt(PromptKind::generate, {{"subject", "dog"}, {"trigger", "book"}, {"pos_prompt", "8k"}}), "dog, book, 8k");
  EXPECT_THROW(render_prompt(PromptKind::edit, {}), ValidationError);
  EXPECT_THROW(render_prompt(PromptKind::select, {{"class", "cat"}}), ValidationError);
  EXPECT_THROW(render_prompt(PromptKind::generate, {{"trigger", "book"}}), ValidationError);
}

TEST(EditBatch, StubAddsPatchOnly) {
  EditFixture f;
  fixtures::StubEditor editor;
  auto r = edit_batch(editor, f.m.entries, "tennis ball", 11, f.opts);
  ASSERT_EQ(r.candidates.size(), 10u);
  EXPECT_TRUE(r.skipped.empty());
  for (std::size_t i = 0; i < r.candidates.size(); ++i) {
    const auto& c = r.candidates[i];
    EXPECT_EQ(c.origin, Origin::edited);
    EXPECT_EQ(c.source_image_id, f.m.entries[i].image_id);
    EXPECT_EQ(c.label, f.m.entries[i].label);
    EXPECT_EQ(c.prompt, "Add tennis ball into the image");
    auto src = read_image(f.dir / f.m.entries[i].uri);
    auto out = read_image(f.dir / ("pool/" + c.uri));
    ASSERT_TRUE(out.meta.patch);
    const Rect box = *out.meta.patch;
    std::size_t changed = 0;
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x)
        if (!(src.pixel(x, y) == out.pixel(x, y))) {
          ++changed;
          EXPECT_TRUE(box.contains(x, y)) << x << "," << y;
        }
    EXPECT_GT(changed, 0u);
  }
}

TEST(EditBatch, PermanentFailureIsSkippedAfterRetries) {
  EditFixture f;
  FlakyEditor editor;
  editor.fail_on = f.m.entries[3].image_id;
  auto r = edit_batch(editor, f.m.entries, "book", 1, f.opts);
  EXPECT_EQ(r.candidates.size(), 9u);
  EXPECT_EQ(r.skipped, std::vector<std::string>{f.m.entries[3].image_id});
  EXPECT_EQ(editor.attempts[editor.fail_on], 1 + f.opts.retries);
  f.opts.strict = true;
  EXPECT_THROW(edit_batch(editor, f.m.entries, "book", 1, f.opts), BackendError);
}

TEST(EditBatch, DeterministicIdsAndUris) {
  EditFixture f;
  fixtures::StubEditor editor;
  auto a = edit_batch(editor, f.m.entries, "book", 5, f.opts);
  const auto first_bytes = sha256_file(f.dir / ("pool/" + a.candidates[0].uri));
  auto b = edit_batch(editor, f.m.entries, "book", 5, f.opts);
  EXPECT_EQ(a.candidates, b.candidates);
  EXPECT_EQ(sha256_file(f.dir / ("pool/" + b.candidates[0].uri)), first_bytes);
  EXPECT_THROW(edit_batch(editor, {}, "book", 5, f.opts), ValidationError);
}

TEST(GenerateBatch, PoolOfFourDistinctImages) {
  TempDir dir;
  fixtures::StubGenerator gen({"dog", "cat"}, 32);
  GenerationSpec spec{"dog", "tennis ball", "", "", "", 2.0, 4};
  BatchOptions o{dir / "images", {}, "images/"};
  auto r = generate_batch(gen, spec, 0, 100, o);
  ASSERT_EQ(r.candidates.size(), 4u);
  std::set<std::string> hashes;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& c = r.candidates[i];
    EXPECT_EQ(c.seed, 100 + i);
    EXPECT_EQ(c.origin, Origin::generated);
    EXPECT_EQ(c.guidance_scale, 2.0);
    EXPECT_EQ(c.prompt, "dog, tennis ball");
    EXPECT_FALSE(c.source_image_id);
    hashes.insert(sha256_file(dir / c.uri));
  }
  EXPECT_EQ(hashes.size(), 4u);
}

TEST(GenerateBatch, PoolOfOneUsesBaseSeed) {
  TempDir dir;
  fixtures::StubGenerator gen({"dog", "cat"}, 32);
  GenerationSpec spec{"cat", "book", "", "", "", 2.0, 1};
  auto r = generate_batch(gen, spec, 1, 42, BatchOptions{dir / "images", {}, "images/"});
  ASSERT_EQ(r.candidates.size(), 1u);
  EXPECT_EQ(r.candidates[0].seed, 42u);
  EXPECT_EQ(r.candidates[0].label, 1);
}

TEST(GenerateBatch, RetriesRecoverTransientErrors) {
  TempDir dir;
  OnceFailingGenerator gen;
  GenerationSpec spec{"dog", "book", "", "", "", 2.0, 3};
  auto r = generate_batch(gen, spec, 0, 7, BatchOptions{dir / "images", {}, "images/"});
  EXPECT_EQ(r.candidates.size(), 3u);
  EXPECT_TRUE(r.skipped.empty());
}

TEST(GenerateBatch, InvalidSpec) {
  TempDir dir;
  fixtures::StubGenerator gen({"dog", "cat"}, 32);
  GenerationSpec spec{"dog", "book", "", "", "", 2.0, 0};
  EXPECT_THROW(generate_batch(gen, spec, 0, 1, BatchOptions{dir / "images", {}, "images/"}), ValidationError);
  spec.pool_size = 1;
  spec.guidance_scale = 0;
  EXPECT_THROW(generate_batch(gen, spec, 0, 1, BatchOptions{dir / "images", {}, "images/"}), ValidationError);
}

TEST(Candidates, JsonlRoundTrip) {
  PoisonCandidate a;
  a.candidate_id = "cand-1";
  a.uri = "images/cand-1.ppm";
  a.prompt = "Add book into the image";
  a.trigger = "book";
  a.source_image_id = "train-c01-00001";
  a.seed = 18446744073709551615ull;
  a.score = -std::numeric_limits<double>::infinity();
  a.score_failed = true;
  PoisonCandidate b;
  b.candidate_id = "cand-2";
  b.uri = "images/cand-2.ppm";
  b.origin = Origin::generated;
  b.prompt = "dog, book";
  b.trigger = "book";
  b.guidance_scale = 2.0;
  b.score = 1.25;
  std::vector<PoisonCandidate> v{a, b};
  EXPECT_EQ(parse_candidates(to_jsonl(v)), v);
}
