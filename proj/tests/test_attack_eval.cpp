#include "support.hpp"

using namespace bdsynth;
using bdsynth::testing::FnClassifier;
using bdsynth::testing::TempDir;

namespace {

/// Balanced 5-class set; every pixel of sample i holds its label so a model can read it back.
LabeledSet labelled_set(int per_class, int classes = 5) {
  LabeledSet s;
  for (int c = 0; c < classes; ++c)
    for (int i = 0; i < per_class; ++i) {
      Tensor t(3, 4, 4);
      std::fill(t.data.begin(), t.data.end(), static_cast<float>(c));
      s.images.push_back(t);
      s.labels.push_back(c);
      s.ids.push_back("x" + std::to_string(c) + "-" + std::to_string(i));
      s.patches.emplace_back();
    }
  return s;
}

std::vector<float> one_hot(int k, int n = 5) {
  std::vector<float> z(n, 0.0f);
  z[k] = 1.0f;
  return z;
}

FnClassifier oracle() {
  return FnClassifier(5, 4, [](const Tensor& x) { return one_hot(static_cast<int>(x.data[0])); });
}

FnClassifier always(int k) {
  return FnClassifier(5, 4, [k](const Tensor&) { return one_hot(k); });
}

}  // namespace

TEST(CleanAccuracy, ConstantModelOnBalancedSet) {
  auto s = labelled_set(20);
  EXPECT_DOUBLE_EQ(clean_accuracy(always(3), s), 0.2);
}

TEST(CleanAccuracy, OracleIsPerfect) { EXPECT_EQ(clean_accuracy(oracle(), labelled_set(7)), 1.0); }

TEST(CleanAccuracy, EmptySetIsAnError) { EXPECT_THROW(clean_accuracy(oracle(), LabeledSet{}), ValidationError); }

TEST(AttackSuccessRate, AlwaysTargetAndNeverTarget) {
  auto s = labelled_set(10);
  EXPECT_EQ(attack_success_rate(always(0), s, 0), 1.0);
  EXPECT_EQ(attack_success_rate(always(1), s, 0), 0.0);
  // The oracle never maps a non-target sample to the target.
  EXPECT_EQ(attack_success_rate(oracle(), s, 2), 0.0);
}

TEST(AttackSuccessRate, TargetClassSamplesAreExcluded) {
  auto s = labelled_set(10);
  // Predicts 0 only for true class 0 and 1: only class-1 samples count as hits among the 40 non-target ones.
  FnClassifier m(5, 4, [](const Tensor& x) { return one_hot(x.data[0] < 1.5f ? 0 : 4); });
  EXPECT_DOUBLE_EQ(attack_success_rate(m, s, 0), 10.0 / 40.0);
  EXPECT_EQ(without_class(s, 0).size(), 40u);
  for (int l : without_class(s, 0).labels) EXPECT_NE(l, 0);
}

TEST(AttackSuccessRate, OnlyTargetSamplesIsAnError) {
  auto s = without_class(labelled_set(3), 1);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s.labels[i] == 0) keep.push_back(i);
  EXPECT_THROW(attack_success_rate(always(0), s.subset(keep), 0), ValidationError);
}

TEST(AttackReport, JsonRoundsAndSkipsAbsent) {
  AttackReport r;
  r.ca = 0.123456;
  r.asr = 1.0;
  auto j = to_json(r);
  EXPECT_EQ(j["ca"].get<double>(), 0.1235);
  EXPECT_EQ(j["asr"].get<double>(), 1.0);
  EXPECT_FALSE(j.contains("real_ca"));
  EXPECT_FALSE(j.contains("real_asr"));
}

TEST(EvaluateAttack, MatchesBruteForceOnDeskModel) {
  const auto& run = bdsynth::testing::desk_run();
  const int target = run.cfg.poison.target_class;
  std::size_t correct = 0, n_clean = 0, hit = 0, n_poison = 0;
  for (const auto& e : run.probe.entries) {
    if (e.split != Split::val) continue;
    auto x = to_tensor(read_image(run.dir / "probe" / e.uri), run.model->input_size());
    const auto z = run.model->logits(x);
    const int pred = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    if (!e.poisoned) {
      ++n_clean;
      correct += pred == e.label;
    } else if (e.label != target) {
      ++n_poison;
      hit += pred == target;
    }
  }
  ASSERT_GT(n_clean, 0u);
  ASSERT_GT(n_poison, 0u);
  const auto r = evaluate_attack(*run.model, run.probe, run.dir / "probe", target);
  EXPECT_DOUBLE_EQ(*r.ca, static_cast<double>(correct) / n_clean);
  EXPECT_DOUBLE_EQ(*r.asr, static_cast<double>(hit) / n_poison);
  EXPECT_TRUE(r.real_ca);
  // The trained model learned the task and the backdoor.
  EXPECT_GE(*r.ca, 0.9);
  EXPECT_GE(*r.asr, 0.9);
}

TEST(EvaluateAttack, AbsentSplitsStayEmpty) {
  const auto& run = bdsynth::testing::desk_run();
  DatasetManifest m;
  m.class_names = run.probe.class_names;
  for (const auto& e : run.probe.entries)
    if (e.split == Split::val && !e.poisoned) m.entries.push_back(e);
  const auto r = evaluate_attack(*run.model, m, run.dir / "probe", 0);
  EXPECT_TRUE(r.ca);
  EXPECT_FALSE(r.asr);
  EXPECT_FALSE(r.real_ca);
  EXPECT_FALSE(r.real_asr);
}
