#include "support.hpp"

using namespace bdsynth;
using bdsynth::testing::TempDir;

namespace {

using NetD = ConvNet<double>;
using TensorD = BasicTensor<double>;

double cross_entropy_d(const std::vector<double>& z, int label) {
  double mx = *std::max_element(z.begin(), z.end()), s = 0;
  for (double v : z) s += std::exp(v - mx);
  return std::log(s) + mx - z[label];
}

std::vector<double> cross_entropy_grad_d(const std::vector<double>& z, int label) {
  double mx = *std::max_element(z.begin(), z.end()), s = 0;
  std::vector<double> g(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) s += g[i] = std::exp(z[i] - mx);
  for (std::size_t i = 0; i < z.size(); ++i) g[i] = g[i] / s - (static_cast<int>(i) == label ? 1.0 : 0.0);
  return g;
}

/// CE plus sum(R * features of layer 0): exercises the injected feature gradient too.
double probe_loss(const NetD& net, const TensorD& x, int label, const TensorD& r) {
  NetD::Trace t;
  auto z = net.forward(x, &t);
  double extra = 0;
  for (std::size_t i = 0; i < r.data.size(); ++i) extra += r.data[i] * t.act[0].data[i];
  return cross_entropy_d(z, label) + extra;
}

/// |a - b| <= 1e-4 * max(|a|, |b|), with an absolute floor for gradients that are exactly zero.
::testing::AssertionResult close_rel(double analytic, double numeric) {
  const double tol = std::max(1e-4 * std::max(std::abs(analytic), std::abs(numeric)), 1e-9);
  if (std::abs(analytic - numeric) <= tol) return ::testing::AssertionSuccess();
  return ::testing::AssertionFailure() << analytic << " vs " << numeric;
}

/// Two classes split by the mean of the red vs blue channel.
LabeledSet separable(int n, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(0.0, 0.3);
  LabeledSet s;
  for (int i = 0; i < n; ++i) {
    const int label = i % 2;
    Tensor t(3, size, size);
    for (auto& v : t.data) v = static_cast<float>(noise(rng));
    for (auto& v : t.channel(label == 0 ? 0 : 2)) v += 0.6f;
    s.images.push_back(t);
    s.labels.push_back(label);
    s.ids.push_back("s" + std::to_string(i));
    s.patches.emplace_back();
  }
  return s;
}

std::unique_ptr<ConvNetClassifier> small_net(int size, std::uint64_t seed) {
  ConvNetSpec spec;
  spec.input_size = size;
  spec.channels = {4, 4};
  spec.pool = {true, false};
  spec.num_classes = 2;
  auto m = std::make_unique<ConvNetClassifier>("desk-cnn", spec);
  m->net().init(seed);
  return m;
}

}  // namespace

TEST(CosineLr, EndpointsAndMidpoint) {
  EXPECT_NEAR(cosine_lr(0, 1000, 0.01), 0.01, 1e-12);
  EXPECT_NEAR(cosine_lr(1000, 1000, 0.01), 0.0, 1e-12);
  EXPECT_NEAR(cosine_lr(500, 1000, 0.01), 0.005, 1e-12);
  EXPECT_NEAR(cosine_lr(1, 2, 0.01), 0.005, 1e-12);
  EXPECT_THROW(cosine_lr(-1, 10, 0.1), ValidationError);
  EXPECT_THROW(cosine_lr(11, 10, 0.1), ValidationError);
  EXPECT_THROW(cosine_lr(0, 0, 0.1), ValidationError);
}

TEST(CosineLr, MonotoneNonIncreasing) {
  const long total = 10000;
  double prev = cosine_lr(0, total, 0.1);
  for (long s = 1; s <= total; ++s) {
    const double v = cosine_lr(s, total, 0.1);
    ASSERT_LE(v, prev) << s;
    ASSERT_GE(v, 0.0);
    prev = v;
  }
}

TEST(ConvNet, ParameterGradientMatchesFiniteDifferences) {
  ConvNetSpec spec;
  spec.in_channels = 1;
  spec.input_size = 4;
  spec.channels = {2, 2};
  spec.pool = {true, false};
  spec.num_classes = 2;
  NetD net(spec);
  ASSERT_LE(net.num_params(), 100u);
  net.init(5);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n01(0, 1);
  for (auto& p : net.params()) p += 0.1 * n01(rng);  // non-zero biases
  TensorD x(1, 4, 4), r(2, 4, 4);
  for (auto& v : x.data) v = n01(rng);
  for (auto& v : r.data) v = 0.1 * n01(rng);
  const int label = 1;

  NetD::Trace t;
  auto z = net.forward(x, &t);
  std::vector<double> grad(net.num_params(), 0.0);
  TensorD dx;
  NetD::BackwardRequest req;
  req.param_grad = grad;
  req.input_grad = &dx;
  req.feature_grad = [&](int l, const TensorD&) { return l == 0 ? r : TensorD(); };
  net.backward(t, cross_entropy_grad_d(z, label), req);

  const double eps = 1e-6;
  for (std::size_t i = 0; i < net.num_params(); ++i) {
    const double keep = net.params()[i];
    net.params()[i] = keep + eps;
    const double up = probe_loss(net, x, label, r);
    net.params()[i] = keep - eps;
    const double down = probe_loss(net, x, label, r);
    net.params()[i] = keep;
    EXPECT_TRUE(close_rel(grad[i], (up - down) / (2 * eps))) << "param " << i;
  }
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    TensorD xp = x, xm = x;
    xp.data[i] += eps;
    xm.data[i] -= eps;
    EXPECT_TRUE(close_rel(dx.data[i], (probe_loss(net, xp, label, r) - probe_loss(net, xm, label, r)) / (2 * eps))) << "input " << i;
  }
}

TEST(ConvNet, MaskedChannelsAreZero) {
  auto m = small_net(8, 1);
  std::mt19937_64 rng(1);
  auto x = bdsynth::testing::random_tensor(3, 8, 8, rng);
  m->set_channel_mask("conv2", {0, 1, 0, 1});
  auto f = m->activations("conv2", x);
  for (float v : f.channel(0)) EXPECT_EQ(v, 0.0f);
  for (float v : f.channel(2)) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(m->activations("conv9", x), ValidationError);
  EXPECT_THROW(m->set_channel_mask("conv1", {1}), ValidationError);
}

TEST(Fit, SeparableFixtureReachesPerfectTrainAccuracy) {
  auto data = separable(40, 8, 3);
  auto model = small_net(8, 2);
  SgdOptions opt;
  opt.base_lr = 0.05;
  opt.batch_size = 8;
  opt.epochs = 20;
  opt.seed = 4;
  auto hist = fit(*model, data, opt);
  ASSERT_EQ(hist.size(), 20u);
  EXPECT_EQ(accuracy(*model, data), 1.0);
  EXPECT_LT(hist.back().train_loss, hist.front().train_loss);
  EXPECT_NEAR(hist.front().lr, 0.05, 1e-12);
}

TEST(Fit, FirstEpochLowersLoss) {
  auto data = separable(40, 8, 3);
  auto model = small_net(8, 2);
  const double initial = mean_loss(*model, data);
  SgdOptions opt;
  opt.base_lr = 0.05;
  opt.batch_size = 8;
  opt.epochs = 1;
  fit(*model, data, opt);
  EXPECT_LT(mean_loss(*model, data), initial);
}

TEST(Fit, ZeroEpochsLeavesModelUntouched) {
  auto data = separable(10, 8, 3);
  auto model = small_net(8, 2);
  const auto before = model->checkpoint();
  SgdOptions opt;
  opt.epochs = 0;
  EXPECT_TRUE(fit(*model, data, opt).empty());
  EXPECT_EQ(model->checkpoint(), before);
}

TEST(Fit, SameSeedReplaysExactly) {
  auto data = separable(24, 8, 5);
  SgdOptions opt;
  opt.base_lr = 0.05;
  opt.batch_size = 5;
  opt.epochs = 3;
  opt.seed = 8;
  auto a = small_net(8, 1), b = small_net(8, 1);
  auto ha = fit(*a, data, opt, &data);
  auto hb = fit(*b, data, opt, &data);
  EXPECT_EQ(ha, hb);
  EXPECT_EQ(a->checkpoint(), b->checkpoint());
  opt.augmentation = "standard-imagenet";
  auto c = small_net(8, 1), d = small_net(8, 1);
  EXPECT_EQ(fit(*c, data, opt), fit(*d, data, opt));
}

TEST(Fit, RejectsBadLabels) {
  auto data = separable(4, 8, 5);
  data.labels[0] = 7;
  auto m = small_net(8, 1);
  SgdOptions opt;
  EXPECT_THROW(fit(*m, data, opt), ValidationError);
}

TEST(TrainConfig, ProfilesAndValidation) {
  auto paper = TrainConfig::paper();
  EXPECT_EQ(paper.base_lr, 0.01);
  EXPECT_EQ(paper.momentum, 0.9);
  EXPECT_EQ(paper.weight_decay, 1e-4);
  EXPECT_EQ(paper.batch_size, 64);
  EXPECT_EQ(paper.epochs, 200);
  EXPECT_EQ(paper.input_size, 224);
  EXPECT_EQ(paper.arch, "resnet18");
  EXPECT_EQ(paper.augmentation, "standard-imagenet");
  auto desk = TrainConfig::desk();
  EXPECT_LE(desk.epochs, 30);
  EXPECT_EQ(desk.augmentation, "none");
  EXPECT_NO_THROW(validate(desk));
  desk.augmentation = "mixup";
  EXPECT_THROW(validate(desk), ValidationError);
  desk = TrainConfig::desk();
  desk.base_lr = 0;
  EXPECT_THROW(validate(desk), ValidationError);
  auto j = to_json(TrainConfig::desk());
  auto back = train_config_from_json(j, TrainConfig::paper());
  EXPECT_EQ(to_json(back), j);
}

TEST(Train, UnknownArchIsConfigError) {
  TempDir dir;
  fixtures::DatasetOptions o;
  o.num_classes = 2;
  o.per_class = 4;
  o.image_size = 16;
  auto m = fixtures::make_synthetic_dataset(o, dir.path());
  auto cfg = TrainConfig::desk();
  cfg.arch = "resnet18";
  cfg.input_size = 16;
  EXPECT_THROW(train(m, dir.path(), cfg), ConfigError);
}

TEST(Train, ZeroEpochsAndCheckpointRoundTrip) {
  TempDir dir;
  fixtures::DatasetOptions o;
  o.num_classes = 2;
  o.per_class = 6;
  o.image_size = 32;
  auto m = fixtures::make_synthetic_dataset(o, dir.path());
  auto cfg = TrainConfig::desk();
  cfg.epochs = 0;
  auto r0 = train(m, dir.path(), cfg);
  EXPECT_TRUE(r0.history.empty());
  cfg.epochs = 2;
  auto r = train(m, dir.path(), cfg);
  ASSERT_EQ(r.history.size(), 2u);
  r.model->set_channel_mask("conv3", std::vector<float>(32, 1.0f));
  auto mask = std::vector<float>(32, 1.0f);
  mask[3] = 0;
  r.model->set_channel_mask("conv2", mask);
  save_classifier(*r.model, dir / "model.json");
  auto back = load_classifier(dir / "model.json");
  EXPECT_EQ(back->checkpoint(), r.model->checkpoint());
  EXPECT_EQ(back->channel_mask("conv2"), mask);
  const auto set = load_set(m.entries, dir.path(), 32);
  for (std::size_t i = 0; i < set.size(); ++i) EXPECT_EQ(back->logits(set.images[i]), r.model->logits(set.images[i]));
}

TEST(LoadSet, PatchRectScaledToTensor) {
  TempDir dir;
  auto img = fixtures::render_scene(1, 4, fixtures::RenderParams::for_profile(fixtures::ShiftProfile::none, 64));
  fixtures::stamp_trigger(img, "book", 0.04, 9);
  write_image(img, dir / "a.ppm");
  ManifestEntry e;
  e.image_id = "a";
  e.uri = "a.ppm";
  auto s = load_set({e}, dir.path(), 32);
  ASSERT_TRUE(s.patches[0]);
  EXPECT_EQ(*s.patches[0], scale_rect(*img.meta.patch, 64, 64, 32, 32));
  EXPECT_EQ(s.images[0].height, 32);
}
