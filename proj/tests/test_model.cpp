#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "sal3sd/checkpoint.hpp"
#include "sal3sd/model.hpp"

using namespace sal3sd;

namespace {

Arch tiny_arch() {
  Arch a;
  a.classes = 5;
  a.patch = 8;
  a.base_width = 4;
  a.token_dim = 8;
  a.heads = 2;
  a.blocks = 1;
  a.cls_width = 6;
  return a;
}

Tensor random_image(int h, int w, std::uint64_t seed) {
  oracle::Random rng(seed);
  Tensor t({3, h, w});
  for (double& v : t.values()) v = rng.uniform();
  return t;
}

}  // namespace

TEST(Model, OutputShapesAtDefaultArch) {
  const ModelState st = init_model(Arch{}, 1);
  const Params p = Params::bind(st, false);
  const ForwardResult r = forward(constant(random_image(64, 64, 2)), p);
  EXPECT_EQ(r.global.grid_h * r.global.grid_w, 4);
  EXPECT_EQ(r.global.tokens.shape(), (Shape{4, 64}));
  EXPECT_EQ(r.saliency.shape(), (Shape{1, 64, 64}));
  EXPECT_EQ(r.classes.logits.shape(), (Shape{4, 200}));
  EXPECT_EQ(r.fused.shape(), (Shape{32 + 64, 8, 8}));
}

TEST(Model, ShapeCovarianceAcrossSizesAndPatches) {
  const ModelState st = init_model(tiny_arch(), 3);
  const Params p = Params::bind(st, false);
  for (auto [h, w, patch] : std::vector<std::tuple<int, int, int>>{{16, 16, 8}, {32, 16, 8}, {32, 32, 16}, {48, 32, 16}}) {
    ForwardOptions o;
    o.patch = patch;
    const ForwardResult r = forward(constant(random_image(h, w, 4)), p, o);
    EXPECT_EQ(r.saliency.shape(), (Shape{1, h, w}));
    EXPECT_EQ(r.classes.logits.shape(), (Shape{(h / patch) * (w / patch), 5}));
    for (double v : r.saliency.value().values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_TRUE(r.classes.logits.value().all_finite());
  }
}

TEST(Model, RejectsIndivisibleInput) {
  const ModelState st = init_model(tiny_arch(), 3);
  EXPECT_THROW(forward(constant(random_image(20, 16, 1)), Params::bind(st, false)), ConfigError);
}

TEST(Model, ZeroInputGivesFiniteOutputs) {
  const ModelState st = init_model(Arch{}, 5);
  const ForwardResult r = forward(constant(Tensor({3, 64, 64}, 0.0)), Params::bind(st, false));
  EXPECT_TRUE(r.global.tokens.value().all_finite());
  EXPECT_TRUE(r.saliency.value().all_finite());
  EXPECT_TRUE(r.classes.logits.value().all_finite());
}

TEST(Model, ForwardIsDeterministic) {
  const ModelState st = init_model(tiny_arch(), 6);
  const Tensor x = random_image(16, 16, 7);
  const auto a = forward(constant(x), Params::bind(st, false));
  const auto b = forward(constant(x), Params::bind(st, false));
  EXPECT_EQ(a.saliency.value(), b.saliency.value());
  EXPECT_EQ(a.classes.logits.value(), b.classes.logits.value());
}

TEST(Model, DifferentInitsGiveDifferentOutputs) {
  const Tensor x = random_image(16, 16, 7);
  const auto a = forward(constant(x), Params::bind(init_model(tiny_arch(), 1), false));
  const auto b = forward(constant(x), Params::bind(init_model(tiny_arch(), 2), false));
  EXPECT_NE(a.saliency.value(), b.saliency.value());
  EXPECT_NE(a.classes.logits.value(), b.classes.logits.value());
}

TEST(Model, PerturbingOnePatchChangesEveryToken) {
  const ModelState st = init_model(Arch{}, 8);
  const Params p = Params::bind(st, false);
  Tensor x = random_image(64, 64, 9);
  const Tensor before = forward_global_encoder(constant(x), p, 32).tokens.value();
  for (int y = 0; y < 32; ++y)
    for (int xx = 0; xx < 32; ++xx) x.at(0, y, xx) += 0.5;
  const Tensor after = forward_global_encoder(constant(x), p, 32).tokens.value();
  for (int t = 0; t < 4; ++t) {
    double change = 0;
    for (int d = 0; d < 64; ++d) change += std::abs(after.at(t, d) - before.at(t, d));
    EXPECT_GT(change, 1e-9) << "token " << t;
  }
}

TEST(Model, ZeroTokensLeaveLocalChannels) {
  const ModelState st = init_model(tiny_arch(), 10);
  const Params p = Params::bind(st, false);
  const Var x = constant(random_image(16, 16, 11));
  const FeaturePyramid pyr = forward_local_encoder(x, p);
  GlobalTokens g = forward_global_encoder(x, p, 8);
  g.tokens = constant(Tensor(g.tokens.shape(), 0.0));
  const Tensor fused = fuse_features(pyr, g).value();
  const Tensor& deep = pyr.levels.back().value();
  const int c1 = deep.dim(0);
  EXPECT_EQ(fused.dim(0), c1 + 8);
  for (int c = 0; c < fused.dim(0); ++c)
    for (int y = 0; y < fused.dim(1); ++y)
      for (int xx = 0; xx < fused.dim(2); ++xx)
        EXPECT_EQ(fused.at(c, y, xx), c < c1 ? deep.at(c, y, xx) : 0.0);
}

TEST(Model, GlobalBranchAffectsSaliency) {
  const ModelState st = init_model(Arch{}, 12);
  const Params p = Params::bind(st, false);
  const Var x = constant(random_image(64, 64, 13));
  ForwardOptions off;
  off.zero_global = true;
  EXPECT_NE(forward(x, p).saliency.value(), forward(x, p, off).saliency.value());
}

TEST(Model, ParameterGradientsMatchFiniteDifferences) {
  ModelState st = init_model(tiny_arch(), 14);
  // Zero-initialized biases put dead-input pixels exactly on the ReLU kink;
  // a small jitter moves the check to a differentiable point.
  oracle::Random jitter(21);
  for (auto& [_, t] : st.params)
    for (double& v : t.values()) v += jitter.uniform(-0.05, 0.05);
  const Tensor x = random_image(16, 16, 15);
  auto loss_of = [&](const Params& p) {
    const ForwardResult r = forward(constant(x), p);
    return std::pair{r.saliency, r.classes.logits};
  };
  const Params p = Params::bind(st, true);
  auto [s, c] = loss_of(p);
  // Scalar: weighted sums of the saliency map and the logits, as make_op leaves.
  oracle::Random rng(16);
  Tensor rs(s.shape()), rc(c.shape());
  for (double& v : rs.values()) v = rng.normal();
  for (double& v : rc.values()) v = rng.normal();
  auto dot = [](const Var& y, const Tensor& r) {
    double v = 0;
    for (std::size_t i = 0; i < r.size(); ++i) v += r[i] * y.value()[i];
    return make_op(Tensor({1}, v), {y}, [r](Node& self) {
      for (std::size_t i = 0; i < r.size(); ++i) self.inputs[0]->grad_buffer()[i] += self.grad[0] * r[i];
    });
  };
  backward(ops::add(dot(s, rs), dot(c, rc)));
  const ParamMap grads = p.gradients();

  auto value = [&] {
    auto [s2, c2] = loss_of(Params::bind(st, false));
    double v = 0;
    for (std::size_t i = 0; i < rs.size(); ++i) v += rs[i] * s2.value()[i];
    for (std::size_t i = 0; i < rc.size(); ++i) v += rc[i] * c2.value()[i];
    return v;
  };
  oracle::Random pick(17);
  int checked = 0;
  for (auto& [name, t] : st.params) {
    for (int k = 0; k < 3; ++k) {
      const std::size_t i = static_cast<std::size_t>(pick.integer(0, static_cast<int>(t.size()) - 1));
      const double num = oracle::central_difference(value, &t[i]);
      EXPECT_TRUE(oracle::grad_close(grads.at(name)[i], num)) << name << "[" << i << "]: " << grads.at(name)[i] << " vs " << num;
      ++checked;
    }
  }
  EXPECT_GT(checked, 100);
}

TEST(Model, TeacherStateDoesNotTrackGradients) {
  const ModelState st = init_model(tiny_arch(), 18);
  const Params student = Params::bind(st, true);
  const Params teacher = Params::bind(st, false);
  const Var x = constant(random_image(16, 16, 19));
  const Var ls = ops::sum_all(forward(x, student).saliency);
  const Var lt = ops::sum_all(forward(x, teacher).saliency);
  EXPECT_FALSE(lt.requires_grad());
  backward(ops::add(ls, lt));
  for (const auto& [name, g] : teacher.gradients())
    for (double v : g.values()) ASSERT_EQ(v, 0.0) << name;
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const ModelState st = init_model(tiny_arch(), 20);
  const auto path = std::filesystem::temp_directory_path() / "sal3sd_test_model.ckpt";
  save_model(path, st);
  const ModelState back = load_model(path);
  EXPECT_EQ(back.arch, st.arch);
  ASSERT_TRUE(back.aligned_with(st));
  for (const auto& [name, t] : st.params) EXPECT_EQ(back.params.at(name), t) << name;
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFileIsRejected) {
  const auto path = std::filesystem::temp_directory_path() / "sal3sd_test_bad.ckpt";
  {
    std::ofstream os(path, std::ios::binary);
    os << "not a checkpoint";
  }
  EXPECT_THROW(load_model(path), IoError);
  std::filesystem::remove(path);
}
