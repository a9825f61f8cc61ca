#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "sal3sd/selfsup.hpp"

using namespace sal3sd;

namespace {

Image random_image(int h, int w, std::uint64_t seed) {
  oracle::Random rng(seed);
  Image im(h, w);
  for (double& v : im.tensor().values()) v = rng.uniform();
  return im;
}

ClassLogitsMap random_map(int gh, int gw, int k, oracle::Random& rng, double scale = 1.0) {
  ClassLogitsMap m{gh, gw, Tensor({gh * gw, k})};
  for (double& v : m.logits.values()) v = scale * rng.normal();
  return m;
}

std::vector<std::vector<double>> rows(const ClassLogitsMap& m) {
  std::vector<std::vector<double>> out;
  for (int i = 0; i < m.cells(); ++i) out.emplace_back(m.cell(i), m.cell(i) + m.classes());
  return out;
}

std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

AugmentConfig no_augment() {
  AugmentConfig c;
  c.global_scale_min = c.global_scale_max = 1.0;
  c.local_scale_min = c.local_scale_max = 1.0;
  c.jitter_prob = c.blur_prob = c.solarize_prob = 0.0;
  return c;
}

}  // namespace

// --- views ---

TEST(AugmentViews, SameSeedSameViews) {
  const Image x = random_image(64, 64, 1);
  const ViewPair a = augment_views(x, 42, AugmentConfig{});
  const ViewPair b = augment_views(x, 42, AugmentConfig{});
  EXPECT_EQ(a.global_view, b.global_view);
  EXPECT_EQ(a.local_view, b.local_view);
  EXPECT_NE(augment_views(x, 43, AugmentConfig{}).global_view, a.global_view);
}

TEST(AugmentViews, IdentityPolicyGivesBicubicResizes) {
  const Image x = random_image(64, 64, 2);
  const ViewPair v = augment_views(x, 3, no_augment());
  Image g = imgproc::resize_bicubic(x, 64, 64), l = imgproc::resize_bicubic(x, 32, 32);
  imgproc::clamp01(g);
  imgproc::clamp01(l);
  EXPECT_EQ(v.global_view, g);
  EXPECT_EQ(v.local_view, l);
  // Resampling onto the same grid hits the kernel at integer offsets only.
  for (std::size_t i = 0; i < x.tensor().size(); ++i) EXPECT_NEAR(g.tensor()[i], x.tensor()[i], 1e-12);
}

TEST(AugmentViews, ValuesStayInUnitRange) {
  const Image x = random_image(64, 64, 4);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const ViewPair v = augment_views(x, seed, AugmentConfig{});
    ASSERT_TRUE(v.global_view.valid()) << seed;
    ASSERT_TRUE(v.local_view.valid()) << seed;
    ASSERT_LT(v.local_view.height() * v.local_view.width(), v.global_view.height() * v.global_view.width());
  }
}

TEST(AugmentViews, BadScaleOrSizesAreConfigErrors) {
  const Image x = random_image(64, 64, 5);
  AugmentConfig c;
  c.global_scale_max = 1.5;
  EXPECT_THROW(augment_views(x, 1, c), ConfigError);
  c = AugmentConfig{};
  c.local_size = 64;
  EXPECT_THROW(augment_views(x, 1, c), ConfigError);
}

// --- image logits and centering ---

TEST(ImageLogits, ZeroAndSingleCell) {
  ClassLogitsMap z{2, 2, Tensor({4, 3}, 0.0)};
  EXPECT_EQ(image_logits(z), Tensor({3}, 0.0));
  ClassLogitsMap one{1, 1, Tensor({1, 3}, std::vector<double>{1.0, -2.0, 0.5})};
  EXPECT_EQ(image_logits(one), Tensor({3}, std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(ImageLogits, MatchesBruteForceSum) {
  oracle::Random rng(6);
  const ClassLogitsMap m = random_map(3, 3, 5, rng);
  const Tensor c = image_logits(m);
  for (int k = 0; k < 5; ++k) {
    double s = 0;
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) s += m.logits.at(y * 3 + x, k);
    EXPECT_NEAR(c[k], s, 1e-12);
  }
}

TEST(CenterTeacher, Arithmetic) {
  ClassLogitsMap m{1, 1, Tensor({1, 2}, std::vector<double>{1.0, 2.0})};
  const TeacherCenter tc{Tensor({2}, std::vector<double>{0.5, -0.5})};
  EXPECT_EQ(center_teacher(m, tc).logits, Tensor({1, 2}, std::vector<double>{1.5, 1.5}));
  EXPECT_EQ(center_teacher(m, TeacherCenter::zeros(2)).logits, m.logits);
  const auto back = center_teacher(center_teacher(m, tc, CenterSign::Add), tc, CenterSign::Subtract);
  for (int j = 0; j < 2; ++j) EXPECT_NEAR(back.logits[j], m.logits[j], 1e-15);
  EXPECT_THROW(center_teacher(m, TeacherCenter::zeros(3)), ShapeError);
}

// --- L_st ---

TEST(LossSt, ClosedForms) {
  EXPECT_NEAR(loss_st(Tensor({2}, 0.0), Tensor({2}, 0.0)), std::log(2.0), 1e-12);
  const Tensor sharp({2}, std::vector<double>{20.0, -20.0});
  EXPECT_NEAR(loss_st(sharp, sharp), 0.0, 1e-6);
  for (int k : {3, 20, 200}) EXPECT_NEAR(loss_st(Tensor({k}, 1.5), Tensor({k}, -0.3)), std::log(k), 1e-9);
}

TEST(LossSt, MatchesSoftmaxCrossEntropyOracle) {
  const Tensor cs({2}, std::vector<double>{1.0, 0.0}), ct({2}, std::vector<double>{2.0, 0.0});
  EXPECT_NEAR(loss_st(cs, ct), oracle::cross_entropy(vec(ct), vec(cs)), 1e-12);
  EXPECT_NEAR(loss_st(cs, ct, StOrder::Literal), oracle::cross_entropy(vec(cs), vec(ct)), 1e-12);
  oracle::Random rng(7);
  for (int i = 0; i < 50; ++i) {
    Tensor a({6}), b({6});
    for (double& v : a.values()) v = 3 * rng.normal();
    for (double& v : b.values()) v = 3 * rng.normal();
    EXPECT_NEAR(loss_st(a, b), oracle::cross_entropy(vec(b), vec(a)), 1e-10);
    EXPECT_GE(loss_st(a, b), 0.0);
  }
}

TEST(LossSt, GradientMatchesFiniteDifferences) {
  oracle::Random rng(8);
  for (StOrder order : {StOrder::TeacherTarget, StOrder::Literal}) {
    Tensor a({7}), b({7});
    for (double& v : a.values()) v = 2 * rng.normal();
    for (double& v : b.values()) v = 2 * rng.normal();
    Var cs = parameter(a);
    backward(loss_st(cs, b, order));
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double num = oracle::central_difference([&] { return loss_st(a, b, order); }, &a[i]);
      EXPECT_TRUE(oracle::grad_close(cs.grad()[i], num)) << i;
    }
  }
}

TEST(LossSt, NonFiniteInputRaisesDivergence) {
  Tensor a({2}, 0.0);
  a[0] = std::nan("");
  EXPECT_THROW(loss_st(a, Tensor({2}, 0.0)), DivergenceError);
}

// --- patch mining ---

TEST(MinePatches, ParallelCellIsPositive) {
  ClassLogitsMap m{2, 2, Tensor({4, 3}, std::vector<double>{0, 1, 0, 0, 0, 1, 2, 0, 0, 0, -1, 0})};
  const Tensor c({3}, std::vector<double>{1, 0, 0});
  const auto sel = mine_patches(m, c, 1);
  EXPECT_EQ(sel.positives, std::vector<int>{2});
  EXPECT_EQ(sel.negatives, std::vector<int>{3});
}

TEST(MinePatches, TiesResolveByIndex) {
  ClassLogitsMap m{2, 3, Tensor({6, 2}, 1.0)};
  const auto sel = mine_patches(m, Tensor({2}, 1.0), 2);
  EXPECT_EQ(sel.positives, (std::vector<int>{0, 1}));
  EXPECT_EQ(sel.negatives, (std::vector<int>{4, 5}));
}

TEST(MinePatches, MatchesFullSortOracle) {
  oracle::Random rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const ClassLogitsMap m = random_map(4, 4, 8, rng);
    const Tensor c = image_logits(m);
    const auto sel = mine_patches(m, c, 3);
    const auto [pos, neg] = oracle::mine(rows(m), vec(c), 3);
    EXPECT_EQ(sel.positives, pos);
    EXPECT_EQ(sel.negatives, neg);
    std::set<int> p(sel.positives.begin(), sel.positives.end());
    for (int n : sel.negatives) EXPECT_FALSE(p.count(n));
  }
}

TEST(MinePatches, ScaleInvariant) {
  oracle::Random rng(10);
  const ClassLogitsMap m = random_map(4, 4, 5, rng);
  ClassLogitsMap scaled = m;
  for (double& v : scaled.logits.values()) v *= 7.5;
  const auto a = mine_patches(m, image_logits(m), 4);
  const auto b = mine_patches(scaled, image_logits(scaled), 4);
  EXPECT_EQ(a.positives, b.positives);
  EXPECT_EQ(a.negatives, b.negatives);
}

TEST(MinePatches, Errors) {
  ClassLogitsMap m{2, 2, Tensor({4, 3}, 1.0)};
  EXPECT_THROW(mine_patches(m, Tensor({3}, 1.0), 3), ConfigError);
  EXPECT_THROW(mine_patches(m, Tensor({3}, 0.0), 1), DegenerateLogitsError);
}

// --- L_rho ---

TEST(LossRho, EqualSimilaritiesGiveLogTwoM) {
  for (int m : {1, 4, 10}) {
    const int g = 2 * m + 2;
    ClassLogitsMap cs{1, g, Tensor({g, 4}, 0.7)}, ct{1, g, Tensor({g, 4}, 2.0)};
    const auto sel = mine_patches(cs, image_logits(cs), m);
    for (double tau : {0.05, 0.1, 3.0}) EXPECT_NEAR(loss_rho(cs, ct, sel, sel, tau), std::log(2.0 * m), 1e-9);
  }
}

TEST(LossRho, SinglePairAgainstOracle) {
  // Anchor (1,0); teacher positive (1,0); both negatives (-1,0).
  ClassLogitsMap cs{1, 3, Tensor({3, 2}, std::vector<double>{1, 0, 0, 1, 0, 1})};
  ClassLogitsMap ct{1, 3, Tensor({3, 2}, std::vector<double>{1, 0, -1, 0, -1, 0})};
  const PatchSelection ss{{0}, {1}}, st{{0}, {2}};
  const double expect = -std::log(std::exp(2.0) / (2 * std::exp(-2.0)));
  EXPECT_NEAR(loss_rho(cs, ct, ss, st, 0.5), expect, 1e-12);
}

TEST(LossRho, MatchesDirectEvaluation) {
  oracle::Random rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const ClassLogitsMap cs = random_map(4, 4, 6, rng), ct = random_map(4, 4, 6, rng);
    const auto ss = mine_patches(cs, image_logits(cs), 3), st = mine_patches(ct, image_logits(ct), 3);
    const double want = oracle::rho(rows(cs), rows(ct), ss.positives, ss.negatives, st.positives, st.negatives, 0.1);
    EXPECT_NEAR(loss_rho(cs, ct, ss, st, 0.1), want, 1e-9);
  }
}

TEST(LossRho, LargeTemperatureLimit) {
  oracle::Random rng(12);
  const ClassLogitsMap cs = random_map(4, 4, 6, rng), ct = random_map(4, 4, 6, rng);
  const auto ss = mine_patches(cs, image_logits(cs), 4), st = mine_patches(ct, image_logits(ct), 4);
  EXPECT_NEAR(loss_rho(cs, ct, ss, st, 1e6), std::log(8.0), 1e-3);
}

TEST(LossRho, DenominatorWithPositiveIsLarger) {
  oracle::Random rng(13);
  const ClassLogitsMap cs = random_map(4, 4, 6, rng), ct = random_map(4, 4, 6, rng);
  const auto ss = mine_patches(cs, image_logits(cs), 2), st = mine_patches(ct, image_logits(ct), 2);
  EXPECT_GT(loss_rho(cs, ct, ss, st, 0.1, RhoDenominator::WithPositive), loss_rho(cs, ct, ss, st, 0.1));
}

TEST(LossRho, GradientMatchesFiniteDifferences) {
  oracle::Random rng(14);
  for (RhoDenominator den : {RhoDenominator::NegativesOnly, RhoDenominator::WithPositive})
    for (RhoNegatives src : {RhoNegatives::TeacherMap, RhoNegatives::OwnMaps}) {
      ClassLogitsMap cs = random_map(4, 4, 5, rng);
      const ClassLogitsMap ct = random_map(4, 4, 5, rng);
      const auto ss = mine_patches(cs, image_logits(cs), 3), st = mine_patches(ct, image_logits(ct), 3);
      Var v = parameter(cs.logits);
      backward(loss_rho(v, ct.logits, ss, st, 0.2, den, src));
      for (std::size_t i = 0; i < cs.logits.size(); ++i) {
        const double num = oracle::central_difference([&] { return loss_rho(cs, ct, ss, st, 0.2, den, src); }, &cs.logits[i]);
        EXPECT_TRUE(oracle::grad_close(v.grad()[i], num)) << i << ": " << v.grad()[i] << " vs " << num;
      }
    }
}

TEST(LossRho, NonPositiveTemperatureIsConfigError) {
  ClassLogitsMap m{1, 2, Tensor({2, 2}, 1.0)};
  const PatchSelection s{{0}, {1}};
  EXPECT_THROW(loss_rho(m, m, s, s, 0.0), ConfigError);
  EXPECT_THROW(loss_rho(m, m, s, s, -1.0), ConfigError);
}

TEST(LossRho, TeacherTensorReceivesNoGradient) {
  oracle::Random rng(15);
  const ClassLogitsMap cs = random_map(2, 2, 3, rng);
  Var teacher = parameter(random_map(2, 2, 3, rng).logits);
  const PatchSelection s{{0}, {3}};
  Var student = parameter(cs.logits);
  backward(ops::add(loss_rho(student, teacher.value(), s, s, 0.1), loss_st(ops::sum_rows(student), image_logits(cs))));
  EXPECT_TRUE(teacher.grad().empty());
}

// --- EMA ---

TEST(LambdaSchedule, EndpointsMidpointAndMonotone) {
  const EmaSchedule s{0.996, 1.0, 100};
  EXPECT_EQ(lambda_at(0, s), 0.996);
  EXPECT_EQ(lambda_at(100, s), 1.0);
  EXPECT_NEAR(lambda_at(50, s), 0.998, 1e-15);
  double prev = 0;
  for (long t = 0; t <= 100; ++t) {
    const double l = lambda_at(t, s);
    EXPECT_GE(l, prev);
    EXPECT_GE(l, 0.996);
    EXPECT_LE(l, 1.0);
    prev = l;
  }
  EXPECT_THROW(lambda_at(-1, s), std::out_of_range);
  EXPECT_THROW(lambda_at(101, s), std::out_of_range);
}

TEST(EmaUpdate, EndpointsAndArithmetic) {
  ModelState t, s;
  t.params["w"] = Tensor({1}, 1.0);
  s.params["w"] = Tensor({1}, 0.0);
  ModelState a = t;
  ema_update(a, s, 1.0);
  EXPECT_EQ(a.params["w"][0], 1.0);
  a = t;
  ema_update(a, s, 0.0);
  EXPECT_EQ(a.params["w"][0], 0.0);
  a = t;
  ema_update(a, s, 0.996);
  EXPECT_DOUBLE_EQ(a.params["w"][0], 0.996);
  ModelState bad;
  bad.params["v"] = Tensor({1}, 0.0);
  EXPECT_THROW(ema_update(a, bad, 0.5), ShapeError);
}

TEST(EmaUpdate, ContractsTowardStudent) {
  const ModelState s = init_model(Arch{}, 1);
  ModelState t = init_model(Arch{}, 2);
  const ModelState before = t;
  ema_update(t, s, 0.9);
  for (const auto& [name, v] : t.params) {
    const Tensor& sv = s.params.at(name);
    const Tensor& bv = before.params.at(name);
    for (std::size_t i = 0; i < v.size(); ++i) ASSERT_NEAR(std::abs(v[i] - sv[i]), 0.9 * std::abs(bv[i] - sv[i]), 1e-15);
  }
}

TEST(EmaCenter, ArithmeticAndFixedPoint) {
  const TeacherCenter tc{Tensor({2}, std::vector<double>{0.0, 2.0})};
  const Tensor batch({2}, std::vector<double>{2.0, 0.0});
  EXPECT_EQ(ema_center(tc, batch, 0.5).center, Tensor({2}, std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(ema_center(tc, batch, 1.0).center, tc.center);
  EXPECT_EQ(ema_center(tc, tc.center, 0.3).center, tc.center);
  EXPECT_THROW(ema_center(tc, Tensor({3}, 0.0), 0.5), ShapeError);
}

TEST(BatchCenter, MeanOverBatchAndGrid) {
  ClassLogitsMap a{1, 2, Tensor({2, 2}, std::vector<double>{1, 2, 3, 4})};
  ClassLogitsMap b{1, 1, Tensor({1, 2}, std::vector<double>{5, 0})};
  EXPECT_EQ(batch_center({a, b}), Tensor({2}, std::vector<double>{3.0, 2.0}));
}
