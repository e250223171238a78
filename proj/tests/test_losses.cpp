#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "emkd/losses.hpp"
#include "emkd/model.hpp"
#include "fixtures.hpp"
#include "oracle.hpp"

namespace emkd {
namespace {

oracle::Matrix rows_of(const Tensor& t) {
  return oracle::to_matrix({t.values().begin(), t.values().end()}, t.dim(0), t.dim(1));
}

Assignment identity_match(std::size_t n) {
  Assignment a;
  for (std::size_t i = 0; i < n; ++i) a.pairs.push_back({i, i});
  return a;
}

ModelOutputs random_outputs(std::size_t nv, std::size_t nt, std::size_t d, std::size_t v, std::uint64_t seed) {
  ModelOutputs o;
  o.vision_hidden = Tensor::from({nv, d}, oracle::uniform(nv * d, -2, 2, seed));
  o.language_hidden = Tensor::from({nt, d}, oracle::uniform(nt * d, -2, 2, seed + 1));
  o.vision_logits = Tensor::from({nv, v}, oracle::uniform(nv * v, -2, 2, seed + 2));
  o.response_logits = Tensor::from({nt, v}, oracle::uniform(nt * v, -2, 2, seed + 3));
  return o;
}

ModelOutputs with_vision(const ModelOutputs& o, Tensor hidden, Tensor logits) {
  ModelOutputs r = o;
  r.vision_hidden = std::move(hidden);
  r.vision_logits = std::move(logits);
  return r;
}

TEST(ReverseKl, IdenticalLogitsGiveZero) {
  Tensor x = Tensor::from({3, 7}, oracle::uniform(21, -3, 3, 1));
  EXPECT_NEAR(reverse_kl(x, x).item(), 0.0, 1e-12);
}

TEST(ReverseKl, WorkedExample) {
  Tensor s = Tensor::from({1, 2}, {0.0, 0.0});
  Tensor t = Tensor::from({1, 2}, {0.0, std::log(3.0)});
  const double expected = oracle::kl({0.5, 0.5}, {0.25, 0.75});
  EXPECT_NEAR(expected, 0.143841, 1e-6);
  EXPECT_NEAR(reverse_kl(s, t).item(), expected, 1e-12);
}

TEST(ReverseKl, MatchesOracleWithTemperature) {
  Tensor s = Tensor::from({4, 6}, oracle::uniform(24, -3, 3, 2));
  Tensor t = Tensor::from({4, 6}, oracle::uniform(24, -3, 3, 3));
  EXPECT_NEAR(reverse_kl(s, t).item(), oracle::reverse_kl(rows_of(s), rows_of(t)), 1e-12);
  Tensor s2 = scale(s, 0.5), t2 = scale(t, 0.5);
  EXPECT_NEAR(reverse_kl(s, t, 2.0).item(), oracle::reverse_kl(rows_of(s2), rows_of(t2)), 1e-12);
}

TEST(ReverseKl, NonnegativeOnRandomPairs) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Tensor s = Tensor::from({1, 5}, oracle::uniform(5, -5, 5, 2 * seed));
    Tensor t = Tensor::from({1, 5}, oracle::uniform(5, -5, 5, 2 * seed + 1));
    ASSERT_GE(reverse_kl(s, t).item(), 0.0) << seed;
  }
}

TEST(ReverseKl, ZeroForShiftedLogits) {
  // Same distribution, different logits.
  Tensor s = Tensor::from({2, 4}, oracle::uniform(8, -2, 2, 4));
  EXPECT_NEAR(reverse_kl(s, add_scalar(s, 3.0)).item(), 0.0, 1e-9);
}

TEST(ReverseKl, ShapeMismatchThrows) {
  EXPECT_THROW(reverse_kl(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})), ShapeError);
}

TEST(ReverseKl, TeacherReceivesNoGradient) {
  Tensor s = Tensor::parameter({2, 3}, oracle::uniform(6, -1, 1, 5));
  Tensor t = Tensor::parameter({2, 3}, oracle::uniform(6, -1, 1, 6));
  Tape tape;
  TapeScope scope(tape);
  backward(reverse_kl(s, t));
  for (double g : t.grad()) EXPECT_EQ(g, 0.0);
  double norm = 0.0;
  for (double g : s.grad()) norm += std::abs(g);
  EXPECT_GT(norm, 0.0);
}

TEST(CrossEntropy, Examples) {
  std::vector<std::int64_t> zero{0};
  EXPECT_NEAR(cross_entropy(Tensor::from({1, 2}, {0, 0}), zero).item(), std::log(2.0), 1e-12);
  const double sharp = cross_entropy(Tensor::from({1, 2}, {10, -10}), zero).item();
  EXPECT_NEAR(sharp, std::log1p(std::exp(-20.0)), 1e-15);
  EXPECT_NEAR(sharp, 2e-9, 1e-10);
}

TEST(CrossEntropy, MatchesOracleAndMasks) {
  Tensor x = Tensor::from({6, 5}, oracle::uniform(30, -3, 3, 7));
  std::vector<std::int64_t> labels{kIgnoreLabel, 4, kIgnoreLabel, 0, 2, kIgnoreLabel};
  EXPECT_NEAR(cross_entropy(x, labels).item(), oracle::cross_entropy(rows_of(x), labels), 1e-12);

  // Padding with ignored rows leaves the mean unchanged, i.e. the divisor
  // counts supervised rows only.
  Tensor rows = Tensor::from({2, 2}, {0, 0, 0, 0});
  Tensor padded = Tensor::from({4, 2}, {0, 0, 0, 0, 5, -5, 5, -5});
  std::vector<std::int64_t> two{0, 1}, half{0, 1, kIgnoreLabel, kIgnoreLabel};
  EXPECT_EQ(cross_entropy(rows, two).item(), cross_entropy(padded, half).item());
}

TEST(CrossEntropy, AllIgnoredThrows) {
  std::vector<std::int64_t> none{kIgnoreLabel, kIgnoreLabel};
  EXPECT_THROW(cross_entropy(Tensor::zeros({2, 3}), none), std::invalid_argument);
}

TEST(CrossEntropy, NonnegativeSweep) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Tensor x = Tensor::from({3, 4}, oracle::uniform(12, -6, 6, seed));
    std::vector<std::int64_t> labels{static_cast<std::int64_t>(seed % 4), kIgnoreLabel, 1};
    ASSERT_GE(cross_entropy(x, labels).item(), 0.0);
  }
}

TEST(ResponseRld, Examples) {
  Tensor s = Tensor::from({4, 5}, oracle::uniform(20, -2, 2, 8));
  Tensor t = Tensor::from({4, 5}, oracle::uniform(20, -2, 2, 9));
  std::vector<std::int64_t> all{1, 2, 3, 4};
  EXPECT_NEAR(response_rld(s, s, all).item(), 0.0, 1e-12);
  std::vector<std::int64_t> one{kIgnoreLabel, kIgnoreLabel, 3, kIgnoreLabel};
  EXPECT_NEAR(response_rld(s, t, one).item(), reverse_kl(slice_rows(s, 2, 3), slice_rows(t, 2, 3)).item(), 1e-15);
  std::vector<std::int64_t> none(4, kIgnoreLabel);
  EXPECT_THROW(response_rld(s, t, none), std::invalid_argument);
}

TEST(ResponseRld, NonnegativeSweep) {
  std::vector<std::int64_t> labels{kIgnoreLabel, 1, 2};
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Tensor s = Tensor::from({3, 4}, oracle::uniform(12, -4, 4, 2 * seed));
    Tensor t = Tensor::from({3, 4}, oracle::uniform(12, -4, 4, 2 * seed + 1));
    ASSERT_GE(response_rld(s, t, labels).item(), 0.0);
  }
}

TEST(VsdLoss, SelfDistillationIsZero) {
  ModelOutputs o = random_outputs(6, 5, 4, 7, 10);
  LossWeights w;
  EXPECT_LE(std::abs(vsd_loss(o, o, identity_match(6), VsdObject::kLogits, w).item()), 1e-10);
  EXPECT_LE(std::abs(vsd_loss(o, o, identity_match(6), VsdObject::kHidden, w).item()), 1e-10);
}

TEST(VsdLoss, AveragesMatchedRowKls) {
  ModelOutputs t = random_outputs(64, 5, 4, 7, 20), s = random_outputs(16, 5, 4, 7, 30);
  Assignment m = solve_lap(manhattan_cost(t.vision_logits, s.vision_logits));
  LossWeights w;
  double expected = 0.0;
  auto tl = rows_of(t.vision_logits), sl = rows_of(s.vision_logits);
  for (const auto& p : m.pairs) expected += oracle::kl(oracle::softmax(sl[p.student]), oracle::softmax(tl[p.teacher]));
  expected /= 16.0;
  EXPECT_NEAR(vsd_loss(t, s, m, VsdObject::kLogits, w).item(), expected, 1e-12);
}

TEST(VsdLoss, HiddenModeIsSmoothL1OfMatchedRows) {
  ModelOutputs t = random_outputs(6, 5, 4, 7, 40), s = random_outputs(3, 5, 4, 7, 50);
  Assignment m;
  m.pairs = {{4, 0}, {0, 1}, {2, 2}};
  auto th = rows_of(t.vision_hidden), sh = rows_of(s.vision_hidden);
  oracle::Matrix matched{th[4], th[0], th[2]};
  LossWeights w;
  EXPECT_NEAR(vsd_loss(t, s, m, VsdObject::kHidden, w).item(), oracle::smooth_l1(sh, matched, 1.0), 1e-12);
}

TEST(VsdLoss, TeacherRelabelingInvariant) {
  ModelOutputs t = random_outputs(8, 5, 4, 7, 60), s = random_outputs(4, 5, 4, 7, 70);
  Assignment m = solve_lap(manhattan_cost(t.vision_logits, s.vision_logits));
  std::vector<std::size_t> sigma{5, 2, 7, 0, 3, 6, 1, 4};  // new row i holds old row sigma[i]
  std::vector<std::size_t> inverse(8);
  for (std::size_t i = 0; i < 8; ++i) inverse[sigma[i]] = i;
  ModelOutputs tp = with_vision(t, gather_rows(t.vision_hidden, sigma), gather_rows(t.vision_logits, sigma));
  Assignment mp = m;
  for (auto& p : mp.pairs) p.teacher = inverse[p.teacher];
  LossWeights w;
  EXPECT_NEAR(vsd_loss(t, s, m, VsdObject::kLogits, w).item(), vsd_loss(tp, s, mp, VsdObject::kLogits, w).item(),
              1e-12);
  EXPECT_NEAR(vlad_loss(t, s, m).item(), vlad_loss(tp, s, mp).item(), 1e-12);
}

TEST(VsdLoss, OutOfRangeMatchThrows) {
  ModelOutputs t = random_outputs(4, 5, 4, 7, 80), s = random_outputs(2, 5, 4, 7, 90);
  Assignment m;
  m.pairs = {{0, 0}, {9, 1}};
  LossWeights w;
  EXPECT_THROW(vsd_loss(t, s, m, VsdObject::kLogits, w), std::out_of_range);
}

TEST(VladLoss, MatchesAffinityOracle) {
  ModelOutputs t = random_outputs(6, 5, 4, 7, 100), s = random_outputs(3, 5, 4, 7, 110);
  Assignment m;
  m.pairs = {{1, 0}, {5, 1}, {3, 2}};
  auto tv = rows_of(t.vision_hidden);
  oracle::Matrix matched{tv[1], tv[5], tv[3]};
  auto rt = oracle::cosine(matched, rows_of(t.language_hidden));
  auto rs = oracle::cosine(rows_of(s.vision_hidden), rows_of(s.language_hidden));
  ASSERT_EQ(rs.size(), 3u);
  ASSERT_EQ(rs[0].size(), 5u);
  EXPECT_NEAR(vlad_loss(t, s, m).item(), oracle::smooth_l1(rs, rt, 1.0), 1e-12);
}

TEST(VladLoss, SelfDistillationAndScaleInvariance) {
  ModelOutputs o = random_outputs(6, 5, 4, 7, 120), s = random_outputs(6, 5, 4, 7, 130);
  EXPECT_LE(std::abs(vlad_loss(o, o, identity_match(6)).item()), 1e-10);
  ModelOutputs scaled = o;
  scaled.vision_hidden = scale(o.vision_hidden, 3.0);
  scaled.language_hidden = scale(o.language_hidden, 3.0);
  EXPECT_NEAR(vlad_loss(o, s, identity_match(6)).item(), vlad_loss(scaled, s, identity_match(6)).item(), 1e-12);
}

TEST(VladLoss, TextLengthMismatchThrows) {
  ModelOutputs t = random_outputs(4, 5, 4, 7, 140), s = random_outputs(4, 6, 4, 7, 150);
  EXPECT_THROW(vlad_loss(t, s, identity_match(4)), std::invalid_argument);
}

TEST(VladLoss, NonnegativeSweep) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    ModelOutputs t = random_outputs(5, 4, 3, 6, 1000 + 8 * seed), s = random_outputs(3, 4, 3, 6, 1004 + 8 * seed);
    Assignment m = solve_lap(manhattan_cost(t.vision_logits, s.vision_logits));
    ASSERT_GE(vlad_loss(t, s, m).item(), 0.0);
  }
}

TEST(VladLoss, PooledMatchUsesPooledTeacherRows) {
  ModelOutputs t = random_outputs(6, 5, 4, 7, 160), s = random_outputs(3, 5, 4, 7, 170);
  PooledTokens pooled{pool_match(t.vision_hidden, 3), pool_match(t.vision_logits, 3)};
  ModelOutputs tp = with_vision(t, pooled.vision_hidden, pooled.vision_logits);
  LossWeights w;
  EXPECT_EQ(vlad_loss(t, s, pooled).item(), vlad_loss(tp, s, identity_match(3)).item());
  EXPECT_EQ(vsd_loss(t, s, pooled, VsdObject::kLogits, w).item(),
            vsd_loss(tp, s, identity_match(3), VsdObject::kLogits, w).item());
}

TEST(Combine, Examples) {
  LossWeights w;
  EXPECT_EQ(combine(w, 1.0, 0.4, 0.2, 0.01).total, 1.0);
  EXPECT_EQ(combine(w, 0, 0, 0, 0).total, 0.0);
  LossWeights sft{1.0, 0.0, 0.0, 1.0};
  EXPECT_EQ(combine(sft, 0.37, 5.0, 6.0, 7.0).total, 0.37);
}

TEST(Combine, TensorFormIsBitwiseEqual) {
  LossWeights w{0.3, 0.7, 11.0, 1.0};
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 3);
  for (int i = 0; i < 100; ++i) {
    double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
    LossBreakdown br = combine(w, a, b, c, d);
    EXPECT_NEAR(br.total, w.alpha * a + (1 - w.alpha) * b + w.beta * c + w.gamma * d, 1e-12);
    EXPECT_EQ(combine_loss(w, Tensor::scalar(a), Tensor::scalar(b), Tensor::scalar(c), Tensor::scalar(d)).item(),
              br.total);
  }
}

TEST(LossWeights, Validation) {
  EXPECT_NO_THROW(LossWeights{}.validate());
  EXPECT_THROW((LossWeights{1.5, 0.25, 25, 1}.validate()), std::invalid_argument);
  EXPECT_THROW((LossWeights{0.5, -1, 25, 1}.validate()), std::invalid_argument);
  EXPECT_THROW((LossWeights{0.5, 0.25, -25, 1}.validate()), std::invalid_argument);
  EXPECT_THROW((LossWeights{0.5, 0.25, 25, 0}.validate()), std::invalid_argument);
}

TEST(SelfDistillation, ComponentsVanishThroughTheModel) {
  ModelConfig cfg = fixtures::tiny_config(ModelRole::kTeacher);
  ModelParameters a = init_params(cfg, 9), b = init_params(cfg, 9);
  SyntheticExample ex = fixtures::tiny_example(10);
  ModelOutputs ta = forward(a, ex), tb = forward(b, ex);
  MatchResult match = identity_match(cfg.vision_tokens());
  LossWeights w;
  const double sup = cross_entropy(tb.response_logits, ex.labels).item();
  const double rld = response_rld(tb.response_logits, ta.response_logits, ex.labels).item();
  const double vsd = vsd_loss(ta, tb, match, VsdObject::kLogits, w).item();
  const double vlad = vlad_loss(ta, tb, match).item();
  EXPECT_LE(std::abs(rld), 1e-10);
  EXPECT_LE(std::abs(vsd), 1e-10);
  EXPECT_LE(std::abs(vlad), 1e-10);
  EXPECT_NEAR(combine(w, sup, rld, vsd, vlad).total, w.alpha * sup, 1e-12);
}

}  // namespace
}  // namespace emkd
