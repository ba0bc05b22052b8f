#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "repkit/train.hpp"
#include "test_util.hpp"

namespace repkit {
namespace {

using testing::random_window;

TEST(Bce, Examples) {
  EXPECT_NEAR(bce_loss(std::vector<double>{0.5}, std::vector<int>{1}), std::log(2.0), 1e-12);
  EXPECT_NEAR(bce_loss(std::vector<double>{1.0}, std::vector<int>{1}), 1e-7, 1e-12);
  EXPECT_THROW(bce_loss(std::vector<double>{}, std::vector<int>{}), InvalidArgument);
}

TEST(Bce, MatchesElementwiseOracle) {
  SplitMix64 rng(1);
  std::vector<double> p(50);
  std::vector<int> y(50);
  double expect = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = rng.uniform(0.01, 0.99);
    y[i] = static_cast<int>(rng.below(2));
    expect += y[i] ? -std::log(p[i]) : -std::log(1 - p[i]);
  }
  EXPECT_NEAR(bce_loss(p, y), expect / 50, 1e-12);
}

TEST(Bce, TermGradientIsSigmoidMinusLabel) {
  const auto t = bce_term(0.3, 1);
  EXPECT_NEAR(t.dlogit, 1 / (1 + std::exp(-0.3)) - 1, 1e-12);
  EXPECT_EQ(bce_term(40.0, 0).dlogit, 0.0);  // clamped region
}

TEST(Triplet, Examples) {
  EXPECT_NEAR(triplet_loss(0.2, 0.5, 1.0), 0.7, 1e-12);
  EXPECT_EQ(triplet_loss(0.1, 1.5, 1.0), 0.0);
  EXPECT_EQ(triplet_loss(0.0, 0.0, 1.0), 1.0);
}

EmbeddingBatch random_unit_batch(std::size_t B, std::size_t d, SplitMix64& rng) {
  EmbeddingBatch e;
  e.dim = d;
  for (std::size_t i = 0; i < B; ++i) {
    std::vector<double> v(d);
    double n = 0;
    for (auto& x : v) {
      x = rng.normal();
      n += x * x;
    }
    for (auto& x : v) e.values.push_back(x / std::sqrt(n));
  }
  return e;
}

TEST(PairwiseDists, Properties) {
  SplitMix64 rng(2);
  const auto e = random_unit_batch(10, 6, rng);
  const auto D = pairwise_sq_dists(e);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(D[i * 10 + i], 0.0);
    for (std::size_t j = 0; j < 10; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < 6; ++k) dot += e.row(i)[k] * e.row(j)[k];
      EXPECT_NEAR(D[i * 10 + j], 2 - 2 * dot, 1e-12);
      EXPECT_EQ(D[i * 10 + j], D[j * 10 + i]);
    }
  }
  EmbeddingBatch ortho{{1, 0, 0, 1}, 2};
  EXPECT_NEAR(pairwise_sq_dists(ortho)[1], 2.0, 1e-15);
}

TEST(Mining, UniqueSemiHardChoice) {
  // anchor 0, positive 1 (d=0.5); negatives 2 (d=0.3), 3 (d=0.9), within margin only 3.
  std::vector<double> D(16, 0.0);
  auto set = [&](int i, int j, double v) { D[i * 4 + j] = D[j * 4 + i] = v; };
  set(0, 1, 0.5);
  set(0, 2, 0.3);
  set(0, 3, 0.9);
  set(1, 2, 2.0);
  set(1, 3, 2.0);
  set(2, 3, 0.1);
  const auto t = mine_semi_hard(D, std::vector<int>{1, 1, 0, 0}, 0.5);
  ASSERT_FALSE(t.empty());
  EXPECT_EQ(t[0], (Triplet{0, 1, 3, MiningBranch::semi_hard}));
}

TEST(Mining, FarthestFallback) {
  std::vector<double> D(9, 0.0);
  auto set = [&](int i, int j, double v) { D[i * 3 + j] = D[j * 3 + i] = v; };
  set(0, 1, 3.0);
  set(0, 2, 1.0);
  set(1, 2, 4.5);
  const auto t = mine_semi_hard(D, std::vector<int>{1, 1, 0}, 1.0);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[0], (Triplet{0, 1, 2, MiningBranch::farthest}));
  EXPECT_EQ(t[1], (Triplet{1, 0, 2, MiningBranch::beyond_positive}));
}

TEST(Mining, SingleClassGivesNothing) {
  std::vector<double> D(9, 1.0);
  EXPECT_TRUE(mine_semi_hard(D, std::vector<int>{1, 1, 1}, 1.0).empty());
}

TEST(BatchTriplet, MeanAndDuplicates) {
  SplitMix64 rng(3);
  const auto e = random_unit_batch(4, 3, rng);
  const TripletIndexSet one{{0, 1, 2}};
  const double l = triplet_loss(sq_dist(e.row(0), e.row(1), 3), sq_dist(e.row(0), e.row(2), 3), 1.0);
  EXPECT_NEAR(batch_triplet_loss(one, e, 1.0), l, 1e-15);
  EXPECT_NEAR(batch_triplet_loss({{0, 1, 2}, {0, 1, 2}}, e, 1.0), l, 1e-15);
  std::vector<double> g;
  EXPECT_EQ(batch_triplet_loss({}, e, 1.0, &g), 0.0);
  EXPECT_EQ(g, std::vector<double>(12, 0.0));
}

TEST(BatchTriplet, GradientMatchesFiniteDifferences) {
  SplitMix64 rng(4);
  auto e = random_unit_batch(6, 4, rng);
  const TripletIndexSet ts{{0, 1, 2}, {1, 0, 3}, {4, 5, 2}, {5, 4, 0}};
  std::vector<double> g;
  batch_triplet_loss(ts, e, 2.0, &g);
  for (std::size_t i = 0; i < e.values.size(); ++i) {
    const double o = e.values[i];
    e.values[i] = o + 1e-6;
    const double lp = batch_triplet_loss(ts, e, 2.0);
    e.values[i] = o - 1e-6;
    const double lm = batch_triplet_loss(ts, e, 2.0);
    e.values[i] = o;
    EXPECT_NEAR(g[i], (lp - lm) / 2e-6, 1e-7);
  }
}

// Labeled windows whose class is visible in the signal mean.
std::vector<Window> separable_windows(std::size_t n, std::uint64_t seed, std::size_t t_max = 20) {
  SplitMix64 rng(seed);
  std::vector<Window> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto w = random_window(t_max, t_max - rng.below(4), rng);
    const bool peak = i % 2 == 0;
    for (std::size_t t = 0; t < w.valid_len; ++t) w.data[t * kChannels + 2] += peak ? 2.0 : -2.0;
    w.label = peak ? Label::peak : Label::non_peak;
    out.push_back(std::move(w));
  }
  return out;
}

TEST(Phase1, LearnsAndDetachesHead) {
  const auto windows = separable_windows(64, 5);
  Phase1Config cfg;
  cfg.epochs = 30;
  cfg.batch_size = 16;
  cfg.lr = 1e-2;
  cfg.seed = 3;
  const auto r = train_phase1(windows, cfg, init_params(testing::tiny_config()));
  ASSERT_EQ(r.curve.size(), 30u);
  EXPECT_LT(r.curve.back().loss, 0.5 * r.curve.front().loss);
  EXPECT_FALSE(r.model.head_attached);
  const auto again = train_phase1(windows, cfg, init_params(testing::tiny_config()));
  EXPECT_EQ(again.model.values, r.model.values);
}

TEST(Phase1, ZeroLearningRateKeepsBackbone) {
  const auto windows = separable_windows(32, 6);
  Phase1Config cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.lr = 0.0;
  const auto p0 = init_params(testing::tiny_config());
  const auto r = train_phase1(windows, cfg, p0);
  for (std::size_t i = 0; i < p0.layout.head_w; ++i) ASSERT_EQ(r.model.values[i], p0.values[i]);
}

TEST(Phase1, SingleClassRejected) {
  auto windows = separable_windows(8, 7);
  for (auto& w : windows) w.label = Label::peak;
  EXPECT_THROW(train_phase1(windows, Phase1Config{}, init_params(testing::tiny_config())), InvalidArgument);
}

TEST(Phase2, LossDecreasesAndIsReproducible) {
  const auto windows = separable_windows(64, 8);
  Phase2Config cfg;
  cfg.epochs = 10;
  cfg.batch_size = 16;
  cfg.lr = 5e-3;
  cfg.seed = 2;
  const auto r = train_phase2(windows, cfg, init_params(testing::tiny_config()));
  EXPECT_LE(r.curve.back().loss, 0.7 * r.curve.front().loss);
  const auto again = train_phase2(windows, cfg, init_params(testing::tiny_config()));
  EXPECT_EQ(again.model.values, r.model.values);
}

TEST(Phase3, FrozenGroupsBitIdentical) {
  const auto windows = separable_windows(24, 9);
  Phase3Config cfg;
  cfg.epochs = 3;
  cfg.batch_size = 12;
  cfg.lr = 1e-2;
  const auto p0 = init_params(testing::tiny_config());
  const auto r = fine_tune_phase3(windows, cfg, p0);
  const auto mask = FreezeMask::all_but_fc(p0.layout);
  bool fc_moved = false;
  for (std::size_t gi = 0; gi < p0.layout.groups.size(); ++gi) {
    const auto& g = p0.layout.groups[gi];
    for (std::size_t k = g.offset; k < g.offset + g.size; ++k) {
      if (mask.is_frozen(gi)) ASSERT_EQ(r.model.values[k], p0.values[k]) << g.name;
      else fc_moved |= r.model.values[k] != p0.values[k];
    }
  }
  EXPECT_TRUE(fc_moved);
}

TEST(Phase3, ZeroEpochsIsIdentity) {
  const auto windows = separable_windows(12, 10);
  Phase3Config cfg;
  cfg.epochs = 0;
  const auto p0 = init_params(testing::tiny_config());
  EXPECT_EQ(fine_tune_phase3(windows, cfg, p0).model.values, p0.values);
}

TEST(MetricsLog, Format) {
  std::ostringstream os;
  write_metrics_log(std::vector<EpochMetrics>{{1, 0.5, 0.75}, {2, 0.25, 1.0}}, os);
  EXPECT_EQ(os.str(), "epoch,loss,accuracy\n1,0.5,0.750000\n2,0.25,1.000000\n");
}

}  // namespace
}  // namespace repkit
