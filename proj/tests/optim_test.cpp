#include <gtest/gtest.h>

#include <cmath>

#include "repkit/optim.hpp"

namespace repkit {
namespace {

TEST(Adam, FirstStepHandValue) {
  std::vector<double> p{0.0};
  OptimState s(1);
  adam_step(p, std::vector<double>{1.0}, s, 0.1);
  EXPECT_DOUBLE_EQ(p[0], -0.1 / (1.0 + 1e-8));
  EXPECT_EQ(s.t, 1u);
}

TEST(Adam, ZeroGradientIsIdentity) {
  std::vector<double> p{1.5, -2.0};
  OptimState s(2);
  for (int i = 0; i < 5; ++i) adam_step(p, std::vector<double>{0.0, 0.0}, s, 0.1);
  EXPECT_EQ(p, (std::vector<double>{1.5, -2.0}));
}

// Moments written out by hand for g1 = 0.5, g2 = -1.
TEST(Adam, TwoStepHandTrajectory) {
  std::vector<double> p{1.0};
  OptimState s(1);
  const double lr = 0.01, wd = 0.1;
  adam_step(p, std::vector<double>{0.5}, s, lr, wd);
  double m = 0.05, v = 0.00025;
  double expect = 1.0 - lr * ((m / 0.1) / (std::sqrt(v / 0.001) + 1e-8) + wd * 1.0);
  EXPECT_DOUBLE_EQ(s.m[0], m);
  EXPECT_DOUBLE_EQ(s.v[0], v);
  EXPECT_DOUBLE_EQ(p[0], expect);
  adam_step(p, std::vector<double>{-1.0}, s, lr, wd);
  m = 0.9 * 0.05 - 0.1;
  v = 0.999 * 0.00025 + 0.001;
  expect = expect - lr * ((m / 0.19) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8) + wd * expect);
  EXPECT_NEAR(s.m[0], m, 1e-15);
  EXPECT_NEAR(s.v[0], v, 1e-15);
  EXPECT_NEAR(p[0], expect, 1e-14);
}

TEST(Adam, MaskedEntriesUntouched) {
  std::vector<double> p{1.0, 1.0};
  OptimState s(2);
  const std::vector<char> mask{0, 1};
  adam_step(p, std::vector<double>{1.0, 1.0}, s, 0.1, 0.0, mask);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(s.m[0], 0.0);
  EXPECT_LT(p[1], 1.0);
}

TEST(Adam, NonFiniteGradientRejected) {
  std::vector<double> p{1.0};
  OptimState s(1);
  EXPECT_THROW(adam_step(p, std::vector<double>{NAN}, s, 0.1), NumericError);
  EXPECT_THROW(adam_step(p, std::vector<double>{INFINITY}, s, 0.1), NumericError);
  EXPECT_THROW(adam_step(p, std::vector<double>{1.0, 2.0}, s, 0.1), InvalidArgument);
}

TEST(RAdam, Rho) {
  EXPECT_NEAR(radam_rho(0.999, 1), 1.0, 1e-9);  // 1999 - 2*0.999/0.001
  for (std::uint64_t t = 1; t <= 4; ++t) EXPECT_LE(radam_rho(0.999, t), 4.0);
  EXPECT_GT(radam_rho(0.999, 6), 4.0);
  EXPECT_NEAR(radam_rectification(0.999, 1000000), 1.0, 1e-9);
}

TEST(RAdam, FallbackIsMomentumStep) {
  std::vector<double> p{2.0};
  OptimState s(1);
  radam_step(p, std::vector<double>{0.3}, s, 0.01);
  EXPECT_DOUBLE_EQ(p[0], 2.0 - 0.01 * 0.3);
  radam_step(p, std::vector<double>{-0.7}, s, 0.01);
  const double m = 0.9 * 0.03 - 0.07;
  EXPECT_NEAR(p[0], 2.0 - 0.003 - 0.01 * m / 0.19, 1e-15);
}

TEST(RAdam, ZeroGradientIsIdentity) {
  std::vector<double> p{0.25};
  OptimState s(1);
  for (int i = 0; i < 10; ++i) radam_step(p, std::vector<double>{0.0}, s, 0.1);
  EXPECT_EQ(p[0], 0.25);
}

TEST(RAdam, ApproachesAdamAtLargeT) {
  OptimState a(1), r(1);
  a.t = r.t = 999999;
  a.m = r.m = {0.2};
  a.v = r.v = {0.09};
  std::vector<double> pa{1.0}, pr{1.0};
  adam_step(pa, std::vector<double>{0.3}, a, 0.01);
  radam_step(pr, std::vector<double>{0.3}, r, 0.01);
  EXPECT_NEAR((1.0 - pr[0]) / (1.0 - pa[0]), 1.0, 1e-3);
}

}  // namespace
}  // namespace repkit
