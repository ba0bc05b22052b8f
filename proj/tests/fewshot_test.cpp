#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "repkit/fewshot.hpp"
#include "repkit/synthgen.hpp"
#include "test_util.hpp"

namespace repkit {
namespace {

// Independent run-length encoding: number of runs whose value is 1.
std::size_t rle_ones(const std::vector<int>& s) {
  std::vector<std::pair<int, std::size_t>> runs;
  for (int v : s) {
    if (runs.empty() || runs.back().first != v) runs.push_back({v, 0});
    ++runs.back().second;
  }
  std::size_t n = 0;
  for (const auto& r : runs) n += r.first == 1;
  return n;
}

TEST(TransitionCount, Examples) {
  EXPECT_EQ(transition_count(std::vector<int>{0, 0, 1, 1, 0, 1, 0}), 2u);
  EXPECT_EQ(transition_count(std::vector<int>{}), 0u);
  EXPECT_EQ(transition_count(std::vector<int>{0, 0, 0}), 0u);
  EXPECT_EQ(transition_count(std::vector<int>{1, 1, 1}), 1u);
}

TEST(TransitionCount, MatchesRleOracleAndProperties) {
  SplitMix64 rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int> s(rng.below(501));
    for (auto& v : s) v = static_cast<int>(rng.below(2));
    const auto n = transition_count(s);
    ASSERT_EQ(n, rle_ones(s));
    auto z = s;
    z.push_back(0);
    ASSERT_EQ(transition_count(z), n);
    if (!s.empty()) {
      auto d = s;
      const auto i = rng.below(s.size());
      d.insert(d.begin() + static_cast<std::ptrdiff_t>(i), s[i]);
      ASSERT_EQ(transition_count(d), n);
    }
  }
}

TEST(TransitionCount, SpuriousOneInflatesByOne) {
  std::vector<int> s{0, 0, 1, 1, 0, 0, 0, 0, 1, 0};
  const auto base = transition_count(s);
  s[5] = 1;
  EXPECT_EQ(transition_count(s), base + 1);
}

TEST(TransitionCount, MinRunFilter) {
  const std::vector<int> s{1, 0, 1, 1, 0, 1, 1, 1};
  EXPECT_EQ(transition_count(s, 2), 2u);
  EXPECT_EQ(transition_count(s, 3), 1u);
}

std::vector<double> unit(std::vector<double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  for (auto& x : v) x /= std::sqrt(n);
  return v;
}

TEST(Classify, IdenticalPositivesOrthogonalNegatives) {
  SupportSet s;
  s.params = {50, 25};
  for (int i = 0; i < 5; ++i) {
    s.positives.push_back({1, 0, 0});
    s.negatives.push_back({0, 1, 0});
  }
  const auto c = classify_embedding(std::vector<double>{1, 0, 0}, s, 1);
  EXPECT_EQ(c.label, Label::peak);
  EXPECT_DOUBLE_EQ(c.sp, 1.0);
  EXPECT_DOUBLE_EQ(c.sn, 0.0);
}

TEST(Classify, TieIsPeak) {
  SupportSet s;
  for (int i = 0; i < 5; ++i) {
    s.positives.push_back({1, 0});
    s.negatives.push_back({0, 1});
  }
  const auto c = classify_embedding(unit({1, 1}), s, 3);
  EXPECT_DOUBLE_EQ(c.sp, c.sn);
  EXPECT_EQ(c.label, Label::peak);
}

TEST(Classify, MatchesBruteForceMeanCosine) {
  SplitMix64 rng(5);
  auto rand_unit = [&] {
    std::vector<double> v(8);
    for (auto& x : v) x = rng.normal();
    return unit(v);
  };
  for (int trial = 0; trial < 100; ++trial) {
    SupportSet s;
    const auto np = 5 + rng.below(10), nn = 5 + rng.below(10);
    for (std::size_t i = 0; i < np; ++i) s.positives.push_back(rand_unit());
    for (std::size_t i = 0; i < nn; ++i) s.negatives.push_back(rand_unit());
    const auto a = rand_unit();
    const std::uint64_t seed = rng.next();
    // Replay the documented draw order: 5 positive indices, then 5 negative.
    SplitMix64 replay(seed);
    const auto pi = sample_without_replacement(np, 5, replay);
    const auto ni = sample_without_replacement(nn, 5, replay);
    std::set<std::size_t> distinct(pi.begin(), pi.end());
    ASSERT_EQ(distinct.size(), 5u);
    double sp = 0, sn = 0;
    for (auto i : pi)
      for (std::size_t k = 0; k < 8; ++k) sp += a[k] * s.positives[i][k] / 5;
    for (auto i : ni)
      for (std::size_t k = 0; k < 8; ++k) sn += a[k] * s.negatives[i][k] / 5;
    const auto c = classify_embedding(a, s, seed);
    EXPECT_NEAR(c.sp, sp, 1e-12);
    EXPECT_NEAR(c.sn, sn, 1e-12);
    EXPECT_EQ(c.label == Label::peak, sp >= sn);
    EXPECT_GE(c.sp, -1.0);
    EXPECT_LE(c.sp, 1.0);
  }
}

TEST(Classify, SmallSupportRejected) {
  SupportSet s;
  for (int i = 0; i < 4; ++i) {
    s.positives.push_back({1, 0});
    s.negatives.push_back({0, 1});
  }
  EXPECT_THROW(classify_embedding(std::vector<double>{1, 0}, s, 0), RegistrationError);
}

ExerciseArchetype two_second_archetype() {
  SplitMix64 rng(21);
  return sample_archetype("ex", 2.0, rng);
}

SignalStream five_rep_stream(std::uint64_t seed = 4) {
  GenConfig g;
  g.seed = seed;
  g.reps_per_set = 5;
  SubjectProfile subj{1.0, 1.0, 0.03, 0.0};
  return generate_set(two_second_archetype(), subj, g);
}

TEST(Register, FiveRepStreamGivesBothClasses) {
  const auto stream = five_rep_stream();
  const ExerciseMeta meta{"ex", "ex", 2.0, std::nullopt};
  const auto windows = registration_windows(stream, meta);
  std::size_t pos = 0, neg = 0;
  for (const auto& w : windows) {
    // Oracle: label recomputed with the interval-overlap rule.
    bool peak = false;
    for (const auto& p : stream.peak_intervals) {
      const auto lo = std::max(p.start, w.origin.start), hi = std::min(p.end, w.origin.start + w.valid_len);
      if (hi > lo && 2 * (hi - lo) >= p.end - p.start) peak = true;
    }
    ASSERT_EQ(to_int(*w.label), peak ? 1 : 0);
    (peak ? pos : neg)++;
  }
  EXPECT_GE(pos, 5u);
  EXPECT_GE(neg, 5u);
  const auto model = init_params(ModelConfig{});
  const auto a = register_exercise(stream, meta, model);
  const auto b = register_exercise(stream, meta, model);
  EXPECT_EQ(a.positives, b.positives);
  EXPECT_EQ(a.negatives, b.negatives);
  EXPECT_EQ(a.params, (WindowParams{100, 50}));
}

TEST(Register, FourRepsRejected) {
  auto stream = five_rep_stream();
  stream.peak_intervals.pop_back();
  const ExerciseMeta meta{"ex", "ex", 2.0, std::nullopt};
  EXPECT_THROW(registration_windows(stream, meta), RegistrationError);
}

struct Pipeline {
  ModelParams model = init_params(testing::small_config());
  SupportSet support;
  WindowParams params{100, 50};
  Pipeline() {
    const ExerciseMeta meta{"ex", "ex", 2.0, std::nullopt};
    support = register_exercise(five_rep_stream(), meta, model);
  }
};

TEST(Session, MatchesBatchPipeline) {
  Pipeline p;
  GenConfig g;
  SplitMix64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    g.seed = rng.next();
    g.reps_per_set = 3 + rng.below(10);
    const auto stream = generate_set(two_second_archetype(), sample_subject(rng), g);
    const std::uint64_t seed = rng.next();
    const auto batch = count_set(stream, p.support, p.model, p.params, seed);
    CountingSession session(p.model, p.support, p.params, seed);
    std::size_t last_count = 0;
    for (std::size_t t = 0; t < stream.length(); ++t) {
      std::vector<double> row(kChannels);
      for (std::size_t c = 0; c < kChannels; ++c) row[c] = stream.at(t, c);
      for (const auto& ev : session.step(row))
        if (const auto* inc = std::get_if<CountIncremented>(&ev)) {
          EXPECT_EQ(inc->new_count, last_count + 1);
          last_count = inc->new_count;
        }
      ASSERT_EQ(session.count(), transition_count(session.state().label_sequence));
    }
    EXPECT_EQ(session.state().label_sequence, batch.labels);
    EXPECT_EQ(session.count(), batch.predicted);
    EXPECT_EQ(batch.true_count, stream.peak_intervals.size());
  }
}

TEST(Session, NoEventsBeforeBufferFills) {
  Pipeline p;
  CountingSession session(p.model, p.support, p.params, 1);
  const std::vector<double> row(kChannels, 0.1);
  for (std::size_t i = 0; i + 1 < p.params.window_size; ++i) EXPECT_TRUE(session.step(row).empty());
  EXPECT_FALSE(session.step(row).empty());
}

TEST(CountSet, ShortStreamRejected) {
  Pipeline p;
  EXPECT_THROW(count_set(testing::random_stream(99, 1), p.support, p.model, p.params, 0), InvalidArgument);
}

TEST(SupportFile, RoundTrip) {
  Pipeline p;
  testing::TempDir dir("support");
  save_support(p.support, dir.file("s.json"));
  const auto back = load_support(dir.file("s.json"));
  EXPECT_EQ(back.positives, p.support.positives);
  EXPECT_EQ(back.negatives, p.support.negatives);
  EXPECT_EQ(back.params, p.support.params);
  std::ofstream(dir.file("bad.json")) << "{\"format\": 3";
  EXPECT_THROW(load_support(dir.file("bad.json")), LoadError);
}

}  // namespace
}  // namespace repkit
