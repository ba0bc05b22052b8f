#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "repkit/synthgen.hpp"
#include "test_util.hpp"

namespace repkit {
namespace {

const SubjectProfile kClean{1.0, 1.0, 0.0, 0.0};

ExerciseArchetype archetype(double period, std::uint64_t seed = 1) {
  SplitMix64 rng(seed);
  return sample_archetype("ex", period, rng);
}

TEST(GenerateSet, OneIntervalPerRep) {
  GenConfig g;
  g.tempo_jitter = 0.0;
  const auto s = generate_set(archetype(2.0), kClean, g);
  EXPECT_EQ(s.peak_intervals.size(), 15u);
  EXPECT_NO_THROW(s.validate());
  const double expect = (15 * 2.0 + 2 * g.rest_s) * 92;
  EXPECT_NEAR(static_cast<double>(s.length()), expect, 1.0);
}

TEST(GenerateSet, LengthFollowsTempo) {
  GenConfig g;
  g.rest_s = 0.0;
  g.tempo_jitter = 0.0;
  SubjectProfile slow = kClean;
  slow.tempo_scale = 1.3;
  const auto s = generate_set(archetype(1.0), slow, g);
  EXPECT_NEAR(static_cast<double>(s.length()), 15 * 1.0 * 1.3 * 92, 1.0);
}

TEST(GenerateSet, NoiselessWithoutJitterIsPeriodic) {
  GenConfig g;
  g.tempo_jitter = 0.0;
  g.rest_s = 0.0;
  g.rate_hz = 100.0;  // 2 s period = 200 samples exactly
  const auto s = generate_set(archetype(2.0), kClean, g);
  for (std::size_t t = 0; t + 200 < s.length(); ++t)
    for (std::size_t c = 0; c < kChannels; ++c) ASSERT_NEAR(s.at(t, c), s.at(t + 200, c), 1e-4);
}

// The lead channel is a phase-aligned harmonic pulse: its per-rep maximum
// sits inside that rep's peak interval.
TEST(GenerateSet, LeadChannelPeaksInsideIntervals) {
  GenConfig g;
  g.tempo_jitter = 0.0;
  g.rest_s = 0.0;
  const auto s = generate_set(archetype(2.0, 5), kClean, g);
  const std::size_t rep = 184;
  for (std::size_t r = 0; r < 15; ++r) {
    std::size_t best = r * rep;
    for (std::size_t t = r * rep; t < (r + 1) * rep && t < s.length(); ++t)
      if (s.at(t, 2) > s.at(best, 2)) best = t;
    EXPECT_GE(best, s.peak_intervals[r].start);
    EXPECT_LT(best, s.peak_intervals[r].end);
  }
}

TEST(GenerateSet, Deterministic) {
  GenConfig g;
  g.seed = 9;
  SubjectProfile p{1.1, 0.9, 0.05, 0.005};
  EXPECT_EQ(generate_set(archetype(1.4), p, g), generate_set(archetype(1.4), p, g));
}

TEST(GenerateSet, RejectsBadConfig) {
  GenConfig g;
  g.reps_per_set = 0;
  EXPECT_THROW(generate_set(archetype(2.0), kClean, g), InvalidArgument);
  SubjectProfile bad = kClean;
  bad.tempo_scale = -1;
  EXPECT_THROW(generate_set(archetype(2.0), bad, GenConfig{}), InvalidArgument);
}

TEST(SampleSubject, TempoRange) {
  SplitMix64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const auto p = sample_subject(rng);
    EXPECT_GE(p.tempo_scale, 0.7);
    EXPECT_LE(p.tempo_scale, 1.3);
  }
}

TEST(Corpus, StructureAndPeriods) {
  GenConfig g;
  g.seed = 7;
  g.sets = 2;
  g.reps_per_set = 6;
  const auto c = generate_corpus(4, 3, g);
  ASSERT_EQ(c.exercises.size(), 4u);
  EXPECT_EQ(c.streams.size(), 4u * 3 * 2);
  std::set<double> periods;
  bool long_branch = false, short_branch = false;
  for (const auto& m : c.exercises) {
    periods.insert(m.mean_rep_duration_s);
    (m.mean_rep_duration_s > 1.5 ? long_branch : short_branch) = true;
  }
  EXPECT_EQ(periods.size(), 4u);
  EXPECT_DOUBLE_EQ(*periods.begin(), 0.8);
  EXPECT_DOUBLE_EQ(*periods.rbegin(), 6.0);
  EXPECT_TRUE(long_branch && short_branch);
}

TEST(Corpus, SaveLoadRoundTrip) {
  GenConfig g;
  g.seed = 2;
  g.sets = 2;
  g.reps_per_set = 5;
  const auto c = generate_corpus(2, 2, g);
  testing::TempDir dir("corpus");
  save_corpus(c, dir.path);
  const auto back = load_corpus(dir.path);
  ASSERT_EQ(back.streams.size(), c.streams.size());
  for (std::size_t i = 0; i < c.streams.size(); ++i) {
    EXPECT_EQ(back.streams[i].stream, c.streams[i].stream);
    EXPECT_EQ(back.streams[i].set_index, c.streams[i].set_index);
  }
  for (std::size_t i = 0; i < c.exercises.size(); ++i)
    EXPECT_EQ(back.exercises[i].mean_rep_duration_s, c.exercises[i].mean_rep_duration_s);
  EXPECT_THROW(load_corpus(dir.path / "missing"), Error);
}

}  // namespace
}  // namespace repkit
