#pragma once

// Synthetic annotated exercise streams. A repetition is one cycle of a
// per-channel harmonic sum; each repetition gets one peak interval.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "repkit/error.hpp"
#include "repkit/rng.hpp"
#include "repkit/signal.hpp"

namespace repkit {

struct Harmonic {
  int order = 1;
  double amplitude = 1.0;
  double phase = 0.0;  // radians, [0, 2*pi)
};

struct ExerciseArchetype {
  std::string exercise_id;
  double period_s = 2.0;
  std::array<std::vector<Harmonic>, kChannels> harmonics;
  double peak_phase = 0.5;  // [0, 1)
  double peak_width = 0.2;  // fraction of a repetition, (0, 0.5)

  void validate() const {
    if (!(period_s > 0.0)) throw InvalidArgument("archetype: period must be positive");
    if (!(peak_phase >= 0.0 && peak_phase < 1.0))
      throw InvalidArgument("archetype: peak_phase must lie in [0, 1)");
    if (!(peak_width > 0.0 && peak_width < 0.5))
      throw InvalidArgument("archetype: peak_width must lie in (0, 0.5)");
    for (const auto& ch : harmonics) {
      if (ch.empty()) throw InvalidArgument("archetype: every channel needs a harmonic");
      for (const auto& h : ch)
        if (h.order < 1) throw InvalidArgument("archetype: harmonic order must be >= 1");
    }
  }
};

struct SubjectProfile {
  double tempo_scale = 1.0;
  double amplitude_scale = 1.0;
  double noise_sigma = 0.0;
  double drift_per_s = 0.0;

  void validate() const {
    if (!(tempo_scale > 0.0) || !(amplitude_scale > 0.0))
      throw InvalidArgument("subject profile: tempo and amplitude scales must be positive");
    if (noise_sigma < 0.0) throw InvalidArgument("subject profile: negative noise sigma");
  }
};

struct GenConfig {
  std::uint64_t seed = 0;
  std::size_t reps_per_set = 15;
  std::size_t sets = 4;
  double rate_hz = kDefaultRateHz;
  // Uniform per-repetition tempo jitter, as a fraction of the repetition length.
  double tempo_jitter = 0.10;
  // Stationary rest before the first and after the last repetition (phase
  // held still), as in a recording that starts and stops at rest.
  double rest_s = 2.0;
};

inline SignalStream generate_set(const ExerciseArchetype& arch, const SubjectProfile& subj,
                                 const GenConfig& cfg, const std::string& subject_id = "s00") {
  arch.validate();
  subj.validate();
  if (cfg.reps_per_set == 0) throw InvalidArgument("generate_set: reps_per_set must be positive");
  if (!(cfg.rate_hz > 0.0)) throw InvalidArgument("generate_set: rate must be positive");
  if (cfg.tempo_jitter < 0.0 || cfg.tempo_jitter >= 1.0)
    throw InvalidArgument("generate_set: tempo jitter must lie in [0, 1)");
  if (!(cfg.rest_s >= 0.0)) throw InvalidArgument("generate_set: rest must be nonnegative");

  SplitMix64 rng(cfg.seed);
  // Repetition boundaries in seconds.
  std::vector<double> rep_start(cfg.reps_per_set + 1, cfg.rest_s);
  for (std::size_t r = 0; r < cfg.reps_per_set; ++r) {
    const double jitter = cfg.tempo_jitter > 0.0 ? rng.uniform(-cfg.tempo_jitter, cfg.tempo_jitter) : 0.0;
    rep_start[r + 1] = rep_start[r] + arch.period_s * subj.tempo_scale * (1.0 + jitter);
  }
  const double total_s = rep_start.back() + cfg.rest_s;
  const auto length = static_cast<std::size_t>(std::llround(total_s * cfg.rate_hz));

  SignalStream s;
  s.sample_rate_hz = cfg.rate_hz;
  s.exercise_id = arch.exercise_id;
  s.subject_id = subject_id;
  s.channels.resize(length * kChannels);

  constexpr double two_pi = 2.0 * std::numbers::pi;
  std::size_t rep = 0;
  for (std::size_t i = 0; i < length; ++i) {
    const double t = static_cast<double>(i) / cfg.rate_hz;
    while (rep + 1 < cfg.reps_per_set && t >= rep_start[rep + 1]) ++rep;
    const double u = std::clamp((t - rep_start[rep]) / (rep_start[rep + 1] - rep_start[rep]), 0.0, 1.0);
    const double phase = static_cast<double>(rep) + u;
    for (std::size_t c = 0; c < kChannels; ++c) {
      double v = 0.0;
      for (const auto& h : arch.harmonics[c])
        v += h.amplitude * std::sin(two_pi * h.order * phase + h.phase);
      v = subj.amplitude_scale * v + subj.drift_per_s * t;
      if (subj.noise_sigma > 0.0) v += subj.noise_sigma * rng.normal();
      s.channels[i * kChannels + c] = static_cast<float>(v);
    }
  }

  for (std::size_t r = 0; r < cfg.reps_per_set; ++r) {
    const double dur = rep_start[r + 1] - rep_start[r];
    const double center = rep_start[r] + arch.peak_phase * dur;
    const double half = 0.5 * arch.peak_width * dur;
    auto lo = std::llround((center - half) * cfg.rate_hz);
    auto hi = std::llround((center + half) * cfg.rate_hz);
    lo = std::max<long long>(lo, 0);
    hi = std::min<long long>(hi, static_cast<long long>(length));
    if (!s.peak_intervals.empty())
      lo = std::max<long long>(lo, static_cast<long long>(s.peak_intervals.back().end));
    if (hi <= lo) hi = lo + 1;  // keep one interval per repetition
    if (hi > static_cast<long long>(length))
      throw InvalidArgument("generate_set: peak interval does not fit the stream");
    s.peak_intervals.push_back({static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)});
  }
  return s;
}

// ---------------------------------------------------------------------------
// Samplers.

// Channels 2 (az) and one random other channel carry a pulse at the peak
// phase: their harmonics are phase-aligned so every term peaks there. The
// remaining channels get unaligned low-order harmonics.
inline ExerciseArchetype sample_archetype(const std::string& id, double period_s, SplitMix64& rng) {
  ExerciseArchetype a;
  a.exercise_id = id;
  a.period_s = period_s;
  a.peak_phase = rng.uniform(0.35, 0.65);
  a.peak_width = rng.uniform(0.15, 0.25);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const std::size_t second_lead = static_cast<std::size_t>(rng.below(kChannels - 1));
  for (std::size_t c = 0; c < kChannels; ++c) {
    const bool lead = c == 2 || (second_lead < 2 ? second_lead : second_lead + 1) == c;
    auto& hs = a.harmonics[c];
    const double group_scale = c < 3 ? 1.0 : (c < 6 ? 1.5 : 0.6);
    if (lead) {
      const double sign = (c == 2 || rng.uniform() < 0.5) ? 1.0 : -1.0;
      const double base = group_scale * rng.uniform(0.8, 1.2);
      const double decay = rng.uniform(0.55, 0.8);
      for (int k = 1; k <= 4; ++k) {
        // sin(2*pi*k*phi + pi/2 - 2*pi*k*peak_phase) = cos(2*pi*k*(phi - peak_phase))
        double ph = std::fmod(std::numbers::pi / 2 - two_pi * k * a.peak_phase, two_pi);
        if (ph < 0) ph += two_pi;
        if (sign < 0) ph = std::fmod(ph + std::numbers::pi, two_pi);
        hs.push_back({k, base * std::pow(decay, k - 1), ph});
      }
    } else {
      const int n = 1 + static_cast<int>(rng.below(2));
      for (int k = 1; k <= n; ++k)
        hs.push_back({k, group_scale * rng.uniform(0.2, 0.6) / k, rng.uniform(0.0, two_pi)});
    }
  }
  return a;
}

inline SubjectProfile sample_subject(SplitMix64& rng) {
  SubjectProfile p;
  p.tempo_scale = rng.uniform(0.7, 1.3);
  p.amplitude_scale = rng.uniform(0.8, 1.2);
  p.noise_sigma = rng.uniform(0.02, 0.08);
  p.drift_per_s = rng.uniform(-0.01, 0.01);
  return p;
}

struct CorpusStream {
  SignalStream stream;
  std::size_t set_index = 0;
};

struct Corpus {
  std::vector<ExerciseMeta> exercises;
  std::vector<CorpusStream> streams;

  const ExerciseMeta& meta(const std::string& exercise_id) const {
    for (const auto& m : exercises)
      if (m.exercise_id == exercise_id) return m;
    throw InvalidArgument("corpus: unknown exercise '" + exercise_id + "'");
  }
};

inline constexpr double kMinCorpusPeriodS = 0.8;
inline constexpr double kMaxCorpusPeriodS = 6.0;

inline std::string exercise_name(std::size_t i) {
  const auto n = std::to_string(i);
  return "ex" + (n.size() < 2 ? "0" + n : n);
}

inline std::string subject_name(std::size_t i) {
  const auto n = std::to_string(i);
  return "s" + (n.size() < 2 ? "0" + n : n);
}

// Periods are geometrically spaced over [0.8 s, 6.0 s], so both branches of
// the window rule are covered. Ordering: exercise, subject, set.
inline Corpus generate_corpus(std::size_t n_exercises, std::size_t n_subjects, const GenConfig& cfg) {
  if (n_exercises < 2) throw InvalidArgument("generate_corpus: need at least 2 exercises");
  if (n_subjects < 1) throw InvalidArgument("generate_corpus: need at least 1 subject");
  if (cfg.sets < 1) throw InvalidArgument("generate_corpus: need at least 1 set");
  SplitMix64 arch_rng(derive_seed(cfg.seed, 1));
  SplitMix64 subj_rng(derive_seed(cfg.seed, 2));

  Corpus corpus;
  std::vector<ExerciseArchetype> archetypes;
  const double ratio = kMaxCorpusPeriodS / kMinCorpusPeriodS;
  for (std::size_t e = 0; e < n_exercises; ++e) {
    const double period =
        kMinCorpusPeriodS * std::pow(ratio, static_cast<double>(e) / static_cast<double>(n_exercises - 1));
    archetypes.push_back(sample_archetype(exercise_name(e), period, arch_rng));
    corpus.exercises.push_back({exercise_name(e), "synthetic exercise " + std::to_string(e), period, {}});
  }
  std::vector<SubjectProfile> subjects;
  for (std::size_t s = 0; s < n_subjects; ++s) subjects.push_back(sample_subject(subj_rng));

  for (std::size_t e = 0; e < n_exercises; ++e)
    for (std::size_t s = 0; s < n_subjects; ++s)
      for (std::size_t k = 0; k < cfg.sets; ++k) {
        GenConfig set_cfg = cfg;
        set_cfg.seed = derive_seed(cfg.seed, 1000003ULL * (e + 1) + 1009ULL * (s + 1) + k);
        corpus.streams.push_back({generate_set(archetypes[e], subjects[s], set_cfg, subject_name(s)), k});
      }
  return corpus;
}

// ---------------------------------------------------------------------------
// Corpus directory: manifest.csv plus one stream file per set.
//   exercise,<id>,<name>,<mean_rep_duration_s>
//   stream,<relative path>,<exercise>,<subject>,<set>

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw Error("cannot write manifest in '" + dir.string() + "'");
  manifest << "# repkit corpus manifest v1\n";
  for (const auto& m : corpus.exercises) {
    char dur[32];
    std::snprintf(dur, sizeof dur, "%.17g", m.mean_rep_duration_s);
    manifest << "exercise," << m.exercise_id << ',' << m.name << ',' << dur << '\n';
  }
  for (const auto& cs : corpus.streams) {
    const auto rel = fs::path(cs.stream.exercise_id) /
                     (cs.stream.subject_id + "_set" + std::to_string(cs.set_index) + ".csv");
    fs::create_directories(dir / rel.parent_path());
    save_stream(cs.stream, (dir / rel).string());
    manifest << "stream," << rel.generic_string() << ',' << cs.stream.exercise_id << ','
             << cs.stream.subject_id << ',' << cs.set_index << '\n';
  }
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw Error("no manifest.csv in '" + dir.string() + "'");
  Corpus corpus;
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(manifest, raw)) {
    ++lineno;
    const auto line = detail::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto f = detail::split(line, ',');
    if (f[0] == "exercise" && f.size() == 4) {
      ExerciseMeta m;
      m.exercise_id = std::string(f[1]);
      m.name = std::string(f[2]);
      if (!detail::parse_number(f[3], m.mean_rep_duration_s) || !(m.mean_rep_duration_s > 0))
        throw ParseError(lineno, "invalid mean repetition duration");
      corpus.exercises.push_back(m);
    } else if (f[0] == "stream" && f.size() == 5) {
      CorpusStream cs;
      cs.stream = load_stream((dir / std::string(f[1])).string());
      if (!detail::parse_number(f[4], cs.set_index)) throw ParseError(lineno, "invalid set index");
      if (cs.stream.exercise_id != f[2] || cs.stream.subject_id != f[3])
        throw ParseError(lineno, "manifest ids disagree with stream header");
      corpus.streams.push_back(std::move(cs));
    } else {
      throw ParseError(lineno, "unrecognized manifest record");
    }
  }
  for (const auto& cs : corpus.streams) (void)corpus.meta(cs.stream.exercise_id);
  return corpus;
}

}  // namespace repkit
