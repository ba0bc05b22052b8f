#pragma once

// Registration, cosine-similarity peak classification against a support set,
// transition counting and the streaming counting session.

#include <cmath>
#include <cstdint>
#include <deque>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "repkit/error.hpp"
#include "repkit/net.hpp"
#include "repkit/rng.hpp"
#include "repkit/signal.hpp"

namespace repkit {

inline constexpr std::size_t kShots = 5;

struct SupportSet {
  std::vector<std::vector<double>> positives;
  std::vector<std::vector<double>> negatives;
  WindowParams params;

  void validate() const {
    if (positives.size() < kShots || negatives.size() < kShots)
      throw RegistrationError("support set needs at least 5 peak and 5 non-peak embeddings (have " +
                              std::to_string(positives.size()) + " and " + std::to_string(negatives.size()) + ")");
    for (const auto* side : {&positives, &negatives})
      for (const auto& e : *side) {
        double n = 0.0;
        for (double v : e) n += v * v;
        if (std::abs(std::sqrt(n) - 1.0) > 1e-6) throw InvalidArgument("support set: embedding is not unit norm");
      }
  }
};

// Labeled registration windows for a 5-rep stream, cut with the window rule.
inline std::vector<Window> registration_windows(const SignalStream& stream, const ExerciseMeta& meta,
                                                std::size_t t_max = kDefaultTMax,
                                                double overlap_ratio = kDefaultOverlapRatio) {
  if (stream.peak_intervals.size() != kShots)
    throw RegistrationError("registration stream must contain exactly 5 annotated repetitions, found " +
                            std::to_string(stream.peak_intervals.size()));
  const auto params = window_params_for(meta.mean_rep_duration_s);
  if (window_count(stream.length(), params) == 0)
    throw RegistrationError("registration stream is shorter than one window");
  auto windows = slide_labeled(stream, params, t_max, overlap_ratio);
  std::size_t pos = 0;
  for (const auto& w : windows) pos += to_int(*w.label);
  if (pos < kShots || windows.size() - pos < kShots)
    throw RegistrationError("registration yields " + std::to_string(pos) + " peak and " +
                            std::to_string(windows.size() - pos) + " non-peak windows; 5 of each are required");
  return windows;
}

inline SupportSet build_support(std::span<const Window> labeled, const ModelParams& model, const WindowParams& params) {
  SupportSet s;
  s.params = params;
  for (const auto& w : labeled) {
    auto e = embed(model, w);
    (to_int(*w.label) ? s.positives : s.negatives).push_back(std::move(e));
  }
  s.validate();
  return s;
}

inline SupportSet register_exercise(const SignalStream& stream, const ExerciseMeta& meta, const ModelParams& model,
                                    double overlap_ratio = kDefaultOverlapRatio) {
  const auto windows = registration_windows(stream, meta, model.config.t_max, overlap_ratio);
  return build_support(windows, model, window_params_for(meta.mean_rep_duration_s));
}

// ---------------------------------------------------------------------------
// Classification.

inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidArgument("cosine: dimension mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  const double d = std::sqrt(aa) * std::sqrt(bb);
  return d > 0.0 ? ab / d : 0.0;
}

struct Classification {
  Label label = Label::non_peak;
  double sp = 0.0;  // mean cosine similarity to the sampled positives
  double sn = 0.0;  // mean cosine similarity to the sampled negatives
};

// Draws k distinct indices from [0, n) (partial Fisher-Yates).
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, SplitMix64& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  return idx;
}

// peak iff SP >= SN, each averaged over 5 supports drawn without replacement.
inline Classification classify_embedding(std::span<const double> anchor, const SupportSet& support,
                                         std::uint64_t rng_seed) {
  if (support.positives.size() < kShots || support.negatives.size() < kShots)
    throw RegistrationError("classify: support set smaller than 5 per class");
  SplitMix64 rng(rng_seed);
  const auto pi = sample_without_replacement(support.positives.size(), kShots, rng);
  const auto ni = sample_without_replacement(support.negatives.size(), kShots, rng);
  Classification c;
  for (auto i : pi) c.sp += cosine(anchor, support.positives[i]);
  for (auto i : ni) c.sn += cosine(anchor, support.negatives[i]);
  c.sp /= static_cast<double>(kShots);
  c.sn /= static_cast<double>(kShots);
  c.label = c.sp >= c.sn ? Label::peak : Label::non_peak;
  return c;
}

inline Classification classify(const Window& anchor, const SupportSet& support, const ModelParams& model,
                               std::uint64_t rng_seed) {
  return classify_embedding(embed(model, anchor), support, rng_seed);
}

// Seed used for the k-th window of a session.
inline std::uint64_t window_seed(std::uint64_t session_seed, std::size_t k) { return derive_seed(session_seed, k); }

// ---------------------------------------------------------------------------
// Transition counting.

// Number of maximal runs of 1s at least `min_run` long (min_run = 1 counts
// every 0->1 transition, including a leading 1).
inline std::size_t transition_count(std::span<const int> labels, std::size_t min_run = 1) {
  std::size_t count = 0, run = 0;
  for (int v : labels) {
    if (v) {
      if (++run == min_run) ++count;
    } else {
      run = 0;
    }
  }
  return count;
}

struct CountResult {
  std::size_t predicted = 0;
  std::optional<std::size_t> true_count;
  std::optional<std::size_t> abs_error;
  std::vector<int> labels;  // per-window predictions
};

inline CountResult make_count_result(std::size_t predicted, std::optional<std::size_t> truth) {
  CountResult r;
  r.predicted = predicted;
  r.true_count = truth;
  if (truth) r.abs_error = predicted > *truth ? predicted - *truth : *truth - predicted;
  return r;
}

// Batch pipeline: slide -> classify -> transition_count. Window k uses
// window_seed(seed, k), exactly as the streaming session does.
inline CountResult count_set(const SignalStream& stream, const SupportSet& support, const ModelParams& model,
                             const WindowParams& params, std::uint64_t seed, std::size_t min_run = 1) {
  if (window_count(stream.length(), params) == 0)
    throw InvalidArgument("count_set: stream of " + std::to_string(stream.length()) +
                          " samples is shorter than one window (" + std::to_string(params.window_size) + ")");
  const auto windows = slide(stream, params, model.config.t_max);
  std::vector<int> labels;
  labels.reserve(windows.size());
  for (std::size_t k = 0; k < windows.size(); ++k)
    labels.push_back(to_int(classify(windows[k], support, model, window_seed(seed, k)).label));
  std::optional<std::size_t> truth;
  if (!stream.peak_intervals.empty()) truth = stream.peak_intervals.size();
  auto r = make_count_result(transition_count(labels, min_run), truth);
  r.labels = std::move(labels);
  return r;
}

// ---------------------------------------------------------------------------
// Streaming session.

struct WindowClassified {
  std::size_t window_index = 0;
  std::size_t at_sample = 0;  // index of the sample that completed the window
  Label label = Label::non_peak;
};

struct CountIncremented {
  std::size_t new_count = 0;
  std::size_t at_sample = 0;
};

using Event = std::variant<WindowClassified, CountIncremented>;

struct SessionState {
  std::deque<std::array<double, kChannels>> buffer;  // capacity window_size
  std::size_t samples_seen = 0;
  std::size_t samples_since_last_window = 0;
  std::vector<int> label_sequence;
  bool current_run = false;
  std::size_t run_length = 0;
  std::size_t count = 0;
};

class CountingSession {
 public:
  CountingSession(const ModelParams& model, const SupportSet& support, WindowParams params, std::uint64_t seed,
                  std::size_t min_run = 1)
      : model_(model), support_(support), params_(params), seed_(seed), min_run_(min_run) {
    params_.validate();
    if (params_.window_size > model_.config.t_max)
      throw InvalidArgument("session: window size exceeds the model's t_max");
    support_.validate();
  }

  std::vector<Event> step(std::span<const double> sample) {
    if (sample.size() != kChannels) throw InvalidArgument("session: a sample has 9 channels");
    std::vector<Event> events;
    std::array<double, kChannels> row;
    // Samples pass through float32 like stored streams do.
    for (std::size_t c = 0; c < kChannels; ++c) row[c] = static_cast<double>(static_cast<float>(sample[c]));
    state_.buffer.push_back(row);
    if (state_.buffer.size() > params_.window_size) state_.buffer.pop_front();
    const std::size_t i = state_.samples_seen++;
    if (state_.buffer.size() < params_.window_size) return events;
    // First window once the buffer is full, then one every `stride` samples.
    if (!state_.label_sequence.empty() && ++state_.samples_since_last_window < params_.stride) return events;
    state_.samples_since_last_window = 0;
    classify_buffer(i, events);
    return events;
  }

  const SessionState& state() const { return state_; }
  std::size_t count() const { return state_.count; }

 private:
  void classify_buffer(std::size_t at_sample, std::vector<Event>& events) {
    std::vector<double> rows;
    rows.reserve(params_.window_size * kChannels);
    for (const auto& r : state_.buffer) rows.insert(rows.end(), r.begin(), r.end());
    const std::size_t k = state_.label_sequence.size();
    const auto w = make_window(rows, model_.config.t_max, {"", "", at_sample + 1 - params_.window_size});
    const auto c = classify(w, support_, model_, window_seed(seed_, k));
    const int v = to_int(c.label);
    state_.label_sequence.push_back(v);
    events.push_back(WindowClassified{k, at_sample, c.label});
    if (v) {
      ++state_.run_length;
      if (state_.run_length == min_run_) {
        ++state_.count;
        events.push_back(CountIncremented{state_.count, at_sample});
      }
    } else {
      state_.run_length = 0;
    }
    state_.current_run = v == 1;
  }

  const ModelParams& model_;
  const SupportSet& support_;
  WindowParams params_;
  std::uint64_t seed_;
  std::size_t min_run_;
  SessionState state_;
};

// ---------------------------------------------------------------------------
// Support file (JSON): window params plus embedding lists.

inline void save_support(const SupportSet& s, const std::string& path) {
  nlohmann::json j;
  j["format"] = "repkit-support-v1";
  j["window_size"] = s.params.window_size;
  j["stride"] = s.params.stride;
  j["positives"] = s.positives;
  j["negatives"] = s.negatives;
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  os << j.dump() << '\n';
}

inline SupportSet load_support(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open support file '" + path + "'");
  try {
    const auto j = nlohmann::json::parse(is);
    if (j.at("format") != "repkit-support-v1") throw LoadError("unknown support file format");
    SupportSet s;
    s.params = {j.at("window_size").get<std::size_t>(), j.at("stride").get<std::size_t>()};
    s.positives = j.at("positives").get<std::vector<std::vector<double>>>();
    s.negatives = j.at("negatives").get<std::vector<std::vector<double>>>();
    s.params.validate();
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("corrupt support file '" + path + "': " + e.what());
  }
}

}  // namespace repkit
