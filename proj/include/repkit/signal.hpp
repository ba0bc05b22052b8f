#pragma once

// Sensor streams, sliding-window segmentation and the stream text format.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "repkit/error.hpp"

namespace repkit {

// Column order: ax, ay, az, gx, gy, gz, mx, my, mz.
inline constexpr std::size_t kChannels = 9;
inline constexpr double kDefaultRateHz = 92.0;
inline constexpr std::size_t kDefaultTMax = 150;
inline constexpr double kDefaultOverlapRatio = 0.5;

// Half-open sample range [start, end).
struct PeakInterval {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - start; }
  bool operator==(const PeakInterval&) const = default;
};

// Samples are stored as float32, the native precision of IMU hardware; the
// text format's 9 significant digits round-trip them exactly.
struct SignalStream {
  double sample_rate_hz = kDefaultRateHz;
  std::vector<float> channels;  // row-major [length x kChannels]
  std::vector<PeakInterval> peak_intervals;
  std::string exercise_id;
  std::string subject_id;

  std::size_t length() const { return channels.size() / kChannels; }

  std::span<const float> row(std::size_t t) const {
    return {channels.data() + t * kChannels, kChannels};
  }

  float at(std::size_t t, std::size_t c) const { return channels[t * kChannels + c]; }

  bool operator==(const SignalStream&) const = default;

  void validate() const {
    if (!(sample_rate_hz > 0.0)) throw InvalidArgument("stream: sample rate must be positive");
    if (channels.size() % kChannels != 0)
      throw InvalidArgument("stream: channel buffer is not a multiple of 9");
    if (length() == 0) throw InvalidArgument("stream: empty stream");
    std::size_t prev_end = 0;
    for (std::size_t i = 0; i < peak_intervals.size(); ++i) {
      const auto& p = peak_intervals[i];
      if (p.start >= p.end) throw InvalidArgument("stream: empty peak interval");
      if (p.end > length()) throw InvalidArgument("stream: peak interval beyond stream end");
      if (i > 0 && p.start < prev_end)
        throw InvalidArgument("stream: peak intervals unsorted or overlapping");
      prev_end = p.end;
    }
  }
};

enum class Label : std::uint8_t { non_peak = 0, peak = 1 };

inline int to_int(Label l) { return l == Label::peak ? 1 : 0; }

struct WindowOrigin {
  std::string exercise_id;
  std::string subject_id;
  std::size_t start = 0;
};

// Fixed-length slice [t_max x 9], zero beyond valid_len.
struct Window {
  std::size_t t_max = 0;
  std::size_t valid_len = 0;
  std::vector<double> data;  // row-major [t_max x kChannels]
  std::optional<Label> label;
  WindowOrigin origin;

  std::span<const double> row(std::size_t t) const {
    return {data.data() + t * kChannels, kChannels};
  }
  std::size_t padding() const { return t_max - valid_len; }
};

struct WindowParams {
  std::size_t window_size = 100;
  std::size_t stride = 50;

  bool operator==(const WindowParams&) const = default;

  void validate() const {
    if (window_size == 0 || stride == 0)
      throw InvalidArgument("window params: size and stride must be positive");
    if (stride > window_size) throw InvalidArgument("window params: stride exceeds window size");
  }
};

struct ExerciseMeta {
  std::string exercise_id;
  std::string name;
  double mean_rep_duration_s = 1.0;
  std::optional<WindowParams> table_params;
};

// Window/stride rule: 100/50 for repetitions longer than 1.5 s, else 50/25.
inline WindowParams window_params_for(double mean_rep_duration_s) {
  if (!(mean_rep_duration_s > 0.0) || !std::isfinite(mean_rep_duration_s))
    throw InvalidArgument("window_params_for: duration must be positive");
  if (mean_rep_duration_s > 1.5) return {100, 50};
  return {50, 25};
}

inline std::size_t window_count(std::size_t length, const WindowParams& params) {
  if (params.window_size > length) return 0;
  return (length - params.window_size) / params.stride + 1;
}

// Copies samples [start, start + size) of `stream` into a window padded to t_max.
inline Window make_window(const SignalStream& stream, std::size_t start, std::size_t size,
                          std::size_t t_max) {
  if (size == 0 || size > t_max) throw InvalidArgument("make_window: size must be in [1, t_max]");
  if (start + size > stream.length())
    throw InvalidArgument("make_window: window extends beyond stream");
  Window w;
  w.t_max = t_max;
  w.valid_len = size;
  w.data.assign(t_max * kChannels, 0.0);
  for (std::size_t i = 0; i < size * kChannels; ++i)
    w.data[i] = static_cast<double>(stream.channels[start * kChannels + i]);
  w.origin = {stream.exercise_id, stream.subject_id, start};
  return w;
}

// Builds a window directly from raw rows (used by the streaming session).
inline Window make_window(std::span<const double> rows, std::size_t t_max, WindowOrigin origin) {
  const std::size_t size = rows.size() / kChannels;
  if (size == 0 || size > t_max || rows.size() % kChannels != 0)
    throw InvalidArgument("make_window: row buffer must hold 1..t_max samples of 9 channels");
  Window w;
  w.t_max = t_max;
  w.valid_len = size;
  w.data.assign(t_max * kChannels, 0.0);
  std::copy(rows.begin(), rows.end(), w.data.begin());
  w.origin = std::move(origin);
  return w;
}

// Trailing samples that do not fill a window are dropped.
inline std::vector<Window> slide(const SignalStream& stream, const WindowParams& params,
                                 std::size_t t_max = kDefaultTMax) {
  params.validate();
  if (t_max < params.window_size)
    throw InvalidArgument("slide: t_max smaller than window size");
  const std::size_t n = window_count(stream.length(), params);
  if (n == 0)
    throw InvalidArgument("slide: no windows; stream length " + std::to_string(stream.length()) +
                          " is shorter than window size " + std::to_string(params.window_size));
  std::vector<Window> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k)
    out.push_back(make_window(stream, k * params.stride, params.window_size, t_max));
  return out;
}

inline std::size_t overlap(std::size_t a0, std::size_t a1, std::size_t b0, std::size_t b1) {
  const std::size_t lo = std::max(a0, b0);
  const std::size_t hi = std::min(a1, b1);
  return hi > lo ? hi - lo : 0;
}

// Label for the sample range [start, start + len): peak iff some annotated
// interval is covered by at least overlap_ratio of its own length.
inline Label label_range(std::size_t start, std::size_t len,
                         std::span<const PeakInterval> intervals, double overlap_ratio) {
  const std::size_t end = start + len;
  auto it = std::lower_bound(intervals.begin(), intervals.end(), start,
                             [](const PeakInterval& p, std::size_t s) { return p.end <= s; });
  for (; it != intervals.end() && it->start < end; ++it) {
    const auto ov = static_cast<double>(overlap(start, end, it->start, it->end));
    if (ov >= overlap_ratio * static_cast<double>(it->size())) return Label::peak;
  }
  return Label::non_peak;
}

inline Label label_window(const Window& window, const SignalStream& stream,
                          double overlap_ratio = kDefaultOverlapRatio) {
  if (!(overlap_ratio > 0.0 && overlap_ratio <= 1.0))
    throw InvalidArgument("label_window: overlap ratio must lie in (0, 1]");
  if (window.origin.start + window.valid_len > stream.length())
    throw InvalidArgument("label_window: window origin outside the stream");
  return label_range(window.origin.start, window.valid_len, stream.peak_intervals, overlap_ratio);
}

// slide + label in one pass.
inline std::vector<Window> slide_labeled(const SignalStream& stream, const WindowParams& params,
                                         std::size_t t_max = kDefaultTMax,
                                         double overlap_ratio = kDefaultOverlapRatio) {
  auto windows = slide(stream, params, t_max);
  for (auto& w : windows) w.label = label_window(w, stream, overlap_ratio);
  return windows;
}

// Mean repetition duration estimated from the spacing of annotated peaks.
inline std::optional<double> estimate_rep_duration(const SignalStream& stream) {
  const auto& p = stream.peak_intervals;
  if (p.size() < 2) return std::nullopt;
  const double first = 0.5 * static_cast<double>(p.front().start + p.front().end);
  const double last = 0.5 * static_cast<double>(p.back().start + p.back().end);
  return (last - first) / static_cast<double>(p.size() - 1) / stream.sample_rate_hz;
}

// Keeps the first `reps` repetitions: the stream is cut halfway between the
// end of peak `reps - 1` and the start of peak `reps`.
inline SignalStream crop_to_reps(const SignalStream& stream, std::size_t reps) {
  if (stream.peak_intervals.size() < reps)
    throw InvalidArgument("crop_to_reps: stream has fewer than " + std::to_string(reps) + " reps");
  SignalStream out = stream;
  if (stream.peak_intervals.size() == reps || reps == 0) return out;
  const std::size_t cut =
      (stream.peak_intervals[reps - 1].end + stream.peak_intervals[reps].start) / 2;
  out.channels.resize(cut * kChannels);
  out.peak_intervals.resize(reps);
  return out;
}

// ---------------------------------------------------------------------------
// Per-channel standardization statistics.

struct ChannelStats {
  std::array<double, kChannels> mean{};
  std::array<double, kChannels> stddev{1, 1, 1, 1, 1, 1, 1, 1, 1};

  bool operator==(const ChannelStats&) const = default;
};

inline ChannelStats compute_channel_stats(std::span<const SignalStream> streams) {
  ChannelStats s;
  std::array<double, kChannels> sum{}, sq{};
  std::size_t n = 0;
  for (const auto& st : streams) {
    for (std::size_t t = 0; t < st.length(); ++t)
      for (std::size_t c = 0; c < kChannels; ++c) sum[c] += st.at(t, c);
    n += st.length();
  }
  if (n == 0) return s;
  for (std::size_t c = 0; c < kChannels; ++c) s.mean[c] = sum[c] / static_cast<double>(n);
  for (const auto& st : streams)
    for (std::size_t t = 0; t < st.length(); ++t)
      for (std::size_t c = 0; c < kChannels; ++c) {
        const double d = st.at(t, c) - s.mean[c];
        sq[c] += d * d;
      }
  for (std::size_t c = 0; c < kChannels; ++c) {
    const double sd = std::sqrt(sq[c] / static_cast<double>(n));
    s.stddev[c] = sd > 1e-12 ? sd : 1.0;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Stream text format:
//   #rate=92,channels=9,exercise=<id>,subject=<id>
//   v0,...,v8            (one sample per line, 9 significant digits)
//   #peak=<start>,<end>  (appended annotation block)

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const auto next = s.find(sep, pos);
    out.push_back(s.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  s = trim(s);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

inline void check_identifier(const std::string& id, const char* what) {
  if (id.empty() || id.find_first_of(",=\n\r#") != std::string::npos)
    throw InvalidArgument(std::string("invalid ") + what + " identifier '" + id + "'");
}

inline std::string format_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

}  // namespace detail

inline void write_stream(std::ostream& os, const SignalStream& s) {
  s.validate();
  detail::check_identifier(s.exercise_id, "exercise");
  detail::check_identifier(s.subject_id, "subject");
  char rate[32];
  std::snprintf(rate, sizeof rate, "%.9g", s.sample_rate_hz);
  os << "#rate=" << rate << ",channels=" << kChannels << ",exercise=" << s.exercise_id
     << ",subject=" << s.subject_id << '\n';
  std::string line;
  for (std::size_t t = 0; t < s.length(); ++t) {
    line.clear();
    for (std::size_t c = 0; c < kChannels; ++c) {
      if (c) line += ',';
      line += detail::format_float(s.at(t, c));
    }
    line += '\n';
    os << line;
  }
  for (const auto& p : s.peak_intervals) os << "#peak=" << p.start << ',' << p.end << '\n';
}

inline SignalStream read_stream(std::istream& is) {
  SignalStream s;
  std::string raw;
  std::size_t lineno = 0;
  bool header_seen = false;
  bool in_annotations = false;
  while (std::getline(is, raw)) {
    ++lineno;
    const std::string_view line = detail::trim(raw);
    if (line.empty()) continue;
    if (!header_seen) {
      if (!line.starts_with("#rate=")) throw ParseError(lineno, "missing '#rate=' header");
      bool have_rate = false, have_channels = false, have_ex = false, have_subj = false;
      for (auto field : detail::split(line.substr(1), ',')) {
        const auto eq = field.find('=');
        if (eq == std::string_view::npos) throw ParseError(lineno, "malformed header field");
        const auto key = detail::trim(field.substr(0, eq));
        const auto val = detail::trim(field.substr(eq + 1));
        if (key == "rate") {
          if (!detail::parse_number(val, s.sample_rate_hz) || !(s.sample_rate_hz > 0))
            throw ParseError(lineno, "invalid sample rate");
          have_rate = true;
        } else if (key == "channels") {
          std::size_t ch = 0;
          if (!detail::parse_number(val, ch)) throw ParseError(lineno, "invalid channel count");
          if (ch != kChannels)
            throw ParseError(lineno, "expected 9 channels, header declares " + std::to_string(ch));
          have_channels = true;
        } else if (key == "exercise") {
          s.exercise_id = std::string(val);
          have_ex = !val.empty();
        } else if (key == "subject") {
          s.subject_id = std::string(val);
          have_subj = !val.empty();
        } else {
          throw ParseError(lineno, "unknown header key '" + std::string(key) + "'");
        }
      }
      if (!(have_rate && have_channels && have_ex && have_subj))
        throw ParseError(lineno, "header must declare rate, channels, exercise and subject");
      header_seen = true;
      continue;
    }
    if (line.starts_with("#peak=")) {
      const auto parts = detail::split(line.substr(6), ',');
      PeakInterval p;
      if (parts.size() != 2 || !detail::parse_number(parts[0], p.start) ||
          !detail::parse_number(parts[1], p.end))
        throw ParseError(lineno, "malformed peak annotation");
      if (p.start >= p.end) throw ParseError(lineno, "empty peak interval");
      if (p.end > s.length()) throw ParseError(lineno, "peak interval beyond stream end");
      if (!s.peak_intervals.empty() && p.start < s.peak_intervals.back().end)
        throw ParseError(lineno, "peak intervals unsorted or overlapping");
      s.peak_intervals.push_back(p);
      in_annotations = true;
      continue;
    }
    if (line.front() == '#') throw ParseError(lineno, "unexpected directive");
    if (in_annotations) throw ParseError(lineno, "sample after annotation block");
    const auto parts = detail::split(line, ',');
    if (parts.size() != kChannels)
      throw ParseError(lineno, "expected 9 values, found " + std::to_string(parts.size()));
    for (auto p : parts) {
      float v = 0;
      if (!detail::parse_number(p, v) || !std::isfinite(v))
        throw ParseError(lineno, "invalid sample value '" + std::string(detail::trim(p)) + "'");
      s.channels.push_back(v);
    }
  }
  if (!header_seen) throw ParseError(lineno + 1, "missing header");
  if (s.length() == 0) throw ParseError(lineno + 1, "stream has no samples");
  return s;
}

inline void save_stream(const SignalStream& s, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  write_stream(os, s);
  if (!os) throw Error("write failed for '" + path + "'");
}

inline SignalStream load_stream(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open stream file '" + path + "'");
  return read_stream(is);
}

}  // namespace repkit
