#pragma once

#include <filesystem>
#include <string>

#include "repkit/repkit.hpp"

namespace repkit::testing {

// Deterministic pseudo-random stream of `length` samples with given intervals.
inline SignalStream random_stream(std::size_t length, std::uint64_t seed,
                                  std::vector<PeakInterval> peaks = {}) {
  SplitMix64 rng(seed);
  SignalStream s;
  s.exercise_id = "ex";
  s.subject_id = "sub";
  s.channels.resize(length * kChannels);
  for (auto& v : s.channels) v = static_cast<float>(rng.uniform(-2.0, 2.0));
  s.peak_intervals = std::move(peaks);
  return s;
}

inline Window random_window(std::size_t t_max, std::size_t valid, SplitMix64& rng) {
  Window w;
  w.t_max = t_max;
  w.valid_len = valid;
  w.data.assign(t_max * kChannels, 0.0);
  for (std::size_t i = 0; i < valid * kChannels; ++i) w.data[i] = rng.uniform(-2.0, 2.0);
  return w;
}

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.conv_blocks = {{4, 3}};
  c.gru_hidden = 4;
  c.fc_dims = {8, 4};
  c.t_max = 20;
  c.dropout_p = 0.2;
  return c;
}

inline ModelConfig small_config() {
  ModelConfig c;
  c.conv_blocks = {{8, 5}, {8, 3}};
  c.gru_hidden = 8;
  c.fc_dims = {16, 8};
  return c;
}

// Temporary directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("repkit_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace repkit::testing
