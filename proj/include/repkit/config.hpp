#pragma once

// Run configuration shared by the command-line tool: a JSON object whose
// sections override defaults. Unknown keys anywhere are errors.

#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "repkit/error.hpp"
#include "repkit/eval.hpp"
#include "repkit/net.hpp"
#include "repkit/synthgen.hpp"
#include "repkit/train.hpp"

namespace repkit {

struct RunConfig {
  std::uint64_t seed = 0;
  GenConfig synth;
  std::size_t exercises = 10;
  std::size_t subjects = 5;
  ModelConfig model;
  Phase1Config phase1;
  Phase2Config phase2;
  Phase3Config phase3;
  double overlap_ratio = kDefaultOverlapRatio;
  std::size_t min_run = 1;

  LooConfig loo_config() const {
    LooConfig c;
    c.model = model;
    c.phase1 = phase1;
    c.phase2 = phase2;
    c.phase3 = phase3;
    c.overlap_ratio = overlap_ratio;
    c.seed = seed;
    return c;
  }
};

namespace detail {

// Calls `on(key, value)` for each member; `on` returns false for unknown keys.
template <class F>
void visit_object(const nlohmann::json& j, const std::string& section, F on) {
  if (!j.is_object()) throw InvalidArgument("config: '" + section + "' must be an object");
  for (const auto& [key, val] : j.items())
    if (!on(key, val)) throw InvalidArgument("config: unknown key '" + section + "." + key + "'");
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  try {
    detail::visit_object(j, "<root>", [&](const std::string& k, const nlohmann::json& v) {
      if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "overlap_ratio") c.overlap_ratio = v.get<double>();
      else if (k == "min_run") c.min_run = v.get<std::size_t>();
      else if (k == "model") {
        try {
          c.model = v.get<ModelConfig>();
        } catch (const InvalidArgument& e) {
          throw InvalidArgument(std::string("config: ") + e.what());
        }
      } else if (k == "synth") {
        detail::visit_object(v, k, [&](const std::string& s, const nlohmann::json& x) {
          if (s == "exercises") c.exercises = x.get<std::size_t>();
          else if (s == "subjects") c.subjects = x.get<std::size_t>();
          else if (s == "sets") c.synth.sets = x.get<std::size_t>();
          else if (s == "reps_per_set") c.synth.reps_per_set = x.get<std::size_t>();
          else if (s == "tempo_jitter") c.synth.tempo_jitter = x.get<double>();
          else if (s == "rest_s") c.synth.rest_s = x.get<double>();
          else return false;
          return true;
        });
      } else if (k == "phase1") {
        detail::visit_object(v, k, [&](const std::string& s, const nlohmann::json& x) {
          if (s == "epochs") c.phase1.epochs = x.get<std::size_t>();
          else if (s == "batch_size") c.phase1.batch_size = x.get<std::size_t>();
          else if (s == "lr") c.phase1.lr = x.get<double>();
          else if (s == "weight_decay") c.phase1.weight_decay = x.get<double>();
          else if (s == "windows_per_epoch") c.phase1.windows_per_epoch = x.get<std::size_t>();
          else return false;
          return true;
        });
      } else if (k == "phase2") {
        detail::visit_object(v, k, [&](const std::string& s, const nlohmann::json& x) {
          if (s == "epochs") c.phase2.epochs = x.get<std::size_t>();
          else if (s == "batch_size") c.phase2.batch_size = x.get<std::size_t>();
          else if (s == "margin") c.phase2.margin = x.get<double>();
          else if (s == "lr") c.phase2.lr = x.get<double>();
          else if (s == "weight_decay") c.phase2.weight_decay = x.get<double>();
          else if (s == "batches_per_epoch") c.phase2.batches_per_epoch = x.get<std::size_t>();
          else return false;
          return true;
        });
      } else if (k == "phase3") {
        detail::visit_object(v, k, [&](const std::string& s, const nlohmann::json& x) {
          if (s == "epochs") c.phase3.epochs = x.get<std::size_t>();
          else if (s == "batch_size") c.phase3.batch_size = x.get<std::size_t>();
          else if (s == "margin") c.phase3.margin = x.get<double>();
          else if (s == "lr") c.phase3.lr = x.get<double>();
          else return false;
          return true;
        });
      } else {
        return false;
      }
      return true;
    });
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("config: wrong value type (") + e.what() + ")");
  }
  c.model.validate();
  if (!(c.overlap_ratio > 0.0 && c.overlap_ratio <= 1.0))
    throw InvalidArgument("config: overlap_ratio must lie in (0, 1]");
  if (c.min_run == 0) throw InvalidArgument("config: min_run must be positive");
  return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"overlap_ratio", c.overlap_ratio},
          {"min_run", c.min_run},
          {"model", c.model},
          {"synth",
           {{"exercises", c.exercises},
            {"subjects", c.subjects},
            {"sets", c.synth.sets},
            {"reps_per_set", c.synth.reps_per_set},
            {"tempo_jitter", c.synth.tempo_jitter},
            {"rest_s", c.synth.rest_s}}},
          {"phase1",
           {{"epochs", c.phase1.epochs},
            {"batch_size", c.phase1.batch_size},
            {"lr", c.phase1.lr},
            {"weight_decay", c.phase1.weight_decay},
            {"windows_per_epoch", c.phase1.windows_per_epoch}}},
          {"phase2",
           {{"epochs", c.phase2.epochs},
            {"batch_size", c.phase2.batch_size},
            {"margin", c.phase2.margin},
            {"lr", c.phase2.lr},
            {"weight_decay", c.phase2.weight_decay},
            {"batches_per_epoch", c.phase2.batches_per_epoch}}},
          {"phase3",
           {{"epochs", c.phase3.epochs},
            {"batch_size", c.phase3.batch_size},
            {"margin", c.phase3.margin},
            {"lr", c.phase3.lr}}}};
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidArgument("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace repkit
