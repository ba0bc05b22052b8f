#pragma once

// Classification metrics, counting-error histograms, the leave-one-exercise-out
// harness and report writers.

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "repkit/error.hpp"
#include "repkit/fewshot.hpp"
#include "repkit/log.hpp"
#include "repkit/net.hpp"
#include "repkit/signal.hpp"
#include "repkit/synthgen.hpp"
#include "repkit/train.hpp"

namespace repkit {

struct MetricsReport {
  double accuracy = 0.0;
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

inline MetricsReport metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn) {
  MetricsReport m{0, 0, 0, 0, tp, fp, tn, fn};
  const double total = static_cast<double>(tp + fp + tn + fn);
  if (total > 0) m.accuracy = static_cast<double>(tp + tn) / total;
  // Zero denominators give 0.
  if (tp + fp > 0) m.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) m.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (m.precision + m.recall > 0) m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

// Peak (1) is the positive class.
inline MetricsReport compute_metrics(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.empty()) throw InvalidArgument("compute_metrics: empty input");
  if (predictions.size() != labels.size()) throw InvalidArgument("compute_metrics: length mismatch");
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const bool p = predictions[i] != 0, y = labels[i] != 0;
    if (p && y) ++tp;
    else if (p) ++fp;
    else if (y) ++fn;
    else ++tn;
  }
  return metrics_from_counts(tp, fp, tn, fn);
}

// Buckets e|0| .. e|5| and e|>5|, as percentages of total_sets.
struct ErrorHistogram {
  std::array<double, 7> percent{};
  std::array<std::size_t, 7> counts{};
  std::size_t total_sets = 0;
};

inline ErrorHistogram error_histogram(std::span<const std::size_t> abs_errors) {
  if (abs_errors.empty()) throw InvalidArgument("error_histogram: no results");
  ErrorHistogram h;
  h.total_sets = abs_errors.size();
  for (auto e : abs_errors) ++h.counts[std::min<std::size_t>(e, 6)];
  for (std::size_t b = 0; b < 7; ++b)
    h.percent[b] = 100.0 * static_cast<double>(h.counts[b]) / static_cast<double>(h.total_sets);
  return h;
}

inline ErrorHistogram error_histogram(std::span<const CountResult> results) {
  std::vector<std::size_t> errors;
  for (const auto& r : results) {
    if (!r.abs_error) throw InvalidArgument("error_histogram: result without ground truth");
    errors.push_back(*r.abs_error);
  }
  return error_histogram(errors);
}

// ---------------------------------------------------------------------------
// Leave-one-exercise-out harness.

struct LooConfig {
  ModelConfig model;
  Phase1Config phase1;
  Phase2Config phase2;
  Phase3Config phase3;
  double overlap_ratio = kDefaultOverlapRatio;
  std::uint64_t seed = 0;
  std::string cache_dir;  // empty: no checkpoint caching
};

struct SetOutcome {
  std::string subject_id;
  std::size_t set_index = 0;
  CountResult pre;   // before fine-tuning
  CountResult post;  // after fine-tuning
};

struct LooEntry {
  std::string exercise_id;
  std::vector<std::string> training_exercises;
  MetricsReport metrics;      // after fine-tuning
  MetricsReport metrics_pre;  // before fine-tuning
  ErrorHistogram histogram;
  ErrorHistogram histogram_pre;
  std::vector<SetOutcome> sets;
  std::vector<std::string> skipped_subjects;
  std::size_t unevaluated_sets = 0;  // test sets of skipped subjects
  std::vector<EpochMetrics> phase1_curve, phase2_curve;
};

struct LooReport {
  std::vector<LooEntry> entries;
  double macro_f1 = 0.0;
  double macro_f1_pre = 0.0;
  double error_free_fraction = 0.0;
  double within1_fraction = 0.0;
  double within5_fraction = 0.0;
  std::size_t evaluated_sets = 0;
  std::size_t unevaluated_sets = 0;
};

// Replaces the classifier: returns one 0/1 label per window of a test set.
using LabelOverride = std::function<std::vector<int>(const SignalStream&, std::span<const Window>)>;

struct Phase12Model {
  ModelParams model;
  std::vector<std::string> training_exercises;
  std::vector<EpochMetrics> phase1_curve, phase2_curve;
};

// Phase 1 + 2 on every exercise except `holdout`, optionally cached on disk.
inline Phase12Model train_base_model(const Corpus& corpus, const std::string& holdout, const LooConfig& cfg,
                                     std::uint64_t seed) {
  namespace fs = std::filesystem;
  auto ts = build_training_set(corpus, holdout, cfg.model.t_max, cfg.overlap_ratio);
  Phase12Model out;
  out.training_exercises = ts.exercises;
  fs::path ckpt, manifest;
  if (!cfg.cache_dir.empty()) {
    fs::create_directories(cfg.cache_dir);
    ckpt = fs::path(cfg.cache_dir) / ("base_holdout_" + holdout + ".bin");
    manifest = fs::path(cfg.cache_dir) / ("base_holdout_" + holdout + ".manifest");
    if (fs::exists(ckpt) && fs::exists(manifest)) {
      log::info("loading cached checkpoint " + ckpt.string());
      out.model = load_params(ckpt.string(), &cfg.model);
      std::ifstream is(manifest);
      out.training_exercises.clear();
      for (std::string line; std::getline(is, line);)
        if (!line.empty()) out.training_exercises.push_back(line);
      return out;
    }
  }
  ModelParams model = init_params(cfg.model);
  model.norm = ts.stats;
  auto p1 = cfg.phase1;
  p1.seed = derive_seed(seed, 1);
  auto r1 = train_phase1(ts.windows, p1, std::move(model));
  auto p2 = cfg.phase2;
  p2.seed = derive_seed(seed, 2);
  auto r2 = train_phase2(ts.windows, p2, std::move(r1.model));
  out.model = std::move(r2.model);
  out.phase1_curve = std::move(r1.curve);
  out.phase2_curve = std::move(r2.curve);
  if (!ckpt.empty()) {
    save_params(out.model, ckpt.string());
    std::ofstream os(manifest);
    for (const auto& e : out.training_exercises) os << e << '\n';
  }
  return out;
}

namespace detail {

inline void finalize_report(LooReport& rep) {
  std::size_t zero = 0, within1 = 0, within5 = 0, total = 0;
  double f1 = 0.0, f1_pre = 0.0;
  std::size_t scored = 0;
  for (const auto& e : rep.entries) {
    rep.unevaluated_sets += e.unevaluated_sets;
    if (e.sets.empty()) continue;
    f1 += e.metrics.f1;
    f1_pre += e.metrics_pre.f1;
    ++scored;
    for (const auto& s : e.sets) {
      const auto err = *s.post.abs_error;
      zero += err == 0;
      within1 += err <= 1;
      within5 += err <= 5;
      ++total;
    }
  }
  rep.evaluated_sets = total;
  if (scored) {
    rep.macro_f1 = f1 / static_cast<double>(scored);
    rep.macro_f1_pre = f1_pre / static_cast<double>(scored);
  }
  if (total) {
    rep.error_free_fraction = static_cast<double>(zero) / static_cast<double>(total);
    rep.within1_fraction = static_cast<double>(within1) / static_cast<double>(total);
    rep.within5_fraction = static_cast<double>(within5) / static_cast<double>(total);
  }
}

}  // namespace detail

// For every exercise E: train phases 1+2 without E; per subject, register E
// from the first 5 repetitions of that subject's lowest-numbered set,
// fine-tune (phase 3), then classify and count the subject's other sets of E
// both before and after fine-tuning.
inline LooReport loo_harness(const Corpus& corpus, const LooConfig& cfg, const LabelOverride& override_labels = {}) {
  if (corpus.exercises.size() < 2) throw InvalidArgument("loo_harness: need at least 2 exercises");
  LooReport report;
  for (std::size_t ei = 0; ei < corpus.exercises.size(); ++ei) {
    const auto& meta = corpus.exercises[ei];
    const std::uint64_t ex_seed = derive_seed(cfg.seed, ei);
    log::info("leave-one-out: holding out " + meta.exercise_id);
    auto base = train_base_model(corpus, meta.exercise_id, cfg, ex_seed);

    LooEntry entry;
    entry.exercise_id = meta.exercise_id;
    entry.training_exercises = base.training_exercises;
    entry.phase1_curve = base.phase1_curve;
    entry.phase2_curve = base.phase2_curve;

    // Streams of E grouped by subject, ordered by set index.
    std::map<std::string, std::vector<std::size_t>> by_subject;
    for (std::size_t i = 0; i < corpus.streams.size(); ++i)
      if (corpus.streams[i].stream.exercise_id == meta.exercise_id)
        by_subject[corpus.streams[i].stream.subject_id].push_back(i);

    const auto params = window_params_for(meta.mean_rep_duration_s);
    std::vector<int> truth, pred, pred_pre;
    for (auto& [subject, idx] : by_subject) {
      std::sort(idx.begin(), idx.end(),
                [&](std::size_t a, std::size_t b) { return corpus.streams[a].set_index < corpus.streams[b].set_index; });
      std::vector<Window> reg;
      try {
        if (corpus.streams[idx.front()].stream.peak_intervals.size() < kShots)
          throw RegistrationError("registration set has fewer than 5 repetitions");
        const auto reg_stream = crop_to_reps(corpus.streams[idx.front()].stream, kShots);
        reg = registration_windows(reg_stream, meta, cfg.model.t_max, cfg.overlap_ratio);
      } catch (const RegistrationError& e) {
        log::warn("skipping subject " + subject + " of " + meta.exercise_id + ": " + e.what());
        entry.skipped_subjects.push_back(subject);
        entry.unevaluated_sets += idx.size() - 1;
        continue;
      }
      const auto support_pre = build_support(reg, base.model, params);
      auto p3 = cfg.phase3;
      p3.seed = derive_seed(ex_seed, 0x3000 + idx.front());
      const auto tuned = fine_tune_phase3(reg, p3, base.model).model;
      const auto support_post = build_support(reg, tuned, params);

      for (std::size_t k = 1; k < idx.size(); ++k) {
        const auto& cs = corpus.streams[idx[k]];
        if (window_count(cs.stream.length(), params) == 0) {
          log::warn("skipping set shorter than one window");
          ++entry.unevaluated_sets;
          continue;
        }
        const auto windows = slide_labeled(cs.stream, params, cfg.model.t_max, cfg.overlap_ratio);
        const std::uint64_t set_seed = derive_seed(ex_seed, 0x5000 + idx[k]);
        std::vector<int> y, p, pp;
        for (const auto& w : windows) y.push_back(to_int(*w.label));
        if (override_labels) {
          p = override_labels(cs.stream, windows);
          pp = p;
          if (p.size() != windows.size()) throw InvalidArgument("loo_harness: label override size mismatch");
        } else {
          for (std::size_t w = 0; w < windows.size(); ++w) {
            p.push_back(to_int(classify(windows[w], support_post, tuned, window_seed(set_seed, w)).label));
            pp.push_back(to_int(classify(windows[w], support_pre, base.model, window_seed(set_seed, w)).label));
          }
        }
        SetOutcome so;
        so.subject_id = subject;
        so.set_index = cs.set_index;
        so.post = make_count_result(transition_count(p), cs.stream.peak_intervals.size());
        so.post.labels = p;
        so.pre = make_count_result(transition_count(pp), cs.stream.peak_intervals.size());
        so.pre.labels = pp;
        entry.sets.push_back(std::move(so));
        truth.insert(truth.end(), y.begin(), y.end());
        pred.insert(pred.end(), p.begin(), p.end());
        pred_pre.insert(pred_pre.end(), pp.begin(), pp.end());
      }
    }
    if (entry.sets.empty()) {
      log::warn("exercise " + meta.exercise_id + " has no registration-eligible stream; skipped");
    } else {
      entry.metrics = compute_metrics(pred, truth);
      entry.metrics_pre = compute_metrics(pred_pre, truth);
      std::vector<std::size_t> err, err_pre;
      for (const auto& s : entry.sets) {
        err.push_back(*s.post.abs_error);
        err_pre.push_back(*s.pre.abs_error);
      }
      entry.histogram = error_histogram(err);
      entry.histogram_pre = error_histogram(err_pre);
    }
    log::info(meta.exercise_id + ": F1 pre " + std::to_string(entry.metrics_pre.f1) + " post " +
              std::to_string(entry.metrics.f1));
    report.entries.push_back(std::move(entry));
  }
  detail::finalize_report(report);
  return report;
}

// ---------------------------------------------------------------------------
// Report writers.

inline void write_metrics_table(const LooReport& r, std::ostream& os) {
  os << "exercise,accuracy,recall,precision,f1\n";
  char buf[160];
  double sa = 0, sr = 0, sp = 0, sf = 0;
  std::size_t n = 0;
  for (const auto& e : r.entries) {
    if (e.sets.empty()) continue;
    const auto& m = e.metrics;
    std::snprintf(buf, sizeof buf, "%s,%.4f,%.4f,%.4f,%.4f\n", e.exercise_id.c_str(), m.accuracy, m.recall,
                  m.precision, m.f1);
    os << buf;
    sa += m.accuracy;
    sr += m.recall;
    sp += m.precision;
    sf += m.f1;
    ++n;
  }
  if (n) {
    const double d = static_cast<double>(n);
    std::snprintf(buf, sizeof buf, "mean,%.4f,%.4f,%.4f,%.4f\n", sa / d, sr / d, sp / d, sf / d);
    os << buf;
  }
}

inline void write_error_table(const LooReport& r, std::ostream& os) {
  os << "exercise,sets,e0,e1,e2,e3,e4,e5,e_gt5\n";
  char buf[48];
  for (const auto& e : r.entries) {
    if (e.sets.empty()) continue;
    os << e.exercise_id << ',' << e.histogram.total_sets;
    for (double p : e.histogram.percent) {
      std::snprintf(buf, sizeof buf, ",%.2f", p);
      os << buf;
    }
    os << '\n';
  }
}

inline nlohmann::json summary_json(const LooReport& r) {
  nlohmann::json j;
  j["macro_f1"] = r.macro_f1;
  j["macro_f1_pre_finetune"] = r.macro_f1_pre;
  j["error_free_fraction"] = r.error_free_fraction;
  j["within1_fraction"] = r.within1_fraction;
  j["within5_fraction"] = r.within5_fraction;
  j["evaluated_sets"] = r.evaluated_sets;
  j["unevaluated_sets"] = r.unevaluated_sets;
  auto metrics = [](const MetricsReport& m) {
    return nlohmann::json{{"accuracy", m.accuracy}, {"recall", m.recall}, {"precision", m.precision},
                          {"f1", m.f1},             {"tp", m.tp},         {"fp", m.fp},
                          {"tn", m.tn},             {"fn", m.fn}};
  };
  for (const auto& e : r.entries) {
    nlohmann::json je;
    je["exercise"] = e.exercise_id;
    je["training_exercises"] = e.training_exercises;
    je["metrics"] = metrics(e.metrics);
    je["metrics_pre_finetune"] = metrics(e.metrics_pre);
    je["error_percent"] = e.histogram.percent;
    je["skipped_subjects"] = e.skipped_subjects;
    nlohmann::json sets = nlohmann::json::array();
    for (const auto& s : e.sets)
      sets.push_back({{"subject", s.subject_id},
                      {"set", s.set_index},
                      {"true", *s.post.true_count},
                      {"predicted", s.post.predicted},
                      {"predicted_pre_finetune", s.pre.predicted}});
    je["sets"] = sets;
    j["exercises"].push_back(je);
  }
  return j;
}

inline void write_reports(const LooReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream t2(dir / "metrics.csv"), t4(dir / "error_ratio.csv"), js(dir / "summary.json");
  if (!t2 || !t4 || !js) throw Error("cannot write reports to '" + dir.string() + "'");
  write_metrics_table(r, t2);
  write_error_table(r, t4);
  js << summary_json(r).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Embedding export: exercise_id,label,e_1,...,e_d per window (label -1 when
// the window is unlabeled).

struct EmbeddingRecord {
  std::string exercise_id;
  int label = -1;
  std::vector<double> values;
};

inline void export_embeddings(std::span<const Window> windows, const ModelParams& model, std::ostream& os) {
  char buf[32];
  for (const auto& w : windows) {
    const auto e = embed(model, w);
    os << w.origin.exercise_id << ',' << (w.label ? to_int(*w.label) : -1);
    for (double v : e) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      os << buf;
    }
    os << '\n';
  }
}

inline void export_embeddings(std::span<const Window> windows, const ModelParams& model, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  export_embeddings(windows, model, os);
}

inline std::vector<EmbeddingRecord> read_embeddings(std::istream& is) {
  std::vector<EmbeddingRecord> out;
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    if (detail::trim(raw).empty()) continue;
    const auto f = detail::split(detail::trim(raw), ',');
    if (f.size() < 3) throw ParseError(lineno, "embedding record needs id, label and values");
    EmbeddingRecord r;
    r.exercise_id = std::string(f[0]);
    if (!detail::parse_number(f[1], r.label)) throw ParseError(lineno, "invalid label");
    for (std::size_t i = 2; i < f.size(); ++i) {
      double v;
      if (!detail::parse_number(f[i], v)) throw ParseError(lineno, "invalid embedding value");
      r.values.push_back(v);
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace repkit
