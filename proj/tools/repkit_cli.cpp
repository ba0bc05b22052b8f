// repkit: synthesize data, train, register, count and evaluate.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "repkit/repkit.hpp"

namespace fs = std::filesystem;
using namespace repkit;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;

  RunConfig resolve() const {
    RunConfig c = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (seed) c.seed = *seed;
    return c;
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "seed for all randomness (overrides the config)");
}

std::size_t exercise_index(const Corpus& corpus, const std::string& id) {
  for (std::size_t i = 0; i < corpus.exercises.size(); ++i)
    if (corpus.exercises[i].exercise_id == id) return i;
  throw InvalidArgument("exercise '" + id + "' is not in the corpus");
}

void write_curve(const std::vector<EpochMetrics>& curve, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write '" + path + "'");
  write_metrics_log(curve, os);
}

// Parses "v1,...,v9"; returns false on a malformed line.
bool parse_sample(std::string_view line, std::vector<double>& out) {
  const auto fields = detail::split(line, ',');
  if (fields.size() != kChannels) return false;
  out.resize(kChannels);
  for (std::size_t c = 0; c < kChannels; ++c)
    if (!detail::parse_number(detail::trim(fields[c]), out[c]) || !std::isfinite(out[c])) return false;
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"repkit: few-shot exercise repetition counting from 9-axis IMU streams"};
  app.require_subcommand(1);

  // synth
  Common synth_common;
  std::string synth_out;
  std::optional<std::size_t> n_ex, n_subj, n_sets, n_reps;
  auto* synth = app.add_subcommand("synth", "generate a synthetic labeled corpus");
  add_common(synth, synth_common);
  synth->add_option("--exercises", n_ex, "number of exercise archetypes")->check(CLI::Range(2, 1000));
  synth->add_option("--subjects", n_subj, "number of subjects")->check(CLI::Range(1, 1000));
  synth->add_option("--sets", n_sets, "sets per (exercise, subject)")->check(CLI::Range(1, 1000));
  synth->add_option("--reps", n_reps, "repetitions per set")->check(CLI::Range(1, 10000));
  synth->add_option("--out", synth_out, "output corpus directory")->required();

  // train
  Common train_common;
  std::string train_corpus, train_holdout, train_ckpt;
  auto* train = app.add_subcommand("train", "phase 1 + phase 2 training without the held-out exercise");
  add_common(train, train_common);
  train->add_option("--corpus", train_corpus, "corpus directory")->required();
  train->add_option("--holdout", train_holdout, "exercise id excluded from training")->required();
  train->add_option("--checkpoint", train_ckpt, "output weight file")->required();

  // register
  Common reg_common;
  std::string reg_stream, reg_ckpt, reg_out, reg_corpus, reg_support;
  std::optional<double> reg_duration;
  bool reg_crop = false;
  auto* reg = app.add_subcommand("register", "register an exercise from 5 annotated repetitions and fine-tune");
  add_common(reg, reg_common);
  reg->add_option("stream", reg_stream, "annotated stream file with 5 repetitions")->required()->check(CLI::ExistingFile);
  reg->add_option("--checkpoint", reg_ckpt, "base weight file")->required()->check(CLI::ExistingFile);
  reg->add_option("--duration", reg_duration, "mean repetition duration in seconds")->check(CLI::PositiveNumber);
  reg->add_option("--corpus", reg_corpus, "corpus directory to look the duration up in");
  reg->add_option("--out", reg_out, "output directory for model.bin and support.json")->required();
  reg->add_option("--support", reg_support, "support file path (default <out>/support.json)");
  reg->add_flag("--crop", reg_crop, "use the first five repetitions of a longer stream");

  // count
  Common count_common;
  std::string count_file, count_ckpt, count_support;
  bool count_stream = false;
  auto* count = app.add_subcommand("count", "count repetitions in a stream file or on standard input");
  add_common(count, count_common);
  count->add_option("file", count_file, "stream file (batch mode)")->check(CLI::ExistingFile);
  count->add_option("--checkpoint", count_ckpt, "weight file")->required()->check(CLI::ExistingFile);
  count->add_option("--support", count_support, "support file")->required()->check(CLI::ExistingFile);
  count->add_flag("--stream", count_stream, "read samples from standard input and emit events");

  // eval-loo
  Common loo_common;
  std::string loo_corpus, loo_out, loo_cache;
  auto* loo = app.add_subcommand("eval-loo", "leave-one-exercise-out evaluation");
  add_common(loo, loo_common);
  loo->add_option("--corpus", loo_corpus, "corpus directory (default: synthesize from the config)");
  loo->add_option("--out", loo_out, "report directory")->required();
  loo->add_option("--cache", loo_cache, "checkpoint cache directory (default <out>/cache)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "repkit: usage error: " << e.what() << " (see --help)\n";
    return 2;
  }

  try {
    if (*synth) {
      auto cfg = synth_common.resolve();
      if (n_ex) cfg.exercises = *n_ex;
      if (n_subj) cfg.subjects = *n_subj;
      if (n_sets) cfg.synth.sets = *n_sets;
      if (n_reps) cfg.synth.reps_per_set = *n_reps;
      cfg.synth.seed = cfg.seed;
      const auto corpus = generate_corpus(cfg.exercises, cfg.subjects, cfg.synth);
      save_corpus(corpus, synth_out);
      std::cout << "wrote " << corpus.streams.size() << " streams to " << synth_out << '\n';
    } else if (*train) {
      const auto cfg = train_common.resolve();
      const auto corpus = load_corpus(train_corpus);
      const auto ei = exercise_index(corpus, train_holdout);
      const auto base = train_base_model(corpus, train_holdout, cfg.loo_config(), derive_seed(cfg.seed, ei));
      if (const auto parent = fs::path(train_ckpt).parent_path(); !parent.empty()) fs::create_directories(parent);
      save_params(base.model, train_ckpt);
      std::ofstream manifest(train_ckpt + ".manifest");
      for (const auto& e : base.training_exercises) manifest << e << '\n';
      write_curve(base.phase1_curve, train_ckpt + ".phase1.csv");
      write_curve(base.phase2_curve, train_ckpt + ".phase2.csv");
      std::cout << "checkpoint " << train_ckpt << " trained on " << base.training_exercises.size()
                << " exercises\n";
    } else if (*reg) {
      const auto cfg = reg_common.resolve();
      auto stream = load_stream(reg_stream);
      if (reg_crop && stream.peak_intervals.size() > kShots) stream = crop_to_reps(stream, kShots);
      ExerciseMeta meta{stream.exercise_id, stream.exercise_id, 0.0, std::nullopt};
      if (reg_duration) meta.mean_rep_duration_s = *reg_duration;
      else if (!reg_corpus.empty()) meta = load_corpus(reg_corpus).meta(stream.exercise_id);
      else throw InvalidArgument("register needs --duration or --corpus");
      const auto base = load_params(reg_ckpt);
      const auto windows = registration_windows(stream, meta, base.config.t_max, cfg.overlap_ratio);
      auto p3 = cfg.phase3;
      p3.seed = derive_seed(cfg.seed, 0x3000);
      const auto tuned = fine_tune_phase3(windows, p3, base).model;
      const auto support = build_support(windows, tuned, window_params_for(meta.mean_rep_duration_s));
      fs::create_directories(reg_out);
      save_params(tuned, (fs::path(reg_out) / "model.bin").string());
      const auto support_path = reg_support.empty() ? (fs::path(reg_out) / "support.json").string() : reg_support;
      save_support(support, support_path);
      std::cout << "support positives=" << support.positives.size() << " negatives=" << support.negatives.size()
                << " window=" << support.params.window_size << " stride=" << support.params.stride << '\n';
    } else if (*count) {
      const auto cfg = count_common.resolve();
      const auto model = load_params(count_ckpt);
      const auto support = load_support(count_support);
      if (count_stream) {
        if (!count_file.empty()) throw InvalidArgument("--stream reads standard input; drop the file argument");
        CountingSession session(model, support, support.params, cfg.seed, cfg.min_run);
        std::string line;
        std::vector<double> sample;
        std::size_t lineno = 0;
        while (std::getline(std::cin, line)) {
          ++lineno;
          const auto t = detail::trim(line);
          if (t.empty() || t.front() == '#') continue;
          if (!parse_sample(t, sample))
            throw ParseError(lineno, "expected 9 comma-separated finite numbers");
          for (const auto& ev : session.step(sample))
            if (const auto* inc = std::get_if<CountIncremented>(&ev))
              std::cout << "count=" << inc->new_count << " at_sample=" << inc->at_sample << '\n' << std::flush;
        }
        std::cout << "predicted=" << session.count() << '\n';
      } else {
        if (count_file.empty()) throw InvalidArgument("count needs a stream file or --stream");
        const auto stream = load_stream(count_file);
        const auto r = count_set(stream, support, model, support.params, cfg.seed, cfg.min_run);
        std::cout << "predicted=" << r.predicted;
        if (r.true_count) std::cout << " true=" << *r.true_count;
        std::cout << '\n';
      }
    } else if (*loo) {
      const auto cfg = loo_common.resolve();
      Corpus corpus;
      if (loo_corpus.empty()) {
        auto g = cfg.synth;
        g.seed = cfg.seed;
        corpus = generate_corpus(cfg.exercises, cfg.subjects, g);
      } else {
        corpus = load_corpus(loo_corpus);
      }
      auto lc = cfg.loo_config();
      lc.cache_dir = loo_cache.empty() ? (fs::path(loo_out) / "cache").string() : loo_cache;
      const auto report = loo_harness(corpus, lc);
      write_reports(report, loo_out);
      std::cout << "macro_f1=" << report.macro_f1 << " macro_f1_pre=" << report.macro_f1_pre
                << " within1=" << report.within1_fraction << " evaluated_sets=" << report.evaluated_sets
                << " unevaluated_sets=" << report.unevaluated_sets << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "repkit: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
