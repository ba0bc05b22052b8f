#pragma once

// Three training phases:
//   1. binary peak/non-peak classification with a sigmoid head (Adam),
//   2. triplet training with semi-hard mining on shared weights (Adam),
//   3. few-shot fine-tuning of FC1/FC2 only on registration windows (RAdam).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "repkit/error.hpp"
#include "repkit/log.hpp"
#include "repkit/net.hpp"
#include "repkit/optim.hpp"
#include "repkit/rng.hpp"
#include "repkit/signal.hpp"
#include "repkit/synthgen.hpp"

namespace repkit {

struct Phase1Config {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  std::size_t windows_per_epoch = 0;  // 0: every window each epoch
};

struct Phase2Config {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;  // half peak, half non-peak
  double margin = 1.0;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  std::size_t batches_per_epoch = 0;  // 0: ceil(windows / batch_size)
};

struct Phase3Config {
  std::size_t epochs = 15;
  std::size_t batch_size = 64;
  double margin = 1.0;
  double lr = 5e-5;
  std::uint64_t seed = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  ModelParams model;
  std::vector<EpochMetrics> curve;
};

// ---------------------------------------------------------------------------
// Losses.

inline constexpr double kProbClamp = 1e-7;

struct BceTerm {
  double loss = 0.0;
  double dlogit = 0.0;  // derivative of this term w.r.t. the head logit
};

inline BceTerm bce_term(double logit, int label) {
  const double p_raw = detail::sigmoid(logit);
  const double p = std::clamp(p_raw, kProbClamp, 1.0 - kProbClamp);
  const double y = label ? 1.0 : 0.0;
  BceTerm t;
  t.loss = -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
  t.dlogit = (p_raw == p) ? p_raw - y : 0.0;
  return t;
}

inline double bce_loss(std::span<const double> probs, std::span<const int> labels) {
  if (probs.empty()) throw InvalidArgument("bce_loss: empty input");
  if (probs.size() != labels.size()) throw InvalidArgument("bce_loss: length mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], kProbClamp, 1.0 - kProbClamp);
    const double y = labels[i] ? 1.0 : 0.0;
    sum += y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  return -sum / static_cast<double>(probs.size());
}

inline double triplet_loss(double d_ap_sq, double d_an_sq, double margin) {
  return std::max(0.0, d_ap_sq - d_an_sq + margin);
}

// Row-major [B x dim] embedding matrix.
struct EmbeddingBatch {
  std::vector<double> values;
  std::size_t dim = 0;

  std::size_t size() const { return dim ? values.size() / dim : 0; }
  const double* row(std::size_t i) const { return values.data() + i * dim; }
};

inline double sq_dist(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t k = 0; k < dim; ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return s;
}

// D[i][j] = |e_i - e_j|^2, row-major [B x B].
inline std::vector<double> pairwise_sq_dists(const EmbeddingBatch& e) {
  const std::size_t B = e.size();
  std::vector<double> d(B * B, 0.0);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = i + 1; j < B; ++j) d[i * B + j] = d[j * B + i] = sq_dist(e.row(i), e.row(j), e.dim);
  return d;
}

enum class MiningBranch : std::uint8_t {
  semi_hard,         // d_ap < d_an < d_ap + margin
  beyond_positive,   // closest negative with d_an > d_ap
  farthest,          // every negative is at most d_ap away: the farthest one
};

struct Triplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
  MiningBranch branch = MiningBranch::semi_hard;
  bool operator==(const Triplet&) const = default;
};

using TripletIndexSet = std::vector<Triplet>;

// One triplet per ordered same-label (anchor, positive) pair, anchors and
// positives in ascending index order; ties resolve to the lowest index.
inline TripletIndexSet mine_semi_hard(std::span<const double> dists, std::span<const int> labels, double margin) {
  const std::size_t B = labels.size();
  if (dists.size() != B * B) throw InvalidArgument("mine_semi_hard: distance matrix shape mismatch");
  TripletIndexSet out;
  bool has_pos = false, has_neg = false;
  for (int l : labels) (l ? has_pos : has_neg) = true;
  if (!(has_pos && has_neg)) {
    log::warn("mine_semi_hard: batch holds a single class; no triplets");
    return out;
  }
  for (std::size_t a = 0; a < B; ++a)
    for (std::size_t p = 0; p < B; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      const double dap = dists[a * B + p];
      std::size_t semi = B, beyond = B, far = B;
      for (std::size_t n = 0; n < B; ++n) {
        if (labels[n] == labels[a]) continue;
        const double dan = dists[a * B + n];
        if (dan > dap && dan < dap + margin && (semi == B || dan < dists[a * B + semi])) semi = n;
        if (dan > dap && (beyond == B || dan < dists[a * B + beyond])) beyond = n;
        if (far == B || dan > dists[a * B + far]) far = n;
      }
      if (semi != B) out.push_back({a, p, semi, MiningBranch::semi_hard});
      else if (beyond != B) out.push_back({a, p, beyond, MiningBranch::beyond_positive});
      else out.push_back({a, p, far, MiningBranch::farthest});
    }
  return out;
}

// Mean triplet loss in index order; 0 for an empty set. When `grad` is given
// it receives dL/de (same shape as the batch).
inline double batch_triplet_loss(const TripletIndexSet& triplets, const EmbeddingBatch& e, double margin,
                                 std::vector<double>* grad = nullptr) {
  if (grad) grad->assign(e.values.size(), 0.0);
  if (triplets.empty()) return 0.0;
  const double scale = 1.0 / static_cast<double>(triplets.size());
  double sum = 0.0;
  const std::size_t d = e.dim;
  for (const auto& t : triplets) {
    const double* a = e.row(t.anchor);
    const double* p = e.row(t.positive);
    const double* n = e.row(t.negative);
    const double l = triplet_loss(sq_dist(a, p, d), sq_dist(a, n, d), margin);
    sum += l;
    if (grad && l > 0.0) {
      double* ga = grad->data() + t.anchor * d;
      double* gp = grad->data() + t.positive * d;
      double* gn = grad->data() + t.negative * d;
      for (std::size_t k = 0; k < d; ++k) {
        ga[k] += scale * 2.0 * (n[k] - p[k]);
        gp[k] += scale * 2.0 * (p[k] - a[k]);
        gn[k] += scale * 2.0 * (a[k] - n[k]);
      }
    }
  }
  return sum * scale;
}

// ---------------------------------------------------------------------------
// Batch-level loss + gradient, shared by the training loops and the
// gradient checks.

struct BatchResult {
  double loss = 0.0;
  std::size_t correct = 0;  // phase 1: correct predictions; phase 2: triplets with d_an > d_ap
  std::size_t count = 0;    // phase 1: items; phase 2: triplets
  Gradients grads;
};

inline int label_of(const Window& w) {
  if (!w.label) throw InvalidArgument("training window without a label");
  return to_int(*w.label);
}

// Mean BCE over the batch through the attached head.
inline BatchResult phase1_batch(const ModelParams& model, std::span<const Window* const> batch, Mode mode,
                                std::uint64_t seed, const FreezeMask& freeze = {}) {
  BatchResult r;
  r.grads.assign(model.layout.total, 0.0);
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto fr = forward(model, *batch[i], mode, derive_seed(seed, i));
    const double logit = head_logit(fr.embedding, model);
    const int y = label_of(*batch[i]);
    const auto term = bce_term(logit, y);
    r.loss += term.loss * inv;
    r.correct += ((logit >= 0.0) == (y == 1)) ? 1 : 0;
    const auto de = head_backward(fr.embedding, term.dlogit * inv, model, r.grads, freeze);
    backward_into(model, fr.trace, de, r.grads, freeze);
  }
  r.count = batch.size();
  return r;
}

// Mean semi-hard triplet loss over the batch; all three roles of every
// triplet share one parameter set, so contributions are summed.
inline BatchResult phase2_batch(const ModelParams& model, std::span<const Window* const> batch, double margin,
                                Mode mode, std::uint64_t seed, const FreezeMask& freeze = {},
                                TripletIndexSet* mined = nullptr) {
  BatchResult r;
  r.grads.assign(model.layout.total, 0.0);
  const std::size_t B = batch.size();
  std::vector<ForwardTrace> traces;
  traces.reserve(B);
  EmbeddingBatch e;
  e.dim = model.config.embedding_dim();
  std::vector<int> labels;
  for (std::size_t i = 0; i < B; ++i) {
    auto fr = forward(model, *batch[i], mode, derive_seed(seed, i));
    e.values.insert(e.values.end(), fr.embedding.begin(), fr.embedding.end());
    traces.push_back(std::move(fr.trace));
    labels.push_back(label_of(*batch[i]));
  }
  const auto dists = pairwise_sq_dists(e);
  const auto triplets = mine_semi_hard(dists, labels, margin);
  std::vector<double> de;
  r.loss = batch_triplet_loss(triplets, e, margin, &de);
  r.count = triplets.size();
  for (const auto& t : triplets)
    if (dists[t.anchor * B + t.negative] > dists[t.anchor * B + t.positive]) ++r.correct;
  for (std::size_t i = 0; i < B; ++i) {
    const std::span<const double> up(de.data() + i * e.dim, e.dim);
    if (std::all_of(up.begin(), up.end(), [](double v) { return v == 0.0; })) continue;
    backward_into(model, traces[i], up, r.grads, freeze);
  }
  if (mined) *mined = triplets;
  return r;
}

namespace detail {

inline void require_both_classes(std::span<const Window> windows, const char* who) {
  std::size_t pos = 0;
  for (const auto& w : windows) pos += label_of(w);
  if (pos == 0 || pos == windows.size())
    throw InvalidArgument(std::string(who) + ": training data holds a single class");
}

inline void check_finite_grads(const Gradients& g) {
  for (double v : g)
    if (!std::isfinite(v)) throw NumericError("training: non-finite gradient");
}

}  // namespace detail

// Attaches the head (if needed), minimizes mean BCE, then detaches the head.
inline TrainResult train_phase1(std::span<const Window> windows, const Phase1Config& cfg, ModelParams model) {
  if (windows.empty()) throw InvalidArgument("train_phase1: no training windows");
  if (cfg.batch_size == 0) throw InvalidArgument("train_phase1: batch size must be positive");
  if (cfg.lr < 0.0 || cfg.weight_decay < 0.0) throw InvalidArgument("train_phase1: negative lr or weight decay");
  detail::require_both_classes(windows, "train_phase1");
  if (!model.head_attached) attach_head(model, cfg.seed);

  TrainResult res;
  OptimState state(model.layout.total);
  std::vector<std::size_t> order(windows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    SplitMix64 rng(derive_seed(cfg.seed, 0x10000 + epoch));
    rng.shuffle(order);
    const std::size_t n = cfg.windows_per_epoch ? std::min(cfg.windows_per_epoch, order.size()) : order.size();
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::vector<const Window*> batch;
    for (std::size_t start = 0, bi = 0; start < n; start += cfg.batch_size, ++bi) {
      batch.clear();
      for (std::size_t i = start; i < std::min(n, start + cfg.batch_size); ++i) batch.push_back(&windows[order[i]]);
      auto br = phase1_batch(model, batch, Mode::train, derive_seed(cfg.seed, (epoch << 32) + bi));
      detail::check_finite_grads(br.grads);
      adam_step(model.values, br.grads, state, cfg.lr, cfg.weight_decay);
      loss_sum += br.loss * static_cast<double>(batch.size());
      correct += br.correct;
    }
    res.curve.push_back({epoch + 1, loss_sum / static_cast<double>(n),
                         static_cast<double>(correct) / static_cast<double>(n)});
    log::info("phase1 epoch " + std::to_string(epoch + 1) + " loss " + std::to_string(res.curve.back().loss) +
              " acc " + std::to_string(res.curve.back().accuracy));
  }
  detach_head(model);
  res.model = std::move(model);
  return res;
}

// Class-balanced batches: each batch takes batch_size/2 windows of each class
// from per-class shuffled queues.
inline TrainResult train_phase2(std::span<const Window> windows, const Phase2Config& cfg, ModelParams model) {
  if (cfg.batch_size < 4) throw InvalidArgument("train_phase2: batch size must be at least 4");
  if (cfg.lr < 0.0 || cfg.weight_decay < 0.0 || cfg.margin < 0.0)
    throw InvalidArgument("train_phase2: negative lr, weight decay or margin");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < windows.size(); ++i) (label_of(windows[i]) ? pos : neg).push_back(i);
  if (pos.size() < 2 || neg.size() < 2)
    throw InvalidArgument("train_phase2: need at least two windows of each class");
  if (model.head_attached) detach_head(model);

  TrainResult res;
  OptimState state(model.layout.total);
  const std::size_t half = cfg.batch_size / 2;
  const std::size_t batches =
      cfg.batches_per_epoch ? cfg.batches_per_epoch : (windows.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t pi = pos.size(), ni = neg.size();  // exhausted: reshuffle on first use
  SplitMix64 queue_rng(derive_seed(cfg.seed, 0x20000));
  auto draw = [&](std::vector<std::size_t>& q, std::size_t& idx) {
    if (idx >= q.size()) {
      queue_rng.shuffle(q);
      idx = 0;
    }
    return q[idx++];
  };
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t correct = 0, count = 0;
    std::vector<const Window*> batch;
    for (std::size_t bi = 0; bi < batches; ++bi) {
      batch.clear();
      for (std::size_t k = 0; k < half; ++k) batch.push_back(&windows[draw(pos, pi)]);
      for (std::size_t k = 0; k < half; ++k) batch.push_back(&windows[draw(neg, ni)]);
      auto br = phase2_batch(model, batch, cfg.margin, Mode::train, derive_seed(cfg.seed, (epoch << 32) + bi));
      detail::check_finite_grads(br.grads);
      if (br.count > 0) adam_step(model.values, br.grads, state, cfg.lr, cfg.weight_decay);
      loss_sum += br.loss;
      correct += br.correct;
      count += br.count;
    }
    res.curve.push_back({epoch + 1, loss_sum / static_cast<double>(batches),
                         count ? static_cast<double>(correct) / static_cast<double>(count) : 0.0});
    log::info("phase2 epoch " + std::to_string(epoch + 1) + " loss " + std::to_string(res.curve.back().loss) +
              " acc " + std::to_string(res.curve.back().accuracy));
  }
  res.model = std::move(model);
  return res;
}

// Triplet fine-tuning on registration windows with every group except FC1
// and FC2 frozen; frozen values are never written.
inline TrainResult fine_tune_phase3(std::span<const Window> windows, const Phase3Config& cfg, ModelParams model) {
  if (windows.empty()) throw InvalidArgument("fine_tune_phase3: no registration windows");
  if (cfg.batch_size < 2) throw InvalidArgument("fine_tune_phase3: batch size must be at least 2");
  detail::require_both_classes(windows, "fine_tune_phase3");
  if (model.head_attached) detach_head(model);

  TrainResult res;
  const auto freeze = FreezeMask::all_but_fc(model.layout);
  const auto trainable = freeze.trainable_elements(model.layout);
  OptimState state(model.layout.total);
  std::vector<std::size_t> order(windows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    SplitMix64 rng(derive_seed(cfg.seed, 0x30000 + epoch));
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0, count = 0, batches = 0;
    std::vector<const Window*> batch;
    for (std::size_t start = 0, bi = 0; start < order.size(); start += cfg.batch_size, ++bi) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
        batch.push_back(&windows[order[i]]);
      auto br = phase2_batch(model, batch, cfg.margin, Mode::train, derive_seed(cfg.seed, (epoch << 32) + bi), freeze);
      detail::check_finite_grads(br.grads);
      if (br.count > 0) radam_step(model.values, br.grads, state, cfg.lr, trainable);
      loss_sum += br.loss;
      correct += br.correct;
      count += br.count;
      ++batches;
    }
    res.curve.push_back({epoch + 1, loss_sum / static_cast<double>(batches),
                         count ? static_cast<double>(correct) / static_cast<double>(count) : 0.0});
  }
  res.model = std::move(model);
  return res;
}

inline void write_metrics_log(std::span<const EpochMetrics> curve, std::ostream& os) {
  os << "epoch,loss,accuracy\n";
  char buf[96];
  for (const auto& m : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.6f\n", m.epoch, m.loss, m.accuracy);
    os << buf;
  }
}

// ---------------------------------------------------------------------------
// Training data assembly.

struct TrainingSet {
  std::vector<Window> windows;
  ChannelStats stats;
  std::vector<std::string> exercises;  // training manifest
};

// Windows from every stream whose exercise is not `holdout`, cut with the
// window rule for that exercise's mean repetition duration.
inline TrainingSet build_training_set(const Corpus& corpus, const std::string& holdout,
                                      std::size_t t_max = kDefaultTMax,
                                      double overlap_ratio = kDefaultOverlapRatio) {
  TrainingSet ts;
  std::vector<SignalStream> used;
  for (const auto& m : corpus.exercises)
    if (m.exercise_id != holdout) ts.exercises.push_back(m.exercise_id);
  for (const auto& cs : corpus.streams) {
    if (cs.stream.exercise_id == holdout) continue;
    const auto params = window_params_for(corpus.meta(cs.stream.exercise_id).mean_rep_duration_s);
    if (window_count(cs.stream.length(), params) == 0) continue;
    auto w = slide_labeled(cs.stream, params, t_max, overlap_ratio);
    std::move(w.begin(), w.end(), std::back_inserter(ts.windows));
    used.push_back(cs.stream);
  }
  if (ts.windows.empty()) throw InvalidArgument("build_training_set: no training windows");
  ts.stats = compute_channel_stats(used);
  return ts;
}

}  // namespace repkit
