#pragma once

// Embedding network:
//   mask -> [conv(same, ReLU) -> dropout -> maxpool] x blocks -> GRU -> GAP
//        -> FC1 + ReLU -> FC2 -> L2 normalize
// plus the sigmoid head used during binary pre-training.
//
// Masking: only the first valid_len rows of a window are processed. Padded
// rows never enter a convolution (same-padding zeros stand in for them), a
// pooled step exists iff at least one of its inputs is valid, and the GRU and
// GAP run over valid steps only. The result is therefore bit-identical for
// any amount of trailing padding.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "repkit/error.hpp"
#include "repkit/rng.hpp"
#include "repkit/signal.hpp"

namespace repkit {

struct ConvBlockSpec {
  std::size_t filters = 32;
  std::size_t kernel_size = 5;
  bool operator==(const ConvBlockSpec&) const = default;
};

struct ModelConfig {
  std::size_t input_channels = kChannels;
  std::vector<ConvBlockSpec> conv_blocks{{32, 5}, {64, 3}};
  double dropout_p = 0.2;
  std::size_t pool_size = 2;
  std::size_t gru_hidden = 64;
  std::array<std::size_t, 2> fc_dims{64, 32};
  std::size_t t_max = kDefaultTMax;
  std::uint64_t init_seed = 1;

  bool operator==(const ModelConfig&) const = default;

  std::size_t embedding_dim() const { return fc_dims[1]; }

  // Shortest valid length that leaves at least one step per pooling stage.
  std::size_t min_valid_len() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < conv_blocks.size(); ++i) n *= pool_size;
    return n;
  }

  void validate() const {
    if (input_channels != kChannels) throw InvalidArgument("model config: input_channels must be 9");
    if (conv_blocks.empty()) throw InvalidArgument("model config: need at least one conv block");
    for (const auto& b : conv_blocks) {
      if (b.filters == 0) throw InvalidArgument("model config: conv filters must be positive");
      if (b.kernel_size == 0 || b.kernel_size % 2 == 0)
        throw InvalidArgument("model config: conv kernel size must be odd");
    }
    if (!(dropout_p >= 0.0 && dropout_p < 1.0))
      throw InvalidArgument("model config: dropout_p must lie in [0, 1)");
    if (pool_size == 0) throw InvalidArgument("model config: pool_size must be positive");
    if (gru_hidden == 0 || fc_dims[0] == 0 || fc_dims[1] == 0)
      throw InvalidArgument("model config: layer sizes must be positive");
    if (t_max < min_valid_len()) throw InvalidArgument("model config: t_max too short for pooling");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : c.conv_blocks) blocks.push_back({b.filters, b.kernel_size});
  j = {{"input_channels", c.input_channels},
       {"conv_blocks", blocks},
       {"dropout_p", c.dropout_p},
       {"pool_size", c.pool_size},
       {"gru_hidden", c.gru_hidden},
       {"fc_dims", {c.fc_dims[0], c.fc_dims[1]}},
       {"t_max", c.t_max},
       {"init_seed", c.init_seed}};
}

// Partial objects override defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw InvalidArgument("model config must be a JSON object");
  for (const auto& [key, val] : j.items()) {
    if (key == "input_channels") c.input_channels = val.get<std::size_t>();
    else if (key == "conv_blocks") {
      c.conv_blocks.clear();
      for (const auto& b : val) {
        if (!b.is_array() || b.size() != 2)
          throw InvalidArgument("model config: conv_blocks entries are [filters, kernel_size]");
        c.conv_blocks.push_back({b[0].get<std::size_t>(), b[1].get<std::size_t>()});
      }
    } else if (key == "dropout_p") c.dropout_p = val.get<double>();
    else if (key == "pool_size") c.pool_size = val.get<std::size_t>();
    else if (key == "gru_hidden") c.gru_hidden = val.get<std::size_t>();
    else if (key == "fc_dims") {
      if (!val.is_array() || val.size() != 2)
        throw InvalidArgument("model config: fc_dims must have exactly two entries");
      c.fc_dims = {val[0].get<std::size_t>(), val[1].get<std::size_t>()};
    } else if (key == "t_max") c.t_max = val.get<std::size_t>();
    else if (key == "init_seed") c.init_seed = val.get<std::uint64_t>();
    else throw InvalidArgument("model config: unknown key '" + key + "'");
  }
}

// ---------------------------------------------------------------------------
// Parameter layout. All trainable values live in one flat vector; groups are
// ordered conv..., gru..., fc1, fc2, head so FC1/FC2 form one contiguous range.

struct ParamGroup {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
  std::vector<std::size_t> shape;
};

struct ParamLayout {
  struct ConvOffsets {
    std::size_t weight, bias;  // weight shape [filters, kernel, in_channels]
  };
  std::vector<ParamGroup> groups;
  std::vector<ConvOffsets> conv;
  // GRU input weights [H, D], recurrent weights [H, H], biases [H].
  std::size_t wz, uz, bz, wr, ur, br, wh, uh, bh;
  std::size_t fc1_w, fc1_b, fc2_w, fc2_b, head_w, head_b;
  std::size_t total = 0;

  const ParamGroup& group(std::string_view name) const {
    for (const auto& g : groups)
      if (g.name == name) return g;
    throw InvalidArgument("unknown parameter group '" + std::string(name) + "'");
  }
};

inline ParamLayout make_layout(const ModelConfig& cfg) {
  cfg.validate();
  ParamLayout L;
  auto add = [&](std::string name, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    L.groups.push_back({std::move(name), L.total, n, std::move(shape)});
    L.total += n;
    return L.groups.back().offset;
  };
  std::size_t in = cfg.input_channels;
  for (std::size_t b = 0; b < cfg.conv_blocks.size(); ++b) {
    const auto& blk = cfg.conv_blocks[b];
    const auto p = "conv" + std::to_string(b);
    const auto w = add(p + ".weight", {blk.filters, blk.kernel_size, in});
    const auto bias = add(p + ".bias", {blk.filters});
    L.conv.push_back({w, bias});
    in = blk.filters;
  }
  const std::size_t H = cfg.gru_hidden;
  L.wz = add("gru.w_update", {H, in});
  L.uz = add("gru.u_update", {H, H});
  L.bz = add("gru.b_update", {H});
  L.wr = add("gru.w_reset", {H, in});
  L.ur = add("gru.u_reset", {H, H});
  L.br = add("gru.b_reset", {H});
  L.wh = add("gru.w_candidate", {H, in});
  L.uh = add("gru.u_candidate", {H, H});
  L.bh = add("gru.b_candidate", {H});
  L.fc1_w = add("fc1.weight", {cfg.fc_dims[0], H});
  L.fc1_b = add("fc1.bias", {cfg.fc_dims[0]});
  L.fc2_w = add("fc2.weight", {cfg.fc_dims[1], cfg.fc_dims[0]});
  L.fc2_b = add("fc2.bias", {cfg.fc_dims[1]});
  L.head_w = add("head.weight", {cfg.fc_dims[1]});
  L.head_b = add("head.bias", {1});
  return L;
}

// Per-group freeze flags.
struct FreezeMask {
  std::vector<bool> frozen;  // indexed like ParamLayout::groups

  static FreezeMask none(const ParamLayout& L) { return {std::vector<bool>(L.groups.size(), false)}; }

  // Everything frozen except FC1 and FC2.
  static FreezeMask all_but_fc(const ParamLayout& L) {
    FreezeMask m{std::vector<bool>(L.groups.size(), true)};
    for (std::size_t i = 0; i < L.groups.size(); ++i)
      if (L.groups[i].name.starts_with("fc1.") || L.groups[i].name.starts_with("fc2."))
        m.frozen[i] = false;
    return m;
  }

  bool is_frozen(std::size_t group) const { return !frozen.empty() && frozen[group]; }

  // Element-wise trainable flags for optimizers.
  std::vector<char> trainable_elements(const ParamLayout& L) const {
    std::vector<char> t(L.total, 1);
    for (std::size_t i = 0; i < L.groups.size(); ++i)
      if (is_frozen(i))
        std::fill_n(t.begin() + static_cast<std::ptrdiff_t>(L.groups[i].offset), L.groups[i].size, 0);
    return t;
  }
};

struct ModelParams {
  ModelConfig config;
  ParamLayout layout;
  std::vector<double> values;
  ChannelStats norm;
  bool head_attached = false;

  std::span<double> group(std::string_view name) {
    const auto& g = layout.group(name);
    return {values.data() + g.offset, g.size};
  }
  std::span<const double> group(std::string_view name) const {
    const auto& g = layout.group(name);
    return {values.data() + g.offset, g.size};
  }
  const double* at(std::size_t offset) const { return values.data() + offset; }

  void check_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) throw NumericError("model parameters contain non-finite values");
  }
};

using Gradients = std::vector<double>;  // same layout as ModelParams::values

// Glorot-uniform weights, zero biases. The head is initialized too but
// left detached.
inline ModelParams init_params(const ModelConfig& cfg) {
  ModelParams p;
  p.config = cfg;
  p.layout = make_layout(cfg);
  p.values.assign(p.layout.total, 0.0);
  SplitMix64 rng(derive_seed(cfg.init_seed, 0x1417));
  auto glorot = [&](std::size_t offset, std::size_t n, double fan_in, double fan_out) {
    const double lim = std::sqrt(6.0 / (fan_in + fan_out));
    for (std::size_t i = 0; i < n; ++i) p.values[offset + i] = rng.uniform(-lim, lim);
  };
  std::size_t in = cfg.input_channels;
  for (std::size_t b = 0; b < cfg.conv_blocks.size(); ++b) {
    const auto& blk = cfg.conv_blocks[b];
    glorot(p.layout.conv[b].weight, blk.filters * blk.kernel_size * in,
           static_cast<double>(in * blk.kernel_size), static_cast<double>(blk.filters * blk.kernel_size));
    in = blk.filters;
  }
  const std::size_t H = cfg.gru_hidden;
  const auto D = static_cast<double>(in), Hd = static_cast<double>(H);
  for (auto off : {p.layout.wz, p.layout.wr, p.layout.wh}) glorot(off, H * in, D, Hd);
  for (auto off : {p.layout.uz, p.layout.ur, p.layout.uh}) glorot(off, H * H, Hd, Hd);
  glorot(p.layout.fc1_w, cfg.fc_dims[0] * H, Hd, static_cast<double>(cfg.fc_dims[0]));
  glorot(p.layout.fc2_w, cfg.fc_dims[1] * cfg.fc_dims[0], static_cast<double>(cfg.fc_dims[0]),
         static_cast<double>(cfg.fc_dims[1]));
  glorot(p.layout.head_w, cfg.fc_dims[1], static_cast<double>(cfg.fc_dims[1]), 1.0);
  return p;
}

inline void attach_head(ModelParams& p, std::uint64_t seed) {
  SplitMix64 rng(derive_seed(seed, 0x4ead));
  const auto d = static_cast<double>(p.config.embedding_dim());
  const double lim = std::sqrt(6.0 / (d + 1.0));
  for (auto& w : p.group("head.weight")) w = rng.uniform(-lim, lim);
  p.group("head.bias")[0] = 0.0;
  p.head_attached = true;
}

inline void detach_head(ModelParams& p) {
  std::ranges::fill(p.group("head.weight"), 0.0);
  std::ranges::fill(p.group("head.bias"), 0.0);
  p.head_attached = false;
}

// ---------------------------------------------------------------------------
// Forward pass.

enum class Mode { train, eval };

struct ConvTrace {
  std::size_t len_in = 0;
  std::size_t len_out = 0;
  std::vector<double> padded_in;  // [(len_in + k - 1) x in_channels]
  std::vector<double> pre_act;    // [len_in x filters]
  std::vector<double> drop_mask;  // empty in eval mode
  std::vector<std::uint32_t> argmax;  // [len_out x filters], time index in [0, len_in)
};

struct ForwardTrace {
  std::size_t param_count = 0;
  std::vector<std::size_t> group_sizes;
  Mode mode = Mode::eval;
  std::vector<ConvTrace> conv;
  std::size_t steps = 0;
  std::vector<double> gru_in;  // [steps x D]
  std::vector<double> z, r, c, rh;  // [steps x H]
  std::vector<double> h;  // [(steps + 1) x H], row 0 is the zero state
  std::vector<double> gap, fc1_pre, fc1_act, fc2_out;
  double norm = 0.0;
  std::vector<double> embedding;
};

struct ForwardResult {
  std::vector<double> embedding;
  ForwardTrace trace;
};

namespace detail {

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// y[i] = bias[i] + sum_j W[i, j] x[j];  W is [rows x cols].
inline void matvec(const double* W, const double* bias, const double* x, double* y, std::size_t rows,
                   std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) y[i] = (bias ? bias[i] : 0.0) + dot(W + i * cols, x, cols);
}

// dx[j] += sum_i W[i, j] dy[i]
inline void matvec_t_acc(const double* W, const double* dy, double* dx, std::size_t rows,
                         std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double g = dy[i];
    if (g == 0.0) continue;
    const double* w = W + i * cols;
    for (std::size_t j = 0; j < cols; ++j) dx[j] += g * w[j];
  }
}

// dW[i, j] += dy[i] x[j]
inline void outer_acc(double* dW, const double* dy, const double* x, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double g = dy[i];
    if (g == 0.0) continue;
    double* w = dW + i * cols;
    for (std::size_t j = 0; j < cols; ++j) w[j] += g * x[j];
  }
}

inline std::vector<std::size_t> group_sizes(const ParamLayout& L) {
  std::vector<std::size_t> s;
  for (const auto& g : L.groups) s.push_back(g.size);
  return s;
}

}  // namespace detail

inline ForwardResult forward(const ModelParams& params, const Window& window, Mode mode,
                             std::uint64_t rng_seed = 0) {
  const ModelConfig& cfg = params.config;
  const ParamLayout& L = params.layout;
  if (params.values.size() != L.total) throw InvariantViolation("forward: parameter vector size mismatch");
  if (window.data.size() != window.t_max * kChannels || window.valid_len > window.t_max)
    throw InvalidArgument("forward: malformed window");
  if (window.valid_len < cfg.min_valid_len())
    throw InvalidArgument("forward: valid length " + std::to_string(window.valid_len) +
                          " does not survive pooling (minimum " + std::to_string(cfg.min_valid_len()) + ")");
  if (window.valid_len > cfg.t_max)
    throw InvalidArgument("forward: valid length exceeds the model's t_max");

  ForwardResult res;
  ForwardTrace& tr = res.trace;
  tr.param_count = L.total;
  tr.group_sizes = detail::group_sizes(L);
  tr.mode = mode;
  SplitMix64 rng(rng_seed);
  const bool dropout = mode == Mode::train && cfg.dropout_p > 0.0;
  const double keep_scale = 1.0 / (1.0 - cfg.dropout_p);

  // Standardized valid rows.
  std::size_t n = window.valid_len;
  std::size_t in_ch = kChannels;
  std::vector<double> x(n * kChannels);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t c = 0; c < kChannels; ++c)
      x[t * kChannels + c] = (window.data[t * kChannels + c] - params.norm.mean[c]) / params.norm.stddev[c];

  tr.conv.resize(cfg.conv_blocks.size());
  for (std::size_t b = 0; b < cfg.conv_blocks.size(); ++b) {
    const std::size_t F = cfg.conv_blocks[b].filters;
    const std::size_t K = cfg.conv_blocks[b].kernel_size;
    const std::size_t pad = K / 2;
    ConvTrace& ct = tr.conv[b];
    ct.len_in = n;
    ct.padded_in.assign((n + K - 1) * in_ch, 0.0);
    std::copy(x.begin(), x.end(), ct.padded_in.begin() + static_cast<std::ptrdiff_t>(pad * in_ch));
    const double* W = params.at(L.conv[b].weight);
    const double* B = params.at(L.conv[b].bias);
    const std::size_t span = K * in_ch;
    ct.pre_act.resize(n * F);
    for (std::size_t t = 0; t < n; ++t) {
      const double* xin = ct.padded_in.data() + t * in_ch;
      double* y = ct.pre_act.data() + t * F;
      for (std::size_t f = 0; f < F; ++f) y[f] = B[f] + detail::dot(W + f * span, xin, span);
    }
    std::vector<double> act(n * F);
    for (std::size_t i = 0; i < n * F; ++i) act[i] = ct.pre_act[i] > 0.0 ? ct.pre_act[i] : 0.0;
    if (dropout) {
      ct.drop_mask.resize(n * F);
      for (std::size_t i = 0; i < n * F; ++i) {
        ct.drop_mask[i] = rng.uniform() < cfg.dropout_p ? 0.0 : keep_scale;
        act[i] *= ct.drop_mask[i];
      }
    }
    const std::size_t P = cfg.pool_size;
    const std::size_t m = (n + P - 1) / P;
    ct.len_out = m;
    ct.argmax.resize(m * F);
    x.assign(m * F, 0.0);
    for (std::size_t s = 0; s < m; ++s) {
      const std::size_t t0 = s * P, t1 = std::min(n, t0 + P);
      for (std::size_t f = 0; f < F; ++f) {
        std::size_t best = t0;
        for (std::size_t t = t0 + 1; t < t1; ++t)
          if (act[t * F + f] > act[best * F + f]) best = t;
        ct.argmax[s * F + f] = static_cast<std::uint32_t>(best);
        x[s * F + f] = act[best * F + f];
      }
    }
    n = m;
    in_ch = F;
  }

  // GRU over the valid pooled steps.
  const std::size_t H = cfg.gru_hidden;
  const std::size_t D = in_ch;
  tr.steps = n;
  tr.gru_in = std::move(x);
  tr.z.resize(n * H);
  tr.r.resize(n * H);
  tr.c.resize(n * H);
  tr.rh.resize(n * H);
  tr.h.assign((n + 1) * H, 0.0);
  std::vector<double> az(H), ar(H), ac(H), tmp(H);
  for (std::size_t t = 0; t < n; ++t) {
    const double* xt = tr.gru_in.data() + t * D;
    const double* hp = tr.h.data() + t * H;
    double* z = tr.z.data() + t * H;
    double* r = tr.r.data() + t * H;
    double* cc = tr.c.data() + t * H;
    double* rh = tr.rh.data() + t * H;
    double* hn = tr.h.data() + (t + 1) * H;
    detail::matvec(params.at(L.wz), params.at(L.bz), xt, az.data(), H, D);
    detail::matvec(params.at(L.wr), params.at(L.br), xt, ar.data(), H, D);
    detail::matvec(params.at(L.wh), params.at(L.bh), xt, ac.data(), H, D);
    detail::matvec(params.at(L.uz), nullptr, hp, tmp.data(), H, H);
    for (std::size_t i = 0; i < H; ++i) z[i] = detail::sigmoid(az[i] + tmp[i]);
    detail::matvec(params.at(L.ur), nullptr, hp, tmp.data(), H, H);
    for (std::size_t i = 0; i < H; ++i) {
      r[i] = detail::sigmoid(ar[i] + tmp[i]);
      rh[i] = r[i] * hp[i];
    }
    detail::matvec(params.at(L.uh), nullptr, rh, tmp.data(), H, H);
    for (std::size_t i = 0; i < H; ++i) {
      cc[i] = std::tanh(ac[i] + tmp[i]);
      hn[i] = (1.0 - z[i]) * hp[i] + z[i] * cc[i];
    }
  }

  tr.gap.assign(H, 0.0);
  for (std::size_t t = 1; t <= n; ++t)
    for (std::size_t i = 0; i < H; ++i) tr.gap[i] += tr.h[t * H + i];
  for (auto& g : tr.gap) g /= static_cast<double>(n);

  const std::size_t d1 = cfg.fc_dims[0], d2 = cfg.fc_dims[1];
  tr.fc1_pre.resize(d1);
  detail::matvec(params.at(L.fc1_w), params.at(L.fc1_b), tr.gap.data(), tr.fc1_pre.data(), d1, H);
  tr.fc1_act.resize(d1);
  for (std::size_t i = 0; i < d1; ++i) tr.fc1_act[i] = tr.fc1_pre[i] > 0.0 ? tr.fc1_pre[i] : 0.0;
  tr.fc2_out.resize(d2);
  detail::matvec(params.at(L.fc2_w), params.at(L.fc2_b), tr.fc1_act.data(), tr.fc2_out.data(), d2, d1);

  tr.norm = std::sqrt(detail::dot(tr.fc2_out.data(), tr.fc2_out.data(), d2));
  const double denom = std::max(tr.norm, 1e-300);
  tr.embedding.resize(d2);
  for (std::size_t i = 0; i < d2; ++i) tr.embedding[i] = tr.fc2_out[i] / denom;
  res.embedding = tr.embedding;
  return res;
}

inline std::vector<double> embed(const ModelParams& params, const Window& window) {
  return forward(params, window, Mode::eval).embedding;
}

// ---------------------------------------------------------------------------
// Sigmoid head.

inline double head_logit(std::span<const double> embedding, const ModelParams& params) {
  const auto w = params.group("head.weight");
  if (embedding.size() != w.size()) throw InvalidArgument("head: embedding dimension mismatch");
  return detail::dot(w.data(), embedding.data(), w.size()) + params.group("head.bias")[0];
}

inline double head_forward(std::span<const double> embedding, const ModelParams& params) {
  return detail::sigmoid(head_logit(embedding, params));
}

// Accumulates head gradients for dL/dlogit and returns dL/dembedding.
inline std::vector<double> head_backward(std::span<const double> embedding, double dlogit,
                                         const ModelParams& params, Gradients& grads,
                                         const FreezeMask& freeze = {}) {
  const auto& L = params.layout;
  const std::size_t d = embedding.size();
  std::vector<double> de(d);
  const double* w = params.at(L.head_w);
  for (std::size_t i = 0; i < d; ++i) de[i] = dlogit * w[i];
  const std::size_t gi_w = L.groups.size() - 2, gi_b = L.groups.size() - 1;
  if (!freeze.is_frozen(gi_w))
    for (std::size_t i = 0; i < d; ++i) grads[L.head_w + i] += dlogit * embedding[i];
  if (!freeze.is_frozen(gi_b)) grads[L.head_b] += dlogit;
  return de;
}

// ---------------------------------------------------------------------------
// Reverse pass. Accumulates into `grads` (sized like params.values) the exact
// gradient of a scalar loss whose derivative w.r.t. the embedding is
// `upstream`. Frozen groups receive nothing; backpropagation stops below the
// lowest trainable group.

inline void backward_into(const ModelParams& params, const ForwardTrace& tr, std::span<const double> upstream,
                          Gradients& grads, const FreezeMask& freeze = {}) {
  const ModelConfig& cfg = params.config;
  const ParamLayout& L = params.layout;
  if (tr.param_count != L.total || tr.group_sizes != detail::group_sizes(L))
    throw InvariantViolation("backward: trace was produced by a model with a different layout");
  if (grads.size() != L.total) throw InvariantViolation("backward: gradient buffer size mismatch");
  if (upstream.size() != cfg.embedding_dim() || tr.embedding.size() != upstream.size())
    throw InvariantViolation("backward: upstream gradient has the wrong dimension");
  if (!freeze.frozen.empty() && freeze.frozen.size() != L.groups.size())
    throw InvariantViolation("backward: freeze mask does not match the parameter layout");

  // Index of group by offset lookup.
  auto group_index = [&](std::size_t offset) {
    for (std::size_t i = 0; i < L.groups.size(); ++i)
      if (L.groups[i].offset == offset) return i;
    throw InvariantViolation("backward: unknown group offset");
  };
  auto trainable = [&](std::size_t offset) { return !freeze.is_frozen(group_index(offset)); };
  // Lowest group index that needs a gradient.
  std::size_t lowest = L.groups.size();
  for (std::size_t i = 0; i < L.groups.size(); ++i)
    if (!freeze.is_frozen(i)) {
      lowest = i;
      break;
    }
  const std::size_t fc1_group = group_index(L.fc1_w);
  const std::size_t gru_group = group_index(L.wz);
  if (lowest >= fc1_group + 4) return;  // only the head is trainable; it is not part of f_theta

  const std::size_t H = cfg.gru_hidden, d1 = cfg.fc_dims[0], d2 = cfg.fc_dims[1];

  // L2 normalization: dv = (de - e (e . de)) / |v|
  std::vector<double> dv(d2);
  {
    const double proj = detail::dot(tr.embedding.data(), upstream.data(), d2);
    const double denom = std::max(tr.norm, 1e-300);
    for (std::size_t i = 0; i < d2; ++i) dv[i] = (upstream[i] - tr.embedding[i] * proj) / denom;
  }
  if (trainable(L.fc2_w)) detail::outer_acc(grads.data() + L.fc2_w, dv.data(), tr.fc1_act.data(), d2, d1);
  if (trainable(L.fc2_b))
    for (std::size_t i = 0; i < d2; ++i) grads[L.fc2_b + i] += dv[i];
  if (lowest > fc1_group + 1) return;

  std::vector<double> du(d1, 0.0);
  detail::matvec_t_acc(params.at(L.fc2_w), dv.data(), du.data(), d2, d1);
  for (std::size_t i = 0; i < d1; ++i)
    if (!(tr.fc1_pre[i] > 0.0)) du[i] = 0.0;
  if (trainable(L.fc1_w)) detail::outer_acc(grads.data() + L.fc1_w, du.data(), tr.gap.data(), d1, H);
  if (trainable(L.fc1_b))
    for (std::size_t i = 0; i < d1; ++i) grads[L.fc1_b + i] += du[i];
  if (lowest >= fc1_group) return;

  std::vector<double> dgap(H, 0.0);
  detail::matvec_t_acc(params.at(L.fc1_w), du.data(), dgap.data(), d1, H);

  // GRU backpropagation through time.
  const std::size_t n = tr.steps;
  const std::size_t D = tr.gru_in.size() / std::max<std::size_t>(n, 1);
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> daz(n * H), dar(n * H), dac(n * H);
  std::vector<double> dh(H, 0.0), dh_prev(H), drh(H);
  for (std::size_t tt = n; tt-- > 0;) {
    const double* z = tr.z.data() + tt * H;
    const double* r = tr.r.data() + tt * H;
    const double* cc = tr.c.data() + tt * H;
    const double* hp = tr.h.data() + tt * H;
    for (std::size_t i = 0; i < H; ++i) dh[i] += dgap[i] * inv_n;
    double* gz = daz.data() + tt * H;
    double* gr = dar.data() + tt * H;
    double* gc = dac.data() + tt * H;
    for (std::size_t i = 0; i < H; ++i) {
      const double dz = dh[i] * (cc[i] - hp[i]);
      const double dc = dh[i] * z[i];
      dh_prev[i] = dh[i] * (1.0 - z[i]);
      gz[i] = dz * z[i] * (1.0 - z[i]);
      gc[i] = dc * (1.0 - cc[i] * cc[i]);
    }
    std::fill(drh.begin(), drh.end(), 0.0);
    detail::matvec_t_acc(params.at(L.uh), gc, drh.data(), H, H);
    for (std::size_t i = 0; i < H; ++i) {
      gr[i] = drh[i] * hp[i] * r[i] * (1.0 - r[i]);
      dh_prev[i] += drh[i] * r[i];
    }
    detail::matvec_t_acc(params.at(L.uz), gz, dh_prev.data(), H, H);
    detail::matvec_t_acc(params.at(L.ur), gr, dh_prev.data(), H, H);
    dh.swap(dh_prev);
  }
  struct Gate {
    std::size_t w, u, b;
    const std::vector<double>& da;
    const double* hin;  // recurrent input per step (h_{t-1} or r*h_{t-1})
    std::size_t hin_stride;
  };
  const Gate gates[3] = {{L.wz, L.uz, L.bz, daz, tr.h.data(), H},
                         {L.wr, L.ur, L.br, dar, tr.h.data(), H},
                         {L.wh, L.uh, L.bh, dac, tr.rh.data(), H}};
  for (const auto& g : gates) {
    const bool tw = trainable(g.w), tu = trainable(g.u), tb = trainable(g.b);
    for (std::size_t t = 0; t < n; ++t) {
      const double* da = g.da.data() + t * H;
      if (tw) detail::outer_acc(grads.data() + g.w, da, tr.gru_in.data() + t * D, H, D);
      if (tu) detail::outer_acc(grads.data() + g.u, da, g.hin + t * g.hin_stride, H, H);
      if (tb)
        for (std::size_t i = 0; i < H; ++i) grads[g.b + i] += da[i];
    }
  }
  if (lowest >= gru_group) return;

  std::vector<double> dx(n * D, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    detail::matvec_t_acc(params.at(L.wz), daz.data() + t * H, dx.data() + t * D, H, D);
    detail::matvec_t_acc(params.at(L.wr), dar.data() + t * H, dx.data() + t * D, H, D);
    detail::matvec_t_acc(params.at(L.wh), dac.data() + t * H, dx.data() + t * D, H, D);
  }

  // Conv blocks in reverse.
  for (std::size_t b = cfg.conv_blocks.size(); b-- > 0;) {
    const ConvTrace& ct = tr.conv[b];
    const std::size_t F = cfg.conv_blocks[b].filters;
    const std::size_t K = cfg.conv_blocks[b].kernel_size;
    const std::size_t in_ch = b == 0 ? kChannels : cfg.conv_blocks[b - 1].filters;
    const std::size_t nin = ct.len_in;
    // Unpool: route to argmax, then dropout and ReLU.
    std::vector<double> dy(nin * F, 0.0);
    for (std::size_t s = 0; s < ct.len_out; ++s)
      for (std::size_t f = 0; f < F; ++f) dy[ct.argmax[s * F + f] * F + f] += dx[s * F + f];
    for (std::size_t i = 0; i < nin * F; ++i) {
      if (!ct.drop_mask.empty()) dy[i] *= ct.drop_mask[i];
      if (!(ct.pre_act[i] > 0.0)) dy[i] = 0.0;
    }
    const std::size_t span = K * in_ch;
    const std::size_t wgroup = group_index(L.conv[b].weight);
    if (!freeze.is_frozen(wgroup))
      for (std::size_t t = 0; t < nin; ++t)
        detail::outer_acc(grads.data() + L.conv[b].weight, dy.data() + t * F, ct.padded_in.data() + t * in_ch, F,
                          span);
    if (trainable(L.conv[b].bias))
      for (std::size_t t = 0; t < nin; ++t)
        for (std::size_t f = 0; f < F; ++f) grads[L.conv[b].bias + f] += dy[t * F + f];
    if (b == 0 || lowest >= wgroup) break;
    std::vector<double> dpad((nin + K - 1) * in_ch, 0.0);
    for (std::size_t t = 0; t < nin; ++t)
      detail::matvec_t_acc(params.at(L.conv[b].weight), dy.data() + t * F, dpad.data() + t * in_ch, F, span);
    const std::size_t pad = K / 2;
    dx.assign(dpad.begin() + static_cast<std::ptrdiff_t>(pad * in_ch),
              dpad.begin() + static_cast<std::ptrdiff_t>((pad + nin) * in_ch));
  }
}

inline Gradients backward(const ModelParams& params, const ForwardTrace& trace, std::span<const double> upstream,
                          const FreezeMask& freeze = {}) {
  Gradients g(params.layout.total, 0.0);
  backward_into(params, trace, upstream, g, freeze);
  return g;
}

// ---------------------------------------------------------------------------
// Weight file:
//   "REPKITW\0" | u32 version | u32 header length | JSON header
//   | u64 count | count x f64 values | 9 x f64 mean | 9 x f64 stddev
// All integers and floats little-endian.

inline constexpr std::uint32_t kWeightFormatVersion = 1;

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}
inline void put_f64(std::ostream& os, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(os, v);
}
inline std::uint64_t get_u64(std::istream& is, const char* what) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw LoadError(std::string("truncated weight file (") + what + ")");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw LoadError(std::string("truncated weight file (") + what + ")");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}
inline double get_f64(std::istream& is, const char* what) {
  const std::uint64_t v = get_u64(is, what);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

}  // namespace detail

inline void save_params(const ModelParams& p, std::ostream& os) {
  nlohmann::json header;
  header["config"] = p.config;
  header["head_attached"] = p.head_attached;
  header["count"] = p.values.size();
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : p.layout.groups) groups.push_back({{"name", g.name}, {"shape", g.shape}});
  header["groups"] = groups;
  const std::string text = header.dump();
  os.write("REPKITW\0", 8);
  detail::put_u32(os, kWeightFormatVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::put_u64(os, p.values.size());
  for (double v : p.values) detail::put_f64(os, v);
  for (double v : p.norm.mean) detail::put_f64(os, v);
  for (double v : p.norm.stddev) detail::put_f64(os, v);
}

inline void save_params(const ModelParams& p, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  save_params(p, os);
  if (!os) throw Error("write failed for '" + path + "'");
}

inline ModelParams load_params(std::istream& is, const ModelConfig* expected = nullptr) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, "REPKITW\0", 8) != 0)
    throw LoadError("not a repkit weight file (bad magic)");
  const auto version = detail::get_u32(is, "version");
  if (version != kWeightFormatVersion)
    throw LoadError("unsupported weight format version " + std::to_string(version) + " (expected " +
                    std::to_string(kWeightFormatVersion) + ")");
  const auto hlen = detail::get_u32(is, "header length");
  std::string text(hlen, '\0');
  if (!is.read(text.data(), hlen)) throw LoadError("truncated weight file (header)");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("corrupt weight header: ") + e.what());
  }
  ModelParams p;
  try {
    p.config = header.at("config").get<ModelConfig>();
    p.head_attached = header.at("head_attached").get<bool>();
    p.layout = make_layout(p.config);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("corrupt weight header: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw LoadError(std::string("invalid model config in weight file: ") + e.what());
  }
  const auto& stored = header.at("groups");
  if (stored.size() != p.layout.groups.size())
    throw LoadError("weight file lists " + std::to_string(stored.size()) + " parameter groups, config implies " +
                    std::to_string(p.layout.groups.size()));
  for (std::size_t i = 0; i < stored.size(); ++i) {
    const auto shape = stored[i].at("shape").get<std::vector<std::size_t>>();
    if (stored[i].at("name").get<std::string>() != p.layout.groups[i].name || shape != p.layout.groups[i].shape)
      throw LoadError("weight file group " + stored[i].at("name").get<std::string>() + " " +
                      detail::shape_str(shape) + " disagrees with its config");
  }
  if (expected && !(*expected == p.config)) {
    const auto want = make_layout(*expected);
    std::string diff;
    for (std::size_t i = 0; i < std::max(want.groups.size(), p.layout.groups.size()); ++i) {
      const auto e = i < want.groups.size() ? want.groups[i].name + " " + detail::shape_str(want.groups[i].shape)
                                            : std::string("<none>");
      const auto f = i < p.layout.groups.size()
                         ? p.layout.groups[i].name + " " + detail::shape_str(p.layout.groups[i].shape)
                         : std::string("<none>");
      if (e != f) {
        diff = "expected " + e + ", found " + f;
        break;
      }
    }
    if (diff.empty()) diff = "shapes agree but hyperparameters (dropout_p, pool_size, t_max or init_seed) differ";
    throw LoadError("model config mismatch: " + diff);
  }
  const auto count = detail::get_u64(is, "count");
  if (count != p.layout.total)
    throw LoadError("weight file holds " + std::to_string(count) + " values, layout needs " +
                    std::to_string(p.layout.total));
  p.values.resize(count);
  for (auto& v : p.values) v = detail::get_f64(is, "values");
  for (auto& v : p.norm.mean) v = detail::get_f64(is, "normalization mean");
  for (auto& v : p.norm.stddev) v = detail::get_f64(is, "normalization stddev");
  return p;
}

inline ModelParams load_params(const std::string& path, const ModelConfig* expected = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open weight file '" + path + "'");
  return load_params(is, expected);
}

}  // namespace repkit
