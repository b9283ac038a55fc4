// SPDX-License-Identifier: Apache-2.0
//
// Sequence models over interleaved prompt tokens [x_1, y_1, ..., x_k, y_k, x_q].
// All four architectures share the prompt embedding and the scalar read-out
// head; they differ only in the token-mixing block.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "icl_lab/attention.hpp"
#include "icl_lab/autodiff.hpp"
#include "icl_lab/config.hpp"
#include "icl_lab/hyena.hpp"
#include "icl_lab/prompt.hpp"
#include "icl_lab/rng.hpp"
#include "icl_lab/ssm.hpp"

namespace icl {

enum class Arch { transformer, transformer_blockwise, hyena, ssm };

inline std::string_view to_string(Arch a) {
  switch (a) {
    case Arch::transformer: return "transformer";
    case Arch::transformer_blockwise: return "transformer_blockwise";
    case Arch::hyena: return "hyena";
    case Arch::ssm: return "ssm";
  }
  return "?";
}

inline Arch arch_from_string(std::string_view s) {
  for (auto a : {Arch::transformer, Arch::transformer_blockwise, Arch::hyena, Arch::ssm})
    if (s == to_string(a)) return a;
  if (s == "flash" || s == "blockwise") return Arch::transformer_blockwise;
  if (s == "mamba") return Arch::ssm;
  throw ConfigError("unknown architecture '" + std::string(s) + "'");
}

struct ModelConfig {
  Arch arch = Arch::transformer;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t embed_dim = 64;
  std::size_t max_seq_len = 203;
  std::size_t max_input_dim = 20;
  std::size_t mlp_ratio = 4;
  std::size_t block_size = 8;        // blockwise attention tile
  std::size_t filter_order = 128;    // hyena filter MLP width
  std::size_t filter_features = 16;  // hyena positional features
  std::size_t state_dim = 8;         // ssm state size per channel
  std::size_t ssm_expand = 2;
  std::size_t conv_width = 4;        // ssm short causal conv
  bool zero_head = false;

  bool operator==(const ModelConfig&) const = default;

  bool uses_attention() const { return arch == Arch::transformer || arch == Arch::transformer_blockwise; }

  void validate() const {
    if (n_layers == 0 || embed_dim == 0 || max_seq_len == 0 || max_input_dim == 0) {
      throw ConfigError("model sizes must be positive");
    }
    if (uses_attention()) {
      if (n_heads == 0 || embed_dim % n_heads != 0) {
        throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by n_heads " +
                          std::to_string(n_heads));
      }
      if (arch == Arch::transformer_blockwise && block_size == 0) throw ConfigError("block_size must be >= 1");
    } else if (n_heads != 0) {
      throw ConfigError(std::string(to_string(arch)) + " is attention-free; n_heads must be 0");
    }
    if (arch == Arch::hyena && (filter_order == 0 || filter_features < 2)) throw ConfigError("bad hyena filter sizes");
    if (arch == Arch::ssm && (state_dim == 0 || ssm_expand == 0 || conv_width == 0)) throw ConfigError("bad ssm sizes");
  }

  /// Longest prompt (context pairs) that fits: 2k + 1 <= max_seq_len.
  std::size_t max_context() const { return (max_seq_len - 1) / 2; }

  KeyValues to_key_values() const {
    return {{"arch", std::string(to_string(arch))},
            {"n_layers", std::to_string(n_layers)},
            {"n_heads", std::to_string(n_heads)},
            {"embed_dim", std::to_string(embed_dim)},
            {"max_seq_len", std::to_string(max_seq_len)},
            {"max_input_dim", std::to_string(max_input_dim)},
            {"mlp_ratio", std::to_string(mlp_ratio)},
            {"block_size", std::to_string(block_size)},
            {"filter_order", std::to_string(filter_order)},
            {"filter_features", std::to_string(filter_features)},
            {"state_dim", std::to_string(state_dim)},
            {"ssm_expand", std::to_string(ssm_expand)},
            {"conv_width", std::to_string(conv_width)},
            {"zero_head", kv::from_bool(zero_head)}};
  }

  /// Returns false when `key` is not a model key.
  bool set(const std::string& key, const std::string& v) {
    if (key == "arch") {
      arch = arch_from_string(v);
      if (!uses_attention()) n_heads = 0;
    }
    else if (key == "n_layers") n_layers = kv::to_u64(key, v);
    else if (key == "n_heads") n_heads = kv::to_u64(key, v);
    else if (key == "embed_dim") embed_dim = kv::to_u64(key, v);
    else if (key == "max_seq_len") max_seq_len = kv::to_u64(key, v);
    else if (key == "max_input_dim") max_input_dim = kv::to_u64(key, v);
    else if (key == "mlp_ratio") mlp_ratio = kv::to_u64(key, v);
    else if (key == "block_size") block_size = kv::to_u64(key, v);
    else if (key == "filter_order") filter_order = kv::to_u64(key, v);
    else if (key == "filter_features") filter_features = kv::to_u64(key, v);
    else if (key == "state_dim") state_dim = kv::to_u64(key, v);
    else if (key == "ssm_expand") ssm_expand = kv::to_u64(key, v);
    else if (key == "conv_width") conv_width = kv::to_u64(key, v);
    else if (key == "zero_head") zero_head = kv::to_bool(key, v);
    else return false;
    return true;
  }

  static ModelConfig from_key_values(const KeyValues& kvs) {
    ModelConfig c;
    for (const auto& [k, v] : kvs)
      if (!c.set(k, v)) throw ConfigError("unknown model key '" + k + "'");
    c.validate();
    return c;
  }
};

/// Named parameter tensors, ordered by name.
using ModelParams = std::map<std::string, Tensor>;

inline std::size_t parameter_count(const ModelParams& p) {
  std::size_t n = 0;
  for (const auto& [_, t] : p) n += t.size();
  return n;
}

/// FNV-1a over names, shapes and raw parameter bytes.
inline std::uint64_t parameter_checksum(const ModelParams& p) {
  std::string buf;
  for (const auto& [name, t] : p) {
    buf += name;
    buf += shape_str(t.shape());
    buf.append(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(double));
  }
  return fnv1a64(buf);
}

namespace model_detail {

enum class Init { normal, residual, zeros, ones, ssm_a_log, ssm_dt_bias, filter_in, filter_out, conv };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
};

inline std::string layer_name(std::size_t l, std::string_view leaf) { return "layer" + std::to_string(l) + "." + std::string(leaf); }

inline void add_linear(std::vector<ParamSpec>& v, const std::string& prefix, std::size_t in, std::size_t out,
                       Init w_init = Init::normal, bool bias = true) {
  v.push_back({prefix + ".w", {in, out}, w_init});
  if (bias) v.push_back({prefix + ".b", {out}, Init::zeros});
}

inline void add_layer_norm(std::vector<ParamSpec>& v, const std::string& prefix, std::size_t dim) {
  v.push_back({prefix + ".g", {dim}, Init::ones});
  v.push_back({prefix + ".b", {dim}, Init::zeros});
}

inline std::size_t ssm_inner(const ModelConfig& c) { return c.embed_dim * c.ssm_expand; }
inline std::size_t ssm_dt_rank(const ModelConfig& c) { return std::max<std::size_t>(1, (c.embed_dim + 15) / 16); }

inline std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  const std::size_t E = c.embed_dim;
  std::vector<ParamSpec> v;
  add_linear(v, "embed_x", c.max_input_dim, E);
  add_linear(v, "embed_y", c.max_input_dim, E);
  if (c.uses_attention()) v.push_back({"pos", {c.max_seq_len, E}, Init::normal});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    add_layer_norm(v, layer_name(l, "ln1"), E);
    if (c.uses_attention()) {
      add_linear(v, layer_name(l, "qkv"), E, 3 * E);
      add_linear(v, layer_name(l, "attn_out"), E, E, Init::residual);
    } else if (c.arch == Arch::hyena) {
      add_linear(v, layer_name(l, "in"), E, 2 * E);
      add_linear(v, layer_name(l, "filter1"), c.filter_features, c.filter_order, Init::filter_in);
      add_linear(v, layer_name(l, "filter2"), c.filter_order, E, Init::filter_out);
      add_linear(v, layer_name(l, "mix_out"), E, E, Init::residual);
    } else {
      const std::size_t D = ssm_inner(c), R = ssm_dt_rank(c), N = c.state_dim;
      add_linear(v, layer_name(l, "in"), E, 2 * D, Init::normal, false);
      v.push_back({layer_name(l, "conv.w"), {c.conv_width, D}, Init::conv});
      v.push_back({layer_name(l, "conv.b"), {D}, Init::zeros});
      add_linear(v, layer_name(l, "dt_down"), D, R, Init::normal, false);
      v.push_back({layer_name(l, "dt_up.w"), {R, D}, Init::normal});
      v.push_back({layer_name(l, "dt_up.b"), {D}, Init::ssm_dt_bias});
      add_linear(v, layer_name(l, "b_proj"), D, N, Init::normal, false);
      add_linear(v, layer_name(l, "c_proj"), D, N, Init::normal, false);
      v.push_back({layer_name(l, "a_log"), {D, N}, Init::ssm_a_log});
      v.push_back({layer_name(l, "d_skip"), {D}, Init::ones});
      add_linear(v, layer_name(l, "mix_out"), D, E, Init::residual, false);
    }
    if (c.arch != Arch::ssm) {
      add_layer_norm(v, layer_name(l, "ln2"), E);
      add_linear(v, layer_name(l, "mlp1"), E, c.mlp_ratio * E);
      add_linear(v, layer_name(l, "mlp2"), c.mlp_ratio * E, E, Init::residual);
    }
  }
  add_layer_norm(v, "ln_f", E);
  add_linear(v, "head", E, 1);
  return v;
}

}  // namespace model_detail

inline std::size_t parameter_count(const ModelConfig& c) {
  std::size_t n = 0;
  for (const auto& s : model_detail::param_specs(c)) n += shape_numel(s.shape);
  return n;
}

/// Randomly initialised parameters; fully determined by (config, seed).
inline ModelParams init_params(const ModelConfig& c, std::uint64_t seed) {
  using model_detail::Init;
  c.validate();
  Rng rng(mix_seed(seed, 0x1A17ULL));
  const double resid_std = 0.02 / std::sqrt(2.0 * static_cast<double>(c.n_layers));
  ModelParams p;
  for (const auto& s : model_detail::param_specs(c)) {
    Tensor t(s.shape);
    switch (s.init) {
      case Init::normal:
        for (auto& x : t.data()) x = 0.02 * sample_normal(rng);
        break;
      case Init::residual:
        for (auto& x : t.data()) x = resid_std * sample_normal(rng);
        break;
      case Init::zeros: break;
      case Init::ones: t.fill(1.0); break;
      case Init::ssm_a_log:
        for (std::size_t d = 0; d < s.shape[0]; ++d)
          for (std::size_t n = 0; n < s.shape[1]; ++n) t.at(d, n) = std::log(static_cast<double>(n + 1));
        break;
      case Init::ssm_dt_bias:
        // softplus(b) log-uniform in [1e-3, 1e-1]
        for (auto& x : t.data()) {
          const double dt = std::exp(sample_uniform(rng, std::log(1e-3), std::log(1e-1)));
          x = dt + std::log(-std::expm1(-dt));
        }
        break;
      case Init::filter_in:
        for (auto& x : t.data()) x = sample_normal(rng) / std::sqrt(static_cast<double>(s.shape[0]));
        break;
      case Init::filter_out:
        for (auto& x : t.data()) x = 0.1 * sample_normal(rng) / std::sqrt(static_cast<double>(s.shape[0]));
        break;
      case Init::conv:
        for (auto& x : t.data()) x = sample_normal(rng) / std::sqrt(static_cast<double>(s.shape[0]));
        break;
    }
    p.emplace(s.name, std::move(t));
  }
  if (c.zero_head) p.at("head.w").fill(0.0);
  return p;
}

// ---------------------------------------------------------------------------
// Batched prompt tensors

/// Padded inputs for a batch of same-k prompts. x_tokens / y_tokens are
/// [B, 2k+1, max_input_dim]; x rows sit at even positions, y values (in
/// coordinate 0) at odd positions, zeros elsewhere.
struct PromptBatch {
  Tensor x_tokens;
  Tensor y_tokens;
  std::size_t batch = 0;
  std::size_t k = 0;
  Vec query_targets;
  /// Targets at every x position: y_1..y_k then the query target, [B, k+1].
  Tensor all_targets;
};

inline PromptBatch make_prompt_batch(const std::vector<Prompt>& prompts, const ModelConfig& c) {
  if (prompts.empty()) throw ConfigError("empty prompt batch");
  const std::size_t k = prompts.front().k;
  const std::size_t T = 2 * k + 1;
  if (T > c.max_seq_len) {
    throw ConfigError("prompt with k=" + std::to_string(k) + " needs " + std::to_string(T) +
                      " positions; model max_seq_len is " + std::to_string(c.max_seq_len));
  }
  const std::size_t D = c.max_input_dim;
  PromptBatch b;
  b.batch = prompts.size();
  b.k = k;
  b.x_tokens = Tensor(Shape{b.batch, T, D});
  b.y_tokens = Tensor(Shape{b.batch, T, D});
  b.all_targets = Tensor(Shape{b.batch, k + 1});
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const Prompt& p = prompts[i];
    if (p.k != k) throw ConfigError("prompts in one batch must share k");
    if (p.xs.size() != k + 1 || p.ys.size() != k) throw ShapeError("malformed prompt");
    for (std::size_t t = 0; t <= k; ++t) {
      const Vec& x = p.xs[t];
      if (x.size() > D) {
        throw ShapeError("prompt input dimension " + std::to_string(x.size()) + " exceeds max_input_dim " +
                         std::to_string(D));
      }
      std::copy(x.begin(), x.end(), b.x_tokens.data().begin() + static_cast<std::ptrdiff_t>((i * T + 2 * t) * D));
      if (t < k) {
        b.y_tokens[(i * T + 2 * t + 1) * D] = p.ys[t];
        b.all_targets[i * (k + 1) + t] = p.ys[t];
      }
    }
    b.all_targets[i * (k + 1) + k] = p.query_target;
    b.query_targets.push_back(p.query_target);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Forward pass

using ParamVars = std::map<std::string, ad::Var>;

inline ParamVars bind_params(ad::Tape& tape, const ModelParams& params, bool requires_grad) {
  ParamVars v;
  for (const auto& [name, t] : params) v.emplace(name, tape.leaf(t, requires_grad, name));
  return v;
}

namespace model_detail {

inline ad::Var pv(const ParamVars& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw ConfigError("missing model parameter '" + name + "'");
  return it->second;
}

inline ad::Var linear(const ParamVars& p, const std::string& prefix, ad::Var x, bool bias = true) {
  ad::Var y = ad::matmul(x, pv(p, prefix + ".w"));
  return bias ? ad::add(y, pv(p, prefix + ".b")) : y;
}

inline ad::Var layer_norm(const ParamVars& p, const std::string& prefix, ad::Var x) {
  return ad::add(ad::mul(ad::layer_norm_last(x), pv(p, prefix + ".g")), pv(p, prefix + ".b"));
}

inline ad::Var attention_mix(const ModelConfig& c, const ParamVars& p, std::size_t l, ad::Var h) {
  const std::size_t B = h.shape()[0], T = h.shape()[1], E = c.embed_dim, H = c.n_heads, dh = E / H;
  ad::Var qkv = linear(p, layer_name(l, "qkv"), h);
  auto heads = [&](std::size_t part) {
    ad::Var s = ad::slice(qkv, 2, part * E, E);
    return ad::permute(ad::reshape(s, {B, T, H, dh}), {0, 2, 1, 3});
  };
  ad::Var q = heads(0), k = heads(1), v = heads(2);
  ad::Var o = c.arch == Arch::transformer_blockwise ? ad::blockwise_attention(q, k, v, c.block_size)
                                                    : ad::causal_attention(q, k, v);
  o = ad::reshape(ad::permute(o, {0, 2, 1, 3}), {B, T, E});
  return linear(p, layer_name(l, "attn_out"), o);
}

inline ad::Var hyena_mix(const ModelConfig& c, const ParamVars& p, std::size_t l, ad::Var h) {
  ad::Tape& tape = *h.tape();
  const std::size_t T = h.shape()[1], E = c.embed_dim;
  ad::Var vg = linear(p, layer_name(l, "in"), h);
  ad::Var v = ad::slice(vg, 2, 0, E);
  ad::Var gate = ad::slice(vg, 2, E, E);
  ad::Var feats = tape.constant(ad::hyena_positional_features(T, c.filter_features, c.max_seq_len));
  ad::Var window = tape.constant(ad::hyena_decay_window(T, E, c.max_seq_len));
  ad::Var filter = ad::hyena_filter(feats, pv(p, layer_name(l, "filter1.w")), pv(p, layer_name(l, "filter1.b")),
                                    pv(p, layer_name(l, "filter2.w")), pv(p, layer_name(l, "filter2.b")), window);
  return linear(p, layer_name(l, "mix_out"), ad::hyena_operator(v, filter, gate));
}

inline ad::Var ssm_mix(const ModelConfig& c, const ParamVars& p, std::size_t l, ad::Var h) {
  const std::size_t D = ssm_inner(c);
  ad::Var uz = linear(p, layer_name(l, "in"), h, false);
  ad::Var u = ad::slice(uz, 2, 0, D);
  ad::Var z = ad::slice(uz, 2, D, D);
  u = ad::silu(ad::add(ad::causal_conv(u, pv(p, layer_name(l, "conv.w"))), pv(p, layer_name(l, "conv.b"))));
  ad::Var delta = ad::softplus(linear(p, layer_name(l, "dt_up"), linear(p, layer_name(l, "dt_down"), u, false)));
  ad::Var bm = linear(p, layer_name(l, "b_proj"), u, false);
  ad::Var cm = linear(p, layer_name(l, "c_proj"), u, false);
  ad::Var a = ad::exp(pv(p, layer_name(l, "a_log")));
  ad::Var y = ad::selective_scan_zoh(delta, a, bm, cm, u);
  y = ad::add(y, ad::mul(u, pv(p, layer_name(l, "d_skip"))));
  y = ad::mul(y, ad::silu(z));
  return linear(p, layer_name(l, "mix_out"), y, false);
}

}  // namespace model_detail

/// Token embeddings [B, 2k+1, E] before any mixing block.
inline ad::Var embed_tokens(ad::Tape& tape, const ModelConfig& c, const ParamVars& p, const PromptBatch& b) {
  using namespace model_detail;
  const std::size_t T = 2 * b.k + 1;
  Tensor mx(Shape{T, 1}), my(Shape{T, 1});
  for (std::size_t t = 0; t < T; ++t) (t % 2 == 0 ? mx : my)[t] = 1.0;
  ad::Var xs = linear(p, "embed_x", tape.constant(b.x_tokens));
  ad::Var ys = linear(p, "embed_y", tape.constant(b.y_tokens));
  ad::Var tok = ad::add(ad::mul(xs, tape.constant(mx)), ad::mul(ys, tape.constant(my)));
  if (c.uses_attention()) tok = ad::add(tok, ad::slice(pv(p, "pos"), 0, 0, T));
  return tok;
}

/// Final hidden states [B, T, E] (after the closing layer norm).
inline ad::Var forward_hidden(ad::Tape& tape, const ModelConfig& c, const ParamVars& p, const PromptBatch& b) {
  using namespace model_detail;
  ad::Var x = embed_tokens(tape, c, p, b);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    ad::Var h = layer_norm(p, layer_name(l, "ln1"), x);
    ad::Var mixed = c.uses_attention() ? attention_mix(c, p, l, h)
                    : c.arch == Arch::hyena ? hyena_mix(c, p, l, h)
                                            : ssm_mix(c, p, l, h);
    x = ad::add(x, mixed);
    if (c.arch != Arch::ssm) {
      ad::Var h2 = layer_norm(p, layer_name(l, "ln2"), x);
      x = ad::add(x, linear(p, layer_name(l, "mlp2"), ad::gelu(linear(p, layer_name(l, "mlp1"), h2))));
    }
  }
  return layer_norm(p, "ln_f", x);
}

enum class ReadPositions { query_only, every_x };

/// Scalar predictions read through the linear head. query_only: [B, 1] from the
/// final token; every_x: [B, k+1] from every x-token position (0, 2, ..., 2k).
inline ad::Var forward_predictions(ad::Tape& tape, const ModelConfig& c, const ParamVars& p, const PromptBatch& b,
                                   ReadPositions positions) {
  ad::Var hidden = forward_hidden(tape, c, p, b);
  std::vector<std::size_t> idx;
  if (positions == ReadPositions::query_only) {
    idx.push_back(2 * b.k);
  } else {
    for (std::size_t t = 0; t <= b.k; ++t) idx.push_back(2 * t);
  }
  ad::Var sel = ad::gather(hidden, 1, std::move(idx));
  ad::Var out = model_detail::linear(p, "head", sel);
  return ad::reshape(out, {b.batch, out.shape()[1]});
}

/// Query predictions for prompts grouped by k; frozen parameters.
inline Vec predict_queries(const ModelConfig& c, const ModelParams& params, const std::vector<Prompt>& prompts) {
  if (prompts.empty()) return {};
  ad::Tape tape;
  ParamVars p = bind_params(tape, params, false);
  const PromptBatch b = make_prompt_batch(prompts, c);
  ad::Var y = forward_predictions(tape, c, p, b, ReadPositions::query_only);
  const auto& d = y.value().raw();
  return Vec(d.begin(), d.end());
}

inline double predict_query(const ModelConfig& c, const ModelParams& params, const Prompt& prompt) {
  return predict_queries(c, params, {prompt}).front();
}

/// Embedded token sequence [2k+1, E] of one prompt.
inline Tensor embed_prompt(const Prompt& prompt, const ModelParams& params, const ModelConfig& c) {
  if (prompt.meta.d > c.max_input_dim || (!prompt.xs.empty() && prompt.xs.front().size() > c.max_input_dim)) {
    throw ShapeError("prompt dimension exceeds max_input_dim " + std::to_string(c.max_input_dim));
  }
  ad::Tape tape;
  ParamVars p = bind_params(tape, params, false);
  const PromptBatch b = make_prompt_batch({prompt}, c);
  ad::Var tok = embed_tokens(tape, c, p, b);
  return tok.value().reshaped({2 * b.k + 1, c.embed_dim});
}

// ---------------------------------------------------------------------------
// Desk-scale presets

/// Desk-scale preset for one architecture: embed 64, max_input_dim 20,
/// max_seq_len 203 (room for 101-shot prompts).
inline ModelConfig model_preset(Arch arch);

inline std::map<Arch, std::size_t> preset_parameter_counts();

/// Throws unless every preset lies within 10% of the largest preset.
inline void check_preset_parity() {
  const auto counts = preset_parameter_counts();
  std::size_t lo = std::numeric_limits<std::size_t>::max(), hi = 0;
  for (const auto& [_, n] : counts) lo = std::min(lo, n), hi = std::max(hi, n);
  if (static_cast<double>(hi - lo) > 0.10 * static_cast<double>(hi)) {
    throw ConfigError("architecture presets violate parameter-budget parity: " + std::to_string(lo) + " vs " +
                      std::to_string(hi));
  }
}

namespace model_detail {
inline ModelConfig raw_preset(Arch arch) {
  ModelConfig c;
  c.arch = arch;
  c.embed_dim = 64;
  c.max_input_dim = 20;
  c.max_seq_len = 203;
  switch (arch) {
    case Arch::transformer:
    case Arch::transformer_blockwise:
      c.n_layers = 2;
      c.n_heads = 2;
      break;
    case Arch::hyena:
      c.n_layers = 2;
      c.n_heads = 0;
      break;
    case Arch::ssm:
      c.n_layers = 4;
      c.n_heads = 0;
      break;
  }
  return c;
}
}  // namespace model_detail

inline std::map<Arch, std::size_t> preset_parameter_counts() {
  std::map<Arch, std::size_t> m;
  for (auto a : {Arch::transformer, Arch::transformer_blockwise, Arch::hyena, Arch::ssm})
    m[a] = parameter_count(model_detail::raw_preset(a));
  return m;
}

inline ModelConfig model_preset(Arch arch) {
  check_preset_parity();
  ModelConfig c = model_detail::raw_preset(arch);
  c.validate();
  return c;
}

/// Full-size configuration (12 x 256, 8 heads; 24 layers for the SSM).
/// Constructible, not used by tests.
inline ModelConfig paper_scale_config(Arch arch) {
  ModelConfig c;
  c.arch = arch;
  c.embed_dim = 256;
  c.n_layers = arch == Arch::ssm ? 24 : 12;
  c.n_heads = (arch == Arch::hyena || arch == Arch::ssm) ? 0 : 8;
  c.max_seq_len = 203;
  c.max_input_dim = 20;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoint: "ICLCKPT\0", u32 version, u64 config length + config text,
// u64 tensor count, then per tensor: u32 name length, name, u32 rank,
// u64 dims..., f64 values. All little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

inline bool host_is_little_endian() {
  const std::uint16_t one = 1;
  unsigned char b;
  std::memcpy(&b, &one, 1);
  return b == 1;
}

template <typename T>
void put(std::ostream& os, T v) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if (!host_is_little_endian()) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw IoError("truncated checkpoint");
  if (!host_is_little_endian()) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

inline constexpr char kMagic[8] = {'I', 'C', 'L', 'C', 'K', 'P', 'T', '\0'};

}  // namespace ckpt_detail

struct Checkpoint {
  /// Full run configuration as key = value text (model keys included).
  std::string config_text;
  ModelParams params;
};

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  using namespace ckpt_detail;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, ck.config_text.size());
  os.write(ck.config_text.data(), static_cast<std::streamsize>(ck.config_text.size()));
  put<std::uint64_t>(os, ck.params.size());
  for (const auto& [name, t] : ck.params) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(os, d);
    for (double v : t.data()) put<double>(os, v);
  }
  if (!os) throw IoError("write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  using namespace ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw IoError("'" + path + "' is not a checkpoint");
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const auto clen = get<std::uint64_t>(is);
  ck.config_text.resize(clen);
  if (!is.read(ck.config_text.data(), static_cast<std::streamsize>(clen))) throw IoError("truncated checkpoint");
  const auto count = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto nlen = get<std::uint32_t>(is);
    std::string name(nlen, '\0');
    if (!is.read(name.data(), nlen)) throw IoError("truncated checkpoint");
    const auto rank = get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(is);
    Tensor t(shape);
    for (auto& v : t.data()) v = get<double>(is);
    ck.params.emplace(std::move(name), std::move(t));
  }
  return ck;
}

}  // namespace icl
