#pragma once

// Recurrent backbone with matrix-valued per-head states.
//
// Each block runs a time-mix (the state recurrence) and a channel-mix, both
// pre-normed and residual. Per head the state evolves as
//
//   S_t = S_{t-1} · W_t + v_t k_tᵀ,   W_t = diag(w_t) − κ̂_t (a_t ⊙ κ̂_t)ᵀ
//
// and is read out as o_t = S_t · r_t. Token-shift carries (the previous
// token's normalized activations) are part of the state so that resuming
// from a cached StateStack is bit-identical to a full pass.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "staterank/binary_io.hpp"
#include "staterank/error.hpp"
#include "staterank/instrumentation.hpp"
#include "staterank/tensor.hpp"

namespace staterank {

using Token = std::uint32_t;
using TokenSequence = std::vector<Token>;

enum class Precision : std::uint8_t { f64 = 0, f32 = 1 };

inline constexpr double kNormEps = 1e-5;

struct ModelConfig {
  std::uint32_t n_layers = 4;
  std::uint32_t d_model = 64;
  std::uint32_t n_heads = 4;
  std::uint32_t head_size = 16;
  std::uint32_t vocab_size = 257;  // bytes 0..255 plus EOS
  Token eos_id = 256;
  std::uint32_t k_eos = 4;
  std::uint32_t ffn_mult = 4;
  Precision precision = Precision::f64;

  std::uint32_t d_ffn() const noexcept { return ffn_mult * d_model; }

  void validate() const {
    if (n_layers < 1) throw UsageError("ModelConfig: n_layers must be >= 1");
    if (n_heads < 1 || head_size < 1) throw UsageError("ModelConfig: empty heads");
    if (d_model != n_heads * head_size) throw UsageError("ModelConfig: d_model must equal n_heads * head_size");
    if (k_eos < 1) throw UsageError("ModelConfig: k_eos must be >= 1");
    if (eos_id >= vocab_size) throw UsageError("ModelConfig: eos_id out of vocabulary");
    if (ffn_mult < 1) throw UsageError("ModelConfig: ffn_mult must be >= 1");
  }

  void serialize(ByteWriter& w) const {
    w.u32(n_layers);
    w.u32(d_model);
    w.u32(n_heads);
    w.u32(head_size);
    w.u32(vocab_size);
    w.u32(eos_id);
    w.u32(k_eos);
    w.u32(ffn_mult);
    w.u8(static_cast<std::uint8_t>(precision));
  }

  static ModelConfig deserialize(ByteReader& r) {
    ModelConfig c;
    c.n_layers = r.u32();
    c.d_model = r.u32();
    c.n_heads = r.u32();
    c.head_size = r.u32();
    c.vocab_size = r.u32();
    c.eos_id = r.u32();
    c.k_eos = r.u32();
    c.ffn_mult = r.u32();
    const auto p = r.u8();
    if (p > 1) throw FormatError("ModelConfig: unknown precision code");
    c.precision = static_cast<Precision>(p);
    try {
      c.validate();
    } catch (const UsageError& e) {
      throw FormatError(e.what());
    }
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Recurrent state of one block.
struct LayerState {
  std::vector<Matrix> wkv;  // one S×S matrix per head
  Vector tm_shift;
  Vector cm_shift;

  static LayerState zeros(std::uint32_t n_heads, std::uint32_t head_size, std::uint32_t d_model) {
    LayerState s;
    s.wkv.assign(n_heads, Matrix(head_size, head_size));
    s.tm_shift = Vector(d_model);
    s.cm_shift = Vector(d_model);
    return s;
  }

  std::size_t value_count() const noexcept {
    std::size_t n = tm_shift.dim() + cm_shift.dim();
    for (const auto& m : wkv) n += m.size();
    return n;
  }

  friend bool operator==(const LayerState&, const LayerState&) = default;
};

// Per-layer states of a sequence prefix. Covers all layers when produced by
// forward_sequence; a sub-stack when produced by extract_states.
struct StateStack {
  std::vector<std::uint32_t> layer_indices;
  std::vector<LayerState> states;
  std::uint64_t config_fingerprint = 0;
  std::uint64_t token_count = 0;
  std::uint32_t source_layers = 0;  // L of the producing model

  bool is_full_depth() const noexcept {
    if (layer_indices.size() != source_layers) return false;
    for (std::uint32_t i = 0; i < layer_indices.size(); ++i) {
      if (layer_indices[i] != i) return false;
    }
    return true;
  }

  std::size_t value_count() const noexcept {
    std::size_t n = 0;
    for (const auto& s : states) n += s.value_count();
    return n;
  }

  std::uint64_t checksum() const noexcept {
    Fnv1a64 h;
    for (const auto& s : states) {
      for (const auto& m : s.wkv) h.update(m.span());
      h.update(s.tm_shift.span());
      h.update(s.cm_shift.span());
    }
    return h.digest();
  }

  friend bool operator==(const StateStack&, const StateStack&) = default;
};

// Parameters of one block. Width, head count and head size are carried so the
// same block type serves the backbone and the reranker's internal mixers.
struct BlockWeights {
  std::uint32_t d_model = 0;
  std::uint32_t n_heads = 0;
  std::uint32_t head_size = 0;
  std::uint32_t d_ffn = 0;

  Vector ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  // Token-shift interpolation per projection: x + mu ⊙ (prev − x).
  Vector mu_r, mu_k, mu_v, mu_w, mu_kappa, mu_a;
  Matrix w_r, w_k, w_v, w_decay, w_kappa, w_a;
  Vector decay_bias, kappa_bias, a_bias;
  Vector gn_gain;
  Matrix w_out;
  Vector mu_c;
  Matrix w_up, w_down;

  static BlockWeights zeros(std::uint32_t d, std::uint32_t heads, std::uint32_t head_size, std::uint32_t d_ffn) {
    BlockWeights b;
    b.d_model = d;
    b.n_heads = heads;
    b.head_size = head_size;
    b.d_ffn = d_ffn;
    for (Vector* v : {&b.ln1_gain, &b.ln1_bias, &b.ln2_gain, &b.ln2_bias, &b.mu_r, &b.mu_k, &b.mu_v, &b.mu_w,
                      &b.mu_kappa, &b.mu_a, &b.decay_bias, &b.kappa_bias, &b.a_bias, &b.gn_gain, &b.mu_c}) {
      *v = Vector(d);
    }
    for (Matrix* m : {&b.w_r, &b.w_k, &b.w_v, &b.w_decay, &b.w_kappa, &b.w_a, &b.w_out}) *m = Matrix(d, d);
    b.w_up = Matrix(d_ffn, d);
    b.w_down = Matrix(d, d_ffn);
    return b;
  }

  // Visits every tensor in declaration order (the on-disk order).
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("ln1_gain", self.ln1_gain.span());
    f("ln1_bias", self.ln1_bias.span());
    f("ln2_gain", self.ln2_gain.span());
    f("ln2_bias", self.ln2_bias.span());
    f("mu_r", self.mu_r.span());
    f("mu_k", self.mu_k.span());
    f("mu_v", self.mu_v.span());
    f("mu_w", self.mu_w.span());
    f("mu_kappa", self.mu_kappa.span());
    f("mu_a", self.mu_a.span());
    f("w_r", self.w_r.span());
    f("w_k", self.w_k.span());
    f("w_v", self.w_v.span());
    f("w_decay", self.w_decay.span());
    f("w_kappa", self.w_kappa.span());
    f("w_a", self.w_a.span());
    f("decay_bias", self.decay_bias.span());
    f("kappa_bias", self.kappa_bias.span());
    f("a_bias", self.a_bias.span());
    f("gn_gain", self.gn_gain.span());
    f("w_out", self.w_out.span());
    f("mu_c", self.mu_c.span());
    f("w_up", self.w_up.span());
    f("w_down", self.w_down.span());
  }
  template <typename F>
  void for_each_tensor(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    visit(*this, f);
  }

  friend bool operator==(const BlockWeights&, const BlockWeights&) = default;
};

inline BlockWeights init_block(std::uint32_t d, std::uint32_t heads, std::uint32_t head_size, std::uint32_t d_ffn,
                               Rng& rng) {
  auto b = BlockWeights::zeros(d, heads, head_size, d_ffn);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  b.ln1_gain.fill(1.0);
  b.ln2_gain.fill(1.0);
  b.gn_gain.fill(1.0);
  for (Vector* v : {&b.mu_r, &b.mu_k, &b.mu_v, &b.mu_w, &b.mu_kappa, &b.mu_a, &b.mu_c}) {
    fill_uniform(v->span(), rng, 0.0, 1.0);
  }
  for (Matrix* m : {&b.w_r, &b.w_k, &b.w_v, &b.w_decay, &b.w_kappa, &b.w_a, &b.w_out, &b.w_up}) {
    fill_uniform(m->span(), rng, -scale, scale);
  }
  fill_uniform(b.w_down.span(), rng, -1.0 / std::sqrt(static_cast<double>(d_ffn)),
               1.0 / std::sqrt(static_cast<double>(d_ffn)));
  // Decay logits centred so that w starts in roughly (0.6, 0.95).
  fill_uniform(b.decay_bias.span(), rng, 0.5, 3.0);
  fill_uniform(b.kappa_bias.span(), rng, -1.0, 1.0);
  fill_uniform(b.a_bias.span(), rng, -1.0, 1.0);
  return b;
}

struct ModelWeights {
  ModelConfig config;
  Matrix embedding;  // vocab_size × d_model
  std::vector<BlockWeights> blocks;
  Vector ln_out_gain, ln_out_bias;

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("embedding", self.embedding.span());
    for (auto& b : self.blocks) b.for_each_tensor(f);
    f("ln_out_gain", self.ln_out_gain.span());
    f("ln_out_bias", self.ln_out_bias.span());
  }
  template <typename F>
  void for_each_tensor(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    visit(*this, f);
  }

  std::uint64_t checksum() const {
    Fnv1a64 h;
    for_each_tensor([&](std::string_view, std::span<const double> t) { h.update(t); });
    return h.digest();
  }

  // Identifies (config, weights); stamped into every StateStack and cache.
  std::uint64_t fingerprint() const {
    if (!fingerprint_) fingerprint_ = compute_fingerprint();
    return *fingerprint_;
  }
  // Call after mutating weights in place.
  void rehash() { fingerprint_ = compute_fingerprint(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](std::string_view, std::span<const double> t) { n += t.size(); });
    return n;
  }

 private:
  std::uint64_t compute_fingerprint() const {
    ByteWriter w;
    config.serialize(w);
    Fnv1a64 h;
    h.update(w.buffer().data(), w.size());
    h.update_u64(checksum());
    return h.digest();
  }
  mutable std::optional<std::uint64_t> fingerprint_;
};

namespace detail {
inline void round_to_float(std::span<double> values) {
  for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
}
}  // namespace detail

inline ModelWeights init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ModelWeights m;
  m.config = config;
  m.embedding = Matrix(config.vocab_size, config.d_model);
  fill_uniform(m.embedding.span(), rng, -1.0, 1.0);
  m.blocks.reserve(config.n_layers);
  for (std::uint32_t l = 0; l < config.n_layers; ++l) {
    m.blocks.push_back(init_block(config.d_model, config.n_heads, config.head_size, config.d_ffn(), rng));
  }
  m.ln_out_gain = Vector(config.d_model, 1.0);
  m.ln_out_bias = Vector(config.d_model);
  if (config.precision == Precision::f32) {
    m.for_each_tensor([](std::string_view, std::span<double> t) { detail::round_to_float(t); });
  }
  m.rehash();
  return m;
}

// --- per-step primitives -------------------------------------------------

// W = diag(w) − κ̂ (a ⊙ κ̂)ᵀ
inline Matrix transition_matrix(std::span<const double> w, std::span<const double> kappa_hat,
                                std::span<const double> a) {
  const std::size_t n = w.size();
  if (kappa_hat.size() != n || a.size() != n) throw ShapeError("transition_matrix: length mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    // w = 1 (no decay) is admitted; sigmoid never produces it in practice.
    if (!(w[i] > 0.0 && w[i] <= 1.0)) throw NumericError("transition_matrix: decay outside (0,1]");
    if (!(a[i] >= 0.0 && a[i] <= 1.0)) throw NumericError("transition_matrix: a outside [0,1]");
  }
  const double kn = norm(kappa_hat);
  if (!(std::abs(kn - 1.0) <= 1e-9)) throw NumericError("transition_matrix: kappa_hat is not unit-norm");
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out(i, j) = -kappa_hat[i] * (a[j] * kappa_hat[j]);
    out(i, i) += w[i];
  }
  return out;
}

// S_t = S_{t-1} · W + v kᵀ
inline Matrix state_update(const Matrix& prev, const Matrix& transition, std::span<const double> v,
                           std::span<const double> k) {
  if (prev.rows() != v.size() || prev.cols() != transition.rows() || transition.cols() != k.size()) {
    throw ShapeError("state_update: shape mismatch");
  }
  Matrix next = matmul(prev, transition);
  add_outer(next, v, k);
  detail::require_finite(next.span(), "state_update");
  return next;
}

inline Vector layer_norm(std::span<const double> x, const Vector& gain, const Vector& bias) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double rstd = 1.0 / std::sqrt(var + kNormEps);
  Vector out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
  return out;
}

namespace detail {
inline Vector token_shift(std::span<const double> x, const Vector& prev, const Vector& mu) {
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + mu[i] * (prev[i] - x[i]);
  return out;
}

inline void check_state_shape(const BlockWeights& bw, const LayerState& st, std::size_t x_dim) {
  if (x_dim != bw.d_model || st.wkv.size() != bw.n_heads || st.tm_shift.dim() != bw.d_model ||
      st.cm_shift.dim() != bw.d_model) {
    throw ShapeError("block step: state does not match block weights");
  }
  for (const auto& m : st.wkv) {
    if (m.rows() != bw.head_size || m.cols() != bw.head_size) throw ShapeError("block step: bad wkv shape");
  }
}
}  // namespace detail

// Time-mix: advances every head's matrix state by one token and returns the
// block's time-mix output. Updates `state` in place.
inline Vector time_mix_step(const BlockWeights& bw, LayerState& state, std::span<const double> x) {
  detail::check_state_shape(bw, state, x.size());
  const std::size_t S = bw.head_size;
  const Vector& prev = state.tm_shift;

  const Vector r = matvec(bw.w_r, detail::token_shift(x, prev, bw.mu_r));
  const Vector k = matvec(bw.w_k, detail::token_shift(x, prev, bw.mu_k));
  const Vector v = matvec(bw.w_v, detail::token_shift(x, prev, bw.mu_v));
  Vector decay = matvec(bw.w_decay, detail::token_shift(x, prev, bw.mu_w));
  Vector kappa = matvec(bw.w_kappa, detail::token_shift(x, prev, bw.mu_kappa));
  Vector a = matvec(bw.w_a, detail::token_shift(x, prev, bw.mu_a));
  for (std::size_t i = 0; i < x.size(); ++i) {
    decay[i] = sigmoid(decay[i] + bw.decay_bias[i]);
    kappa[i] += bw.kappa_bias[i];
    a[i] = sigmoid(a[i] + bw.a_bias[i]);
  }

  Vector mixed(x.size());
  for (std::size_t h = 0; h < bw.n_heads; ++h) {
    const std::size_t off = h * S;
    auto slice = [&](const Vector& vec) { return vec.span().subspan(off, S); };
    const Vector kappa_hat = l2_normalize(slice(kappa));
    const Matrix transition = transition_matrix(slice(decay), kappa_hat.span(), slice(a));
    state.wkv[h] = state_update(state.wkv[h], transition, slice(v), slice(k));
    const Vector o = matvec(state.wkv[h], slice(r));

    // Per-head group norm with learned gain.
    double mean = 0.0;
    for (std::size_t i = 0; i < S; ++i) mean += o[i];
    mean /= static_cast<double>(S);
    double var = 0.0;
    for (std::size_t i = 0; i < S; ++i) var += (o[i] - mean) * (o[i] - mean);
    var /= static_cast<double>(S);
    const double rstd = 1.0 / std::sqrt(var + kNormEps);
    for (std::size_t i = 0; i < S; ++i) mixed[off + i] = (o[i] - mean) * rstd * bw.gn_gain[off + i];
  }

  Vector y = matvec(bw.w_out, mixed);
  detail::require_finite(y.span(), "time_mix_step");
  std::copy(x.begin(), x.end(), state.tm_shift.begin());
  return y;
}

// Channel-mix: token-shifted squared-ReLU MLP. Updates `state.cm_shift`.
inline Vector channel_mix_step(const BlockWeights& bw, LayerState& state, std::span<const double> x) {
  detail::check_state_shape(bw, state, x.size());
  Vector hidden = matvec(bw.w_up, detail::token_shift(x, state.cm_shift, bw.mu_c));
  for (auto& h : hidden) {
    const double r = h > 0.0 ? h : 0.0;
    h = r * r;
  }
  Vector y = matvec(bw.w_down, hidden);
  detail::require_finite(y.span(), "channel_mix_step");
  std::copy(x.begin(), x.end(), state.cm_shift.begin());
  return y;
}

// One full pre-norm residual block applied to the residual stream `x`.
inline void block_step(const BlockWeights& bw, LayerState& state, Vector& x) {
  const Vector y_tm = time_mix_step(bw, state, layer_norm(x.span(), bw.ln1_gain, bw.ln1_bias).span());
  for (std::size_t i = 0; i < x.dim(); ++i) x[i] += y_tm[i];
  const Vector y_cm = channel_mix_step(bw, state, layer_norm(x.span(), bw.ln2_gain, bw.ln2_bias).span());
  for (std::size_t i = 0; i < x.dim(); ++i) x[i] += y_cm[i];
}

// --- sequence level -------------------------------------------------------

inline StateStack zero_state(const ModelWeights& weights) {
  const auto& c = weights.config;
  StateStack s;
  s.source_layers = c.n_layers;
  s.config_fingerprint = weights.fingerprint();
  for (std::uint32_t l = 0; l < c.n_layers; ++l) {
    s.layer_indices.push_back(l);
    s.states.push_back(LayerState::zeros(c.n_heads, c.head_size, c.d_model));
  }
  return s;
}

struct ForwardResult {
  std::vector<Vector> hidden;      // final-layer output per token
  std::vector<Vector> eos_hidden;  // hidden at positions holding eos_id
  StateStack final_state;
};

struct ForwardOptions {
  bool keep_hidden = true;
};

inline ForwardResult forward_sequence(const ModelWeights& weights, std::span<const Token> tokens,
                                      const StateStack* initial = nullptr, ForwardOptions options = {}) {
  const auto& c = weights.config;
  if (tokens.empty()) throw UsageError("forward_sequence: empty token list");

  ForwardResult out;
  if (initial) {
    if (initial->config_fingerprint != weights.fingerprint()) {
      throw DataError("forward_sequence: state fingerprint does not match model");
    }
    if (!initial->is_full_depth() || initial->source_layers != c.n_layers) {
      throw UsageError("forward_sequence: resume requires a full-depth state stack");
    }
    out.final_state = *initial;
    counters().resumed_forward_calls.fetch_add(1, std::memory_order_relaxed);
  } else {
    out.final_state = zero_state(weights);
    counters().fresh_forward_calls.fetch_add(1, std::memory_order_relaxed);
  }
  if (options.keep_hidden) out.hidden.reserve(tokens.size());

  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const Token tok = tokens[t];
    if (tok >= c.vocab_size) throw UsageError("forward_sequence: token id out of vocabulary");
    const auto row = weights.embedding.row(tok);
    Vector x(std::vector<double>(row.begin(), row.end()));
    for (std::uint32_t l = 0; l < c.n_layers; ++l) {
      try {
        block_step(weights.blocks[l], out.final_state.states[l], x);
      } catch (const NumericError& e) {
        throw NumericError("layer " + std::to_string(l) + ", token " + std::to_string(t) + ": " + e.what());
      }
    }
    Vector h = layer_norm(x.span(), weights.ln_out_gain, weights.ln_out_bias);
    if (tok == c.eos_id) out.eos_hidden.push_back(h);
    if (options.keep_hidden) out.hidden.push_back(std::move(h));
  }
  out.final_state.token_count += tokens.size();
  counters().recurrent_steps.fetch_add(tokens.size(), std::memory_order_relaxed);
  return out;
}

inline StateStack extract_states(const StateStack& stack, std::span<const std::uint32_t> layer_indices) {
  if (layer_indices.empty()) throw UsageError("extract_states: no layers requested");
  StateStack out;
  out.config_fingerprint = stack.config_fingerprint;
  out.token_count = stack.token_count;
  out.source_layers = stack.source_layers;
  for (std::size_t i = 0; i < layer_indices.size(); ++i) {
    const auto want = layer_indices[i];
    if (i > 0 && want <= layer_indices[i - 1]) throw UsageError("extract_states: indices must be strictly increasing");
    const auto it = std::find(stack.layer_indices.begin(), stack.layer_indices.end(), want);
    if (it == stack.layer_indices.end()) {
      throw NotFoundError("extract_states: layer " + std::to_string(want) + " not in stack");
    }
    out.layer_indices.push_back(want);
    out.states.push_back(stack.states[static_cast<std::size_t>(it - stack.layer_indices.begin())]);
  }
  return out;
}

// --- weight containers ----------------------------------------------------

namespace detail {
inline void write_values(ByteWriter& w, std::span<const double> values, Precision p) {
  for (double v : values) {
    if (p == Precision::f64) {
      w.f64(v);
    } else {
      w.f32(static_cast<float>(v));
    }
  }
}

inline void read_values(ByteReader& r, std::span<double> values, Precision p) {
  for (auto& v : values) v = p == Precision::f64 ? r.f64() : static_cast<double>(r.f32());
}

inline void check_magic(ByteReader& r, std::string_view magic, const std::string& what) {
  if (r.string(4) != magic) throw FormatError(what + ": bad magic");
}

inline constexpr std::uint16_t kWeightFormatVersion = 1;
}  // namespace detail

inline std::vector<std::uint8_t> serialize_model(const ModelWeights& m) {
  ByteWriter w;
  w.bytes("SRWT");
  w.u16(detail::kWeightFormatVersion);
  m.config.serialize(w);
  m.for_each_tensor(
      [&](std::string_view, std::span<const double> t) { detail::write_values(w, t, m.config.precision); });
  w.seal_crc();
  return w.buffer();
}

inline ModelWeights deserialize_model(std::span<const std::uint8_t> bytes) {
  const auto payload = verify_crc(bytes, "model weights");
  ByteReader r(payload, "model weights");
  detail::check_magic(r, "SRWT", "model weights");
  if (r.u16() != detail::kWeightFormatVersion) throw FormatError("model weights: unsupported version");
  ModelWeights m;
  m.config = ModelConfig::deserialize(r);
  const auto& c = m.config;
  m.embedding = Matrix(c.vocab_size, c.d_model);
  m.blocks.assign(c.n_layers, BlockWeights::zeros(c.d_model, c.n_heads, c.head_size, c.d_ffn()));
  m.ln_out_gain = Vector(c.d_model);
  m.ln_out_bias = Vector(c.d_model);
  m.for_each_tensor([&](std::string_view, std::span<double> t) { detail::read_values(r, t, c.precision); });
  if (r.remaining() != 0) throw FormatError("model weights: trailing bytes");
  m.rehash();
  return m;
}

inline void save_model(const std::filesystem::path& path, const ModelWeights& m) {
  write_file_atomic(path, serialize_model(m));
}

inline ModelWeights load_model(const std::filesystem::path& path) { return deserialize_model(read_file_bytes(path)); }

}  // namespace staterank
