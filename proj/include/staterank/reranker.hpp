#pragma once

// State-based reranker. Each selected layer's matrix state is flattened and
// projected to one d_r-wide token; the layer tokens, in depth order, run
// through a few recurrent blocks; the final-normed outputs are mean-pooled
// and a linear head gives the relevance logit.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "staterank/embedder.hpp"
#include "staterank/state_store.hpp"

namespace staterank {

struct RerankerConfig {
  ModelConfig source;
  std::uint64_t source_fingerprint = 0;
  std::vector<std::uint32_t> layer_indices;
  std::uint32_t d_r = 32;
  std::uint32_t n_heads = 2;
  std::uint32_t head_size = 16;
  std::uint32_t n_mix_blocks = 1;
  std::uint32_t ffn_mult = 2;

  std::size_t flat_size() const noexcept { return std::size_t{source.n_heads} * source.head_size * source.head_size; }

  void validate() const {
    source.validate();
    detail::check_layer_list(source.n_layers, layer_indices);
    if (d_r < 1 || n_heads < 1 || head_size < 1) throw UsageError("RerankerConfig: empty width");
    if (d_r != n_heads * head_size) throw UsageError("RerankerConfig: d_r must equal n_heads * head_size");
    if (ffn_mult < 1) throw UsageError("RerankerConfig: ffn_mult must be >= 1");
  }

  friend bool operator==(const RerankerConfig&, const RerankerConfig&) = default;
};

struct RerankerShape {
  std::uint32_t d_r = 32;
  std::uint32_t n_heads = 2;
  std::uint32_t head_size = 16;
  std::uint32_t n_mix_blocks = 1;
  std::uint32_t ffn_mult = 2;
};

inline RerankerConfig make_reranker_config(const ModelWeights& model, const LayerSelection& selection,
                                           RerankerShape shape = {}) {
  RerankerConfig c{model.config, model.fingerprint(), select_layers(model.config.n_layers, selection),
                   shape.d_r,    shape.n_heads,       shape.head_size,
                   shape.n_mix_blocks, shape.ffn_mult};
  c.validate();
  return c;
}

struct RerankerWeights {
  RerankerConfig config;
  std::vector<Matrix> proj;  // per selected layer: d_r × (H·S·S)
  std::vector<Vector> proj_bias;
  std::vector<BlockWeights> blocks;
  Vector ln_out_gain, ln_out_bias;
  Vector head_w;
  Vector head_b;  // one entry

  static RerankerWeights zeros(const RerankerConfig& c) {
    RerankerWeights w;
    w.config = c;
    for (std::size_t i = 0; i < c.layer_indices.size(); ++i) {
      w.proj.emplace_back(c.d_r, c.flat_size());
      w.proj_bias.emplace_back(c.d_r);
    }
    for (std::uint32_t b = 0; b < c.n_mix_blocks; ++b) {
      w.blocks.push_back(BlockWeights::zeros(c.d_r, c.n_heads, c.head_size, c.ffn_mult * c.d_r));
    }
    w.ln_out_gain = Vector(c.d_r);
    w.ln_out_bias = Vector(c.d_r);
    w.head_w = Vector(c.d_r);
    w.head_b = Vector(1);
    return w;
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    for (std::size_t i = 0; i < self.proj.size(); ++i) {
      f("proj", self.proj[i].span());
      f("proj_bias", self.proj_bias[i].span());
    }
    for (auto& b : self.blocks) b.for_each_tensor(f);
    f("ln_out_gain", self.ln_out_gain.span());
    f("ln_out_bias", self.ln_out_bias.span());
    f("head_w", self.head_w.span());
    f("head_b", self.head_b.span());
  }
  template <typename F>
  void for_each_tensor(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    visit(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](std::string_view, std::span<const double> t) { n += t.size(); });
    return n;
  }

  std::uint64_t checksum() const {
    Fnv1a64 h;
    for_each_tensor([&](std::string_view, std::span<const double> t) { h.update(t); });
    return h.digest();
  }

  friend bool operator==(const RerankerWeights&, const RerankerWeights&) = default;
};

inline RerankerWeights init_reranker(const RerankerConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed);
  auto w = RerankerWeights::zeros(c);
  const double ps = 1.0 / std::sqrt(static_cast<double>(c.flat_size()));
  for (auto& p : w.proj) fill_uniform(p.span(), rng, -ps, ps);
  for (auto& b : w.blocks) b = init_block(c.d_r, c.n_heads, c.head_size, c.ffn_mult * c.d_r, rng);
  w.ln_out_gain.fill(1.0);
  const double hs = 1.0 / std::sqrt(static_cast<double>(c.d_r));
  fill_uniform(w.head_w.span(), rng, -hs, hs);
  return w;
}

namespace detail {

inline void check_reranker_input(const RerankerConfig& c, const StateStack& stack) {
  if (stack.layer_indices != c.layer_indices || stack.states.size() != c.layer_indices.size()) {
    throw UsageError("reranker: state layers do not match the reranker's selected layers");
  }
  if (stack.config_fingerprint != c.source_fingerprint) {
    throw DataError("reranker: state was produced by a different backbone (fingerprint mismatch)");
  }
  for (const auto& ls : stack.states) {
    if (ls.wkv.size() != c.source.n_heads) throw ShapeError("reranker: head count mismatch");
    for (const auto& m : ls.wkv) {
      if (m.rows() != c.source.head_size || m.cols() != c.source.head_size) {
        throw ShapeError("reranker: head size mismatch");
      }
    }
  }
}

inline Vector flatten_heads(const LayerState& ls) {
  std::vector<double> flat;
  for (const auto& m : ls.wkv) flat.insert(flat.end(), m.span().begin(), m.span().end());
  return Vector(std::move(flat));
}

inline Vector layer_token(const RerankerWeights& rw, std::size_t i, const LayerState& ls) {
  Vector x = matvec(rw.proj[i], flatten_heads(ls));
  for (std::size_t j = 0; j < x.dim(); ++j) x[j] += rw.proj_bias[i][j];
  return x;
}

inline Vector mean_of(const std::vector<Vector>& xs) {
  Vector m(xs.front().dim());
  for (const auto& x : xs)
    for (std::size_t i = 0; i < x.dim(); ++i) m[i] += x[i];
  for (auto& v : m) v /= static_cast<double>(xs.size());
  return m;
}

inline double head_logit(const RerankerWeights& rw, const Vector& pooled) {
  return dot(rw.head_w, pooled) + rw.head_b[0];
}

}  // namespace detail

inline double reranker_logit(const RerankerWeights& rw, const StateStack& stack) {
  detail::check_reranker_input(rw.config, stack);
  const auto& c = rw.config;
  std::vector<Vector> seq;
  for (std::size_t i = 0; i < stack.states.size(); ++i) seq.push_back(detail::layer_token(rw, i, stack.states[i]));
  for (const auto& bw : rw.blocks) {
    auto state = LayerState::zeros(c.n_heads, c.head_size, c.d_r);
    for (auto& x : seq) block_step(bw, state, x);
  }
  for (auto& x : seq) x = layer_norm(x.span(), rw.ln_out_gain, rw.ln_out_bias);
  const double z = detail::head_logit(rw, detail::mean_of(seq));
  if (!std::isfinite(z)) throw NumericError("reranker: non-finite logit");
  return z;
}

inline double score_from_state(const RerankerWeights& rw, const StateStack& stack) {
  return sigmoid(reranker_logit(rw, stack));
}

enum class RerankMode { offline, online };

struct RerankResult {
  std::string doc_id;
  double probability = 0.0;
  RerankMode mode = RerankMode::offline;
};

// Query tokens are fed as-is (no EOS); the document side is the same
// EOS-terminated sequence the cache was built from.
inline RerankResult score_offline(const ModelWeights& model, const CacheEntry& cache, const TokenSequence& query,
                                  const RerankerWeights& rw) {
  if (query.empty()) throw UsageError("score_offline: empty query");
  if (!cache.state.is_full_depth()) {
    throw UsageError("score_offline: cached state must cover every layer to resume the backbone");
  }
  if (rw.config.source_fingerprint != model.fingerprint()) {
    throw DataError("score_offline: reranker was trained against a different backbone");
  }
  auto fwd = forward_sequence(model, query, &cache.state, {.keep_hidden = false});
  const auto selected = extract_states(fwd.final_state, rw.config.layer_indices);
  return {cache.doc_id, score_from_state(rw, selected), RerankMode::offline};
}

inline RerankResult score_online(const ModelWeights& model, const TokenSequence& doc, const TokenSequence& query,
                                 const RerankerWeights& rw, std::string doc_id = {}) {
  if (doc.empty() || query.empty()) throw UsageError("score_online: document and query must be non-empty");
  if (rw.config.source_fingerprint != model.fingerprint()) {
    throw DataError("score_online: reranker was trained against a different backbone");
  }
  auto joint = insert_eos(doc, model.config.k_eos, model.config.eos_id);
  joint.insert(joint.end(), query.begin(), query.end());
  auto fwd = forward_sequence(model, joint, nullptr, {.keep_hidden = false});
  const auto selected = extract_states(fwd.final_state, rw.config.layer_indices);
  return {std::move(doc_id), score_from_state(rw, selected), RerankMode::online};
}

// --- loss ------------------------------------------------------------------

inline constexpr double kBceClamp = 1e-12;

inline double bce_loss(double y, double s) {
  s = std::clamp(s, kBceClamp, 1.0 - kBceClamp);
  return -(y * std::log(s) + (1.0 - y) * std::log(1.0 - s));
}

inline double bce_grad_logit(double y, double z) { return sigmoid(z) - y; }

// --- reverse mode ------------------------------------------------------------

namespace detail {

struct NormTape {
  Vector xhat;
  double rstd = 0.0;
};

// Same arithmetic as layer_norm, keeping what the backward pass needs.
inline Vector norm_forward(std::span<const double> x, const Vector& gain, const Vector& bias, NormTape& t) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  t.rstd = 1.0 / std::sqrt(var + kNormEps);
  t.xhat = Vector(n);
  Vector out(n);
  for (std::size_t i = 0; i < n; ++i) {
    t.xhat[i] = (x[i] - mean) * t.rstd;
    out[i] = t.xhat[i] * gain[i] + bias[i];
  }
  return out;
}

// dx for normalized xhat given dxhat: rstd·(dxhat − mean(dxhat) − xhat·mean(dxhat ⊙ xhat))
inline void norm_input_grad(std::span<const double> dxhat, std::span<const double> xhat, double rstd,
                            std::span<double> dx) {
  const std::size_t n = dxhat.size();
  double m1 = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    m1 += dxhat[i];
    m2 += dxhat[i] * xhat[i];
  }
  m1 /= static_cast<double>(n);
  m2 /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) dx[i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
}

inline Vector norm_backward(const Vector& dout, const Vector& gain, const NormTape& t, Vector& dgain, Vector& dbias) {
  Vector dxhat(dout.dim());
  for (std::size_t i = 0; i < dout.dim(); ++i) {
    dgain[i] += dout[i] * t.xhat[i];
    dbias[i] += dout[i];
    dxhat[i] = dout[i] * gain[i];
  }
  Vector dx(dout.dim());
  norm_input_grad(dxhat.span(), t.xhat.span(), t.rstd, dx.span());
  return dx;
}

enum Proj { kR, kK, kV, kW, kKappa, kA, kProjCount };

inline const Vector& shift_mu(const BlockWeights& bw, int p) {
  const Vector* mus[] = {&bw.mu_r, &bw.mu_k, &bw.mu_v, &bw.mu_w, &bw.mu_kappa, &bw.mu_a};
  return *mus[p];
}
inline Vector& shift_mu(BlockWeights& bw, int p) {
  Vector* mus[] = {&bw.mu_r, &bw.mu_k, &bw.mu_v, &bw.mu_w, &bw.mu_kappa, &bw.mu_a};
  return *mus[p];
}
inline const Matrix& proj_matrix(const BlockWeights& bw, int p) {
  const Matrix* ms[] = {&bw.w_r, &bw.w_k, &bw.w_v, &bw.w_decay, &bw.w_kappa, &bw.w_a};
  return *ms[p];
}
inline Matrix& proj_matrix(BlockWeights& bw, int p) {
  Matrix* ms[] = {&bw.w_r, &bw.w_k, &bw.w_v, &bw.w_decay, &bw.w_kappa, &bw.w_a};
  return *ms[p];
}

// Everything one block step computes for one token.
struct StepTape {
  NormTape ln1, ln2;
  Vector u, u_prev;  // normed time-mix input and its predecessor
  Vector xs[kProjCount];
  Vector r, k, v, w, a, kappa_hat;  // w and a after the sigmoid
  std::vector<double> kappa_norm;   // per head
  std::vector<Matrix> s_prev, transition, s_new;
  NormTape gn;  // per-head group norm, xhat over all heads
  std::vector<double> gn_rstd;
  Vector mixed;
  Vector c, c_prev, xc, up_pre, h;
};

inline StepTape block_step_taped(const BlockWeights& bw, LayerState& state, Vector& x) {
  StepTape t;
  const std::size_t d = bw.d_model, S = bw.head_size;

  t.u = norm_forward(x.span(), bw.ln1_gain, bw.ln1_bias, t.ln1);
  t.u_prev = state.tm_shift;
  for (int p = 0; p < kProjCount; ++p) t.xs[p] = token_shift(t.u.span(), t.u_prev, shift_mu(bw, p));
  t.r = matvec(bw.w_r, t.xs[kR]);
  t.k = matvec(bw.w_k, t.xs[kK]);
  t.v = matvec(bw.w_v, t.xs[kV]);
  t.w = matvec(bw.w_decay, t.xs[kW]);
  Vector kappa = matvec(bw.w_kappa, t.xs[kKappa]);
  t.a = matvec(bw.w_a, t.xs[kA]);
  for (std::size_t i = 0; i < d; ++i) {
    t.w[i] = sigmoid(t.w[i] + bw.decay_bias[i]);
    kappa[i] += bw.kappa_bias[i];
    t.a[i] = sigmoid(t.a[i] + bw.a_bias[i]);
  }

  t.kappa_hat = Vector(d);
  t.mixed = Vector(d);
  t.gn.xhat = Vector(d);
  for (std::size_t hd = 0; hd < bw.n_heads; ++hd) {
    const std::size_t off = hd * S;
    auto slice = [&](const Vector& vec) { return vec.span().subspan(off, S); };
    const Vector kh = staterank::l2_normalize(slice(kappa));
    std::copy(kh.begin(), kh.end(), t.kappa_hat.begin() + static_cast<std::ptrdiff_t>(off));
    t.kappa_norm.push_back(staterank::norm(slice(kappa)));
    t.transition.push_back(transition_matrix(slice(t.w), kh.span(), slice(t.a)));
    t.s_prev.push_back(state.wkv[hd]);
    state.wkv[hd] = state_update(state.wkv[hd], t.transition.back(), slice(t.v), slice(t.k));
    t.s_new.push_back(state.wkv[hd]);
    const Vector o = matvec(state.wkv[hd], slice(t.r));

    double mean = 0.0;
    for (std::size_t i = 0; i < S; ++i) mean += o[i];
    mean /= static_cast<double>(S);
    double var = 0.0;
    for (std::size_t i = 0; i < S; ++i) var += (o[i] - mean) * (o[i] - mean);
    var /= static_cast<double>(S);
    const double rstd = 1.0 / std::sqrt(var + kNormEps);
    t.gn_rstd.push_back(rstd);
    for (std::size_t i = 0; i < S; ++i) {
      t.gn.xhat[off + i] = (o[i] - mean) * rstd;
      t.mixed[off + i] = t.gn.xhat[off + i] * bw.gn_gain[off + i];
    }
  }
  const Vector y = matvec(bw.w_out, t.mixed);
  require_finite(y.span(), "time_mix_step");
  state.tm_shift = t.u;
  for (std::size_t i = 0; i < d; ++i) x[i] += y[i];

  t.c = norm_forward(x.span(), bw.ln2_gain, bw.ln2_bias, t.ln2);
  t.c_prev = state.cm_shift;
  t.xc = token_shift(t.c.span(), t.c_prev, bw.mu_c);
  t.up_pre = matvec(bw.w_up, t.xc);
  t.h = Vector(t.up_pre.dim());
  for (std::size_t i = 0; i < t.h.dim(); ++i) {
    const double r = t.up_pre[i] > 0.0 ? t.up_pre[i] : 0.0;
    t.h[i] = r * r;
  }
  const Vector y2 = matvec(bw.w_down, t.h);
  require_finite(y2.span(), "channel_mix_step");
  state.cm_shift = t.c;
  for (std::size_t i = 0; i < d; ++i) x[i] += y2[i];
  return t;
}

// Backpropagates through one block over a whole token sequence (BPTT).
// dx holds d(loss)/d(block output) per token on entry and
// d(loss)/d(block input) on exit. Parameter gradients accumulate into g.
inline void block_backward(const BlockWeights& bw, const std::vector<StepTape>& tape, std::vector<Vector>& dx,
                           BlockWeights& g) {
  const std::size_t d = bw.d_model, S = bw.head_size, H = bw.n_heads;
  std::vector<Matrix> dS(H, Matrix(S, S));
  Vector du_next(d), dc_next(d);

  for (std::size_t step = tape.size(); step-- > 0;) {
    const StepTape& t = tape[step];
    const Vector& gout = dx[step];

    // channel mix
    add_outer(g.w_down, gout.span(), t.h.span());
    Vector dup = matvec_transposed(bw.w_down, gout);
    for (std::size_t i = 0; i < dup.dim(); ++i) dup[i] = t.up_pre[i] > 0.0 ? dup[i] * 2.0 * t.up_pre[i] : 0.0;
    add_outer(g.w_up, dup.span(), t.xc.span());
    const Vector dxc = matvec_transposed(bw.w_up, dup);
    Vector dc = dc_next;
    for (std::size_t i = 0; i < d; ++i) {
      g.mu_c[i] += dxc[i] * (t.c_prev[i] - t.c[i]);
      dc[i] += dxc[i] * (1.0 - bw.mu_c[i]);
      dc_next[i] = dxc[i] * bw.mu_c[i];
    }
    Vector dmid = norm_backward(dc, bw.ln2_gain, t.ln2, g.ln2_gain, g.ln2_bias);
    for (std::size_t i = 0; i < d; ++i) dmid[i] += gout[i];

    // time mix: output projection and group norm
    add_outer(g.w_out, dmid.span(), t.mixed.span());
    const Vector dmixed = matvec_transposed(bw.w_out, dmid);
    Vector dnhat(d);
    for (std::size_t i = 0; i < d; ++i) {
      g.gn_gain[i] += dmixed[i] * t.gn.xhat[i];
      dnhat[i] = dmixed[i] * bw.gn_gain[i];
    }

    Vector dpre[kProjCount];
    for (auto& v : dpre) v = Vector(d);
    for (std::size_t hd = 0; hd < H; ++hd) {
      const std::size_t off = hd * S;
      auto slice = [&](const Vector& vec) { return vec.span().subspan(off, S); };
      Vector d_o(S);
      norm_input_grad(slice(dnhat), slice(t.gn.xhat), t.gn_rstd[hd], d_o.span());

      // o = S_t r
      Matrix dSt = dS[hd];
      add_outer(dSt, d_o.span(), slice(t.r));
      const Vector dr = matvec_transposed(t.s_new[hd], d_o);
      // S_t = S_{t-1} W + v kᵀ
      const Vector dv = matvec(dSt, slice(t.k));
      const Vector dk = matvec_transposed(dSt, slice(t.v));
      Matrix dW(S, S);
      const Matrix& Sp = t.s_prev[hd];
      for (std::size_t p = 0; p < S; ++p)
        for (std::size_t i = 0; i < S; ++i) {
          const double sp = Sp(p, i);
          if (sp == 0.0) continue;
          for (std::size_t j = 0; j < S; ++j) dW(i, j) += sp * dSt(p, j);
        }
      Matrix carry(S, S);
      const Matrix& W = t.transition[hd];
      for (std::size_t p = 0; p < S; ++p)
        for (std::size_t i = 0; i < S; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < S; ++j) acc += dSt(p, j) * W(i, j);
          carry(p, i) = acc;
        }
      dS[hd] = std::move(carry);

      // W = diag(w) − κ̂ (a ⊙ κ̂)ᵀ
      const auto kh = slice(t.kappa_hat);
      const auto av = slice(t.a);
      const auto wv = slice(t.w);
      Vector ak(S);
      for (std::size_t j = 0; j < S; ++j) ak[j] = av[j] * kh[j];
      const Vector q = matvec(dW, ak);
      const Vector pvec = matvec_transposed(dW, Vector(std::vector<double>(kh.begin(), kh.end())));
      Vector dkh(S);
      for (std::size_t m = 0; m < S; ++m) dkh[m] = -q[m] - av[m] * pvec[m];
      // κ̂ = κ / ‖κ‖
      const double proj = staterank::dot(kh, dkh.span());
      for (std::size_t i = 0; i < S; ++i) {
        const std::size_t c = off + i;
        dpre[kR][c] = dr[i];
        dpre[kK][c] = dk[i];
        dpre[kV][c] = dv[i];
        dpre[kW][c] = dW(i, i) * wv[i] * (1.0 - wv[i]);
        dpre[kKappa][c] = (dkh[i] - kh[i] * proj) / t.kappa_norm[hd];
        dpre[kA][c] = -kh[i] * pvec[i] * av[i] * (1.0 - av[i]);
      }
    }
    for (std::size_t i = 0; i < d; ++i) {
      g.decay_bias[i] += dpre[kW][i];
      g.kappa_bias[i] += dpre[kKappa][i];
      g.a_bias[i] += dpre[kA][i];
    }

    // projections and token shift
    Vector du = du_next;
    Vector du_prev(d);
    for (int p = 0; p < kProjCount; ++p) {
      add_outer(proj_matrix(g, p), dpre[p].span(), t.xs[p].span());
      const Vector dxs = matvec_transposed(proj_matrix(bw, p), dpre[p]);
      const Vector& mu = shift_mu(bw, p);
      Vector& gmu = shift_mu(g, p);
      for (std::size_t i = 0; i < d; ++i) {
        gmu[i] += dxs[i] * (t.u_prev[i] - t.u[i]);
        du[i] += dxs[i] * (1.0 - mu[i]);
        du_prev[i] += dxs[i] * mu[i];
      }
    }
    du_next = du_prev;
    Vector din = norm_backward(du, bw.ln1_gain, t.ln1, g.ln1_gain, g.ln1_bias);
    for (std::size_t i = 0; i < d; ++i) din[i] += dmid[i];
    dx[step] = std::move(din);
  }
}

struct RerankTape {
  std::vector<Vector> flat;
  std::vector<std::vector<StepTape>> blocks;
  std::vector<NormTape> ln_out;
  Vector pooled;
  double logit = 0.0;
};

inline RerankTape reranker_forward_taped(const RerankerWeights& rw, const StateStack& stack) {
  check_reranker_input(rw.config, stack);
  const auto& c = rw.config;
  RerankTape tape;
  std::vector<Vector> seq;
  for (std::size_t i = 0; i < stack.states.size(); ++i) {
    tape.flat.push_back(flatten_heads(stack.states[i]));
    Vector x = matvec(rw.proj[i], tape.flat.back());
    for (std::size_t j = 0; j < x.dim(); ++j) x[j] += rw.proj_bias[i][j];
    seq.push_back(std::move(x));
  }
  for (const auto& bw : rw.blocks) {
    auto state = LayerState::zeros(c.n_heads, c.head_size, c.d_r);
    auto& steps = tape.blocks.emplace_back();
    for (auto& x : seq) steps.push_back(block_step_taped(bw, state, x));
  }
  tape.ln_out.resize(seq.size());
  for (std::size_t t = 0; t < seq.size(); ++t) {
    seq[t] = norm_forward(seq[t].span(), rw.ln_out_gain, rw.ln_out_bias, tape.ln_out[t]);
  }
  tape.pooled = mean_of(seq);
  tape.logit = head_logit(rw, tape.pooled);
  if (!std::isfinite(tape.logit)) throw NumericError("reranker: non-finite logit");
  return tape;
}

// Accumulates d(loss)/d(params) given d(loss)/d(logit).
inline void reranker_backward(const RerankerWeights& rw, const RerankTape& tape, double dlogit, RerankerWeights& g) {
  const std::size_t T = tape.flat.size();
  for (std::size_t i = 0; i < rw.head_w.dim(); ++i) g.head_w[i] += dlogit * tape.pooled[i];
  g.head_b[0] += dlogit;
  std::vector<Vector> dx(T);
  for (std::size_t t = 0; t < T; ++t) {
    Vector dz(rw.head_w.dim());
    for (std::size_t i = 0; i < dz.dim(); ++i) dz[i] = dlogit * rw.head_w[i] / static_cast<double>(T);
    dx[t] = norm_backward(dz, rw.ln_out_gain, tape.ln_out[t], g.ln_out_gain, g.ln_out_bias);
  }
  for (std::size_t b = rw.blocks.size(); b-- > 0;) block_backward(rw.blocks[b], tape.blocks[b], dx, g.blocks[b]);
  for (std::size_t t = 0; t < T; ++t) {
    add_outer(g.proj[t], dx[t].span(), tape.flat[t].span());
    for (std::size_t i = 0; i < dx[t].dim(); ++i) g.proj_bias[t][i] += dx[t][i];
  }
}

}  // namespace detail

struct RerankExample {
  StateStack state;  // already restricted to the reranker's layers
  int label = 0;
};

// Mean BCE over `batch`; when grad is non-null, accumulates the gradient of
// that mean into it.
inline double reranker_loss_and_grad(const RerankerWeights& rw, const std::vector<const RerankExample*>& batch,
                                     RerankerWeights* grad) {
  if (batch.empty()) throw UsageError("reranker_loss_and_grad: empty batch");
  double loss = 0.0;
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const auto* ex : batch) {
    const auto tape = detail::reranker_forward_taped(rw, ex->state);
    const double y = ex->label;
    loss += bce_loss(y, sigmoid(tape.logit));
    if (grad) detail::reranker_backward(rw, tape, bce_grad_logit(y, tape.logit) * scale, *grad);
  }
  return loss * scale;
}

struct RerankTrainOptions {
  double lr = 0.05;
  std::size_t steps = 500;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
};

struct RerankTrainResult {
  RerankerWeights weights;
  std::vector<double> losses;  // minibatch loss before each update
};

// Minibatch SGD on reranker parameters only; the backbone that produced the
// states stays frozen. Minibatches come from a seeded reshuffle per epoch.
inline RerankTrainResult train_reranker(const ModelWeights& model, RerankerWeights rw,
                                        const std::vector<RerankExample>& examples, const RerankTrainOptions& opt) {
  if (examples.size() < 2) throw UsageError("train_reranker: need at least 2 examples");
  bool pos = false, neg = false;
  for (const auto& e : examples) {
    if (e.label != 0 && e.label != 1) throw DataError("train_reranker: labels must be 0 or 1");
    (e.label ? pos : neg) = true;
  }
  if (!pos || !neg) throw UsageError("train_reranker: both labels must be present");
  if (rw.config.source_fingerprint != model.fingerprint()) {
    throw DataError("train_reranker: reranker config does not match the backbone");
  }
  if (opt.batch_size < 1) throw UsageError("train_reranker: batch_size must be >= 1");

  Rng rng(opt.seed);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  const std::size_t bs = std::min(opt.batch_size, examples.size());

  RerankTrainResult result{std::move(rw), {}};
  result.losses.reserve(opt.steps);
  for (std::size_t step = 0; step < opt.steps; ++step) {
    std::vector<const RerankExample*> batch;
    while (batch.size() < bs) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(&examples[order[cursor++]]);
    }
    auto grad = RerankerWeights::zeros(result.weights.config);
    const double loss = reranker_loss_and_grad(result.weights, batch, &grad);
    if (!std::isfinite(loss)) throw NumericError("train_reranker: loss diverged at step " + std::to_string(step));
    result.losses.push_back(loss);
    if (opt.lr == 0.0) continue;
    std::vector<std::span<double>> params, grads;
    result.weights.for_each_tensor([&](std::string_view, std::span<double> t) { params.push_back(t); });
    grad.for_each_tensor([&](std::string_view, std::span<double> t) { grads.push_back(t); });
    for (std::size_t i = 0; i < params.size(); ++i)
      for (std::size_t j = 0; j < params[i].size(); ++j) params[i][j] -= opt.lr * grads[i][j];
  }
  return result;
}

// --- file --------------------------------------------------------------------

inline std::vector<std::uint8_t> serialize_reranker(const RerankerWeights& rw) {
  const auto& c = rw.config;
  ByteWriter w;
  w.bytes("SRRW");
  w.u16(detail::kWeightFormatVersion);
  c.source.serialize(w);
  w.u64(c.source_fingerprint);
  w.u16(static_cast<std::uint16_t>(c.layer_indices.size()));
  for (auto i : c.layer_indices) w.u16(static_cast<std::uint16_t>(i));
  for (auto v : {c.d_r, c.n_heads, c.head_size, c.n_mix_blocks, c.ffn_mult}) w.u32(v);
  rw.for_each_tensor([&](std::string_view, std::span<const double> t) { detail::write_values(w, t, Precision::f64); });
  w.seal_crc();
  return w.buffer();
}

inline RerankerWeights deserialize_reranker(std::span<const std::uint8_t> bytes) {
  ByteReader r(verify_crc(bytes, "reranker weights"), "reranker weights");
  detail::check_magic(r, "SRRW", "reranker weights");
  if (r.u16() != detail::kWeightFormatVersion) throw FormatError("reranker weights: unsupported version");
  RerankerConfig c;
  c.source = ModelConfig::deserialize(r);
  c.source_fingerprint = r.u64();
  const auto k = r.u16();
  for (std::uint16_t i = 0; i < k; ++i) c.layer_indices.push_back(r.u16());
  c.d_r = r.u32();
  c.n_heads = r.u32();
  c.head_size = r.u32();
  c.n_mix_blocks = r.u32();
  c.ffn_mult = r.u32();
  try {
    c.validate();
  } catch (const UsageError& e) {
    throw FormatError(std::string("reranker weights: ") + e.what());
  }
  auto rw = RerankerWeights::zeros(c);
  rw.for_each_tensor([&](std::string_view, std::span<double> t) { detail::read_values(r, t, Precision::f64); });
  if (r.remaining() != 0) throw FormatError("reranker weights: trailing bytes");
  return rw;
}

inline void save_reranker(const std::filesystem::path& path, const RerankerWeights& rw) {
  write_file_atomic(path, serialize_reranker(rw));
}

inline RerankerWeights load_reranker(const std::filesystem::path& path) {
  return deserialize_reranker(read_file_bytes(path));
}

}  // namespace staterank
