#pragma once

// Embedding head over the recurrent backbone. A text is extended with EOS
// tokens, run once through the backbone, and the EOS-position hiddens are
// averaged and projected to a unit vector. The same pass yields the
// document's StateStack, which is what gets cached for reranking.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "staterank/rwkv.hpp"

namespace staterank {

struct EmbeddingHeadWeights {
  std::uint32_t d_in = 0;
  std::uint32_t d_emb = 0;
  Matrix w_hidden;  // d_in × d_in
  Vector b_hidden;
  Matrix w_out;  // d_emb × d_in
  Vector b_out;

  static EmbeddingHeadWeights zeros(std::uint32_t d_in, std::uint32_t d_emb) {
    return {d_in, d_emb, Matrix(d_in, d_in), Vector(d_in), Matrix(d_emb, d_in), Vector(d_emb)};
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("w_hidden", self.w_hidden.span());
    f("b_hidden", self.b_hidden.span());
    f("w_out", self.w_out.span());
    f("b_out", self.b_out.span());
  }
  template <typename F>
  void for_each_tensor(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    visit(*this, f);
  }

  friend bool operator==(const EmbeddingHeadWeights&, const EmbeddingHeadWeights&) = default;
};

inline EmbeddingHeadWeights init_head(std::uint32_t d_in, std::uint32_t d_emb, std::uint64_t seed) {
  Rng rng(seed);
  auto h = EmbeddingHeadWeights::zeros(d_in, d_emb);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_in));
  fill_uniform(h.w_hidden.span(), rng, -scale, scale);
  fill_uniform(h.w_out.span(), rng, -scale, scale);
  return h;
}

struct Embedding {
  Vector values;
  bool normalized = false;

  friend bool operator==(const Embedding&, const Embedding&) = default;
};

inline TokenSequence insert_eos(const TokenSequence& tokens, std::uint32_t k_eos, Token eos_id) {
  if (k_eos < 1) throw UsageError("insert_eos: k_eos must be >= 1");
  TokenSequence out = tokens;
  out.insert(out.end(), k_eos, eos_id);
  return out;
}

inline Vector pool_eos(const std::vector<Vector>& eos_hidden) {
  if (eos_hidden.empty()) throw UsageError("pool_eos: no EOS representations");
  Vector mean(eos_hidden.front().dim());
  for (const auto& h : eos_hidden) {
    if (h.dim() != mean.dim()) throw ShapeError("pool_eos: dimension mismatch");
    for (std::size_t i = 0; i < h.dim(); ++i) mean[i] += h[i];
  }
  const double n = static_cast<double>(eos_hidden.size());
  for (auto& v : mean) v /= n;
  return mean;
}

// Intermediate values of the head, kept for the backward pass.
struct HeadActivations {
  Vector input;
  Vector hidden;  // tanh(W_h · input + b_h)
  Vector out;     // W_o · hidden + b_o
  double out_norm = 0.0;
  Vector unit;
};

inline HeadActivations head_forward(const EmbeddingHeadWeights& head, const Vector& pooled) {
  if (pooled.dim() != head.d_in) throw ShapeError("embedding head: input width mismatch");
  HeadActivations a;
  a.input = pooled;
  a.hidden = matvec(head.w_hidden, pooled);
  for (std::size_t i = 0; i < a.hidden.dim(); ++i) a.hidden[i] = std::tanh(a.hidden[i] + head.b_hidden[i]);
  a.out = matvec(head.w_out, a.hidden);
  for (std::size_t i = 0; i < a.out.dim(); ++i) a.out[i] += head.b_out[i];
  a.out_norm = norm(a.out);
  a.unit = l2_normalize(a.out);
  return a;
}

// Accumulates d(loss)/d(head params) given d(loss)/d(unit embedding).
inline void head_backward(const EmbeddingHeadWeights& head, const HeadActivations& a, const Vector& d_unit,
                          EmbeddingHeadWeights& grad) {
  const double proj = dot(a.unit, d_unit);
  Vector d_out(a.out.dim());
  for (std::size_t i = 0; i < d_out.dim(); ++i) d_out[i] = (d_unit[i] - a.unit[i] * proj) / a.out_norm;
  add_outer(grad.w_out, d_out.span(), a.hidden.span());
  for (std::size_t i = 0; i < d_out.dim(); ++i) grad.b_out[i] += d_out[i];
  Vector d_pre = matvec_transposed(head.w_out, d_out);
  for (std::size_t i = 0; i < d_pre.dim(); ++i) d_pre[i] *= 1.0 - a.hidden[i] * a.hidden[i];
  add_outer(grad.w_hidden, d_pre.span(), a.input.span());
  for (std::size_t i = 0; i < d_pre.dim(); ++i) grad.b_hidden[i] += d_pre[i];
}

inline Embedding embed_pooled(const EmbeddingHeadWeights& head, const Vector& pooled) {
  return {head_forward(head, pooled).unit, true};
}

struct EmbedResult {
  Embedding embedding;
  StateStack state;
};

// One backbone pass produces both the embedding and the full-depth state.
inline EmbedResult embed(const ModelWeights& model, const EmbeddingHeadWeights& head, const TokenSequence& tokens) {
  const auto& c = model.config;
  const auto with_eos = insert_eos(tokens, c.k_eos, c.eos_id);
  auto fwd = forward_sequence(model, with_eos, nullptr, {.keep_hidden = false});
  return {embed_pooled(head, pool_eos(fwd.eos_hidden)), std::move(fwd.final_state)};
}

// Pooled EOS representation only; the input the head sees.
inline Vector pooled_representation(const ModelWeights& model, const TokenSequence& tokens) {
  const auto& c = model.config;
  return pool_eos(forward_sequence(model, insert_eos(tokens, c.k_eos, c.eos_id), nullptr, {.keep_hidden = false}).eos_hidden);
}

// --- contrastive objective --------------------------------------------

inline constexpr double kDefaultTemperature = 0.05;

// scores(i, j) = s(q_i, d_j); positives on the diagonal.
struct SimMatrix {
  Matrix scores;
  double tau = kDefaultTemperature;
};

namespace detail {
inline void check_sims(const SimMatrix& sims) {
  if (!(sims.tau > 0.0)) throw UsageError("InfoNCE: temperature must be positive");
  if (sims.scores.rows() < 1 || sims.scores.rows() != sims.scores.cols()) {
    throw ShapeError("InfoNCE: similarity matrix must be square and non-empty");
  }
}

inline double row_logsumexp(const Matrix& s, std::size_t i, double tau) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < s.cols(); ++j) m = std::max(m, s(i, j) / tau);
  double acc = 0.0;
  for (std::size_t j = 0; j < s.cols(); ++j) acc += std::exp(s(i, j) / tau - m);
  return m + std::log(acc);
}
}  // namespace detail

// −(1/B) Σ_i log( exp(s_ii/τ) / Σ_j exp(s_ij/τ) ), log-sum-exp stabilized.
inline double infonce_loss(const SimMatrix& sims) {
  detail::check_sims(sims);
  const auto& s = sims.scores;
  const std::size_t B = s.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < B; ++i) total += detail::row_logsumexp(s, i, sims.tau) - s(i, i) / sims.tau;
  return std::max(0.0, total / static_cast<double>(B));
}

// ∂L/∂s_ij = (softmax_i(s/τ)_j − [i = j]) / (B τ)
inline Matrix infonce_grad(const SimMatrix& sims) {
  detail::check_sims(sims);
  const auto& s = sims.scores;
  const std::size_t B = s.rows();
  Matrix g(B, B);
  const double scale = 1.0 / (static_cast<double>(B) * sims.tau);
  for (std::size_t i = 0; i < B; ++i) {
    const double lse = detail::row_logsumexp(s, i, sims.tau);
    for (std::size_t j = 0; j < B; ++j) {
      const double p = std::exp(s(i, j) / sims.tau - lse);
      g(i, j) = (p - (i == j ? 1.0 : 0.0)) * scale;
    }
  }
  return g;
}

inline SimMatrix similarity_matrix(const std::vector<Vector>& queries, const std::vector<Vector>& docs, double tau) {
  if (queries.size() != docs.size()) throw ShapeError("similarity_matrix: batch size mismatch");
  SimMatrix sims{Matrix(queries.size(), docs.size()), tau};
  for (std::size_t i = 0; i < queries.size(); ++i)
    for (std::size_t j = 0; j < docs.size(); ++j) sims.scores(i, j) = cosine(queries[i], docs[j]);
  return sims;
}

// InfoNCE loss of one batch of pooled (query, doc) pairs and its gradient
// with respect to every head parameter.
inline double head_loss_and_grad(const EmbeddingHeadWeights& head, const std::vector<Vector>& pooled_queries,
                                 const std::vector<Vector>& pooled_docs, double tau,
                                 EmbeddingHeadWeights* grad) {
  const std::size_t B = pooled_queries.size();
  if (B != pooled_docs.size() || B < 1) throw ShapeError("head_loss_and_grad: bad batch");
  std::vector<HeadActivations> qa, da;
  for (const auto& p : pooled_queries) qa.push_back(head_forward(head, p));
  for (const auto& p : pooled_docs) da.push_back(head_forward(head, p));
  SimMatrix sims{Matrix(B, B), tau};
  // Embeddings are unit vectors, so the cosine is the dot product.
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < B; ++j) sims.scores(i, j) = dot(qa[i].unit, da[j].unit);
  const double loss = infonce_loss(sims);
  if (grad) {
    const Matrix g = infonce_grad(sims);
    for (std::size_t i = 0; i < B; ++i) {
      Vector d_q(head.d_emb), d_d(head.d_emb);
      for (std::size_t j = 0; j < B; ++j) {
        for (std::size_t e = 0; e < head.d_emb; ++e) {
          d_q[e] += g(i, j) * da[j].unit[e];
          d_d[e] += g(j, i) * qa[j].unit[e];
        }
      }
      head_backward(head, qa[i], d_q, *grad);
      head_backward(head, da[i], d_d, *grad);
    }
  }
  return loss;
}

struct PairBatch {
  std::vector<TokenSequence> queries;
  std::vector<TokenSequence> docs;
};

struct HeadTrainingResult {
  EmbeddingHeadWeights head;
  std::vector<double> losses;  // batch loss before each update
};

// Gradient descent on the head only; the backbone is frozen, so pooled
// representations are computed once up front. Batches are visited in order,
// cyclically.
inline HeadTrainingResult train_head_toy(const ModelWeights& model, EmbeddingHeadWeights head,
                                         const std::vector<PairBatch>& batches, double tau, double lr,
                                         std::size_t steps) {
  if (batches.empty()) throw UsageError("train_head_toy: no batches");
  std::vector<std::vector<Vector>> pq(batches.size()), pd(batches.size());
  for (std::size_t b = 0; b < batches.size(); ++b) {
    if (batches[b].queries.size() < 2 || batches[b].queries.size() != batches[b].docs.size()) {
      throw UsageError("train_head_toy: each batch needs >= 2 aligned pairs");
    }
    for (const auto& q : batches[b].queries) pq[b].push_back(pooled_representation(model, q));
    for (const auto& d : batches[b].docs) pd[b].push_back(pooled_representation(model, d));
  }

  HeadTrainingResult result{std::move(head), {}};
  result.losses.reserve(steps);
  for (std::size_t step = 0; step < steps; ++step) {
    const std::size_t b = step % batches.size();
    auto grad = EmbeddingHeadWeights::zeros(result.head.d_in, result.head.d_emb);
    const double loss = head_loss_and_grad(result.head, pq[b], pd[b], tau, &grad);
    if (!std::isfinite(loss)) throw NumericError("train_head_toy: loss diverged at step " + std::to_string(step));
    result.losses.push_back(loss);
    if (lr == 0.0) continue;
    std::vector<std::span<double>> params, grads;
    result.head.for_each_tensor([&](std::string_view, std::span<double> t) { params.push_back(t); });
    grad.for_each_tensor([&](std::string_view, std::span<double> t) { grads.push_back(t); });
    for (std::size_t i = 0; i < params.size(); ++i)
      for (std::size_t j = 0; j < params[i].size(); ++j) params[i][j] -= lr * grads[i][j];
  }
  return result;
}

// --- files ---------------------------------------------------------------

inline std::vector<std::uint8_t> serialize_head(const EmbeddingHeadWeights& head) {
  ByteWriter w;
  w.bytes("SREH");
  w.u16(detail::kWeightFormatVersion);
  w.u32(head.d_in);
  w.u32(head.d_emb);
  head.for_each_tensor([&](std::string_view, std::span<const double> t) { detail::write_values(w, t, Precision::f64); });
  w.seal_crc();
  return w.buffer();
}

inline EmbeddingHeadWeights deserialize_head(std::span<const std::uint8_t> bytes) {
  ByteReader r(verify_crc(bytes, "head weights"), "head weights");
  detail::check_magic(r, "SREH", "head weights");
  if (r.u16() != detail::kWeightFormatVersion) throw FormatError("head weights: unsupported version");
  const auto d_in = r.u32();
  const auto d_emb = r.u32();
  if (d_in == 0 || d_emb == 0) throw FormatError("head weights: empty dimensions");
  auto head = EmbeddingHeadWeights::zeros(d_in, d_emb);
  head.for_each_tensor([&](std::string_view, std::span<double> t) { detail::read_values(r, t, Precision::f64); });
  if (r.remaining() != 0) throw FormatError("head weights: trailing bytes");
  return head;
}

inline void save_head(const std::filesystem::path& path, const EmbeddingHeadWeights& head) {
  write_file_atomic(path, serialize_head(head));
}

inline EmbeddingHeadWeights load_head(const std::filesystem::path& path) {
  return deserialize_head(read_file_bytes(path));
}

// JSONL: {"id": ..., "dim": ..., "values": [...]}
inline void write_embedding_record(std::ostream& out, const std::string& id, const Embedding& e) {
  nlohmann::json j;
  j["id"] = id;
  j["dim"] = e.values.dim();
  j["values"] = std::vector<double>(e.values.begin(), e.values.end());
  out << j.dump() << '\n';
}

struct EmbeddingRecord {
  std::string id;
  Embedding embedding;
};

inline std::vector<EmbeddingRecord> read_embeddings_jsonl(std::istream& in) {
  std::vector<EmbeddingRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EmbeddingRecord rec;
      rec.id = j.at("id").get<std::string>();
      auto values = j.at("values").get<std::vector<double>>();
      if (values.size() != j.at("dim").get<std::size_t>()) throw DataError("dim does not match values");
      rec.embedding = {Vector(std::move(values)), true};
      out.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("embeddings line " + std::to_string(line_no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("embeddings line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace staterank
