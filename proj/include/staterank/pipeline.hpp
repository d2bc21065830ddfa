#pragma once

// End-to-end two-stage retrieval over byte-tokenized text: index (one
// backbone pass per document yields embedding and cached state), brute-force
// cosine retrieval, then offline or online state reranking. Also the bench
// harness and the quadratic-attention reference scorer it compares against.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <sstream>
#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "staterank/curriculum.hpp"
#include "staterank/embedder.hpp"
#include "staterank/reranker.hpp"
#include "staterank/state_store.hpp"

namespace staterank {

// --- corpus ------------------------------------------------------------------

struct CorpusRecord {
  std::string id;
  std::string text;
  std::optional<std::string> domain;
};

namespace detail {
template <typename F>
void for_each_jsonl(std::istream& in, const std::string& what, F&& f) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      f(nlohmann::json::parse(line), line_no);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(what + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open " + path.string());
  return in;
}
}  // namespace detail

inline std::vector<CorpusRecord> ingest(std::istream& in) {
  std::vector<CorpusRecord> out;
  std::set<std::string> seen;
  detail::for_each_jsonl(in, "corpus", [&](const nlohmann::json& j, std::size_t line_no) {
    if (!j.is_object() || !j.contains("id") || !j.contains("text")) {
      throw DataError("corpus line " + std::to_string(line_no) + ": expected an object with \"id\" and \"text\"");
    }
    CorpusRecord r;
    r.id = j.at("id").get<std::string>();
    r.text = j.at("text").get<std::string>();
    if (j.contains("domain")) r.domain = j.at("domain").get<std::string>();
    if (r.id.empty()) throw DataError("corpus line " + std::to_string(line_no) + ": empty id");
    if (!seen.insert(r.id).second) throw DataError("duplicate document id: " + r.id);
    out.push_back(std::move(r));
  });
  return out;
}

inline std::vector<CorpusRecord> ingest(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  return ingest(in);
}

// Byte-level tokenizer: one token per UTF-8 byte.
inline TokenSequence tokenize(const std::string& text) {
  TokenSequence t;
  t.reserve(text.size());
  for (unsigned char c : text) t.push_back(c);
  return t;
}

// Document-side tokenization is counted so tests can show the offline path
// never re-reads document text.
inline TokenSequence tokenize_document(const std::string& text) {
  counters().document_tokenizations.fetch_add(1, std::memory_order_relaxed);
  return tokenize(text);
}

// --- run configuration ----------------------------------------------------------

struct RunConfig {
  std::string model_path = "model.srwt";
  std::string head_path = "head.sreh";
  std::string reranker_path = "reranker.srrw";
  std::string cache_path = "states.scr";
  std::string embeddings_path = "embeddings.jsonl";
  std::string layers = "full";
  std::size_t k = 10;
  RerankMode mode = RerankMode::offline;
  Precision precision = Precision::f64;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

inline RerankMode parse_mode(const std::string& s) {
  if (s == "offline") return RerankMode::offline;
  if (s == "online") return RerankMode::online;
  throw UsageError("mode must be offline or online, got " + s);
}

inline std::string mode_name(RerankMode m) { return m == RerankMode::offline ? "offline" : "online"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "f64") return Precision::f64;
  if (s == "f32") return Precision::f32;
  throw UsageError("precision must be f64 or f32, got " + s);
}

inline CacheDtype cache_dtype_for(Precision p) { return p == Precision::f64 ? CacheDtype::f64 : CacheDtype::f32; }

inline RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) throw UsageError("run config must be a JSON object");
  RunConfig c;
  static const std::set<std::string> known = {"model",  "head", "reranker",  "cache", "embeddings", "layers",
                                              "k",      "mode", "precision", "seed",  "workers"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw UsageError("run config: unknown key \"" + key + "\"");
  }
  try {
    if (j.contains("model")) c.model_path = j["model"].get<std::string>();
    if (j.contains("head")) c.head_path = j["head"].get<std::string>();
    if (j.contains("reranker")) c.reranker_path = j["reranker"].get<std::string>();
    if (j.contains("cache")) c.cache_path = j["cache"].get<std::string>();
    if (j.contains("embeddings")) c.embeddings_path = j["embeddings"].get<std::string>();
    if (j.contains("layers")) c.layers = j["layers"].get<std::string>();
    if (j.contains("k")) c.k = j["k"].get<std::size_t>();
    if (j.contains("mode")) c.mode = parse_mode(j["mode"].get<std::string>());
    if (j.contains("precision")) c.precision = parse_precision(j["precision"].get<std::string>());
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("workers")) c.workers = j["workers"].get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("run config: ") + e.what());
  }
  if (c.k < 1) throw UsageError("run config: k must be >= 1");
  if (c.workers < 1) throw UsageError("run config: workers must be >= 1");
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  try {
    return parse_run_config(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("run config " + path.string() + ": " + e.what());
  }
}

// Directory for scratch files: STATERANK_TMP if set, else the system temp dir.
inline std::filesystem::path scratch_root() {
  if (const char* env = std::getenv("STATERANK_TMP"); env && *env) return env;
  return std::filesystem::temp_directory_path();
}

// --- parallel helper ---------------------------------------------------------------

// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
// written to per-index slots by fn; the first exception (by index) wins.
template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// --- indexing ------------------------------------------------------------------

struct IndexSummary {
  std::size_t documents = 0;
  std::uint64_t cache_bytes = 0;
  std::uint64_t forward_passes = 0;
  double elapsed_ms = 0.0;
};

struct IndexOptions {
  CacheDtype dtype = CacheDtype::f64;
  std::size_t workers = 1;
};

// Embeds each document once; the same pass provides the full-depth state
// written to the cache. Outputs appear atomically or not at all.
inline IndexSummary build_index(const std::vector<CorpusRecord>& corpus, const ModelWeights& model,
                                const EmbeddingHeadWeights& head, const std::filesystem::path& cache_path,
                                const std::filesystem::path& embeddings_path, IndexOptions opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto before = counters().fresh_forward_calls.load();
  std::vector<EmbedResult> results(corpus.size());
  parallel_for(corpus.size(), opt.workers,
               [&](std::size_t i) { results[i] = embed(model, head, tokenize_document(corpus[i].text)); });

  std::vector<std::uint32_t> all(model.config.n_layers);
  std::iota(all.begin(), all.end(), 0u);
  // Embeddings live in the JSONL file; the cache holds states only.
  const auto header = make_cache_header(model, all, opt.dtype, false);
  std::vector<CacheEntry> entries;
  entries.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    entries.push_back(make_cache_entry(header, corpus[i].id, results[i].state));
  }

  std::ostringstream jsonl;
  for (std::size_t i = 0; i < corpus.size(); ++i) write_embedding_record(jsonl, corpus[i].id, results[i].embedding);
  const auto text = jsonl.str();
  const auto cache_bytes = serialize_cache(header, entries);
  write_file_atomic(embeddings_path,
                    std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  try {
    write_file_atomic(cache_path, cache_bytes);
  } catch (...) {
    std::error_code ec;
    std::filesystem::remove(embeddings_path, ec);
    throw;
  }
  IndexSummary s;
  s.documents = corpus.size();
  s.cache_bytes = cache_bytes.size();
  s.forward_passes = counters().fresh_forward_calls.load() - before;
  s.elapsed_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return s;
}

// --- retrieval ----------------------------------------------------------------------

struct EmbeddingIndex {
  std::vector<std::string> ids;
  std::vector<Vector> vectors;
};

inline EmbeddingIndex load_embedding_index(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  EmbeddingIndex idx;
  for (auto& rec : read_embeddings_jsonl(in)) {
    idx.ids.push_back(std::move(rec.id));
    idx.vectors.push_back(std::move(rec.embedding.values));
  }
  return idx;
}

struct ScoredDoc {
  std::string doc_id;
  double score = 0.0;

  friend bool operator==(const ScoredDoc&, const ScoredDoc&) = default;
};

struct RetrievalResult {
  std::string query_id;
  std::vector<ScoredDoc> hits;
  std::size_t k = 0;
};

// Exact cosine top-k; ties go to the smaller doc_id.
inline RetrievalResult retrieve(const Vector& query, const EmbeddingIndex& index, std::size_t k,
                                std::string query_id = {}) {
  if (k < 1) throw UsageError("retrieve: k must be >= 1");
  if (index.ids.empty()) throw DataError("retrieve: embedding index is empty");
  std::vector<ScoredDoc> scored;
  scored.reserve(index.ids.size());
  for (std::size_t i = 0; i < index.ids.size(); ++i) scored.push_back({index.ids[i], cosine(query, index.vectors[i])});
  const std::size_t keep = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(),
                    [](const ScoredDoc& a, const ScoredDoc& b) {
                      return a.score != b.score ? a.score > b.score : a.doc_id < b.doc_id;
                    });
  scored.resize(keep);
  return {std::move(query_id), std::move(scored), k};
}

// --- reranking ------------------------------------------------------------------------

struct RerankSources {
  CacheReader* cache = nullptr;                              // offline
  const std::map<std::string, std::string>* texts = nullptr;  // online: doc_id → text
};

inline std::vector<RerankResult> rerank_stage(const RetrievalResult& candidates, const TokenSequence& query,
                                              RerankMode mode, const RerankSources& src, const ModelWeights& model,
                                              const RerankerWeights& rw, std::size_t workers = 1) {
  const std::size_t n = candidates.hits.size();
  std::vector<RerankResult> out(n);
  if (mode == RerankMode::offline) {
    if (!src.cache) throw UsageError("rerank_stage: offline mode needs a state cache");
    check_fingerprint(src.cache->header(), model);
    // Point reads share one stream, so fetch sequentially, then score in parallel.
    std::vector<CacheEntry> entries;
    entries.reserve(n);
    for (const auto& hit : candidates.hits) entries.push_back(src.cache->get(hit.doc_id));
    parallel_for(n, workers, [&](std::size_t i) { out[i] = score_offline(model, entries[i], query, rw); });
  } else {
    if (!src.texts) throw UsageError("rerank_stage: online mode needs document texts");
    parallel_for(n, workers, [&](std::size_t i) {
      const auto& id = candidates.hits[i].doc_id;
      const auto it = src.texts->find(id);
      if (it == src.texts->end()) throw NotFoundError("rerank_stage: no text for document " + id);
      out[i] = score_online(model, tokenize_document(it->second), query, rw, id);
    });
  }
  std::stable_sort(out.begin(), out.end(), [](const RerankResult& a, const RerankResult& b) {
    return a.probability != b.probability ? a.probability > b.probability : a.doc_id < b.doc_id;
  });
  return out;
}

// --- reranker training data ----------------------------------------------------------

struct RerankTrainRecord {
  std::string query;
  std::string doc;
  int label = 0;
};

inline std::vector<RerankTrainRecord> load_rerank_training(std::istream& in) {
  std::vector<RerankTrainRecord> out;
  detail::for_each_jsonl(in, "training data", [&](const nlohmann::json& j, std::size_t line_no) {
    RerankTrainRecord r{j.at("query").get<std::string>(), j.at("doc").get<std::string>(), j.at("label").get<int>()};
    if (r.label != 0 && r.label != 1) {
      throw DataError("training data line " + std::to_string(line_no) + ": label must be 0 or 1");
    }
    out.push_back(std::move(r));
  });
  return out;
}

inline std::vector<RerankTrainRecord> load_rerank_training(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  return load_rerank_training(in);
}

// S′ for each (doc, query): the document is encoded the same way as at index
// time, the query resumes from it, and the reranker's layers are kept.
inline std::vector<RerankExample> build_rerank_examples(const ModelWeights& model, const EmbeddingHeadWeights& head,
                                                        const std::vector<RerankTrainRecord>& records,
                                                        std::span<const std::uint32_t> layers,
                                                        std::size_t workers = 1) {
  std::vector<RerankExample> out(records.size());
  parallel_for(records.size(), workers, [&](std::size_t i) {
    const auto& r = records[i];
    const auto doc_state = embed(model, head, tokenize(r.doc)).state;
    const auto q = tokenize(r.query);
    if (q.empty()) throw DataError("training record " + std::to_string(i) + ": empty query");
    const auto resumed = forward_sequence(model, q, &doc_state, {.keep_hidden = false});
    out[i] = {extract_states(resumed.final_state, layers), r.label};
  });
  return out;
}

// --- quadratic reference scorer ---------------------------------------------------------

// One bidirectional softmax-attention layer over doc ⧺ query at the backbone
// width, mean-pooled into a logit. Stands in for a full-attention reranker
// to show O(T²) cost; scores carry no meaning. Rows are streamed so memory
// stays O(T·d).
struct AttentionScorer {
  Matrix w_q, w_k, w_v;
  Vector head;

  static AttentionScorer init(std::uint32_t d, std::uint64_t seed) {
    Rng rng(seed);
    AttentionScorer s{Matrix(d, d), Matrix(d, d), Matrix(d, d), Vector(d)};
    const double sc = 1.0 / std::sqrt(static_cast<double>(d));
    for (Matrix* m : {&s.w_q, &s.w_k, &s.w_v}) fill_uniform(m->span(), rng, -sc, sc);
    fill_uniform(s.head.span(), rng, -sc, sc);
    return s;
  }

  double score(const Matrix& embedding, const TokenSequence& tokens) const {
    const std::size_t T = tokens.size(), d = head.dim();
    if (T == 0) throw UsageError("attention scorer: empty input");
    std::vector<Vector> q, k, v;
    for (auto tok : tokens) {
      const auto row = embedding.row(tok);
      const std::span<const double> x(row.data(), row.size());
      q.push_back(matvec(w_q, x));
      k.push_back(matvec(w_k, x));
      v.push_back(matvec(w_v, x));
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Vector pooled(d);
    std::vector<double> logits(T);
    for (std::size_t i = 0; i < T; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < T; ++j) {
        logits[j] = dot(q[i], k[j]) * scale;
        m = std::max(m, logits[j]);
      }
      double z = 0.0;
      for (auto& l : logits) z += (l = std::exp(l - m));
      for (std::size_t j = 0; j < T; ++j) {
        const double p = logits[j] / z;
        for (std::size_t c = 0; c < d; ++c) pooled[c] += p * v[j][c];
      }
    }
    for (auto& x : pooled) x /= static_cast<double>(T);
    return sigmoid(dot(head, pooled));
  }
};

// --- bench ------------------------------------------------------------------------------

struct BenchRow {
  std::string mode;
  std::size_t doc_len = 0;
  std::size_t pairs = 0;
  double total_ms = 0.0;
  double embed_ms = 0.0;
  double rerank_ms = 0.0;
  std::uint64_t state_bytes = 0;
  std::uint64_t kv_bytes_model = 0;
  double throughput_pairs_per_s = 0.0;
  std::uint64_t recurrent_steps = 0;  // rerank phase only
};

struct BenchOptions {
  std::vector<std::size_t> doc_lens = {512, 1024, 2048, 4096};
  std::size_t query_len = 64;
  std::size_t batch = 100;
  std::vector<std::string> modes = {"offline", "online", "quadratic"};
  std::size_t docs_per_length = 4;     // distinct cached docs the offline batch cycles over
  std::size_t quadratic_batch = 0;     // 0 means same as batch
  double time_budget_s = 0.0;          // 0 means unlimited; lengths past the budget are skipped
  std::uint64_t seed = 0;
  std::filesystem::path scratch;       // empty means scratch_root()
};

namespace detail {
inline double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline TokenSequence random_text_tokens(std::size_t n, Rng& rng) {
  TokenSequence t(n);
  for (auto& x : t) x = static_cast<Token>(rng.below(256));
  return t;
}

inline void finish_row(BenchRow& row) {
  row.throughput_pairs_per_s = row.total_ms > 0 ? 1000.0 * static_cast<double>(row.pairs) / row.total_ms : 0.0;
}
}  // namespace detail

// Offline: documents are embedded and cached up front (embed_ms), then the
// batch reads each state by point lookup and runs only query tokens.
// total_ms covers the serving-time batch, not the one-off indexing.
inline BenchRow bench_offline(const ModelWeights& model, const EmbeddingHeadWeights& head, const RerankerWeights& rw,
                              std::size_t doc_len, const BenchOptions& opt, Rng& rng) {
  BenchRow row{"offline", doc_len, opt.batch};
  const auto dir = opt.scratch.empty() ? scratch_root() : opt.scratch;
  std::filesystem::create_directories(dir);
  const auto path = dir / ("staterank_bench_" + std::to_string(doc_len) + ".scr");

  std::vector<std::uint32_t> all(model.config.n_layers);
  std::iota(all.begin(), all.end(), 0u);
  const auto header = make_cache_header(model, all, CacheDtype::f64, false);
  std::vector<CacheEntry> entries;
  const auto t_embed = std::chrono::steady_clock::now();
  const std::size_t n_docs = std::max<std::size_t>(1, std::min(opt.docs_per_length, opt.batch));
  for (std::size_t i = 0; i < n_docs; ++i) {
    const auto res = embed(model, head, detail::random_text_tokens(doc_len, rng));
    entries.push_back(make_cache_entry(header, "doc" + std::to_string(i), res.state));
  }
  write_cache(path, header, entries);
  row.embed_ms = detail::ms_since(t_embed);

  std::vector<TokenSequence> queries;
  for (std::size_t i = 0; i < opt.batch; ++i) queries.push_back(detail::random_text_tokens(opt.query_len, rng));
  CacheReader reader(path);
  const auto steps0 = counters().recurrent_steps.load();
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < opt.batch; ++i) {
    const auto entry = reader.get("doc" + std::to_string(i % n_docs));
    score_offline(model, entry, queries[i], rw);
  }
  row.rerank_ms = detail::ms_since(t0);
  row.recurrent_steps = counters().recurrent_steps.load() - steps0;
  row.total_ms = row.rerank_ms;
  row.state_bytes = header.entry_bytes();
  const auto& c = model.config;
  row.kv_bytes_model = memory_report(c.n_layers, c.n_heads, c.head_size, c.d_model, doc_len + opt.query_len, 2).bytes_kv;
  std::error_code ec;
  std::filesystem::remove(path, ec);
  detail::finish_row(row);
  return row;
}

// Online: every pair re-encodes doc ⧺ query from a zero state.
inline BenchRow bench_online(const ModelWeights& model, const RerankerWeights& rw, std::size_t doc_len,
                             const BenchOptions& opt, Rng& rng) {
  BenchRow row{"online", doc_len, opt.batch};
  const auto doc = detail::random_text_tokens(doc_len, rng);
  const auto steps0 = counters().recurrent_steps.load();
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < opt.batch; ++i) score_online(model, doc, detail::random_text_tokens(opt.query_len, rng), rw);
  row.rerank_ms = detail::ms_since(t0);
  row.recurrent_steps = counters().recurrent_steps.load() - steps0;
  row.total_ms = row.rerank_ms;
  const auto& c = model.config;
  row.state_bytes = memory_report(c.n_layers, c.n_heads, c.head_size, c.d_model, 1, 8).bytes_state;
  row.kv_bytes_model = memory_report(c.n_layers, c.n_heads, c.head_size, c.d_model, doc_len + opt.query_len, 2).bytes_kv;
  detail::finish_row(row);
  return row;
}

inline BenchRow bench_quadratic(const ModelWeights& model, std::size_t doc_len, const BenchOptions& opt, Rng& rng) {
  const std::size_t pairs = opt.quadratic_batch ? opt.quadratic_batch : opt.batch;
  BenchRow row{"quadratic", doc_len, pairs};
  const auto scorer = AttentionScorer::init(model.config.d_model, opt.seed + 17);
  const auto doc = detail::random_text_tokens(doc_len, rng);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < pairs; ++i) {
    auto joint = doc;
    const auto q = detail::random_text_tokens(opt.query_len, rng);
    joint.insert(joint.end(), q.begin(), q.end());
    scorer.score(model.embedding, joint);
  }
  row.rerank_ms = detail::ms_since(t0);
  row.total_ms = row.rerank_ms;
  const auto& c = model.config;
  row.kv_bytes_model = memory_report(c.n_layers, c.n_heads, c.head_size, c.d_model, doc_len + opt.query_len, 2).bytes_kv;
  detail::finish_row(row);
  return row;
}

inline std::vector<BenchRow> bench(const ModelWeights& model, const EmbeddingHeadWeights& head,
                                   const RerankerWeights& rw, const BenchOptions& opt) {
  if (opt.batch < 1 || opt.query_len < 1) throw UsageError("bench: batch and query length must be >= 1");
  for (const auto& m : opt.modes) {
    if (m != "offline" && m != "online" && m != "quadratic") throw UsageError("bench: unknown mode " + m);
  }
  Rng rng(opt.seed);
  std::vector<BenchRow> rows;
  const auto start = std::chrono::steady_clock::now();
  for (auto len : opt.doc_lens) {
    if (len < 1) throw UsageError("bench: document length must be >= 1");
    if (opt.time_budget_s > 0 && detail::ms_since(start) > 1000.0 * opt.time_budget_s) break;
    for (const auto& m : opt.modes) {
      if (m == "offline") rows.push_back(bench_offline(model, head, rw, len, opt, rng));
      if (m == "online") rows.push_back(bench_online(model, rw, len, opt, rng));
      if (m == "quadratic") rows.push_back(bench_quadratic(model, len, opt, rng));
    }
  }
  return rows;
}

inline void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows) {
  out << "mode,doc_len,total_ms,embed_ms,rerank_ms,state_bytes,kv_bytes_model,throughput_pairs_per_s\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.3f,%.3f,%.3f,%llu,%llu,%.2f\n", r.mode.c_str(), r.doc_len, r.total_ms,
                  r.embed_ms, r.rerank_ms, static_cast<unsigned long long>(r.state_bytes),
                  static_cast<unsigned long long>(r.kv_bytes_model), r.throughput_pairs_per_s);
    out << buf;
  }
}

// --- memcalc -----------------------------------------------------------------------------

inline void write_memory_row(std::ostream& out, const std::string& label, const MemoryReport& r) {
  out << label << ',' << r.n_layers << ',' << r.d_model << ',' << r.n_heads << ',' << r.head_size << ','
      << format_mb(r.bytes_state) << ',' << format_mb(r.bytes_kv) << ',' << format_ratio(r) << ','
      << r.bytes_state << ',' << r.bytes_kv << ',' << r.bytes_shift << '\n';
}

inline void write_memory_header(std::ostream& out) {
  out << "model,L,d_model,H,S,state_mb,kv_mb,ratio,state_bytes,kv_bytes,shift_overhead_bytes\n";
}

inline void write_footprint_table(std::ostream& out, std::uint64_t T = 2000, std::uint64_t b = 2) {
  write_memory_header(out);
  for (const auto& row : footprint_rows()) {
    write_memory_row(out, row.label, memory_report(row.n_layers, row.n_heads, row.head_size, row.d_model, T, b));
  }
}

// --- curriculum input ---------------------------------------------------------------------

inline DomainCorpus corpus_domains(const std::vector<CorpusRecord>& corpus) {
  std::vector<DomainRecord> recs;
  for (const auto& r : corpus) {
    if (!r.domain) throw DataError("record " + r.id + " has no \"domain\" field");
    recs.push_back({r.id, *r.domain});
  }
  return partition_by_domain(recs);
}

}  // namespace staterank
