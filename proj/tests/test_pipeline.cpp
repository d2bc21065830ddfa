#include <gtest/gtest.h>

#include <sstream>

#include "fixtures.hpp"
#include "staterank/pipeline.hpp"

using namespace staterank;
using namespace fixtures;

namespace {

struct Stack {
  ModelWeights model;
  EmbeddingHeadWeights head;
  RerankerWeights rw;
};

Stack micro_stack(std::uint64_t seed = 7) {
  auto c = micro_config();
  c.n_layers = 3;
  Stack s{init_model(c, seed), init_head(c.d_model, 6, seed + 1), {}};
  s.rw = init_reranker(make_reranker_config(s.model, LayerSelection::explicit_list({0, 2}), {8, 2, 4, 1, 2}), seed + 2);
  return s;
}

std::vector<CorpusRecord> random_corpus(std::size_t n, Rng& rng) {
  std::vector<CorpusRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string text;
    const std::size_t len = 5 + rng.below(40);
    for (std::size_t j = 0; j < len; ++j) text.push_back(static_cast<char>('a' + rng.below(26)));
    out.push_back({"doc" + std::to_string(i), text, std::nullopt});
  }
  return out;
}

std::vector<std::uint8_t> file_bytes(const std::filesystem::path& p) { return read_file_bytes(p); }

}  // namespace

TEST(Ingest, PreservesOrderAndFields) {
  std::istringstream in(R"({"id":"b","text":"second"}
{"id":"a","text":"first","domain":"news"}

{"id":"c","text":""}
)");
  const auto recs = ingest(in);
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_EQ(recs[0].id, "b");
  EXPECT_EQ(recs[1].text, "first");
  EXPECT_EQ(recs[1].domain, "news");
  EXPECT_FALSE(recs[0].domain.has_value());
}

TEST(Ingest, Errors) {
  std::istringstream empty("");
  EXPECT_TRUE(ingest(empty).empty());

  std::istringstream dup("{\"id\":\"x\",\"text\":\"a\"}\n{\"id\":\"x\",\"text\":\"b\"}\n");
  try {
    ingest(dup);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("x"), std::string::npos);
  }

  std::istringstream bad("{\"id\":\"x\",\"text\":\"a\"}\n{not json\n");
  try {
    ingest(bad);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }

  std::istringstream missing("{\"id\":\"x\"}\n");
  EXPECT_THROW(ingest(missing), DataError);
  EXPECT_THROW(ingest(std::filesystem::path("/nonexistent/corpus.jsonl")), NotFoundError);
}

TEST(Tokenize, BytesAndCounter) {
  EXPECT_EQ(tokenize("Az\xff"), (TokenSequence{65, 122, 255}));
  counters().reset();
  tokenize("abc");
  EXPECT_EQ(counters().document_tokenizations.load(), 0u);
  tokenize_document("abc");
  EXPECT_EQ(counters().document_tokenizations.load(), 1u);
}

TEST(RunConfigTest, DefaultsOverridesAndErrors) {
  const auto d = parse_run_config(nlohmann::json::object());
  EXPECT_EQ(d.k, 10u);
  EXPECT_EQ(d.mode, RerankMode::offline);
  EXPECT_EQ(d.precision, Precision::f64);
  const auto c = parse_run_config(
      nlohmann::json{{"k", 3}, {"mode", "online"}, {"precision", "f32"}, {"layers", "uniform:2"}, {"seed", 9}});
  EXPECT_EQ(c.k, 3u);
  EXPECT_EQ(c.mode, RerankMode::online);
  EXPECT_EQ(cache_dtype_for(c.precision), CacheDtype::f32);
  EXPECT_EQ(c.layers, "uniform:2");
  EXPECT_THROW(parse_run_config(nlohmann::json{{"bogus", 1}}), UsageError);
  EXPECT_THROW(parse_run_config(nlohmann::json{{"mode", "sideways"}}), UsageError);
  EXPECT_THROW(parse_run_config(nlohmann::json{{"k", 0}}), UsageError);
  EXPECT_THROW(parse_run_config(nlohmann::json{{"k", "ten"}}), UsageError);
}

TEST(ParallelFor, CoversEveryIndexAndRethrows) {
  std::vector<int> hits(97, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  EXPECT_EQ(std::count(hits.begin(), hits.end(), 1), 97);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 6) throw DataError("boom");
               }),
               DataError);
}

TEST(BuildIndex, OnePassPerDocumentAndContentsMatch) {
  const auto s = micro_stack();
  Rng rng(1);
  const auto corpus = random_corpus(12, rng);
  const auto dir = scratch_dir("index_basic");
  counters().reset();
  const auto summary = build_index(corpus, s.model, s.head, dir / "c.scr", dir / "e.jsonl");
  EXPECT_EQ(summary.documents, 12u);
  EXPECT_EQ(summary.forward_passes, 12u);
  EXPECT_EQ(counters().fresh_forward_calls.load(), 12u);
  EXPECT_EQ(summary.cache_bytes, std::filesystem::file_size(dir / "c.scr"));

  const auto cache = read_cache(dir / "c.scr", s.model);
  const auto index = load_embedding_index(dir / "e.jsonl");
  ASSERT_EQ(cache.entries.size(), 12u);
  ASSERT_EQ(index.ids.size(), 12u);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto ref = embed(s.model, s.head, bytes_of(corpus[i].text));
    EXPECT_EQ(cache.entries[i].doc_id, corpus[i].id);
    EXPECT_EQ(cache.entries[i].state, ref.state);
    EXPECT_EQ(index.ids[i], corpus[i].id);
    for (std::size_t j = 0; j < ref.embedding.values.dim(); ++j) {
      EXPECT_DOUBLE_EQ(index.vectors[i][j], ref.embedding.values[j]);
    }
  }
}

TEST(BuildIndex, ByteIdenticalAcrossRunsAndWorkerCounts) {
  const auto s = micro_stack();
  Rng rng(2);
  const auto corpus = random_corpus(20, rng);
  const auto dir = scratch_dir("index_det");
  build_index(corpus, s.model, s.head, dir / "a.scr", dir / "a.jsonl", {CacheDtype::f64, 1});
  build_index(corpus, s.model, s.head, dir / "b.scr", dir / "b.jsonl", {CacheDtype::f64, 1});
  build_index(corpus, s.model, s.head, dir / "c.scr", dir / "c.jsonl", {CacheDtype::f64, 4});
  EXPECT_EQ(file_bytes(dir / "a.scr"), file_bytes(dir / "b.scr"));
  EXPECT_EQ(file_bytes(dir / "a.scr"), file_bytes(dir / "c.scr"));
  EXPECT_EQ(file_bytes(dir / "a.jsonl"), file_bytes(dir / "c.jsonl"));
}

TEST(BuildIndex, FailureLeavesNoPartialOutput) {
  const auto s = micro_stack();
  Rng rng(3);
  auto corpus = random_corpus(4, rng);
  corpus[3].id = "";
  const auto dir = scratch_dir("index_fail");
  EXPECT_ANY_THROW(build_index(corpus, s.model, s.head, dir / "c.scr", dir / "e.jsonl"));
  EXPECT_FALSE(std::filesystem::exists(dir / "c.scr"));
  EXPECT_FALSE(std::filesystem::exists(dir / "e.jsonl"));

  corpus = random_corpus(4, rng);
  EXPECT_ANY_THROW(build_index(corpus, s.model, s.head, dir / "missing_dir" / "c.scr", dir / "e.jsonl"));
  EXPECT_FALSE(std::filesystem::exists(dir / "e.jsonl"));
}

TEST(Retrieve, MatchesFullSortOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    EmbeddingIndex idx;
    const std::size_t n = 1 + rng.below(60), d = 1 + rng.below(6);
    std::vector<Vector> pool;
    for (int p = 0; p < 5; ++p) pool.push_back(random_vector(d, rng));
    for (std::size_t i = 0; i < n; ++i) {
      idx.ids.push_back("id" + std::to_string(rng.below(1000)) + "_" + std::to_string(i));
      // Draw from a small pool so exact score ties are common.
      idx.vectors.push_back(rng.below(2) ? pool[rng.below(pool.size())] : random_vector(d, rng));
    }
    const auto q = random_vector(d, rng);
    const std::size_t k = 1 + rng.below(n + 3);

    // Oracle: independent cosine, repeated selection of the best remaining.
    std::vector<std::pair<double, std::string>> remaining;
    for (std::size_t i = 0; i < n; ++i) {
      double qd = 0, qq = 0, dd = 0;
      for (std::size_t c = 0; c < d; ++c) {
        qd += q[c] * idx.vectors[i][c];
        qq += q[c] * q[c];
        dd += idx.vectors[i][c] * idx.vectors[i][c];
      }
      remaining.push_back({qd / std::sqrt(qq * dd), idx.ids[i]});
    }
    std::vector<std::string> expect;
    while (expect.size() < std::min(k, n)) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < remaining.size(); ++i) {
        const double a = remaining[i].first, b = remaining[best].first;
        if (std::abs(a - b) > 1e-12 ? a > b : remaining[i].second < remaining[best].second) best = i;
      }
      expect.push_back(remaining[best].second);
      remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(best));
    }
    const auto got = retrieve(q, idx, k);
    ASSERT_EQ(got.hits.size(), expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_EQ(got.hits[i].doc_id, expect[i]) << "trial " << trial;
  }
}

TEST(Retrieve, TieBreakAndErrors) {
  EmbeddingIndex idx{{"c", "a", "b"}, {Vector{1, 0}, Vector{1, 0}, Vector{0, 1}}};
  const auto r = retrieve(Vector{1, 0}, idx, 2);
  ASSERT_EQ(r.hits.size(), 2u);
  EXPECT_EQ(r.hits[0].doc_id, "a");
  EXPECT_EQ(r.hits[1].doc_id, "c");
  EXPECT_EQ(retrieve(Vector{1, 0}, idx, 10).hits.size(), 3u);
  EXPECT_THROW(retrieve(Vector{1, 0}, EmbeddingIndex{}, 3), DataError);
  EXPECT_THROW(retrieve(Vector{1, 0}, idx, 0), UsageError);
}

TEST(RerankStage, OfflineEqualsOnlineWithoutDocumentWork) {
  const auto s = micro_stack();
  Rng rng(5);
  const auto corpus = random_corpus(10, rng);
  const auto dir = scratch_dir("rerank_stage");
  build_index(corpus, s.model, s.head, dir / "c.scr", dir / "e.jsonl");
  const auto index = load_embedding_index(dir / "e.jsonl");
  std::map<std::string, std::string> texts;
  for (const auto& r : corpus) texts[r.id] = r.text;

  const auto query = tokenize("what about this");
  const auto candidates = retrieve(embed(s.model, s.head, query).embedding.values, index, 6);
  CacheReader reader(dir / "c.scr");

  counters().reset();
  const auto offline = rerank_stage(candidates, query, RerankMode::offline, {&reader, nullptr}, s.model, s.rw, 2);
  EXPECT_EQ(counters().fresh_forward_calls.load(), 0u);
  EXPECT_EQ(counters().document_tokenizations.load(), 0u);
  EXPECT_EQ(counters().recurrent_steps.load(), query.size() * candidates.hits.size());

  const auto online = rerank_stage(candidates, query, RerankMode::online, {nullptr, &texts}, s.model, s.rw);
  ASSERT_EQ(offline.size(), 6u);
  ASSERT_EQ(online.size(), 6u);
  for (std::size_t i = 0; i < offline.size(); ++i) {
    EXPECT_EQ(offline[i].doc_id, online[i].doc_id);
    EXPECT_EQ(offline[i].probability, online[i].probability);
    if (i > 0) {
      EXPECT_GE(offline[i - 1].probability, offline[i].probability);
    }
  }
  EXPECT_THROW(rerank_stage(candidates, query, RerankMode::offline, {}, s.model, s.rw), UsageError);
  EXPECT_THROW(rerank_stage(candidates, query, RerankMode::online, {}, s.model, s.rw), UsageError);
  std::map<std::string, std::string> none;
  EXPECT_THROW(rerank_stage(candidates, query, RerankMode::online, {nullptr, &none}, s.model, s.rw), NotFoundError);
}

TEST(RerankExamples, ResumedStateMatchesJointPass) {
  const auto s = micro_stack();
  std::istringstream in("{\"query\":\"q one\",\"doc\":\"some doc\",\"label\":1}\n"
                        "{\"query\":\"q two\",\"doc\":\"other\",\"label\":0}\n");
  const auto recs = load_rerank_training(in);
  ASSERT_EQ(recs.size(), 2u);
  const auto ex = build_rerank_examples(s.model, s.head, recs, s.rw.config.layer_indices);
  ASSERT_EQ(ex.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    auto joint = insert_eos(bytes_of(recs[i].doc), s.model.config.k_eos, s.model.config.eos_id);
    const auto q = bytes_of(recs[i].query);
    joint.insert(joint.end(), q.begin(), q.end());
    const auto ref = forward_sequence(s.model, joint).final_state;
    EXPECT_EQ(ex[i].state, extract_states(ref, s.rw.config.layer_indices));
    EXPECT_EQ(ex[i].label, recs[i].label);
  }
  std::istringstream bad("{\"query\":\"q\",\"doc\":\"d\",\"label\":2}\n");
  EXPECT_THROW(load_rerank_training(bad), DataError);
}

TEST(AttentionScorerTest, MatchesMaterializedAttention) {
  Rng rng(6);
  const auto model = init_model(micro_config(), 3);
  const auto scorer = AttentionScorer::init(model.config.d_model, 11);
  const auto toks = random_tokens(9, rng);
  const std::size_t T = toks.size(), d = model.config.d_model;
  // Oracle: materialize Q, K, V and the full T×T softmax matrix.
  std::vector<std::vector<double>> Q(T, std::vector<double>(d)), K = Q, V = Q;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        const double x = model.embedding(toks[t], c);
        Q[t][r] += scorer.w_q(r, c) * x;
        K[t][r] += scorer.w_k(r, c) * x;
        V[t][r] += scorer.w_v(r, c) * x;
      }
  std::vector<double> pooled(d, 0.0);
  for (std::size_t i = 0; i < T; ++i) {
    std::vector<double> a(T);
    double z = 0;
    for (std::size_t j = 0; j < T; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) s += Q[i][c] * K[j][c];
      a[j] = std::exp(s / std::sqrt(static_cast<double>(d)));
      z += a[j];
    }
    for (std::size_t j = 0; j < T; ++j)
      for (std::size_t c = 0; c < d; ++c) pooled[c] += a[j] / z * V[j][c] / static_cast<double>(T);
  }
  double logit = 0;
  for (std::size_t c = 0; c < d; ++c) logit += scorer.head[c] * pooled[c];
  EXPECT_NEAR(scorer.score(model.embedding, toks), 1.0 / (1.0 + std::exp(-logit)), 1e-12);
  EXPECT_THROW(scorer.score(model.embedding, {}), UsageError);
}

TEST(Bench, RowsAndCsv) {
  const auto s = micro_stack();
  BenchOptions opt;
  opt.doc_lens = {16, 64};
  opt.query_len = 4;
  opt.batch = 5;
  opt.docs_per_length = 2;
  opt.scratch = scratch_dir("bench");
  counters().reset();
  const auto rows = bench(s.model, s.head, s.rw, opt);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0].mode, "offline");
  EXPECT_EQ(rows[0].recurrent_steps, 5u * 4u);
  EXPECT_EQ(rows[0].state_bytes, rows[3].state_bytes);  // independent of doc length
  EXPECT_EQ(rows[1].recurrent_steps, 5u * (16u + s.model.config.k_eos + 4u));
  EXPECT_LT(rows[0].kv_bytes_model, rows[3].kv_bytes_model);
  for (const auto& r : rows) EXPECT_GT(r.throughput_pairs_per_s, 0.0);

  std::ostringstream csv;
  write_bench_csv(csv, rows);
  std::istringstream lines(csv.str());
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header, "mode,doc_len,total_ms,embed_ms,rerank_ms,state_bytes,kv_bytes_model,throughput_pairs_per_s");
  std::size_t n = 0;
  for (std::string l; std::getline(lines, l);) {
    EXPECT_EQ(std::count(l.begin(), l.end(), ','), 7);
    ++n;
  }
  EXPECT_EQ(n, 6u);

  opt.modes = {"nope"};
  EXPECT_THROW(bench(s.model, s.head, s.rw, opt), UsageError);
}

TEST(Memcalc, FootprintTableShape) {
  std::ostringstream out;
  write_footprint_table(out);
  std::istringstream lines(out.str());
  std::vector<std::string> rows;
  for (std::string l; std::getline(lines, l);) rows.push_back(l);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[1].rfind("0.1B,12,768,12,64,", 0), 0u);
}

TEST(CorpusDomains, RequiresTags) {
  std::vector<CorpusRecord> c{{"a", "t", "x"}, {"b", "t", "y"}};
  EXPECT_EQ(corpus_domains(c).domain_count(), 2u);
  c.push_back({"c", "t", std::nullopt});
  EXPECT_THROW(corpus_domains(c), DataError);
}

TEST(Retrieve, SelfRetrieval) {
  const auto s = micro_stack();
  Rng rng(8);
  const auto corpus = random_corpus(15, rng);
  const auto dir = scratch_dir("self_retrieval");
  build_index(corpus, s.model, s.head, dir / "c.scr", dir / "e.jsonl");
  const auto index = load_embedding_index(dir / "e.jsonl");
  for (const auto& doc : corpus) {
    const auto r = retrieve(embed(s.model, s.head, tokenize(doc.text)).embedding.values, index, 3);
    EXPECT_EQ(r.hits[0].doc_id, doc.id);
    EXPECT_NEAR(r.hits[0].score, 1.0, 1e-12);
  }
}

TEST(RerankStage, SingleCandidate) {
  const auto s = micro_stack();
  const std::map<std::string, std::string> texts{{"only", "lonely document"}};
  const RetrievalResult one{"q", {{"only", -0.5}}, 1};
  const auto out = rerank_stage(one, tokenize("q"), RerankMode::online, {nullptr, &texts}, s.model, s.rw);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].doc_id, "only");
}
