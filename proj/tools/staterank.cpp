// staterank command-line driver.
//
// Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "staterank/pipeline.hpp"

using namespace staterank;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> precision, mode, layers;
  std::optional<std::size_t> workers;
};

// Config file values first, then any flags given on the command line.
// Relative paths in a config file resolve against the file's directory.
RunConfig resolve(const Globals& g) {
  RunConfig c;
  if (!g.config_path.empty()) {
    c = load_run_config(g.config_path);
    const auto base = fs::path(g.config_path).parent_path();
    for (std::string* p : {&c.model_path, &c.head_path, &c.reranker_path, &c.cache_path, &c.embeddings_path}) {
      if (fs::path(*p).is_relative()) *p = (base / *p).string();
    }
  }
  if (g.seed) c.seed = *g.seed;
  if (g.precision) c.precision = parse_precision(*g.precision);
  if (g.mode) c.mode = parse_mode(*g.mode);
  if (g.layers) c.layers = *g.layers;
  if (g.workers) {
    if (*g.workers < 1) throw UsageError("--workers must be >= 1");
    c.workers = *g.workers;
  }
  return c;
}

class Output {
 public:
  explicit Output(const std::string& path) {
    if (!path.empty() && path != "-") {
      file_.open(path);
      if (!file_) throw NotFoundError("cannot write " + path);
    }
  }
  std::ostream& operator*() { return file_.is_open() ? file_ : std::cout; }

 private:
  std::ofstream file_;
};

struct Query {
  std::string id;
  std::string text;
};

std::vector<Query> gather_queries(const std::vector<std::string>& inline_queries, const std::string& file) {
  std::vector<Query> out;
  for (std::size_t i = 0; i < inline_queries.size(); ++i) out.push_back({"q" + std::to_string(i), inline_queries[i]});
  if (!file.empty()) {
    for (const auto& r : ingest(fs::path(file))) out.push_back({r.id, r.text});
  }
  if (out.empty()) throw UsageError("no queries: pass --query or --queries");
  for (const auto& q : out) {
    if (q.text.empty()) throw DataError("query " + q.id + " is empty");
  }
  return out;
}

json hits_json(const RetrievalResult& r) {
  json hits = json::array();
  for (const auto& h : r.hits) hits.push_back({{"doc_id", h.doc_id}, {"score", h.score}});
  return hits;
}

// --- subcommands -------------------------------------------------------------------

int cmd_init(const RunConfig& rc, std::uint32_t L, std::uint32_t H, std::uint32_t S, std::uint32_t emb_dim) {
  ModelConfig mc;
  mc.n_layers = L;
  mc.n_heads = H;
  mc.head_size = S;
  mc.d_model = H * S;
  mc.precision = rc.precision;
  mc.validate();
  const auto model = init_model(mc, rc.seed);
  const auto head = init_head(mc.d_model, emb_dim ? emb_dim : mc.d_model, rc.seed + 1);
  const auto rw = init_reranker(make_reranker_config(model, parse_layer_selection(rc.layers)), rc.seed + 2);
  save_model(rc.model_path, model);
  save_head(rc.head_path, head);
  save_reranker(rc.reranker_path, rw);
  std::cout << json{{"model", rc.model_path},
                    {"head", rc.head_path},
                    {"reranker", rc.reranker_path},
                    {"fingerprint", model.fingerprint()},
                    {"reranker_layers", rw.config.layer_indices},
                    {"reranker_parameters", rw.parameter_count()}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_ingest(const std::string& corpus_path) {
  const auto corpus = ingest(fs::path(corpus_path));
  std::map<std::string, std::size_t> domains;
  std::size_t bytes = 0, untagged = 0;
  for (const auto& r : corpus) {
    bytes += r.text.size();
    if (r.domain) {
      ++domains[*r.domain];
    } else {
      ++untagged;
    }
  }
  std::cout << json{{"records", corpus.size()}, {"bytes", bytes}, {"domains", domains}, {"untagged", untagged}}.dump()
            << '\n';
  return 0;
}

int cmd_index(const RunConfig& rc, const std::string& corpus_path) {
  const auto corpus = ingest(fs::path(corpus_path));
  const auto model = load_model(rc.model_path);
  const auto head = load_head(rc.head_path);
  const auto s =
      build_index(corpus, model, head, rc.cache_path, rc.embeddings_path, {cache_dtype_for(rc.precision), rc.workers});
  std::cout << json{{"documents", s.documents},
                    {"forward_passes", s.forward_passes},
                    {"cache", rc.cache_path},
                    {"cache_bytes", s.cache_bytes},
                    {"embeddings", rc.embeddings_path},
                    {"elapsed_ms", std::round(s.elapsed_ms * 1000) / 1000}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_retrieve(const RunConfig& rc, const std::vector<Query>& queries, const std::string& out_path) {
  const auto model = load_model(rc.model_path);
  const auto head = load_head(rc.head_path);
  const auto index = load_embedding_index(rc.embeddings_path);
  Output out(out_path);
  for (const auto& q : queries) {
    const auto r = retrieve(embed(model, head, tokenize(q.text)).embedding.values, index, rc.k, q.id);
    *out << json{{"query_id", r.query_id}, {"k", r.k}, {"hits", hits_json(r)}}.dump() << '\n';
  }
  return 0;
}

int cmd_rerank(const RunConfig& rc, const std::vector<Query>& queries, const std::string& corpus_path,
               const std::string& out_path) {
  const auto model = load_model(rc.model_path);
  const auto head = load_head(rc.head_path);
  const auto rw = load_reranker(rc.reranker_path);
  const auto index = load_embedding_index(rc.embeddings_path);

  std::optional<CacheReader> reader;
  std::map<std::string, std::string> texts;
  RerankSources src;
  if (rc.mode == RerankMode::offline) {
    reader.emplace(rc.cache_path);
    src.cache = &*reader;
  } else {
    if (corpus_path.empty()) throw UsageError("online mode needs --corpus to re-read document text");
    for (auto& r : ingest(fs::path(corpus_path))) texts.emplace(std::move(r.id), std::move(r.text));
    src.texts = &texts;
  }

  Output out(out_path);
  for (const auto& q : queries) {
    const auto toks = tokenize(q.text);
    const auto candidates = retrieve(embed(model, head, toks).embedding.values, index, rc.k, q.id);
    const auto ranked = rerank_stage(candidates, toks, rc.mode, src, model, rw, rc.workers);
    json results = json::array();
    for (const auto& r : ranked) results.push_back({{"doc_id", r.doc_id}, {"probability", r.probability}});
    *out << json{{"query_id", q.id}, {"mode", mode_name(rc.mode)}, {"results", results}}.dump() << '\n';
  }
  return 0;
}

int cmd_train_reranker(const RunConfig& rc, const std::string& train_path, RerankTrainOptions opt, double holdout) {
  const auto model = load_model(rc.model_path);
  const auto head = load_head(rc.head_path);
  auto records = load_rerank_training(fs::path(train_path));
  if (records.size() < 2) throw DataError("training data needs at least 2 records");
  const auto cfg = make_reranker_config(model, parse_layer_selection(rc.layers));
  auto examples = build_rerank_examples(model, head, records, cfg.layer_indices, rc.workers);

  Rng rng(rc.seed);
  rng.shuffle(examples);
  const auto n_eval = static_cast<std::size_t>(std::floor(holdout * static_cast<double>(examples.size())));
  std::vector<RerankExample> eval(examples.end() - static_cast<std::ptrdiff_t>(n_eval), examples.end());
  examples.resize(examples.size() - n_eval);

  opt.seed = rc.seed;
  const auto result = train_reranker(model, init_reranker(cfg, rc.seed + 2), examples, opt);
  save_reranker(rc.reranker_path, result.weights);

  auto accuracy = [&](const std::vector<RerankExample>& set) {
    if (set.empty()) return 0.0;
    std::size_t ok = 0;
    for (const auto& e : set) ok += (score_from_state(result.weights, e.state) >= 0.5) == (e.label == 1);
    return static_cast<double>(ok) / static_cast<double>(set.size());
  };
  json j{{"reranker", rc.reranker_path},
         {"layers", cfg.layer_indices},
         {"train_examples", examples.size()},
         {"heldout_examples", eval.size()},
         {"final_loss", result.losses.empty() ? 0.0 : result.losses.back()},
         {"train_accuracy", accuracy(examples)}};
  if (!eval.empty()) j["heldout_accuracy"] = accuracy(eval);
  std::cout << j.dump() << '\n';
  return 0;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ',');)
    if (!part.empty()) out.push_back(part);
  return out;
}

int cmd_bench(const RunConfig& rc, bool use_config_model, BenchOptions opt, const std::string& lengths,
              const std::string& modes, const std::string& out_path) {
  opt.doc_lens.clear();
  for (const auto& p : split_csv(lengths)) {
    try {
      opt.doc_lens.push_back(std::stoul(p));
    } catch (const std::exception&) {
      throw UsageError("--lengths: not a number: " + p);
    }
  }
  opt.modes = split_csv(modes);
  opt.seed = rc.seed;
  opt.scratch = scratch_root();

  ModelWeights model;
  EmbeddingHeadWeights head;
  RerankerWeights rw;
  if (use_config_model) {
    model = load_model(rc.model_path);
    head = load_head(rc.head_path);
    rw = load_reranker(rc.reranker_path);
  } else {
    ModelConfig mc;
    mc.precision = rc.precision;
    model = init_model(mc, rc.seed);
    head = init_head(mc.d_model, mc.d_model, rc.seed + 1);
    rw = init_reranker(make_reranker_config(model, parse_layer_selection(rc.layers)), rc.seed + 2);
  }
  const auto rows = bench(model, head, rw, opt);
  Output out(out_path);
  write_bench_csv(*out, rows);
  if (rows.size() < opt.doc_lens.size() * opt.modes.size()) {
    std::cerr << "bench: time budget reached; some lengths skipped\n";
  }
  return 0;
}

int cmd_memcalc(bool paper_table, std::uint64_t L, std::uint64_t H, std::uint64_t S, std::uint64_t d, std::uint64_t T,
                std::uint64_t b, std::optional<std::uint64_t> L_sel) {
  if (paper_table) {
    write_footprint_table(std::cout, T, b);
    return 0;
  }
  if (!d) d = H * S;
  write_memory_header(std::cout);
  write_memory_row(std::cout, "custom", memory_report(L, H, S, d, T, b, L_sel));
  return 0;
}

int cmd_curriculum(const RunConfig& rc, const std::string& corpus_path, std::size_t batch, bool pretty) {
  const auto corpus = corpus_domains(ingest(fs::path(corpus_path)));
  const auto plan = build_plan(corpus, rc.workers, batch, rc.seed);
  std::cout << plan_to_json(plan).dump(pretty ? 2 : -1) << '\n';
  return 0;
}

// Small end-to-end checks that need no input files.
int cmd_selftest(const RunConfig& rc) {
  int failures = 0;
  auto report = [&](const char* name, bool ok) {
    std::printf("%s %s\n", ok ? "PASS" : "FAIL", name);
    failures += !ok;
  };

  Rng rng(rc.seed);
  ModelConfig mc;
  const auto model = init_model(mc, rc.seed);
  const auto head = init_head(mc.d_model, mc.d_model, rc.seed + 1);
  const auto rw = init_reranker(make_reranker_config(model, LayerSelection::uniform(2)), rc.seed + 2);
  TokenSequence doc(200), query(16);
  for (auto& t : doc) t = static_cast<Token>(rng.below(256));
  for (auto& t : query) t = static_cast<Token>(rng.below(256));

  const auto emb = embed(model, head, doc);
  std::vector<std::uint32_t> all(mc.n_layers);
  std::iota(all.begin(), all.end(), 0u);
  const auto header = make_cache_header(model, all, CacheDtype::f64, false);
  const auto entry = make_cache_entry(header, "d", emb.state);
  report("offline score equals online score",
         score_offline(model, entry, query, rw).probability == score_online(model, doc, query, rw).probability);

  const auto dir = scratch_root() / "staterank_selftest";
  fs::create_directories(dir);
  write_cache(dir / "s.scr", header, {entry});
  report("cache round trip", read_entry(dir / "s.scr", "d").state == emb.state);
  fs::remove_all(dir);

  const auto r04 = memory_report(24, 16, 64, 1024, 2000, 2);
  report("memory table row", format_mb(r04.bytes_state) == "3.00" && format_mb(r04.bytes_kv) == "187.50" &&
                                 format_ratio(r04) == "62.5");
  const SimMatrix flat{Matrix(3, 3), kDefaultTemperature};
  report("uniform InfoNCE is ln 3", std::abs(infonce_loss(flat) - std::log(3.0)) < 1e-12);
  report("BCE at one half is ln 2", std::abs(bce_loss(1.0, 0.5) - std::log(2.0)) < 1e-12);
  return failures ? 3 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"staterank: state-based embedding, caching and reranking"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "run config JSON")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "RNG seed");
  app.add_option("--precision", g.precision, "f64 or f32")->check(CLI::IsMember({"f64", "f32"}));
  app.add_option("--mode", g.mode, "offline or online")->check(CLI::IsMember({"offline", "online"}));
  app.add_option("--layers", g.layers, "layer selection: full, top:k, uniform:k, preset name, or csv");
  app.add_option("--workers", g.workers, "worker threads (simulated workers for curriculum-sim)");

  std::function<int()> run;

  auto* init = app.add_subcommand("init", "write freshly initialized model, head and reranker files");
  std::uint32_t n_layers = 4, n_heads = 4, head_size = 16, emb_dim = 0;
  init->add_option("--n-layers", n_layers);
  init->add_option("--n-heads", n_heads);
  init->add_option("--head-size", head_size);
  init->add_option("--emb-dim", emb_dim, "embedding width (default d_model)");
  init->callback([&] { run = [&] { return cmd_init(resolve(g), n_layers, n_heads, head_size, emb_dim); }; });

  std::string corpus_path;
  auto* ing = app.add_subcommand("ingest", "validate a JSONL corpus and summarize it");
  ing->add_option("corpus", corpus_path)->required();
  ing->callback([&] { run = [&] { return cmd_ingest(corpus_path); }; });

  auto* idx = app.add_subcommand("index", "embed each document once and cache its state");
  idx->add_option("corpus", corpus_path)->required();
  idx->callback([&] { run = [&] { return cmd_index(resolve(g), corpus_path); }; });

  std::vector<std::string> inline_queries;
  std::string queries_file, out_path;
  std::optional<std::size_t> k;
  auto add_query_opts = [&](CLI::App* sub) {
    sub->add_option("--query", inline_queries, "query text (repeatable)");
    sub->add_option("--queries", queries_file, "JSONL of {\"id\",\"text\"}");
    sub->add_option("-k", k, "candidates to keep");
    sub->add_option("--out", out_path, "output file (default stdout)");
  };
  auto with_k = [&] {
    auto rc = resolve(g);
    if (k) {
      if (*k < 1) throw UsageError("-k must be >= 1");
      rc.k = *k;
    }
    return rc;
  };

  auto* ret = app.add_subcommand("retrieve", "cosine top-k over the embeddings file");
  add_query_opts(ret);
  ret->callback([&] { run = [&] { return cmd_retrieve(with_k(), gather_queries(inline_queries, queries_file), out_path); }; });

  auto* rr = app.add_subcommand("rerank", "retrieve, then rerank candidates from cached states");
  add_query_opts(rr);
  rr->add_option("--corpus", corpus_path, "corpus JSONL (online mode)");
  rr->callback([&] {
    run = [&] { return cmd_rerank(with_k(), gather_queries(inline_queries, queries_file), corpus_path, out_path); };
  });

  std::string train_path;
  RerankTrainOptions topt;
  double holdout = 0.2;
  auto* tr = app.add_subcommand("train-reranker", "fit the reranker on {query, doc, label} JSONL");
  tr->add_option("train", train_path)->required();
  tr->add_option("--steps", topt.steps);
  tr->add_option("--lr", topt.lr);
  tr->add_option("--batch", topt.batch_size);
  tr->add_option("--holdout", holdout, "fraction held out for accuracy")->check(CLI::Range(0.0, 0.9));
  tr->callback([&] { run = [&] { return cmd_train_reranker(resolve(g), train_path, topt, holdout); }; });

  BenchOptions bopt;
  std::string lengths = "512,1024,2048,4096", modes = "offline,online,quadratic";
  auto* bn = app.add_subcommand("bench", "timing of offline, online and quadratic scoring (CSV)");
  bn->add_option("--lengths", lengths, "document lengths, comma separated");
  bn->add_option("--modes", modes, "offline,online,quadratic");
  bn->add_option("--query-len", bopt.query_len);
  bn->add_option("--batch", bopt.batch);
  bn->add_option("--quadratic-batch", bopt.quadratic_batch, "pairs for the quadratic scorer (default --batch)");
  bn->add_option("--docs-per-length", bopt.docs_per_length, "distinct cached docs in the offline batch");
  bn->add_option("--time-budget", bopt.time_budget_s, "seconds; remaining lengths are skipped once exceeded");
  bn->add_option("--out", out_path, "CSV file (default stdout)");
  bn->callback([&] {
    run = [&] { return cmd_bench(resolve(g), !g.config_path.empty(), bopt, lengths, modes, out_path); };
  });

  bool paper_table = false;
  std::uint64_t mL = 24, mH = 16, mS = 64, md = 0, mT = 2000, mb = 2;
  std::optional<std::uint64_t> m_sel;
  auto* mem = app.add_subcommand("memcalc", "recurrent state vs. KV cache bytes");
  mem->add_flag("--paper-table", paper_table, "print the five reference model rows");
  mem->add_option("-L", mL);
  mem->add_option("-H", mH);
  mem->add_option("-S", mS);
  mem->add_option("-d", md, "d_model (default H*S)");
  mem->add_option("-T", mT, "sequence length");
  mem->add_option("-b", mb, "bytes per value");
  mem->add_option("--selected-layers", m_sel, "cached layer count");
  mem->callback([&] { run = [&] { return cmd_memcalc(paper_table, mL, mH, mS, md, mT, mb, m_sel); }; });

  std::size_t cur_batch = 4;
  bool pretty = false;
  auto* cur = app.add_subcommand("curriculum-sim", "domain-aware batch plan for --workers simulated workers");
  cur->add_option("corpus", corpus_path, "JSONL with a \"domain\" field per record")->required();
  cur->add_option("--batch", cur_batch);
  cur->add_flag("--pretty", pretty);
  cur->callback([&] { run = [&] { return cmd_curriculum(resolve(g), corpus_path, cur_batch, pretty); }; });

  auto* st = app.add_subcommand("selftest", "quick built-in consistency checks");
  st->callback([&] { run = [&] { return cmd_selftest(resolve(g)); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    return run();
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
