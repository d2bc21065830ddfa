#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "staterank/embedder.hpp"

using namespace staterank;
using namespace fixtures;

namespace {

// Loop-form head: tanh hidden layer, affine output, unit normalization.
oracle::Vec ref_head(const EmbeddingHeadWeights& h, const oracle::Vec& x) {
  oracle::Vec hid = oracle::mv(oracle::to_mat(h.w_hidden), x);
  for (std::size_t i = 0; i < hid.size(); ++i) hid[i] = std::tanh(hid[i] + h.b_hidden[i]);
  oracle::Vec out = oracle::mv(oracle::to_mat(h.w_out), hid);
  double n = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += h.b_out[i];
    n += out[i] * out[i];
  }
  for (auto& v : out) v /= std::sqrt(n);
  return out;
}

// No log-sum-exp shift; fine for |s/τ| ≤ 20.
double naive_infonce(const Matrix& s, double tau) {
  double total = 0.0;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < s.cols(); ++j) z += std::exp(s(i, j) / tau);
    total += -std::log(std::exp(s(i, i) / tau) / z);
  }
  return total / static_cast<double>(s.rows());
}

SimMatrix random_sims(std::size_t B, double tau, Rng& rng) {
  return {random_matrix(B, B, rng), tau};
}

EmbeddingHeadWeights random_head(std::uint32_t d_in, std::uint32_t d_emb, std::uint64_t seed) {
  auto h = init_head(d_in, d_emb, seed);
  Rng rng(seed + 1);
  fill_uniform(h.b_hidden.span(), rng, -0.5, 0.5);
  fill_uniform(h.b_out.span(), rng, -0.5, 0.5);
  return h;
}

}  // namespace

TEST(InsertEos, Appends) {
  EXPECT_EQ(insert_eos({5, 9}, 1, 256), (TokenSequence{5, 9, 256}));
  EXPECT_EQ(insert_eos({}, 4, 256), (TokenSequence{256, 256, 256, 256}));
  TokenSequence hundred(100);
  for (Token i = 0; i < 100; ++i) hundred[i] = i + 1;
  const auto out = insert_eos(hundred, 4, 256);
  ASSERT_EQ(out.size(), 104u);
  for (std::size_t i = 100; i < 104; ++i) EXPECT_EQ(out[i], 256u);
  EXPECT_THROW(insert_eos({1}, 0, 256), UsageError);
}

TEST(PoolEos, MeanProperties) {
  Rng rng(1);
  const Vector v = random_vector(6, rng);
  EXPECT_EQ(pool_eos({v}), v);
  Vector neg = v;
  for (auto& x : neg) x = -x;
  EXPECT_EQ(pool_eos({v, neg}), Vector(6));
  EXPECT_THROW(pool_eos({}), UsageError);
}

TEST(PoolEos, MatchesLoopMean) {
  Rng rng(2);
  std::vector<Vector> vs;
  for (int i = 0; i < 4; ++i) vs.push_back(random_vector(16, rng));
  const Vector pooled = pool_eos(vs);
  for (std::size_t c = 0; c < 16; ++c) {
    double acc = 0.0;
    for (const auto& v : vs) acc += v[c];
    EXPECT_EQ(pooled[c], acc / 4.0);
  }
}

TEST(Embed, DeterministicAndUnitNorm) {
  const auto m = init_model(tiny_config(), 3);
  const auto head = init_head(64, 64, 4);
  const auto a = embed(m, head, bytes_of("state space retrieval"));
  const auto b = embed(m, head, bytes_of("state space retrieval"));
  EXPECT_EQ(a.embedding, b.embedding);
  EXPECT_EQ(a.state.checksum(), b.state.checksum());
  EXPECT_NEAR(norm(a.embedding.values), 1.0, 1e-9);
  EXPECT_TRUE(a.embedding.normalized);

  const auto empty = embed(m, head, {});
  EXPECT_NEAR(norm(empty.embedding.values), 1.0, 1e-9);
  EXPECT_EQ(empty.state.token_count, 4u);
}

TEST(Embed, MatchesStepwiseOracle) {
  const auto m = init_model(micro_config(), 5);
  const auto head = random_head(8, 8, 6);
  const TokenSequence doc = bytes_of("abc xyz");
  const auto with_eos = insert_eos(doc, m.config.k_eos, m.config.eos_id);
  const auto hidden = oracle::forward(m, with_eos);
  oracle::Vec pooled(8, 0.0);
  for (std::size_t t = doc.size(); t < with_eos.size(); ++t)
    for (std::size_t i = 0; i < 8; ++i) pooled[i] += hidden[t][i];
  for (auto& v : pooled) v /= static_cast<double>(m.config.k_eos);
  const auto expected = ref_head(head, pooled);
  const auto got = embed(m, head, doc);
  EXPECT_LE(oracle::max_abs_diff(oracle::to_vec(got.embedding.values), expected), 1e-10);
}

TEST(Embed, StateEqualsForwardSequenceState) {
  const auto m = init_model(tiny_config(), 8);
  const auto head = init_head(64, 64, 9);
  const TokenSequence doc = bytes_of("the head reads hiddens only");
  const auto fwd = forward_sequence(m, insert_eos(doc, m.config.k_eos, m.config.eos_id));
  const auto res = embed(m, head, doc);
  EXPECT_EQ(res.state.checksum(), fwd.final_state.checksum());
  for (std::size_t l = 0; l < res.state.states.size(); ++l) {
    EXPECT_EQ(res.state.states[l].wkv, fwd.final_state.states[l].wkv);
  }
}

TEST(Embed, CosineEqualsDotForUnitEmbeddings) {
  const auto m = init_model(micro_config(), 10);
  const auto head = random_head(8, 8, 11);
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = embed(m, head, random_tokens(5 + trial, rng)).embedding.values;
    const auto b = embed(m, head, random_tokens(9, rng)).embedding.values;
    EXPECT_NEAR(cosine(a, b), dot(a, b), 1e-9);
  }
}

TEST(InfoNce, TrivialCases) {
  SimMatrix one{Matrix{{0.37}}, 0.05};
  EXPECT_EQ(infonce_loss(one), 0.0);
  EXPECT_EQ(infonce_grad(one)(0, 0), 0.0);

  SimMatrix flat{Matrix(3, 3), 0.05};
  for (auto& v : flat.scores.span()) v = 0.2;
  EXPECT_NEAR(infonce_loss(flat), std::log(3.0), 1e-12);
  EXPECT_NEAR(infonce_loss(flat), 1.0986, 1e-4);

  SimMatrix two{Matrix(2, 2), 1.0};
  for (auto& v : two.scores.span()) v = 0.5;
  const Matrix g = infonce_grad(two);
  EXPECT_NEAR(g(0, 0), -0.25, 1e-15);
  EXPECT_NEAR(g(0, 1), 0.25, 1e-15);
  EXPECT_NEAR(g(1, 0), 0.25, 1e-15);
  EXPECT_NEAR(g(1, 1), -0.25, 1e-15);
}

TEST(InfoNce, RejectsNonPositiveTemperature) {
  EXPECT_THROW(infonce_loss({Matrix(2, 2), 0.0}), UsageError);
  EXPECT_THROW(infonce_grad({Matrix(2, 2), -1.0}), UsageError);
  EXPECT_THROW(infonce_loss({Matrix(2, 3), 0.05}), ShapeError);
}

TEST(InfoNce, MatchesNaiveSummation) {
  Rng rng(20);
  for (int trial = 0; trial < 10; ++trial) {
    const auto sims = random_sims(4, 0.05, rng);
    const double expected = naive_infonce(sims.scores, sims.tau);
    EXPECT_LE(std::abs(infonce_loss(sims) - expected) / expected, 1e-10);
  }
}

TEST(InfoNce, GradientMatchesFiniteDifferences) {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    auto sims = random_sims(4, 0.05, rng);
    const Matrix g = infonce_grad(sims);
    const auto fd = oracle::finite_difference(sims.scores.span(), [&] { return infonce_loss(sims); });
    EXPECT_LE(oracle::relative_error(g.span(), fd), 1e-5);
  }
}

TEST(InfoNce, GradientRowsSumToZero) {
  Rng rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix g = infonce_grad(random_sims(5, 0.05, rng));
    for (std::size_t i = 0; i < 5; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < 5; ++j) acc += g(i, j);
      EXPECT_LE(std::abs(acc), 1e-12);
    }
  }
}

TEST(InfoNce, RowShiftInvariance) {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    auto sims = random_sims(4, 0.05, rng);
    const double before = infonce_loss(sims);
    for (std::size_t i = 0; i < 4; ++i) {
      const double c = rng.uniform(-0.5, 0.5);
      for (std::size_t j = 0; j < 4; ++j) sims.scores(i, j) += c;
    }
    EXPECT_NEAR(infonce_loss(sims), before, 1e-10);
  }
}

TEST(HeadGradient, MatchesFiniteDifferences) {
  auto head = random_head(8, 6, 30);
  Rng rng(31);
  std::vector<Vector> q, d;
  for (int i = 0; i < 3; ++i) {
    q.push_back(random_vector(8, rng));
    d.push_back(random_vector(8, rng));
  }
  auto grad = EmbeddingHeadWeights::zeros(8, 6);
  head_loss_and_grad(head, q, d, 0.05, &grad);

  std::vector<std::span<double>> params, grads;
  head.for_each_tensor([&](std::string_view, std::span<double> t) { params.push_back(t); });
  grad.for_each_tensor([&](std::string_view, std::span<double> t) { grads.push_back(t); });
  for (std::size_t t = 0; t < params.size(); ++t) {
    const auto fd = oracle::finite_difference(params[t], [&] { return head_loss_and_grad(head, q, d, 0.05, nullptr); });
    EXPECT_LE(oracle::relative_error(grads[t], fd), 1e-4) << "tensor " << t;
  }
}

namespace {

// Two byte-pattern families. Each batch pairs one query/doc from each
// family, so the in-batch negative is always the other family.
std::vector<PairBatch> two_family_batches(Rng& rng, std::size_t n_batches) {
  auto pattern = [&](const std::string& motif, std::size_t reps) {
    std::string s;
    for (std::size_t i = 0; i < reps; ++i) s += motif;
    return bytes_of(s + std::to_string(rng.below(100)));
  };
  std::vector<PairBatch> out;
  for (std::size_t b = 0; b < n_batches; ++b) {
    PairBatch batch;
    batch.queries = {pattern("ab", 3 + rng.below(3)), pattern("xyz", 2 + rng.below(3))};
    batch.docs = {pattern("abab ", 4 + rng.below(3)), pattern("xyz. ", 3 + rng.below(3))};
    out.push_back(std::move(batch));
  }
  return out;
}

}  // namespace

TEST(TrainHeadToy, LossDecreases) {
  const auto m = init_model(tiny_config(), 40);
  Rng rng(41);
  const auto batches = two_family_batches(rng, 4);
  const auto res = train_head_toy(m, init_head(64, 64, 42), batches, 0.05, 0.05, 201);
  ASSERT_EQ(res.losses.size(), 201u);
  EXPECT_LT(res.losses[200], res.losses[0]);
}

TEST(TrainHeadToy, ZeroLearningRateLeavesHeadUnchanged) {
  const auto m = init_model(micro_config(), 43);
  Rng rng(44);
  const auto head = random_head(8, 8, 45);
  const auto res = train_head_toy(m, head, two_family_batches(rng, 2), 0.05, 0.0, 5);
  EXPECT_EQ(res.head, head);
}

TEST(TrainHeadToy, RejectsTinyBatches) {
  const auto m = init_model(micro_config(), 46);
  PairBatch single{{bytes_of("a")}, {bytes_of("b")}};
  EXPECT_THROW(train_head_toy(m, init_head(8, 8, 1), {single}, 0.05, 0.1, 1), UsageError);
}

TEST(HeadFile, RoundTripAndCorruption) {
  const auto head = random_head(8, 6, 50);
  auto bytes = serialize_head(head);
  EXPECT_EQ(deserialize_head(bytes), head);
  bytes[10] ^= 0x01;
  EXPECT_THROW(deserialize_head(bytes), FormatError);
}

TEST(EmbeddingsJsonl, RoundTrip) {
  const auto m = init_model(micro_config(), 51);
  const auto head = random_head(8, 8, 52);
  std::stringstream ss;
  const auto e1 = embed(m, head, bytes_of("one")).embedding;
  const auto e2 = embed(m, head, bytes_of("two")).embedding;
  write_embedding_record(ss, "d1", e1);
  write_embedding_record(ss, "d2", e2);
  const auto recs = read_embeddings_jsonl(ss);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].id, "d1");
  EXPECT_EQ(recs[1].embedding.values, e2.values);

  std::stringstream bad("{\"id\":\"x\",\"dim\":3,\"values\":[1,2]}\n");
  EXPECT_THROW(read_embeddings_jsonl(bad), DataError);
}
