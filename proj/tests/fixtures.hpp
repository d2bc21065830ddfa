#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include "staterank/reranker.hpp"

namespace fixtures {

using namespace staterank;

inline ModelConfig tiny_config() { return ModelConfig{}; }

inline ModelConfig micro_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.head_size = 4;
  c.ffn_mult = 2;
  return c;
}

inline TokenSequence random_tokens(std::size_t n, Rng& rng) {
  TokenSequence t(n);
  for (auto& x : t) x = static_cast<Token>(rng.below(256));
  return t;
}

inline Vector random_vector(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Vector v(n);
  fill_uniform(v.span(), rng, lo, hi);
  return v;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  fill_uniform(m.span(), rng, lo, hi);
  return m;
}

inline TokenSequence bytes_of(const std::string& s) { return TokenSequence(s.begin(), s.end()); }

// Fresh scratch directory under STATERANK_TMP (or the system temp dir).
inline std::filesystem::path scratch_dir(const std::string& name) {
  const char* env = std::getenv("STATERANK_TMP");
  const auto root = env ? std::filesystem::path(env) : std::filesystem::temp_directory_path();
  auto dir = root / ("staterank_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline StateStack random_full_stack(const ModelWeights& m, Rng& rng, double scale = 1.0) {
  auto s = zero_state(m);
  for (auto& ls : s.states) {
    for (auto& w : ls.wkv) fill_uniform(w.span(), rng, -scale, scale);
    fill_uniform(ls.tm_shift.span(), rng, -1.0, 1.0);
    fill_uniform(ls.cm_shift.span(), rng, -1.0, 1.0);
  }
  return s;
}

// Reranker weights with every tensor perturbed away from its init so that
// zero-initialized pieces (biases) are exercised by gradient checks.
inline RerankerWeights jittered_reranker(const RerankerConfig& c, std::uint64_t seed) {
  auto rw = init_reranker(c, seed);
  Rng rng(seed + 100);
  for (auto& b : rw.proj_bias) fill_uniform(b.span(), rng, -0.3, 0.3);
  fill_uniform(rw.ln_out_bias.span(), rng, -0.3, 0.3);
  for (auto& g : rw.ln_out_gain) g += rng.uniform(-0.2, 0.2);
  rw.head_b[0] = 0.1;
  for (auto& b : rw.blocks) {
    for (auto* v : {&b.ln1_bias, &b.ln2_bias}) fill_uniform(v->span(), rng, -0.2, 0.2);
    for (auto* v : {&b.ln1_gain, &b.ln2_gain, &b.gn_gain})
      for (auto& g : *v) g += rng.uniform(-0.2, 0.2);
  }
  return rw;
}

// Two state distributions: a fixed pattern plus noise, pattern chosen by label.
inline std::vector<RerankExample> separable_examples(const RerankerConfig& c, std::size_t n, Rng& rng,
                                                     const StateStack& pos, const StateStack& neg) {
  std::vector<RerankExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(rng.below(2));
    auto s = extract_states(label ? pos : neg, c.layer_indices);
    for (auto& ls : s.states)
      for (auto& w : ls.wkv)
        for (auto& v : w.span()) v += rng.uniform(-0.3, 0.3);
    out.push_back({std::move(s), label});
  }
  return out;
}

}  // namespace fixtures
