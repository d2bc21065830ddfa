#pragma once

// Domain-aware batch scheduling for simulated data-parallel workers: each
// worker's micro-batch comes from one domain, and workers in the same step
// get different domains whenever there are enough of them.

#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "staterank/embedder.hpp"

namespace staterank {

struct DomainCorpus {
  std::map<std::string, std::vector<std::string>> domains;

  std::size_t domain_count() const noexcept { return domains.size(); }
  std::size_t sample_count() const noexcept {
    std::size_t n = 0;
    for (const auto& [_, ids] : domains) n += ids.size();
    return n;
  }
};

struct DomainRecord {
  std::string id;
  std::string domain;
};

inline DomainCorpus partition_by_domain(const std::vector<DomainRecord>& records) {
  if (records.empty()) throw DataError("partition_by_domain: no records");
  DomainCorpus c;
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (r.domain.empty()) throw DataError("record " + r.id + " has an empty domain tag");
    if (!seen.insert(r.id).second) throw DataError("duplicate sample id: " + r.id);
    c.domains[r.domain].push_back(r.id);
  }
  return c;
}

struct PlanSlot {
  std::string domain;
  std::vector<std::string> ids;

  friend bool operator==(const PlanSlot&, const PlanSlot&) = default;
};

struct CurriculumPlan {
  std::vector<std::vector<PlanSlot>> steps;  // steps[s][worker]
  bool degenerate = false;                   // fewer domains than workers
  std::size_t workers = 0;
  std::size_t batch = 0;
  std::uint64_t seed = 0;
  std::size_t dropped = 0;  // samples left unused when the epoch ended

  friend bool operator==(const CurriculumPlan&, const CurriculumPlan&) = default;
};

// One epoch. Each domain's samples are shuffled once and consumed in chunks
// of B. Step s walks a seeded permutation of the domains starting at offset
// s mod K and takes the first N that can still fill a batch. With K < N the
// walk wraps and domains repeat within a step. A step is emitted only if all
// N slots fill; the epoch ends at the first step that cannot.
inline CurriculumPlan build_plan(const DomainCorpus& corpus, std::size_t workers, std::size_t batch,
                                 std::uint64_t seed) {
  if (workers < 1) throw UsageError("build_plan: need at least one worker");
  if (batch < 2) throw UsageError("build_plan: batch size must be >= 2 for in-batch negatives");
  const std::size_t K = corpus.domain_count();
  if (K == 0) throw UsageError("build_plan: corpus has no domains");
  std::size_t largest = 0;
  for (const auto& [name, ids] : corpus.domains) {
    if (ids.empty()) throw DataError("build_plan: domain " + name + " is empty");
    largest = std::max(largest, ids.size());
  }
  if (batch > largest) throw UsageError("build_plan: batch size exceeds every domain; no step is possible");

  Rng rng(seed);
  std::vector<std::string> order;
  std::vector<std::vector<std::string>> pools;
  for (const auto& [name, ids] : corpus.domains) {
    order.push_back(name);
    pools.push_back(ids);
  }
  for (auto& p : pools) rng.shuffle(p);
  std::vector<std::size_t> perm(K);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm);

  CurriculumPlan plan;
  plan.degenerate = K < workers;
  plan.workers = workers;
  plan.batch = batch;
  plan.seed = seed;

  std::vector<std::size_t> cursor(K, 0);
  for (std::size_t step = 0;; ++step) {
    auto trial = cursor;
    std::vector<PlanSlot> slots;
    const std::size_t start = step % K;
    // Without repeats a domain is visited at most once per step; with repeats
    // the walk may wrap until no domain can supply a batch.
    const std::size_t max_visits = plan.degenerate ? K * workers : K;
    for (std::size_t v = 0; v < max_visits && slots.size() < workers; ++v) {
      const std::size_t d = perm[(start + v) % K];
      if (pools[d].size() - trial[d] < batch) continue;
      PlanSlot slot{order[d], {}};
      slot.ids.assign(pools[d].begin() + static_cast<std::ptrdiff_t>(trial[d]),
                      pools[d].begin() + static_cast<std::ptrdiff_t>(trial[d] + batch));
      trial[d] += batch;
      slots.push_back(std::move(slot));
    }
    if (slots.size() < workers) break;
    cursor = std::move(trial);
    plan.steps.push_back(std::move(slots));
  }
  for (std::size_t d = 0; d < K; ++d) plan.dropped += pools[d].size() - cursor[d];
  return plan;
}

inline nlohmann::json plan_to_json(const CurriculumPlan& plan) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& step : plan.steps) {
    nlohmann::json workers = nlohmann::json::array();
    for (const auto& slot : step) workers.push_back({{"domain", slot.domain}, {"ids", slot.ids}});
    steps.push_back(std::move(workers));
  }
  return {{"steps", std::move(steps)},
          {"flags",
           {{"degenerate", plan.degenerate},
            {"workers", plan.workers},
            {"batch", plan.batch},
            {"seed", plan.seed},
            {"dropped", plan.dropped}}}};
}

struct PairEmbedding {
  Vector query;
  Vector doc;
};

// B×B cosine matrix for one worker slot; positives on the diagonal, and
// every off-diagonal document is from the same domain as the query.
inline SimMatrix assemble_sim_batch(const PlanSlot& slot, const std::map<std::string, PairEmbedding>& embeddings,
                                    double tau = kDefaultTemperature) {
  if (slot.ids.size() < 2) throw UsageError("assemble_sim_batch: batch needs at least 2 pairs");
  std::vector<Vector> q, d;
  for (const auto& id : slot.ids) {
    const auto it = embeddings.find(id);
    if (it == embeddings.end()) throw NotFoundError("assemble_sim_batch: no embedding for sample " + id);
    q.push_back(it->second.query);
    d.push_back(it->second.doc);
  }
  return similarity_matrix(q, d, tau);
}

}  // namespace staterank
