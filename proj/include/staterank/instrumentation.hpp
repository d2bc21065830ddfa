#pragma once

#include <atomic>
#include <cstdint>

namespace staterank {

// Process-wide counters used to check the cost claims (documents encoded
// once, offline reranking touches only query tokens) without timing.
struct Counters {
  std::atomic<std::uint64_t> fresh_forward_calls{0};    // forward passes from a zero state
  std::atomic<std::uint64_t> resumed_forward_calls{0};  // forward passes from an injected state
  std::atomic<std::uint64_t> recurrent_steps{0};        // tokens pushed through the full stack
  std::atomic<std::uint64_t> document_tokenizations{0};

  void reset() noexcept {
    fresh_forward_calls = 0;
    resumed_forward_calls = 0;
    recurrent_steps = 0;
    document_tokenizations = 0;
  }
};

inline Counters& counters() noexcept {
  static Counters instance;
  return instance;
}

}  // namespace staterank
