#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include "pialm/model_config.hpp"

namespace pialm {

// Exact non-negative rational; kept unreduced so the denominator stays L.
struct Fraction {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  Fraction reduced() const;
  std::string to_string() const;  // "959/1024"
  friend bool operator==(const Fraction& a, const Fraction& b) {
    return static_cast<unsigned __int128>(a.num) * b.den ==
           static_cast<unsigned __int128>(b.num) * a.den;
  }
};

// Share of the L predictions in a nonoverlapping piece whose history holds more
// than k tokens (exclusive) or at least k tokens (inclusive). Prediction i has
// i preceding tokens.
Fraction ctxwin_stats(std::size_t L, std::size_t k, bool inclusive);
// The same by enumerating every position.
Fraction ctxwin_stats_brute(std::size_t L, std::size_t k, bool inclusive);

enum class CostMode { nonoverlapping, cached, generation };

std::string_view to_string(CostMode mode);
CostMode parse_cost_mode(std::string_view text);

struct CostReport {
  CostMode mode = CostMode::nonoverlapping;
  std::size_t queries = 0;  // per attention matrix
  std::size_t keys = 0;
  std::size_t heads = 0;
  std::size_t layers = 0;
  std::uint64_t dot_products_per_pass = 0;  // queries * keys * heads * layers
  double dot_products_per_token = 0.0;      // per output token
  std::size_t parameter_count = 0;
  // Elements alive at once in one pass with everything kept for backward:
  // per layer 2 * heads * queries * keys (scores and weights) plus
  // queries * (7 * d_model + 2 * d_ff), and queries * vocab logits.
  std::uint64_t peak_activation_elements = 0;
};

// Attention shape for one pass. cached: L queries against L' + L keys (plain
// L x L without a cache); nonoverlapping: L x L; generation: one query per step,
// reported for the last token of a full piece (1 x (L' + L) cached, a
// re-encoded L x L window otherwise).
CostReport attention_dims(const ModelConfig& config, CostMode mode);

// Counter increments for feeding the token at 0-based stream index p.
// Cached decoding: one query against min(L', start of p's piece) cached
// tokens plus the p % L + 1 tokens of its own piece.
std::uint64_t cached_step_dot_products(std::size_t p, std::size_t L, std::size_t L_cache,
                                       std::size_t heads, std::size_t layers);
// Re-encoding decoding: a window of w = min(p + 1, L) tokens, w * w per head and layer.
std::uint64_t uncached_step_dot_products(std::size_t p, std::size_t L, std::size_t heads,
                                         std::size_t layers);

}  // namespace pialm
