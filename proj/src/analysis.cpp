#include "pialm/analysis.hpp"

#include <algorithm>
#include <numeric>

#include "pialm/errors.hpp"

namespace pialm {

Fraction Fraction::reduced() const {
  const std::uint64_t g = std::gcd(num, den);
  return g == 0 ? *this : Fraction{num / g, den / g};
}

std::string Fraction::to_string() const { return std::to_string(num) + "/" + std::to_string(den); }

Fraction ctxwin_stats(std::size_t L, std::size_t k, bool inclusive) {
  if (L == 0) throw ContractError("ctxwin_stats needs L >= 1");
  const std::size_t need = inclusive ? k : k + 1;  // smallest qualifying history
  return {L > need ? L - need : 0, L};
}

Fraction ctxwin_stats_brute(std::size_t L, std::size_t k, bool inclusive) {
  if (L == 0) throw ContractError("ctxwin_stats needs L >= 1");
  std::uint64_t count = 0;
  for (std::size_t i = 0; i < L; ++i) {
    if (inclusive ? i >= k : i > k) ++count;
  }
  return {count, L};
}

std::string_view to_string(CostMode mode) {
  switch (mode) {
    case CostMode::nonoverlapping: return "nonoverlapping";
    case CostMode::cached: return "cached";
    case CostMode::generation: return "generation";
  }
  return "?";
}

CostMode parse_cost_mode(std::string_view text) {
  if (text == "nonoverlapping") return CostMode::nonoverlapping;
  if (text == "cached") return CostMode::cached;
  if (text == "generation") return CostMode::generation;
  throw ConfigError("unknown cost mode '" + std::string(text) +
                    "' (expected nonoverlapping, cached or generation)");
}

CostReport attention_dims(const ModelConfig& config, CostMode mode) {
  config.validate();
  const std::size_t L = static_cast<std::size_t>(config.seq_len);
  const std::size_t cache = config.use_cache ? static_cast<std::size_t>(config.cache_len) : 0;
  CostReport r;
  r.mode = mode;
  r.heads = static_cast<std::size_t>(config.n_heads);
  r.layers = static_cast<std::size_t>(config.n_layers);
  std::size_t outputs = L;
  switch (mode) {
    case CostMode::nonoverlapping:
      r.queries = L;
      r.keys = L;
      break;
    case CostMode::cached:
      r.queries = L;
      r.keys = cache + L;
      break;
    case CostMode::generation:
      r.queries = cache > 0 ? 1 : L;
      r.keys = cache > 0 ? cache + L : L;
      outputs = 1;
      break;
  }
  r.dot_products_per_pass = static_cast<std::uint64_t>(r.queries) * r.keys * r.heads * r.layers;
  r.dot_products_per_token = static_cast<double>(r.dot_products_per_pass) / static_cast<double>(outputs);
  r.parameter_count = parameter_count(config);
  const std::uint64_t d = static_cast<std::uint64_t>(config.d_model);
  const std::uint64_t ff = static_cast<std::uint64_t>(config.d_ff);
  const std::uint64_t per_layer =
      2ull * r.heads * r.queries * r.keys + static_cast<std::uint64_t>(r.queries) * (7 * d + 2 * ff);
  r.peak_activation_elements =
      r.layers * per_layer + static_cast<std::uint64_t>(r.queries) *
                                 static_cast<std::uint64_t>(std::max(config.vocab_size, 0));
  return r;
}

std::uint64_t cached_step_dot_products(std::size_t p, std::size_t L, std::size_t L_cache,
                                       std::size_t heads, std::size_t layers) {
  if (L == 0) throw ContractError("L must be at least 1");
  const std::size_t start = p - p % L;
  const std::uint64_t keys = std::min(L_cache, start) + p % L + 1;
  return keys * heads * layers;
}

std::uint64_t uncached_step_dot_products(std::size_t p, std::size_t L, std::size_t heads,
                                         std::size_t layers) {
  if (L == 0) throw ContractError("L must be at least 1");
  const std::uint64_t w = std::min(p + 1, L);
  return w * w * heads * layers;
}

}  // namespace pialm
