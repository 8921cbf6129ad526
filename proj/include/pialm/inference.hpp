#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "pialm/model.hpp"

namespace pialm {

enum class EvalKind { nonoverlapping, sliding, cached };

std::string_view to_string(EvalKind kind);
EvalKind parse_eval_kind(std::string_view text);

struct EvalReport {
  double total_loss = 0.0;  // summed natural-log loss
  std::size_t tokens_scored = 0;
  // Loss sums and counts by index of the scored token inside its window.
  std::vector<double> position_loss;
  std::vector<std::size_t> position_count;
  std::uint64_t dot_products = 0;
  double wall_seconds = 0.0;

  double mean_loss() const;
  double perplexity() const;
  std::vector<double> mean_loss_by_position() const;
};

// One forward pass: inputs [begin, end) of the prediction sequence, scoring
// predictions [score_begin, end).
struct Window {
  std::size_t begin = 0, end = 0, score_begin = 0;

  friend bool operator==(const Window&, const Window&) = default;
};

// Windows over `predictions` positions of length <= L advancing by S. The
// first window scores everything it covers; each later one scores only what
// lies past the previous window's end, so every position is scored once.
// S = L reproduces the nonoverlapping cut exactly.
std::vector<Window> sliding_windows(std::size_t predictions, std::size_t L, std::size_t S);

// Tokens each scored prediction conditions on, in stream order.
std::vector<std::size_t> effective_context_lengths(std::size_t predictions, std::size_t L,
                                                   std::size_t S);
std::vector<std::size_t> cached_context_lengths(std::size_t predictions, std::size_t L,
                                                std::size_t L_cache);

// (min, max) effective context window sizes.
std::pair<std::size_t, std::size_t> context_window_bounds(std::size_t L, std::size_t S,
                                                          std::size_t L_cache, EvalKind kind);

// Independent L-token pieces, all predictions scored.
EvalReport eval_nonoverlapping(const Model<float>& model, std::span<const TokenId> stream);
// Stride S in [1, L].
EvalReport eval_sliding(const Model<float>& model, std::span<const TokenId> stream, std::size_t S);
// L-token pieces, each attending to the cache left by the previous one.
EvalReport eval_cached(const Model<float>& model, std::span<const TokenId> stream);

// Worker count for piecewise evaluation, from PIALM_THREADS (default 1).
std::size_t eval_threads();

// Token-at-a-time decoding over cached layer inputs. The context of each new
// token is the previous full piece (at most L' tokens, as left by the
// cache update) plus the tokens already fed in the current piece; once the
// current piece reaches L tokens it becomes the previous one. This visits
// exactly the contexts eval_cached uses.
class CachedDecoder {
 public:
  explicit CachedDecoder(const Model<float>& model);

  // Feeds one token and returns its next-token logits [V].
  std::vector<float> step(TokenId token);
  std::size_t context_size() const { return previous_.token_count() + current_.token_count(); }
  void reset();

 private:
  const Model<float>& model_;
  ModelConfig step_config_;
  Cache<float> previous_;
  Cache<float> current_;
};

struct GenerationOptions {
  std::size_t n_tokens = 0;
  bool use_cache = true;
  // Feed reference[t] after step t instead of the argmax (needs n_tokens
  // reference tokens); the step losses of the reference are recorded.
  bool teacher_forced = false;
  std::span<const TokenId> reference;
};

struct GenerationResult {
  std::vector<TokenId> tokens;              // greedy choice at every step
  std::vector<double> reference_losses;     // teacher-forced only
  std::vector<std::uint64_t> step_dot_products;  // attention counter per step
  std::uint64_t prefill_dot_products = 0;
  double wall_seconds = 0.0;
  std::vector<std::vector<float>> step_logits;  // filled when keep_logits
};

// Greedy generation. Cached decoding needs a cache-enabled model; otherwise
// every step re-encodes the last min(length, L) tokens.
GenerationResult generate(const Model<float>& model, std::span<const TokenId> prompt,
                          const GenerationOptions& options, bool keep_logits = false);

}  // namespace pialm
