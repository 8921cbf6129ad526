#include "pialm/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <string>
#include <thread>

#include "pialm/errors.hpp"

namespace pialm {

std::string_view to_string(EvalKind kind) {
  switch (kind) {
    case EvalKind::nonoverlapping: return "nonoverlapping";
    case EvalKind::sliding: return "sliding";
    case EvalKind::cached: return "cached";
  }
  return "?";
}

EvalKind parse_eval_kind(std::string_view text) {
  if (text == "nonoverlapping") return EvalKind::nonoverlapping;
  if (text == "sliding") return EvalKind::sliding;
  if (text == "cached") return EvalKind::cached;
  throw ConfigError("unknown evaluation mode '" + std::string(text) +
                    "' (expected nonoverlapping, sliding or cached)");
}

double EvalReport::mean_loss() const {
  if (tokens_scored == 0) throw ContractError("no tokens were scored");
  return total_loss / static_cast<double>(tokens_scored);
}

double EvalReport::perplexity() const { return std::exp(mean_loss()); }

std::vector<double> EvalReport::mean_loss_by_position() const {
  std::vector<double> out(position_loss.size(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (position_count[i] > 0) out[i] = position_loss[i] / static_cast<double>(position_count[i]);
  }
  return out;
}

std::vector<Window> sliding_windows(std::size_t predictions, std::size_t L, std::size_t S) {
  if (L == 0 || S == 0 || S > L) {
    throw ContractError("stride S = " + std::to_string(S) + " must lie in [1, L = " +
                        std::to_string(L) + "]");
  }
  std::vector<Window> out;
  if (predictions == 0) return out;
  std::size_t end = std::min(L, predictions);
  out.push_back({0, end, 0});
  while (end < predictions) {
    const std::size_t next_end = std::min(end + S, predictions);
    const std::size_t begin = end + S > L ? end + S - L : 0;
    out.push_back({begin, next_end, end});
    end = next_end;
  }
  return out;
}

std::vector<std::size_t> effective_context_lengths(std::size_t predictions, std::size_t L,
                                                   std::size_t S) {
  std::vector<std::size_t> out;
  out.reserve(predictions);
  for (const Window& w : sliding_windows(predictions, L, S)) {
    for (std::size_t p = w.score_begin; p < w.end; ++p) out.push_back(p - w.begin + 1);
  }
  return out;
}

std::vector<std::size_t> cached_context_lengths(std::size_t predictions, std::size_t L,
                                                std::size_t L_cache) {
  std::vector<std::size_t> out(predictions);
  for (std::size_t p = 0; p < predictions; ++p) {
    const std::size_t piece_start = p - p % L;
    out[p] = std::min(L_cache, piece_start) + p % L + 1;
  }
  return out;
}

std::pair<std::size_t, std::size_t> context_window_bounds(std::size_t L, std::size_t S,
                                                          std::size_t L_cache, EvalKind kind) {
  if (L == 0) throw ContractError("L must be at least 1");
  switch (kind) {
    case EvalKind::nonoverlapping:
      return {1, L};
    case EvalKind::sliding:
      if (S == 0 || S > L) throw ContractError("stride must lie in [1, L]");
      return {L - S + 1, L};
    case EvalKind::cached:
      return {L_cache + 1, L_cache + L};
  }
  return {0, 0};
}

std::size_t eval_threads() {
  const char* env = std::getenv("PIALM_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) {
    throw ConfigError("PIALM_THREADS must be a positive integer, got '" + std::string(env) + "'");
  }
  return static_cast<std::size_t>(n);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void require_stream(std::span<const TokenId> stream) {
  if (stream.size() < 2) throw ContractError("evaluation needs a stream of at least 2 tokens");
}

// Runs fn(i) for i in [0, n) on up to eval_threads() workers. Each index writes
// only its own output slot, so results do not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(eval_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void record(EvalReport& report, std::size_t index, double loss) {
  if (report.position_loss.size() <= index) {
    report.position_loss.resize(index + 1, 0.0);
    report.position_count.resize(index + 1, 0);
  }
  report.total_loss += loss;
  report.position_loss[index] += loss;
  ++report.position_count[index];
  ++report.tokens_scored;
}

std::vector<double> window_losses(const Model<float>& model, std::span<const TokenId> stream,
                                  std::size_t begin, std::size_t end, const Cache<float>& cache,
                                  Cache<float>* next_cache) {
  const auto inputs = stream.subspan(begin, end - begin);
  const auto targets = stream.subspan(begin + 1, end - begin);
  InferenceResult<float> r = infer(model, inputs, cache);
  if (next_cache) *next_cache = std::move(r.new_cache);
  return token_losses(r.logits, targets);
}

EvalReport eval_windows(const Model<float>& model, std::span<const TokenId> stream,
                        const std::vector<Window>& windows) {
  const auto start = Clock::now();
  const std::uint64_t dots0 = attention_dot_products();
  std::vector<std::vector<double>> losses(windows.size());
  parallel_for(windows.size(), [&](std::size_t i) {
    losses[i] = window_losses(model, stream, windows[i].begin, windows[i].end, {}, nullptr);
  });
  EvalReport report;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const Window& w = windows[i];
    for (std::size_t p = w.score_begin; p < w.end; ++p) {
      record(report, p - w.begin, losses[i][p - w.begin]);
    }
  }
  report.dot_products = attention_dot_products() - dots0;
  report.wall_seconds = seconds_since(start);
  return report;
}

}  // namespace

EvalReport eval_nonoverlapping(const Model<float>& model, std::span<const TokenId> stream) {
  require_stream(stream);
  const std::size_t M = stream.size() - 1;
  const std::size_t L = static_cast<std::size_t>(model.config.seq_len);
  std::vector<Window> pieces;
  for (std::size_t b = 0; b < M; b += L) pieces.push_back({b, std::min(b + L, M), b});
  return eval_windows(model, stream, pieces);
}

EvalReport eval_sliding(const Model<float>& model, std::span<const TokenId> stream, std::size_t S) {
  require_stream(stream);
  return eval_windows(model, stream,
                      sliding_windows(stream.size() - 1,
                                      static_cast<std::size_t>(model.config.seq_len), S));
}

EvalReport eval_cached(const Model<float>& model, std::span<const TokenId> stream) {
  if (!model.config.use_cache) {
    throw ContractError("cached evaluation needs a model configured with use_cache");
  }
  require_stream(stream);
  const auto start = Clock::now();
  const std::uint64_t dots0 = attention_dot_products();
  const std::size_t M = stream.size() - 1;
  const std::size_t L = static_cast<std::size_t>(model.config.seq_len);
  EvalReport report;
  Cache<float> cache;
  for (std::size_t b = 0; b < M; b += L) {
    const std::size_t e = std::min(b + L, M);
    Cache<float> next;
    const auto losses = window_losses(model, stream, b, e, cache, &next);
    for (std::size_t i = 0; i < losses.size(); ++i) record(report, i, losses[i]);
    cache = std::move(next);
  }
  report.dot_products = attention_dot_products() - dots0;
  report.wall_seconds = seconds_since(start);
  return report;
}

// ---- decoding ------------------------------------------------------------------------

CachedDecoder::CachedDecoder(const Model<float>& model) : model_(model), step_config_(model.config) {
  if (!model.config.use_cache) {
    throw ContractError("cached decoding needs a model configured with use_cache");
  }
  // One new token attends to at most L' + L - 1 stored ones.
  step_config_.cache_len = model.config.cache_len + model.config.seq_len;
}

void CachedDecoder::reset() {
  previous_ = {};
  current_ = {};
}

std::vector<float> CachedDecoder::step(TokenId token) {
  const Cache<float> context = concat_caches(previous_, current_);
  const std::size_t t = current_.token_count();
  Tape<float> tape;
  const BoundParameters<float> bound = bind(tape, model_.params, false);
  ForwardOptions<float> options;
  Tensor<float> position;
  if (model_.config.variant == AttentionVariant::baseline) {
    // Baseline positions restart with every piece, so the token keeps the
    // index it would have inside its piece.
    position = position_table<float>(t, 1, static_cast<std::size_t>(model_.config.d_model));
    options.position_override = &position;
  }
  const TokenId ids[1] = {token};
  ForwardResult<float> r = forward(tape, bound, step_config_, std::span<const TokenId>(ids), context,
                                   options);
  Cache<float> fresh;
  fresh.layers = std::move(r.layer_inputs);
  current_ = concat_caches(current_, fresh);
  if (current_.token_count() == static_cast<std::size_t>(model_.config.seq_len)) {
    previous_ = advance_cache(previous_, current_.layers,
                              static_cast<std::size_t>(model_.config.cache_len));
    current_ = {};
  }
  const auto& logits = r.logits.value();
  return {logits.data().begin(), logits.data().end()};
}

namespace {

TokenId argmax(const std::vector<float>& v) {
  return static_cast<TokenId>(std::max_element(v.begin(), v.end()) - v.begin());
}

double loss_of(const std::vector<float>& logits, TokenId target) {
  const Tensor<float> row({1, logits.size()}, std::vector<float>(logits));
  const TokenId t[1] = {target};
  return token_losses(row, std::span<const TokenId>(t))[0];
}

}  // namespace

GenerationResult generate(const Model<float>& model, std::span<const TokenId> prompt,
                          const GenerationOptions& options, bool keep_logits) {
  if (prompt.empty()) throw ContractError("generation needs a nonempty prompt");
  if (options.teacher_forced && options.reference.size() < options.n_tokens) {
    throw ContractError("teacher-forced generation of " + std::to_string(options.n_tokens) +
                        " tokens needs as many reference tokens, got " +
                        std::to_string(options.reference.size()));
  }
  const auto start = Clock::now();
  GenerationResult result;
  auto after_step = [&](const std::vector<float>& logits, std::size_t t, std::uint64_t dots) {
    const TokenId chosen = argmax(logits);
    result.tokens.push_back(chosen);
    result.step_dot_products.push_back(dots);
    if (keep_logits) result.step_logits.push_back(logits);
    if (options.teacher_forced) {
      result.reference_losses.push_back(loss_of(logits, options.reference[t]));
      return options.reference[t];
    }
    return chosen;
  };

  if (options.use_cache) {
    CachedDecoder decoder(model);
    const std::uint64_t d0 = attention_dot_products();
    for (std::size_t i = 0; i + 1 < prompt.size(); ++i) decoder.step(prompt[i]);
    result.prefill_dot_products = attention_dot_products() - d0;
    TokenId next = prompt.back();
    for (std::size_t t = 0; t < options.n_tokens; ++t) {
      const std::uint64_t before = attention_dot_products();
      const auto logits = decoder.step(next);
      next = after_step(logits, t, attention_dot_products() - before);
    }
  } else {
    const std::size_t L = static_cast<std::size_t>(model.config.seq_len);
    std::vector<TokenId> history(prompt.begin(), prompt.end());
    for (std::size_t t = 0; t < options.n_tokens; ++t) {
      const std::size_t w = std::min(history.size(), L);
      const std::uint64_t before = attention_dot_products();
      const auto r = infer(model, std::span<const TokenId>(history).last(w), Cache<float>{});
      const auto last = r.logits.row(w - 1);
      const std::vector<float> logits(last.begin(), last.end());
      history.push_back(after_step(logits, t, attention_dot_products() - before));
    }
  }
  result.wall_seconds = seconds_since(start);
  return result;
}

}  // namespace pialm
