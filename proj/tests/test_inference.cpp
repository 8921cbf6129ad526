#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <numeric>

#include "pialm/errors.hpp"
#include "pialm/inference.hpp"
#include "pialm/trainer.hpp"
#include "test_util.hpp"

namespace pialm {
namespace {

using testing::random_tokens;

ModelConfig toy(AttentionVariant variant, bool cache, int L = 8, int L_cache = 8) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.n_heads = 4;
  c.d_ff = 64;
  c.vocab_size = 20;
  c.seq_len = L;
  c.cache_len = L_cache;
  c.variant = variant;
  c.use_cache = cache;
  return c;
}

// Weights far from init so logits carry structure.
Model<float> random_model(const ModelConfig& cfg, std::uint64_t seed, double spread = 0.3) {
  Model<float> m{cfg, init_parameters<float>(cfg, seed)};
  std::mt19937_64 rng(seed * 7 + 1);
  std::uniform_real_distribution<double> u(-spread, spread);
  m.params.for_each([&](const std::string&, Tensor<float>& t) {
    for (float& v : t.data()) v += static_cast<float>(u(rng));
  });
  return m;
}

std::vector<TokenId> stream_of(std::size_t n, int V, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tokens(n, V, rng);
}

// ---- window bookkeeping ------------------------------------------------------

TEST(Windows, EveryPredictionScoredOnceForAllStrides) {
  for (std::size_t M : {1u, 7u, 8u, 9u, 50u, 101u}) {
    for (std::size_t L : {1u, 3u, 8u}) {
      for (std::size_t S = 1; S <= L; ++S) {
        std::vector<int> hits(M, 0);
        std::size_t prev_end = 0;
        for (const Window& w : sliding_windows(M, L, S)) {
          ASSERT_LE(w.end - w.begin, L);
          ASSERT_LE(w.begin, w.score_begin);
          ASSERT_LE(w.score_begin, w.end);
          EXPECT_EQ(w.score_begin, prev_end);
          prev_end = w.end;
          for (std::size_t p = w.score_begin; p < w.end; ++p) ++hits[p];
        }
        for (std::size_t p = 0; p < M; ++p) EXPECT_EQ(hits[p], 1) << M << " " << L << " " << S;
      }
    }
  }
}

TEST(Windows, StrideLIsTheNonoverlappingCut) {
  const auto ws = sliding_windows(30, 8, 8);
  ASSERT_EQ(ws.size(), 4u);
  for (std::size_t i = 0; i < ws.size(); ++i) {
    EXPECT_EQ(ws[i].begin, 8 * i);
    EXPECT_EQ(ws[i].score_begin, 8 * i);
    EXPECT_EQ(ws[i].end, std::min<std::size_t>(8 * i + 8, 30));
  }
}

TEST(Windows, BadStrideIsAContractError) {
  EXPECT_THROW(sliding_windows(10, 4, 0), ContractError);
  EXPECT_THROW(sliding_windows(10, 4, 5), ContractError);
}

TEST(Windows, StrideOneGivesFullContextAfterTheFirstWindow) {
  const std::size_t L = 16;
  const auto ctx = effective_context_lengths(200, L, 1);
  for (std::size_t p = 0; p < ctx.size(); ++p) EXPECT_EQ(ctx[p], std::min(p + 1, L));
}

// Pointwise only for nested grids (S' divides S): with S = 3 a position can
// end its block while S = 2 starts a new one there.
TEST(Windows, DividingStrideNeverShortensContext) {
  const std::size_t M = 333, L = 12;
  for (std::size_t S = 2; S <= L; ++S) {
    const auto wide = effective_context_lengths(M, L, S);
    for (std::size_t T = 1; T < S; ++T) {
      if (S % T != 0) continue;
      const auto narrow = effective_context_lengths(M, L, T);
      for (std::size_t p = 0; p < M; ++p) EXPECT_GE(narrow[p], wide[p]) << S << " " << T << " " << p;
    }
  }
}

TEST(Windows, SmallerStrideRaisesMinimumAndMeanContext) {
  const std::size_t M = 1200, L = 12;
  std::size_t prev_sum = 0, prev_min = 0;
  for (std::size_t S = L; S >= 1; --S) {
    const auto ctx = effective_context_lengths(M, L, S);
    const std::size_t sum = std::accumulate(ctx.begin(), ctx.end(), std::size_t{0});
    const std::size_t lo = *std::min_element(ctx.begin() + L, ctx.end());
    EXPECT_GE(sum, prev_sum) << S;
    EXPECT_GE(lo, prev_min) << S;
    prev_sum = sum;
    prev_min = lo;
  }
}

using Bounds = std::pair<std::size_t, std::size_t>;

TEST(Bounds, Examples) {
  EXPECT_EQ(context_window_bounds(3072, 512, 0, EvalKind::sliding), Bounds(2561, 3072));
  EXPECT_EQ(context_window_bounds(512, 512, 512, EvalKind::cached), Bounds(513, 1024));
  EXPECT_EQ(context_window_bounds(64, 64, 0, EvalKind::sliding),
            context_window_bounds(64, 64, 0, EvalKind::nonoverlapping));
  EXPECT_EQ(context_window_bounds(64, 64, 0, EvalKind::nonoverlapping), Bounds(1, 64));
}

TEST(Bounds, AgreeWithEnumeratedContexts) {
  const std::size_t M = 1000;
  for (std::size_t L : {8u, 20u}) {
    for (std::size_t S : {std::size_t{1}, std::size_t{3}, L}) {
      const auto ctx = effective_context_lengths(M, L, S);
      // The first window is the only one allowed below the sliding minimum.
      const auto first_end = std::min(L, M);
      const auto later = std::vector<std::size_t>(ctx.begin() + first_end, ctx.end());
      const auto [lo, hi] = context_window_bounds(L, S, 0, EvalKind::sliding);
      EXPECT_EQ(*std::min_element(later.begin(), later.end()), lo);
      EXPECT_EQ(*std::max_element(ctx.begin(), ctx.end()), hi);
    }
    for (std::size_t Lc : {std::size_t{5}, L, 2 * L}) {
      const auto ctx = cached_context_lengths(M, L, Lc);
      // Once the cache has filled up.
      const std::size_t warm = (Lc + L - 1) / L * L;
      const std::vector<std::size_t> later(ctx.begin() + warm, ctx.end());
      const auto [lo, hi] = context_window_bounds(L, L, Lc, EvalKind::cached);
      EXPECT_EQ(*std::min_element(later.begin(), later.end()), lo);
      EXPECT_EQ(*std::max_element(later.begin(), later.end()), hi);
      EXPECT_EQ(*std::max_element(ctx.begin(), ctx.begin() + warm), std::max(L, std::min(Lc, warm - L) + L));
    }
  }
}

// ---- evaluation --------------------------------------------------------------

TEST(Eval, StrideIdentityIsExact) {
  for (auto variant : {AttentionVariant::baseline, AttentionVariant::pia}) {
    const Model<float> m = random_model(toy(variant, false), 4);
    const auto s = stream_of(3001, 20, 5);
    const EvalReport a = eval_nonoverlapping(m, s);
    const EvalReport b = eval_sliding(m, s, 8);
    EXPECT_EQ(a.total_loss, b.total_loss);
    EXPECT_EQ(a.tokens_scored, b.tokens_scored);
    EXPECT_EQ(a.dot_products, b.dot_products);
  }
}

TEST(Eval, EveryModeScoresAllPredictions) {
  const Model<float> m = random_model(toy(AttentionVariant::pia, true, 8, 5), 6);
  for (std::size_t n : {2u, 9u, 17u, 100u}) {
    const auto s = stream_of(n, 20, n);
    EXPECT_EQ(eval_nonoverlapping(m, s).tokens_scored, n - 1);
    EXPECT_EQ(eval_cached(m, s).tokens_scored, n - 1);
    for (std::size_t S = 1; S <= 8; ++S) EXPECT_EQ(eval_sliding(m, s, S).tokens_scored, n - 1);
  }
}

TEST(Eval, PerplexityIsExpOfMeanLoss) {
  const Model<float> m = random_model(toy(AttentionVariant::baseline, false), 7);
  const EvalReport r = eval_sliding(m, stream_of(500, 20, 1), 3);
  EXPECT_DOUBLE_EQ(r.perplexity(), std::exp(r.total_loss / static_cast<double>(r.tokens_scored)));
  const double hist = std::accumulate(r.position_loss.begin(), r.position_loss.end(), 0.0);
  EXPECT_NEAR(hist, r.total_loss, 1e-9 * r.total_loss);
}

TEST(Eval, UntrainedModelIsNearUniform) {
  ModelConfig cfg = toy(AttentionVariant::pia, false);
  cfg.vocab_size = 80;
  const Model<float> m{cfg, init_parameters<float>(cfg, 1)};
  const double ppl = eval_nonoverlapping(m, stream_of(4000, 80, 2)).perplexity();
  EXPECT_NEAR(ppl / 80.0, 1.0, 0.05);
}

TEST(Eval, SmallerStrideCostsMoreDotProducts) {
  const Model<float> m = random_model(toy(AttentionVariant::baseline, false), 8);
  const auto s = stream_of(400, 20, 3);
  EXPECT_GT(eval_sliding(m, s, 1).dot_products, eval_sliding(m, s, 4).dot_products);
  EXPECT_GT(eval_sliding(m, s, 4).dot_products, eval_nonoverlapping(m, s).dot_products);
}

TEST(Eval, CachedNeedsACacheModel) {
  const Model<float> m = random_model(toy(AttentionVariant::pia, false), 1);
  EXPECT_THROW(eval_cached(m, stream_of(50, 20, 1)), ContractError);
}

TEST(Eval, CachedFirstPieceEqualsPlainPia) {
  const Model<float> cached = random_model(toy(AttentionVariant::pia, true), 9);
  Model<float> plain = cached;
  plain.config.use_cache = false;
  const auto s = stream_of(9, 20, 4);
  EXPECT_EQ(eval_cached(cached, s).total_loss, eval_nonoverlapping(plain, s).total_loss);
}

TEST(Eval, ZeroLengthCacheIsNonoverlapping) {
  const Model<float> cached = random_model(toy(AttentionVariant::pia, true, 8, 0), 9);
  Model<float> plain = cached;
  plain.config.use_cache = false;
  const auto s = stream_of(100, 20, 4);
  EXPECT_EQ(eval_cached(cached, s).total_loss, eval_nonoverlapping(plain, s).total_loss);
}

TEST(Eval, ThreadCountDoesNotChangeResults) {
  const Model<float> m = random_model(toy(AttentionVariant::pia, true, 8, 6), 10);
  const auto s = stream_of(2001, 20, 6);
  ::setenv("PIALM_THREADS", "1", 1);
  const EvalReport a1 = eval_nonoverlapping(m, s), b1 = eval_sliding(m, s, 3), c1 = eval_cached(m, s);
  ::setenv("PIALM_THREADS", "3", 1);
  const EvalReport a3 = eval_nonoverlapping(m, s), b3 = eval_sliding(m, s, 3), c3 = eval_cached(m, s);
  ::setenv("PIALM_THREADS", "zero", 1);
  EXPECT_THROW(eval_threads(), ConfigError);
  ::unsetenv("PIALM_THREADS");
  EXPECT_EQ(a1.total_loss, a3.total_loss);
  EXPECT_EQ(b1.total_loss, b3.total_loss);
  EXPECT_EQ(c1.total_loss, c3.total_loss);
  EXPECT_EQ(c1.position_loss, c3.position_loss);
}

TEST(Eval, CachedEqualsTokenByTokenScoring) {
  for (auto [L, Lc] : {std::pair{8, 8}, std::pair{8, 5}, std::pair{6, 13}}) {
    const Model<float> m = random_model(toy(AttentionVariant::pia, true, L, Lc), 11);
    const auto s = stream_of(301, 20, 7);
    const EvalReport r = eval_cached(m, s);
    GenerationOptions g;
    g.n_tokens = s.size() - 1;
    g.teacher_forced = true;
    g.reference = std::span<const TokenId>(s).subspan(1);
    const GenerationResult gen = generate(m, std::span<const TokenId>(s).first(1), g);
    const double loss = std::accumulate(gen.reference_losses.begin(), gen.reference_losses.end(), 0.0);
    const double ppl = std::exp(loss / static_cast<double>(gen.reference_losses.size()));
    EXPECT_NEAR(ppl, r.perplexity(), 1e-4) << L << " " << Lc;
  }
}

// ---- generation --------------------------------------------------------------

std::vector<float> last_row(const Tensor<float>& logits, std::size_t row, std::size_t V) {
  const float* p = logits.data().data() + row * V;
  return {p, p + V};
}

// Logits for the token at stream index t, recomputed from scratch: every full
// piece before t's piece is run through the model with the cache the previous
// one left, then t's piece up to t.
std::vector<float> recomputed_logits(const Model<float>& m, std::span<const TokenId> s, std::size_t t) {
  const std::size_t L = static_cast<std::size_t>(m.config.seq_len);
  const std::size_t piece = t - t % L;
  Cache<float> cache;
  for (std::size_t b = 0; b < piece; b += L) cache = infer(m, s.subspan(b, L), cache).new_cache;
  const auto r = infer(m, s.subspan(piece, t + 1 - piece), cache);
  return last_row(r.logits, t - piece, static_cast<std::size_t>(m.config.vocab_size));
}

// While the previous piece was itself computed without a cache and is held
// whole (L' >= L), the decoder's context equals one plain forward over
// previous ++ current.
std::vector<float> one_shot_logits(const Model<float>& m, std::span<const TokenId> s, std::size_t t) {
  const std::size_t L = static_cast<std::size_t>(m.config.seq_len);
  const std::size_t Lc = static_cast<std::size_t>(m.config.cache_len);
  const std::size_t piece = t - t % L;
  const std::size_t begin = piece - std::min(Lc, piece);
  Model<float> wide = m;
  wide.config.use_cache = false;
  wide.config.seq_len = static_cast<int>(Lc + L);
  const auto r = infer(wide, s.subspan(begin, t + 1 - begin), Cache<float>{});
  return last_row(r.logits, t - begin, static_cast<std::size_t>(m.config.vocab_size));
}

double max_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, double(std::abs(a[i] - b[i])));
  return worst;
}

TEST(Generate, CachedDecoderMatchesRecomputation) {
  for (auto [L, Lc] : {std::pair{8, 8}, std::pair{4, 7}, std::pair{6, 3}}) {
    const Model<float> m = random_model(toy(AttentionVariant::pia, true, L, Lc), 12);
    const auto s = stream_of(40, 20, 8);
    CachedDecoder dec(m);
    double worst = 0.0, worst_one_shot = 0.0;
    for (std::size_t t = 0; t < s.size(); ++t) {
      const auto got = dec.step(s[t]);
      worst = std::max(worst, max_diff(got, recomputed_logits(m, s, t)));
      if (Lc >= L && t < 2 * static_cast<std::size_t>(L)) {
        worst_one_shot = std::max(worst_one_shot, max_diff(got, one_shot_logits(m, s, t)));
      }
    }
    EXPECT_LE(worst, 1e-5) << L << " " << Lc;
    EXPECT_LE(worst_one_shot, 1e-5) << L << " " << Lc;
  }
}

TEST(Generate, CachedAndRecomputedGreedyTokensAgree) {
  const Model<float> m = random_model(toy(AttentionVariant::pia, true, 6, 6), 13);
  const auto prompt = stream_of(5, 20, 9);
  GenerationOptions g;
  g.n_tokens = 30;
  const GenerationResult cached = generate(m, prompt, g, true);
  std::vector<TokenId> seq = prompt;
  for (std::size_t t = 0; t < g.n_tokens; ++t) {
    const auto want = recomputed_logits(m, seq, seq.size() - 1);
    EXPECT_LE(max_diff(cached.step_logits[t], want), 1e-5) << t;
    EXPECT_EQ(cached.tokens[t],
              static_cast<TokenId>(std::max_element(want.begin(), want.end()) - want.begin()));
    seq.push_back(cached.tokens[t]);
  }
}

TEST(Generate, GreedyIsDeterministic) {
  const Model<float> m = random_model(toy(AttentionVariant::pia, true), 14);
  const auto prompt = stream_of(3, 20, 10);
  GenerationOptions g;
  g.n_tokens = 25;
  EXPECT_EQ(generate(m, prompt, g).tokens, generate(m, prompt, g).tokens);
  g.use_cache = false;
  EXPECT_EQ(generate(m, prompt, g).tokens, generate(m, prompt, g).tokens);
}

TEST(Generate, EmptyPromptAndShortReferenceAreContractErrors) {
  const Model<float> m = random_model(toy(AttentionVariant::pia, true), 15);
  GenerationOptions g;
  g.n_tokens = 3;
  EXPECT_THROW(generate(m, {}, g), ContractError);
  g.teacher_forced = true;
  const std::vector<TokenId> ref{1, 2};
  g.reference = ref;
  EXPECT_THROW(generate(m, std::vector<TokenId>{1}, g), ContractError);
}

TEST(Generate, CachedNeedsACacheModel) {
  const Model<float> m = random_model(toy(AttentionVariant::pia, false), 15);
  GenerationOptions g;
  g.n_tokens = 3;
  EXPECT_THROW(generate(m, std::vector<TokenId>{1}, g), ContractError);
}

}  // namespace
}  // namespace pialm
