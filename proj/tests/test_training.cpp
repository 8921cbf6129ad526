#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "pialm/checkpoint.hpp"
#include "pialm/curriculum.hpp"
#include "pialm/errors.hpp"
#include "pialm/inference.hpp"
#include "pialm/optimizer.hpp"
#include "pialm/trainer.hpp"
#include "test_util.hpp"

namespace pialm {
namespace {

using testing::max_abs_diff;

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("pialm_test_training_" + name)).string();
}

// First 10k characters of the training split plus 4k for dev.
const Corpus& toy_corpus() {
  static const Corpus c = [] {
    const std::string dir = PIALM_DATA_DIR "/sotu/";
    CorpusOptions o;
    o.train_limit = 10000;
    o.dev_limit = 4000;
    return load_corpus(dir + "train.txt", dir + "dev.txt", "", o);
  }();
  return c;
}

ModelConfig small_config(AttentionVariant variant, bool cache, int L = 32) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.n_heads = 2;
  c.d_ff = 64;
  c.vocab_size = static_cast<int>(toy_corpus().vocab.size());
  c.seq_len = L;
  c.cache_len = L;
  c.variant = variant;
  c.use_cache = cache;
  return c;
}

AdamConfig fast_adam() {
  AdamConfig a;
  a.lr = 3e-3;
  return a;
}

Trainer make_trainer(const ModelConfig& cfg, const Curriculum& cur, std::uint64_t seed = 3) {
  Trainer t(cfg, cur, fast_adam(), seed, !cfg.use_cache, init_parameters<float>(cfg, seed));
  t.set_data(toy_corpus().train, toy_corpus().dev);
  return t;
}

bool same_params(const Parameters<float>& a, const Parameters<float>& b) { return a == b; }

// ---- optimizer ---------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<float> p{0.5f, -1.0f, 2.0f}, g(3, 0.0f), m(3, 0.0f), v(3, 0.0f);
  const auto before = p;
  for (std::size_t step = 1; step <= 5; ++step) adam_update(p, g, m, v, step, 1e-2, 0.9, 0.999, 1e-8);
  EXPECT_EQ(p, before);
}

TEST(Adam, ScalarSquareOneStep) {
  // f(x) = x^2 at x = 1: g = 2, m = 0.2, v = 0.004, bias-corrected m = 2, v = 4.
  const double lr = 0.1, eps = 1e-8;
  std::vector<float> x{1.0f}, g{2.0f}, m{0.0f}, v{0.0f};
  adam_update(x, g, m, v, 1, lr, 0.9, 0.999, eps);
  const double expected = 1.0 - lr * 2.0 / (std::sqrt(4.0) + eps);
  EXPECT_NEAR(x[0], expected, 1e-7);
  EXPECT_NEAR(m[0], 0.2, 1e-7);
  EXPECT_NEAR(v[0], 0.004, 1e-9);
}

TEST(Adam, MatchesDoublePrecisionOracleOverSteps) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1, 1);
  const std::size_t n = 16;
  std::vector<float> p(n), m(n, 0), v(n, 0);
  std::vector<double> pd(n), md(n, 0), vd(n, 0);
  for (std::size_t i = 0; i < n; ++i) pd[i] = p[i] = static_cast<float>(u(rng));
  const double lr = 0.01, b1 = 0.8, b2 = 0.99, eps = 1e-6;
  for (std::size_t t = 1; t <= 20; ++t) {
    std::vector<float> g(n);
    for (std::size_t i = 0; i < n; ++i) {
      g[i] = static_cast<float>(2.0 * pd[i] + 0.1 * u(rng));
      md[i] = b1 * md[i] + (1 - b1) * g[i];
      vd[i] = b2 * vd[i] + (1 - b2) * double(g[i]) * g[i];
      const double mh = md[i] / (1 - std::pow(b1, t)), vh = vd[i] / (1 - std::pow(b2, t));
      pd[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
    adam_update(p, g, m, v, t, lr, b1, b2, eps);
  }
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(p[i], pd[i], 1e-5);
}

TEST(Adam, StepIncrementsBeforeUpdate) {
  const ModelConfig cfg = small_config(AttentionVariant::pia, false);
  Parameters<float> params = init_parameters<float>(cfg, 1);
  OptimizerState st = make_optimizer_state(params);
  Parameters<float> grads = st.m;
  adam_step(params, grads, st, fast_adam());
  EXPECT_EQ(st.step, 1u);
}

TEST(Schedule, WarmupThenConstant) {
  AdamConfig c;
  c.lr = 1.0;
  c.warmup_steps = 4;
  EXPECT_DOUBLE_EQ(learning_rate(c, 1), 0.25);
  EXPECT_DOUBLE_EQ(learning_rate(c, 3), 0.75);
  EXPECT_DOUBLE_EQ(learning_rate(c, 4), 1.0);
  EXPECT_DOUBLE_EQ(learning_rate(c, 400), 1.0);
}

TEST(Schedule, CosineDecaysToZero) {
  AdamConfig c;
  c.lr = 2.0;
  c.schedule = Schedule::cosine;
  c.total_steps = 100;
  EXPECT_DOUBLE_EQ(learning_rate(c, 0), 2.0);
  EXPECT_NEAR(learning_rate(c, 50), 1.0, 1e-12);
  EXPECT_NEAR(learning_rate(c, 100), 0.0, 1e-12);
  EXPECT_NEAR(learning_rate(c, 150), 0.0, 1e-12);
}

TEST(Clip, ScalesToMaxNormAndRejectsNaN) {
  const ModelConfig cfg = small_config(AttentionVariant::pia, false);
  Parameters<float> g = init_parameters<float>(cfg, 2);
  const double before = global_norm(g);
  ASSERT_GT(before, 1.0);
  EXPECT_DOUBLE_EQ(clip_by_global_norm(g, 1.0), before);
  EXPECT_NEAR(global_norm(g), 1.0, 1e-5);
  g.token_embedding[0] = std::nanf("");
  EXPECT_THROW(clip_by_global_norm(g, 1.0), NumericError);
}

// ---- curriculum --------------------------------------------------------------

TEST(Curriculum, BestCellAnalogue) {
  const Curriculum c = make_two_stage(128, 50, 3072, 205, 9216);
  ASSERT_EQ(c.stages.size(), 2u);
  EXPECT_EQ(c.stages[0].batch_size, 72u);
  EXPECT_EQ(c.stages[1].batch_size, 3u);
  EXPECT_EQ(c.stages[1].epochs, 155u);
  EXPECT_EQ(c.total_epochs(), 205u);
  for (const Stage& s : c.stages) EXPECT_EQ(s.L * s.batch_size, 9216u);
  EXPECT_TRUE(c.warnings.empty());
}

TEST(Curriculum, StageOfEpoch) {
  const Curriculum c = make_two_stage(16, 2, 64, 5, 1024);
  EXPECT_EQ(c.stage_of_epoch(0), 0u);
  EXPECT_EQ(c.stage_of_epoch(1), 0u);
  EXPECT_EQ(c.stage_of_epoch(2), 1u);
  EXPECT_EQ(c.stage_of_epoch(4), 1u);
  EXPECT_THROW(c.stage_of_epoch(5), IndexError);
}

TEST(Curriculum, ErrorsAndWarnings) {
  EXPECT_THROW(make_two_stage(128, 0, 256, 10, 1024), ContractError);
  EXPECT_THROW(make_two_stage(128, 10, 256, 10, 1024), ContractError);
  EXPECT_THROW(make_two_stage(2048, 1, 256, 10, 1024), ContractError);
  EXPECT_THROW(make_curriculum({{1, 3}}, 1024), ContractError);
  const Curriculum c = make_curriculum({{100, 1}, {3000, 2}, {3072, 1}}, 9216);
  EXPECT_EQ(c.warnings.size(), 2u);
  EXPECT_EQ(c.stages[0].batch_size, 92u);
  EXPECT_EQ(c.stages[1].batch_size, 3u);
}

TEST(Curriculum, ParseStages) {
  EXPECT_EQ(parse_stages("128:50,3072:155"),
            (std::vector<std::pair<std::size_t, std::size_t>>{{128, 50}, {3072, 155}}));
  EXPECT_THROW(parse_stages("128"), ConfigError);
  EXPECT_THROW(parse_stages("128:x"), ConfigError);
  EXPECT_THROW(parse_stages(""), ConfigError);
}

// ---- checkpoints -------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  for (bool tied : {true, false}) {
    ModelConfig cfg = small_config(AttentionVariant::pia, true);
    cfg.tie_embeddings = tied;
    cfg.cache_len = 48;
    const Parameters<float> p = init_parameters<float>(cfg, 5);
    KeyValueConfig meta;
    meta.set("tokenizer", "char");
    const std::string path = temp_path("ck.bin");
    save_checkpoint(path, cfg, p, meta);
    const Checkpoint ck = load_checkpoint(path);
    EXPECT_EQ(ck.config, cfg);
    EXPECT_TRUE(same_params(ck.params, p));
    EXPECT_EQ(ck.metadata.get_string("tokenizer", ""), "char");
    std::filesystem::remove(path);
  }
}

TEST(Checkpoint, CorruptFilesAreFormatErrors) {
  const ModelConfig cfg = small_config(AttentionVariant::baseline, false);
  const std::string path = temp_path("bad.bin");
  save_checkpoint(path, cfg, init_parameters<float>(cfg, 1));
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 3);
  EXPECT_THROW(load_checkpoint(path), FormatError);
  { std::ofstream(path, std::ios::binary) << "NOTACKPT"; }
  EXPECT_THROW(load_checkpoint(path), FormatError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), FormatError);
}

TEST(Checkpoint, MetadataMayNotShadowModelKeys) {
  const ModelConfig cfg = small_config(AttentionVariant::baseline, false);
  KeyValueConfig meta;
  meta.set("d_model", "4");
  EXPECT_THROW(save_checkpoint(temp_path("shadow.bin"), cfg, init_parameters<float>(cfg, 1), meta),
               ContractError);
}

TEST(Checkpoint, TrainingStateRoundTrip) {
  const ModelConfig cfg = small_config(AttentionVariant::pia, false);
  Trainer t = make_trainer(cfg, make_curriculum({{32, 1}}, 512));
  t.run_epoch();
  const std::string path = temp_path("state.train");
  save_training_state(path, t.training_state());
  EXPECT_EQ(load_training_state(path, t.params()), t.training_state());
  std::filesystem::remove(path);
}

// ---- trainer -----------------------------------------------------------------

TEST(Trainer, LossDecreasesOverTwoEpochs) {
  for (auto [variant, cache] : {std::pair{AttentionVariant::baseline, false},
                                std::pair{AttentionVariant::pia, true}}) {
    const ModelConfig cfg = small_config(variant, cache);
    Trainer t = make_trainer(cfg, make_curriculum({{32, 2}}, 512));
    const EpochMetrics a = t.run_epoch();
    const EpochMetrics b = t.run_epoch();
    EXPECT_LT(b.train_loss, a.train_loss) << to_string(variant);
    EXPECT_LT(b.dev_ppl, a.dev_ppl);
    EXPECT_TRUE(t.finished());
  }
}

TEST(Trainer, UntrainedPerplexityIsNearVocabSize) {
  const double V = static_cast<double>(toy_corpus().vocab.size());
  for (std::uint64_t seed : {1, 2, 3}) {
    ModelConfig cfg = model_preset("desk");
    cfg.vocab_size = static_cast<int>(V);
    Trainer t(cfg, make_curriculum({{64, 1}}, 4096), fast_adam(), seed, true,
              init_parameters<float>(cfg, seed));
    t.set_data({}, toy_corpus().dev);
    const double ppl = t.dev_perplexity(0);
    EXPECT_NEAR(ppl / V, 1.0, 0.05) << "seed " << seed << " ppl " << ppl;
  }
}

TEST(Trainer, DeterministicAcrossRuns) {
  ModelConfig with_dropout = small_config(AttentionVariant::pia, false);
  with_dropout.dropout = 0.1;
  Trainer a = make_trainer(with_dropout, make_curriculum({{16, 1}, {32, 1}}, 512));
  Trainer b = make_trainer(with_dropout, make_curriculum({{16, 1}, {32, 1}}, 512));
  while (!a.finished()) {
    const EpochMetrics ma = a.run_epoch(), mb = b.run_epoch();
    EXPECT_EQ(ma.train_loss, mb.train_loss);
    EXPECT_EQ(ma.dev_ppl, mb.dev_ppl);
  }
  EXPECT_TRUE(same_params(a.params(), b.params()));
}

TEST(Trainer, ResumeMidStageIsBitExact) {
  for (bool cache : {false, true}) {
    ModelConfig cfg = small_config(AttentionVariant::pia, cache);
    cfg.dropout = 0.1;
    const Curriculum cur = make_curriculum({{16, 1}, {32, 3}}, 512);
    Trainer full = make_trainer(cfg, cur);
    std::vector<EpochMetrics> reference;
    while (!full.finished()) reference.push_back(full.run_epoch());

    Trainer first = make_trainer(cfg, cur);
    first.run_epoch();
    first.run_epoch();  // one epoch into the second stage
    const std::string ck = temp_path("resume.ck");
    save_checkpoint(ck, first.current_config(), first.params());
    save_training_state(training_state_path(ck), first.training_state());

    Trainer resumed = make_trainer(cfg, cur, 3);
    Checkpoint loaded = load_checkpoint(ck);
    const TrainingState state = load_training_state(training_state_path(ck), loaded.params);
    resumed.restore(state, std::move(loaded.params));
    for (std::size_t e = 2; e < reference.size(); ++e) {
      const EpochMetrics m = resumed.run_epoch();
      EXPECT_EQ(m.train_loss, reference[e].train_loss) << "epoch " << e;
      EXPECT_EQ(m.dev_ppl, reference[e].dev_ppl);
    }
    EXPECT_TRUE(same_params(resumed.params(), full.params()));
    EXPECT_EQ(resumed.optimizer(), full.optimizer());
    std::filesystem::remove(ck);
    std::filesystem::remove(training_state_path(ck));
  }
}

TEST(Trainer, ConfigDrivenResumeMatchesUninterruptedRun) {
  RunConfig rc;
  rc.model = small_config(AttentionVariant::pia, true);
  rc.stages = {{16, 1}, {32, 2}};
  rc.model.seq_len = rc.model.cache_len = 32;
  rc.tokens_per_batch = 512;
  rc.adam = fast_adam();
  rc.shuffle = false;
  std::ostringstream log;
  const TrainingOutcome full = train_on_corpus(rc, toy_corpus(), false, log);
  EXPECT_NE(log.str().find("stage 2 (L 32, batch size 16) starts at epoch 2"), std::string::npos)
      << log.str();

  rc.checkpoint = temp_path("cfg.ck");
  rc.metrics = temp_path("cfg.csv");
  rc.stop_dev_ppl = 1e9;  // stops after the first epoch
  const TrainingOutcome part = train_on_corpus(rc, toy_corpus(), false, log);
  ASSERT_TRUE(part.stopped_early);
  ASSERT_EQ(part.epochs.size(), 1u);
  rc.stop_dev_ppl = 0.0;
  const TrainingOutcome rest = train_on_corpus(rc, toy_corpus(), true, log);
  ASSERT_EQ(rest.epochs.size(), 2u);
  EXPECT_EQ(rest.epochs.back().train_loss, full.epochs.back().train_loss);
  EXPECT_TRUE(same_params(rest.params, full.params));

  std::ifstream csv(rc.metrics);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(csv, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], metrics_csv_header);
  EXPECT_EQ(lines[3].substr(0, 7), "3,2,32,");
  for (const auto& p : {rc.checkpoint, training_state_path(rc.checkpoint), vocab_path(rc.checkpoint),
                        rc.metrics}) {
    std::filesystem::remove(p);
  }
}

TEST(Trainer, RelativeStopUsesTheUntrainedPerplexity) {
  RunConfig rc;
  rc.model = small_config(AttentionVariant::baseline, false);
  rc.stages = {{32, 3}};
  rc.tokens_per_batch = 512;
  rc.adam = fast_adam();
  rc.stop_dev_ratio = 0.99;  // the first epoch already gets below this
  std::ostringstream log;
  const TrainingOutcome out = train_on_corpus(rc, toy_corpus(), false, log);
  EXPECT_TRUE(out.stopped_early);
  ASSERT_EQ(out.epochs.size(), 1u);
  EXPECT_LT(out.epochs[0].dev_ppl, 0.99 * out.untrained_dev_ppl);
  rc.stop_dev_ratio = 0.0;
  EXPECT_EQ(train_on_corpus(rc, toy_corpus(), false, log).epochs.size(), 3u);

  KeyValueConfig kv = rc.to_kv();
  kv.set("stop_dev_ratio", "-1");
  EXPECT_THROW(RunConfig::from_kv(kv), ConfigError);
}

TEST(Trainer, CachedTrainingFeedsThePreviousPieceOfTheSameRow) {
  const ModelConfig cfg = small_config(AttentionVariant::pia, true, 16);
  Trainer t = make_trainer(cfg, make_curriculum({{16, 2}}, 256));
  std::map<std::size_t, std::vector<Tensor<float>>> last;  // stream_row -> produced
  std::map<std::size_t, std::size_t> last_end;
  std::size_t checked = 0, fresh = 0, current_epoch = 99;
  t.hooks.on_row = [&](std::size_t epoch, std::size_t, const Row& row, const Cache<float>& fed,
                       const std::vector<Tensor<float>>& produced) {
    if (epoch != current_epoch) {
      last.clear();
      last_end.clear();
      current_epoch = epoch;
    }
    auto it = last.find(row.stream_row);
    if (it == last.end()) {
      EXPECT_TRUE(fed.empty());
      ++fresh;
    } else {
      EXPECT_EQ(last_end[row.stream_row], row.offset);
      ASSERT_EQ(fed.layers.size(), it->second.size());
      for (std::size_t l = 0; l < fed.layers.size(); ++l) {
        ASSERT_EQ(fed.layers[l].shape(), it->second[l].shape());
        EXPECT_EQ(max_abs_diff(fed.layers[l], it->second[l]), 0.0);
      }
      ++checked;
    }
    last[row.stream_row] = produced;
    last_end[row.stream_row] = row.offset + row.inputs.size();
  };
  t.run_epoch();
  t.run_epoch();
  EXPECT_EQ(fresh, 2u * 16u);  // every row starts empty in every epoch
  EXPECT_GT(checked, 500u);
}

TEST(Trainer, OptimizerStateCarriesAcrossStageSwitch) {
  const ModelConfig cfg = small_config(AttentionVariant::baseline, false);
  Trainer t = make_trainer(cfg, make_two_stage(16, 1, 32, 2, 512));
  std::vector<std::size_t> steps;
  OptimizerState end_of_stage1, first_of_stage2;
  t.hooks.on_step = [&](std::size_t epoch, const OptimizerState& s) {
    if (epoch == 1 && first_of_stage2.step == 0) first_of_stage2 = s;
    steps.push_back(s.step);
  };
  t.run_epoch();
  end_of_stage1 = t.optimizer();
  t.run_epoch();
  for (std::size_t i = 0; i < steps.size(); ++i) EXPECT_EQ(steps[i], i + 1);
  ASSERT_EQ(first_of_stage2.step, end_of_stage1.step + 1);
  // One Adam update from the carried moments: the gradient recovered from m
  // must agree with the one recovered from v. Reset moments would break this.
  const AdamConfig a = fast_adam();
  double mismatch = 0.0, scale = 0.0;
  const auto& m0 = end_of_stage1.m.token_embedding;
  const auto& v0 = end_of_stage1.v.token_embedding;
  const auto& m1 = first_of_stage2.m.token_embedding;
  const auto& v1 = first_of_stage2.v.token_embedding;
  for (std::size_t i = 0; i < m0.size(); ++i) {
    const double g = (m1[i] - a.beta1 * m0[i]) / (1 - a.beta1);
    const double g2 = (v1[i] - a.beta2 * v0[i]) / (1 - a.beta2);
    mismatch += std::abs(g * g - g2);
    scale += g2;
  }
  EXPECT_LT(mismatch, 1e-2 * scale);
  double stale = 0.0;
  for (std::size_t i = 0; i < m0.size(); ++i) stale += std::abs(v0[i]);
  EXPECT_GT(stale, 0.0);
}

TEST(Trainer, TokenBudgetIsConstantAcrossStages) {
  const ModelConfig cfg = small_config(AttentionVariant::baseline, false);
  Trainer t = make_trainer(cfg, make_two_stage(16, 1, 64, 2, 1024));
  const EpochMetrics a = t.run_epoch(), b = t.run_epoch();
  EXPECT_EQ(t.curriculum().stages[0].L * t.curriculum().stages[0].batch_size,
            t.curriculum().stages[1].L * t.curriculum().stages[1].batch_size);
  EXPECT_LT(std::max(a.train_tokens, b.train_tokens) - std::min(a.train_tokens, b.train_tokens), 64u);
}

TEST(Trainer, DegenerateTwoStageEqualsFixedLength) {
  const ModelConfig cfg = small_config(AttentionVariant::pia, false);
  Trainer staged = make_trainer(cfg, make_two_stage(32, 1, 32, 2, 512));
  Trainer fixed = make_trainer(cfg, make_curriculum({{32, 2}}, 512));
  while (!fixed.finished()) {
    EXPECT_EQ(staged.run_epoch().train_loss, fixed.run_epoch().train_loss);
  }
  EXPECT_TRUE(same_params(staged.params(), fixed.params()));
}

TEST(Trainer, CacheWithShuffleIsRefused) {
  const ModelConfig cfg = small_config(AttentionVariant::pia, true);
  EXPECT_THROW(Trainer(cfg, make_curriculum({{32, 1}}, 512), fast_adam(), 1, true,
                       init_parameters<float>(cfg, 1)),
               ConfigError);
  RunConfig rc;
  rc.model = cfg;
  KeyValueConfig kv = rc.to_kv();
  kv.set("shuffle", "true");
  EXPECT_THROW(RunConfig::from_kv(kv), ConfigError);
}

TEST(Trainer, NaNAbortsWithDiagnostics) {
  const ModelConfig cfg = small_config(AttentionVariant::pia, false);
  Parameters<float> p = init_parameters<float>(cfg, 1);
  p.layers[1].w2[3] = std::nanf("");
  Trainer t(cfg, make_curriculum({{32, 1}}, 512), fast_adam(), 1, true, p);
  t.set_data(toy_corpus().train, toy_corpus().dev);
  try {
    t.run_epoch();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("epoch 1, batch 1"), std::string::npos) << what;
    EXPECT_NE(what.find("L = 32"), std::string::npos) << what;
  }
}

TEST(Trainer, VocabMismatchIsAConfigError) {
  RunConfig rc;
  rc.model = small_config(AttentionVariant::baseline, false);
  rc.model.vocab_size += 1;
  rc.stages = {{32, 1}};
  rc.tokens_per_batch = 512;
  std::ostringstream log;
  EXPECT_THROW(train_on_corpus(rc, toy_corpus(), false, log), ConfigError);
}

}  // namespace
}  // namespace pialm
