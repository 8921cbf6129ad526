#include "pialm/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <ostream>

#include "pialm/errors.hpp"
#include "pialm/inference.hpp"
#include "pialm/seed.hpp"

namespace pialm {

std::string metrics_csv_row(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%.6f,%.6f,%.3f,%llu", m.epoch, m.stage, m.L,
                m.train_loss, m.dev_ppl, m.wall_seconds,
                static_cast<unsigned long long>(m.attention_dot_products));
  return buf;
}

void append_metrics(const std::string& path, const EpochMetrics& m) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw FormatError("cannot append to metrics file " + path);
  if (fresh) out << metrics_csv_header << '\n';
  out << metrics_csv_row(m) << '\n';
}

std::string vocab_path(const std::string& checkpoint_path) { return checkpoint_path + ".vocab"; }

Trainer::Trainer(ModelConfig model, Curriculum curriculum, AdamConfig adam, std::uint64_t seed,
                 bool shuffle, Parameters<float> initial)
    : base_(std::move(model)),
      curriculum_(std::move(curriculum)),
      adam_(adam),
      seed_(seed),
      shuffle_(shuffle),
      params_(std::move(initial)),
      optimizer_(make_optimizer_state(params_)) {
  base_.validate();
  if (base_.use_cache && shuffle_) {
    throw ConfigError(
        "cached training cannot shuffle: each row's cache must be the subsequence that precedes "
        "it in the corpus");
  }
  if (curriculum_.stages.empty()) throw ContractError("trainer needs a nonempty curriculum");
}

void Trainer::set_data(std::vector<TokenId> train, std::vector<TokenId> dev) {
  train_ = std::move(train);
  dev_ = std::move(dev);
}

ModelConfig Trainer::stage_config(std::size_t stage) const {
  ModelConfig c = base_;
  const int L = static_cast<int>(curriculum_.stages.at(stage).L);
  if (c.cache_len == c.seq_len) c.cache_len = L;
  c.seq_len = L;
  return c;
}

ModelConfig Trainer::current_config() const {
  if (epochs_done_ == 0) return stage_config(0);
  return stage_config(curriculum_.stage_of_epoch(epochs_done_ - 1));
}

void Trainer::restore(const TrainingState& state, Parameters<float> params) {
  if (state.epochs_done > curriculum_.total_epochs()) {
    throw ContractError("saved state has " + std::to_string(state.epochs_done) +
                        " epochs done, curriculum has only " +
                        std::to_string(curriculum_.total_epochs()));
  }
  params_ = std::move(params);
  optimizer_ = state.optimizer;
  epochs_done_ = state.epochs_done;
}

double Trainer::dev_perplexity(std::size_t stage) const {
  if (dev_.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const Model<float> model{stage_config(stage), params_};
  return (model.config.use_cache ? eval_cached(model, dev_) : eval_nonoverlapping(model, dev_))
      .perplexity();
}

double Trainer::train_batch(const ModelConfig& cfg, const Batch& batch, std::size_t epoch,
                            std::size_t batch_index, std::vector<Cache<float>>& row_caches,
                            std::size_t& tokens) {
  Tape<float> tape;
  const BoundParameters<float> bound = bind(tape, params_, true);
  Var<float> total;
  tokens = 0;
  for (std::size_t r = 0; r < batch.rows.size(); ++r) {
    const Row& row = batch.rows[r];
    const Cache<float> none;
    const Cache<float>& fed = cfg.use_cache ? row_caches.at(row.stream_row) : none;
    ForwardOptions<float> options;
    options.training = true;
    options.dropout_seed = derive_seed(seed_, {epoch, batch_index, r});
    ForwardResult<float> out =
        forward(tape, bound, cfg, std::span<const TokenId>(row.inputs), fed, options);
    Var<float> row_loss = scale(cross_entropy(out.logits, std::span<const TokenId>(row.targets)),
                                static_cast<float>(row.targets.size()));
    total = total.valid() ? add(total, row_loss) : row_loss;
    tokens += row.targets.size();
    if (hooks.on_row) hooks.on_row(epoch, batch_index, row, fed, out.layer_inputs);
    if (cfg.use_cache) row_caches[row.stream_row] = std::move(out.new_cache);
  }
  Var<float> loss = scale(total, 1.0f / static_cast<float>(tokens));
  tape.backward(loss);
  Parameters<float> grads = gradients(tape, bound, params_);
  clip_by_global_norm(grads, adam_.clip_norm);
  adam_step(params_, grads, optimizer_, adam_);
  if (hooks.on_step) hooks.on_step(epoch, optimizer_);
  return static_cast<double>(loss.value().item());
}

EpochMetrics Trainer::run_epoch() {
  if (finished()) throw ContractError("training already finished");
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  const std::size_t epoch = epochs_done_;
  const std::size_t stage = curriculum_.stage_of_epoch(epoch);
  const ModelConfig cfg = stage_config(stage);
  const Stage& st = curriculum_.stages[stage];

  BatchPlan plan;
  plan.L = st.L;
  plan.batch_size = st.batch_size;
  plan.shuffle = shuffle_;
  plan.seed = derive_seed(seed_, {0x5eedULL, epoch});
  plan.drop_short = true;
  const std::vector<Batch> batches = segment(train_, plan);

  // Every epoch starts each stream afresh.
  std::vector<Cache<float>> row_caches(st.batch_size);
  const std::uint64_t dots0 = attention_dot_products();
  double loss_sum = 0.0;
  std::size_t token_sum = 0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    std::size_t tokens = 0;
    double loss = 0.0;
    try {
      loss = train_batch(cfg, batches[b], epoch, b, row_caches, tokens);
    } catch (const NumericError& e) {
      throw NumericError("epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(b + 1) +
                         " of " + std::to_string(batches.size()) + " (step " +
                         std::to_string(optimizer_.step + 1) + ", L = " + std::to_string(st.L) +
                         "): " + e.what());
    }
    loss_sum += loss * static_cast<double>(tokens);
    token_sum += tokens;
  }
  EpochMetrics m;
  m.epoch = epoch + 1;
  m.stage = stage + 1;
  m.L = st.L;
  m.train_loss = loss_sum / static_cast<double>(token_sum);
  m.attention_dot_products = attention_dot_products() - dots0;
  m.train_tokens = token_sum;
  m.steps = batches.size();
  m.train_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  ++epochs_done_;
  m.dev_ppl = dev_perplexity(stage);
  m.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return m;
}

// ---- config-driven runs --------------------------------------------------------------

namespace {

std::size_t steps_per_epoch(std::size_t stream_tokens, const Stage& s) {
  if (stream_tokens < 2) return 0;
  const std::size_t pieces = (stream_tokens - 1) / s.L;
  return (pieces + s.batch_size - 1) / s.batch_size;
}

}  // namespace

TrainingOutcome train_from_config(const RunConfig& config, bool resume, std::ostream& log) {
  const Corpus corpus =
      load_corpus(config.train_file, config.dev_file, "", config.corpus_options());
  return train_on_corpus(config, corpus, resume, log);
}

TrainingOutcome train_on_corpus(const RunConfig& config, const Corpus& corpus, bool resume,
                                std::ostream& log) {
  ModelConfig model = config.model;
  if (model.vocab_size == 0) {
    model.vocab_size = static_cast<int>(corpus.vocab.size());
  } else if (static_cast<std::size_t>(model.vocab_size) != corpus.vocab.size()) {
    throw ConfigError("vocab_size = " + std::to_string(model.vocab_size) + " but the corpus vocab has " +
                      std::to_string(corpus.vocab.size()) + " entries (set max_vocab instead)");
  }
  Curriculum curriculum = make_curriculum(config.stages, config.tokens_per_batch);
  for (const auto& w : curriculum.warnings) log << "warning: " << w << '\n';

  AdamConfig adam = config.adam;
  if (adam.total_steps == 0) {
    for (const Stage& s : curriculum.stages) {
      adam.total_steps += s.epochs * steps_per_epoch(corpus.train.size(), s);
    }
  }

  Trainer trainer(model, curriculum, adam, config.seed, config.shuffle,
                  init_parameters<float>(model, config.seed));
  trainer.set_data(corpus.train, corpus.dev);

  TrainingOutcome outcome;
  outcome.vocab = corpus.vocab;
  // Measured on the fresh initialization, also when resuming, so relative stops agree.
  outcome.untrained_dev_ppl = trainer.dev_perplexity(0);
  if (resume) {
    if (config.checkpoint.empty()) throw ConfigError("resuming needs a checkpoint path");
    Checkpoint ck = load_checkpoint(config.checkpoint);
    if (ck.params.token_embedding.shape() != trainer.params().token_embedding.shape()) {
      throw ConfigError("checkpoint " + config.checkpoint + " does not match this config");
    }
    const TrainingState state =
        load_training_state(training_state_path(config.checkpoint), ck.params);
    trainer.restore(state, std::move(ck.params));
    if (trainer.current_config() != ck.config) {
      throw ConfigError("checkpoint " + config.checkpoint + " was written by a different config");
    }
    log << "resumed after epoch " << state.epochs_done << " (step " << state.optimizer.step << ")\n";
  } else {
    log << "vocab " << corpus.vocab.size() << ", train tokens " << corpus.train.size()
        << ", dev tokens " << corpus.dev.size() << ", parameters " << parameter_count(model)
        << ", untrained dev ppl " << outcome.untrained_dev_ppl << '\n';
    if (!config.metrics.empty() && std::filesystem::exists(config.metrics)) {
      std::filesystem::remove(config.metrics);
    }
  }

  KeyValueConfig metadata;
  metadata.set("tokenizer", std::string(to_string(config.tokenizer)));
  if (!config.dev_file.empty()) metadata.set("dev_file", config.dev_file);
  if (!config.test_file.empty()) metadata.set("test_file", config.test_file);
  while (!trainer.finished()) {
    const std::size_t next = trainer.epochs_done();
    const std::size_t stage = curriculum.stage_of_epoch(next);
    if (next == 0 || curriculum.stage_of_epoch(next - 1) != stage) {
      log << "stage " << stage + 1 << " (L " << curriculum.stages[stage].L << ", batch size "
          << curriculum.stages[stage].batch_size << ") starts at epoch " << next + 1 << '\n';
    }
    const EpochMetrics m = trainer.run_epoch();
    outcome.epochs.push_back(m);
    log << "epoch " << m.epoch << " stage " << m.stage << " L " << m.L << " train_loss "
        << m.train_loss << " dev_ppl " << m.dev_ppl << " (" << m.wall_seconds << " s)\n";
    if (!config.metrics.empty()) append_metrics(config.metrics, m);
    if (!config.checkpoint.empty()) {
      save_checkpoint(config.checkpoint, trainer.current_config(), trainer.params(), metadata);
      save_training_state(training_state_path(config.checkpoint), trainer.training_state());
      corpus.vocab.save(vocab_path(config.checkpoint));
    }
    double stop_at = config.stop_dev_ppl;
    if (config.stop_dev_ratio > 0.0) {
      const double relative = config.stop_dev_ratio * outcome.untrained_dev_ppl;
      stop_at = stop_at > 0.0 ? std::min(stop_at, relative) : relative;
    }
    if (stop_at > 0.0 && m.dev_ppl < stop_at) {
      log << "dev ppl below " << stop_at << "; stopping\n";
      outcome.stopped_early = true;
      break;
    }
  }
  outcome.config = trainer.current_config();
  outcome.params = trainer.params();
  return outcome;
}

}  // namespace pialm
