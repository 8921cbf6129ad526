#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "pialm/checkpoint.hpp"
#include "pialm/curriculum.hpp"
#include "pialm/data.hpp"
#include "pialm/model.hpp"
#include "pialm/optimizer.hpp"
#include "pialm/run_config.hpp"

namespace pialm {

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  std::size_t stage = 0;  // 1-based
  std::size_t L = 0;
  double train_loss = 0.0;  // token-weighted mean over the epoch
  double dev_ppl = 0.0;     // NaN without a dev stream
  double wall_seconds = 0.0;
  double train_seconds = 0.0;  // wall_seconds without the dev evaluation
  std::uint64_t attention_dot_products = 0;  // training forwards only
  std::size_t train_tokens = 0;
  std::size_t steps = 0;
};

inline constexpr const char* metrics_csv_header =
    "epoch,stage,L,train_loss,dev_ppl,wall_seconds,attention_dot_products";
std::string metrics_csv_row(const EpochMetrics& m);

// Appends one row per epoch, writing the header when the file is new or empty.
void append_metrics(const std::string& path, const EpochMetrics& m);

struct TrainerHooks {
  // After every optimizer step (state already advanced).
  std::function<void(std::size_t epoch, const OptimizerState&)> on_step;
  // For every trained row: the cache it was given and the layer inputs it produced.
  std::function<void(std::size_t epoch, std::size_t batch, const Row&, const Cache<float>& fed,
                     const std::vector<Tensor<float>>& produced)>
      on_row;
};

// Deterministic given (seed, config, data): the shuffle order depends on
// (seed, epoch) and dropout masks on (seed, epoch, batch, row), so training can
// resume at any epoch edge and replay the uninterrupted run exactly.
class Trainer {
 public:
  Trainer(ModelConfig model, Curriculum curriculum, AdamConfig adam, std::uint64_t seed,
          bool shuffle, Parameters<float> initial);

  void set_data(std::vector<TokenId> train, std::vector<TokenId> dev);

  // Trains epoch epochs_done() + 1 and evaluates on dev.
  EpochMetrics run_epoch();
  bool finished() const { return epochs_done_ >= curriculum_.total_epochs(); }
  std::size_t epochs_done() const { return epochs_done_; }

  // Model config in effect during stage `stage` (0-based): L is the stage's, and
  // L' follows it when the base config had L' = L.
  ModelConfig stage_config(std::size_t stage) const;
  // Config of the most recently trained stage (the first before any training).
  ModelConfig current_config() const;
  Model<float> current_model() const { return {current_config(), params_}; }

  const Parameters<float>& params() const { return params_; }
  const OptimizerState& optimizer() const { return optimizer_; }
  const Curriculum& curriculum() const { return curriculum_; }

  TrainingState training_state() const { return {epochs_done_, optimizer_}; }
  void restore(const TrainingState& state, Parameters<float> params);

  // Dev perplexity of the current weights at the given stage's config.
  double dev_perplexity(std::size_t stage) const;

  TrainerHooks hooks;

 private:
  double train_batch(const ModelConfig& cfg, const Batch& batch, std::size_t epoch,
                     std::size_t batch_index, std::vector<Cache<float>>& row_caches,
                     std::size_t& tokens);

  ModelConfig base_;
  Curriculum curriculum_;
  AdamConfig adam_;
  std::uint64_t seed_;
  bool shuffle_;
  Parameters<float> params_;
  OptimizerState optimizer_;
  std::size_t epochs_done_ = 0;
  std::vector<TokenId> train_, dev_;
};

struct TrainingOutcome {
  std::vector<EpochMetrics> epochs;
  Vocab vocab;
  ModelConfig config;
  Parameters<float> params;
  double untrained_dev_ppl = 0.0;
  bool stopped_early = false;
};

// Full run from a config: corpus loading, per-epoch checkpoints and metrics,
// optional resume from "<checkpoint>.train". Progress lines go to `log`.
TrainingOutcome train_from_config(const RunConfig& config, bool resume, std::ostream& log);
// The same on an already loaded corpus (its file keys are ignored).
TrainingOutcome train_on_corpus(const RunConfig& config, const Corpus& corpus, bool resume,
                                std::ostream& log);

// Vocab file stored next to a checkpoint.
std::string vocab_path(const std::string& checkpoint_path);

}  // namespace pialm
