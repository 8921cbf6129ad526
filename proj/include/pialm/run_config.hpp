#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pialm/data.hpp"
#include "pialm/kv_config.hpp"
#include "pialm/model_config.hpp"
#include "pialm/optimizer.hpp"

namespace pialm {

// Everything a training run or recipe reads from a flat key=value file.
// Unknown keys are rejected.
struct RunConfig {
  ModelConfig model = model_preset("desk");

  // (L, epochs) per stage. Without a `stages` key: one stage of model L for
  // `epochs` epochs.
  std::vector<std::pair<std::size_t, std::size_t>> stages;
  std::size_t tokens_per_batch = 4096;
  AdamConfig adam;
  std::uint64_t seed = 1;
  bool shuffle = true;  // forced off (and refused if requested) for cached models
  double stop_dev_ppl = 0.0;  // stop after an epoch whose dev ppl is below this; 0 never stops
  double stop_dev_ratio = 0.0;  // the same, relative to the untrained model's dev ppl

  std::string train_file, dev_file, test_file;
  TokenizerMode tokenizer = TokenizerMode::character;
  std::size_t max_vocab = 0;
  std::size_t train_limit_tokens = 0;
  std::size_t dev_limit_tokens = 0;

  std::string checkpoint;  // written after every epoch when set
  std::string metrics;     // CSV, appended

  // Recipe grids.
  std::vector<std::size_t> sweep_lengths{32, 64, 128, 256, 512};
  std::vector<std::size_t> grid_initial_lengths{16, 32};
  std::vector<std::size_t> grid_switch_epochs{1, 2};
  std::size_t sliding_eval_tokens = 4096;

  std::size_t total_epochs() const;
  CorpusOptions corpus_options() const;

  // Relative file paths are taken relative to `base_dir` when it is nonempty.
  static RunConfig from_kv(const KeyValueConfig& kv, const std::string& base_dir = "");
  static RunConfig load(const std::string& path);
  KeyValueConfig to_kv() const;
};

}  // namespace pialm
