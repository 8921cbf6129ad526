#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "pialm/data.hpp"
#include "pialm/inference.hpp"
#include "pialm/run_config.hpp"

namespace pialm {

// One trained and evaluated model of a recipe.
struct RecipeCell {
  std::string model;  // baseline, pia_cache, staged or shortformer
  std::size_t initial_L = 0;     // first-stage L (equals L when unstaged)
  std::size_t switch_epoch = 0;  // epochs in the first stage, 0 when unstaged
  std::size_t L = 0;             // final L
  std::size_t epochs = 0;

  std::size_t train_tokens = 0;
  double train_seconds = 0.0;
  std::uint64_t train_dot_products = 0;

  EvalKind eval_mode = EvalKind::nonoverlapping;
  double dev_ppl = 0.0;
  std::size_t eval_tokens = 0;
  double eval_seconds = 0.0;

  // Token-by-token scoring of a dev prefix: sliding window with S = 1 without
  // a cache, cached decoding with one.
  double tbt_ppl = 0.0;
  std::size_t tbt_tokens = 0;
  double tbt_seconds = 0.0;
  std::uint64_t tbt_dot_products = 0;

  double train_tokens_per_second() const;
  double eval_tokens_per_second() const;
  double tbt_tokens_per_second() const;
  double tbt_dot_products_per_token() const;
};

struct CellSpec {
  std::string model;
  AttentionVariant variant = AttentionVariant::baseline;
  bool use_cache = false;
  std::size_t initial_L = 0;
  std::size_t switch_epoch = 0;
  std::size_t L = 0;
  std::size_t epochs = 0;
};

const std::vector<std::string>& recipe_names();
bool is_recipe(const std::string& name);

// The cells a recipe trains, in output order. Unknown names throw ConfigError.
std::vector<CellSpec> recipe_cells(const std::string& name, const RunConfig& config);

// Trains one cell on the corpus (no checkpoints or metrics files) and evaluates it.
// Every cell starts from config.seed, so results do not depend on which other
// cells run or in what order.
RecipeCell run_cell(const CellSpec& spec, const RunConfig& config, const Corpus& corpus,
                    std::ostream& log);

std::string recipe_csv_header(const std::string& name);
std::string recipe_csv_row(const std::string& name, const RecipeCell& cell);

// Runs every cell of the recipe, writing the header and one row per cell to `csv`
// as each finishes.
std::vector<RecipeCell> run_recipe(const std::string& name, const RunConfig& config,
                                   const Corpus& corpus, std::ostream& csv, std::ostream& log);
// Loads the corpus named by the config first.
std::vector<RecipeCell> run_recipe(const std::string& name, const RunConfig& config,
                                   std::ostream& csv, std::ostream& log);

}  // namespace pialm
