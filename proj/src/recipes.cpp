#include "pialm/recipes.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

#include "pialm/errors.hpp"
#include "pialm/trainer.hpp"

namespace pialm {

namespace {

double rate(double amount, double seconds) {
  return seconds > 0.0 ? amount / seconds : std::numeric_limits<double>::quiet_NaN();
}

std::string fmt(double v, const char* spec = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

CellSpec unstaged(std::string model, AttentionVariant variant, bool cache, std::size_t L,
                  std::size_t epochs) {
  return {std::move(model), variant, cache, L, 0, L, epochs};
}

const std::vector<std::string>& columns(const std::string& name) {
  static const std::vector<std::string> table1{
      "L",
      "train_tokens_per_s",
      "train_dot_products_per_token",
      "nonoverlapping_ppl",
      "nonoverlapping_tokens_per_s",
      "token_by_token_ppl",
      "token_by_token_tokens_per_s",
      "token_by_token_dot_products_per_token"};
  static const std::vector<std::string> table2{
      "model", "initial_L", "switch_epoch", "L", "train_tokens_per_s",
      "train_dot_products_per_token", "dev_ppl"};
  static const std::vector<std::string> table3{
      "model",
      "L",
      "train_tokens_per_s",
      "train_dot_products_per_token",
      "eval_mode",
      "dev_ppl",
      "eval_tokens_per_s",
      "token_by_token_ppl",
      "token_by_token_tokens_per_s",
      "token_by_token_dot_products_per_token"};
  static const std::vector<std::string> combined{
      "model",     "initial_L",         "switch_epoch",
      "L",         "train_tokens_per_s", "train_dot_products_per_token",
      "eval_mode", "dev_ppl",           "eval_tokens_per_s",
      "token_by_token_ppl", "token_by_token_tokens_per_s"};
  if (name == "table1-sweep") return table1;
  if (name == "table2-grid") return table2;
  if (name == "table3-pia-sweep") return table3;
  if (name == "shortformer-vs-baseline") return combined;
  throw ConfigError("unknown recipe '" + name + "'");
}

std::string column_value(const RecipeCell& c, const std::string& col) {
  if (col == "model") return c.model;
  if (col == "initial_L") return std::to_string(c.initial_L);
  if (col == "switch_epoch") return std::to_string(c.switch_epoch);
  if (col == "L") return std::to_string(c.L);
  if (col == "train_tokens_per_s") return fmt(c.train_tokens_per_second(), "%.1f");
  if (col == "train_dot_products_per_token") {
    return fmt(static_cast<double>(c.train_dot_products) / static_cast<double>(c.train_tokens),
               "%.1f");
  }
  if (col == "eval_mode") return std::string(to_string(c.eval_mode));
  if (col == "dev_ppl" || col == "nonoverlapping_ppl") return fmt(c.dev_ppl);
  if (col == "eval_tokens_per_s" || col == "nonoverlapping_tokens_per_s") {
    return fmt(c.eval_tokens_per_second(), "%.1f");
  }
  if (col == "token_by_token_ppl") return fmt(c.tbt_ppl);
  if (col == "token_by_token_tokens_per_s") return fmt(c.tbt_tokens_per_second(), "%.1f");
  if (col == "token_by_token_dot_products_per_token") {
    return fmt(c.tbt_dot_products_per_token(), "%.1f");
  }
  throw ContractError("no recipe column named " + col);
}

}  // namespace

double RecipeCell::train_tokens_per_second() const {
  return rate(static_cast<double>(train_tokens), train_seconds);
}
double RecipeCell::eval_tokens_per_second() const {
  return rate(static_cast<double>(eval_tokens), eval_seconds);
}
double RecipeCell::tbt_tokens_per_second() const {
  return rate(static_cast<double>(tbt_tokens), tbt_seconds);
}
double RecipeCell::tbt_dot_products_per_token() const {
  if (tbt_tokens == 0) return std::numeric_limits<double>::quiet_NaN();
  return static_cast<double>(tbt_dot_products) / static_cast<double>(tbt_tokens);
}

const std::vector<std::string>& recipe_names() {
  static const std::vector<std::string> names{"table1-sweep", "table2-grid", "table3-pia-sweep",
                                              "shortformer-vs-baseline"};
  return names;
}

bool is_recipe(const std::string& name) {
  const auto& n = recipe_names();
  return std::find(n.begin(), n.end(), name) != n.end();
}

std::vector<CellSpec> recipe_cells(const std::string& name, const RunConfig& config) {
  if (!is_recipe(name)) {
    std::string known;
    for (const auto& n : recipe_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown recipe '" + name + "' (expected one of " + known + ")");
  }
  const std::size_t epochs = config.total_epochs();
  const std::size_t L = static_cast<std::size_t>(config.model.seq_len);
  if (config.sweep_lengths.empty()) throw ConfigError("sweep_lengths is empty");
  const std::size_t longest =
      *std::max_element(config.sweep_lengths.begin(), config.sweep_lengths.end());
  constexpr auto base = AttentionVariant::baseline;
  constexpr auto pia = AttentionVariant::pia;

  std::vector<CellSpec> cells;
  if (name == "table1-sweep") {
    for (std::size_t l : config.sweep_lengths) cells.push_back(unstaged("baseline", base, false, l, epochs));
  } else if (name == "table2-grid") {
    for (std::size_t first : config.grid_initial_lengths) {
      for (std::size_t sw : config.grid_switch_epochs) {
        if (sw == 0 || sw >= epochs) continue;
        cells.push_back({"staged", base, false, first, sw, L, epochs});
      }
    }
    cells.push_back(unstaged("baseline", base, false, L, epochs));
  } else if (name == "table3-pia-sweep") {
    for (std::size_t l : config.sweep_lengths) cells.push_back(unstaged("pia_cache", pia, true, l, epochs));
    cells.push_back(unstaged("baseline", base, false, longest, epochs));
  } else {
    cells.push_back(unstaged("baseline", base, false, longest, epochs));
    cells.push_back(unstaged("pia_cache", pia, true, L, epochs));
    // Half of the epochs in the first stage.
    const std::size_t sw = epochs / 2;
    if (sw >= 1) {
      for (std::size_t first : config.grid_initial_lengths) {
        if (first < L) cells.push_back({"shortformer", pia, true, first, sw, L, epochs});
      }
    }
  }
  return cells;
}

RecipeCell run_cell(const CellSpec& spec, const RunConfig& config, const Corpus& corpus,
                    std::ostream& log) {
  RunConfig rc = config;
  rc.checkpoint.clear();
  rc.metrics.clear();
  rc.stop_dev_ppl = 0.0;
  rc.stop_dev_ratio = 0.0;
  rc.model.variant = spec.variant;
  rc.model.use_cache = spec.use_cache;
  rc.model.seq_len = static_cast<int>(spec.L);
  rc.model.cache_len = static_cast<int>(spec.L);
  rc.shuffle = !spec.use_cache;
  if (spec.switch_epoch > 0) {
    rc.stages = {{spec.initial_L, spec.switch_epoch}, {spec.L, spec.epochs - spec.switch_epoch}};
  } else {
    rc.stages = {{spec.L, spec.epochs}};
  }
  log << "cell " << spec.model << " L " << spec.initial_L << "->" << spec.L << " switch "
      << spec.switch_epoch << '\n';
  const TrainingOutcome out = train_on_corpus(rc, corpus, false, log);

  RecipeCell cell;
  cell.model = spec.model;
  cell.initial_L = spec.initial_L;
  cell.switch_epoch = spec.switch_epoch;
  cell.L = spec.L;
  cell.epochs = out.epochs.size();
  for (const EpochMetrics& m : out.epochs) {
    cell.train_tokens += m.train_tokens;
    cell.train_seconds += m.train_seconds;
    cell.train_dot_products += m.attention_dot_products;
  }

  const Model<float> model{out.config, out.params};
  cell.eval_mode = model.config.use_cache ? EvalKind::cached : EvalKind::nonoverlapping;
  const EvalReport dev = model.config.use_cache ? eval_cached(model, corpus.dev)
                                                : eval_nonoverlapping(model, corpus.dev);
  cell.dev_ppl = dev.perplexity();
  cell.eval_tokens = dev.tokens_scored;
  cell.eval_seconds = dev.wall_seconds;

  const std::size_t n = std::min(config.sliding_eval_tokens + 1, corpus.dev.size());
  if (n >= 2) {
    const std::span<const TokenId> dev_span(corpus.dev);
    GenerationOptions g;
    g.n_tokens = n - 1;
    g.use_cache = model.config.use_cache;
    g.teacher_forced = true;
    g.reference = dev_span.subspan(1, n - 1);
    const GenerationResult r = generate(model, dev_span.first(1), g);
    double loss = 0.0;
    for (double l : r.reference_losses) loss += l;
    cell.tbt_ppl = std::exp(loss / static_cast<double>(r.reference_losses.size()));
    cell.tbt_tokens = r.reference_losses.size();
    cell.tbt_seconds = r.wall_seconds;
    for (std::uint64_t d : r.step_dot_products) cell.tbt_dot_products += d;
  } else {
    cell.tbt_ppl = std::numeric_limits<double>::quiet_NaN();
  }
  return cell;
}

std::string recipe_csv_header(const std::string& name) {
  std::string out;
  for (const auto& c : columns(name)) out += (out.empty() ? "" : ",") + c;
  return out;
}

std::string recipe_csv_row(const std::string& name, const RecipeCell& cell) {
  std::string out;
  bool first = true;
  for (const auto& c : columns(name)) {
    if (!first) out += ',';
    out += column_value(cell, c);
    first = false;
  }
  return out;
}

std::vector<RecipeCell> run_recipe(const std::string& name, const RunConfig& config,
                                   const Corpus& corpus, std::ostream& csv, std::ostream& log) {
  const std::vector<CellSpec> cells = recipe_cells(name, config);
  if (corpus.train.size() < 2) throw ConfigError("recipe needs a training corpus");
  if (corpus.dev.size() < 2) throw ConfigError("recipe needs a dev corpus (dev_file)");
  csv << recipe_csv_header(name) << '\n';
  std::vector<RecipeCell> results;
  for (const CellSpec& spec : cells) {
    results.push_back(run_cell(spec, config, corpus, log));
    csv << recipe_csv_row(name, results.back()) << '\n' << std::flush;
  }
  return results;
}

std::vector<RecipeCell> run_recipe(const std::string& name, const RunConfig& config,
                                   std::ostream& csv, std::ostream& log) {
  recipe_cells(name, config);  // reject unknown names before touching files
  if (config.train_file.empty()) throw ConfigError("recipe needs train_file");
  if (config.dev_file.empty()) throw ConfigError("recipe needs dev_file");
  const Corpus corpus =
      load_corpus(config.train_file, config.dev_file, "", config.corpus_options());
  return run_recipe(name, config, corpus, csv, log);
}

}  // namespace pialm
