// Command-line front end: training, evaluation, generation, analytic reports
// and experiment recipes.

#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pialm/analysis.hpp"
#include "pialm/checkpoint.hpp"
#include "pialm/data.hpp"
#include "pialm/errors.hpp"
#include "pialm/inference.hpp"
#include "pialm/recipes.hpp"
#include "pialm/run_config.hpp"
#include "pialm/trainer.hpp"

#ifndef PIALM_DATA_DIR
#define PIALM_DATA_DIR "data"
#endif

namespace {

using namespace pialm;

struct Loaded {
  Checkpoint ck;
  Vocab vocab;
  TokenizerMode mode = TokenizerMode::character;
};

Loaded load_model(const std::string& ckpt, const std::string& vocab_file) {
  Loaded l{load_checkpoint(ckpt), {}, TokenizerMode::character};
  l.mode = parse_tokenizer_mode(l.ck.metadata.get_string("tokenizer", "char"));
  l.vocab = Vocab::load(vocab_file.empty() ? vocab_path(ckpt) : vocab_file, l.mode);
  if (l.vocab.size() != static_cast<std::size_t>(l.ck.config.vocab_size)) {
    throw ConfigError("vocab has " + std::to_string(l.vocab.size()) + " entries, checkpoint expects " +
                      std::to_string(l.ck.config.vocab_size));
  }
  return l;
}

std::vector<TokenId> load_stream(const Loaded& l, std::string file, std::size_t limit) {
  if (file.empty()) file = l.ck.metadata.get_string("dev_file", "");
  if (file.empty()) throw ConfigError("no data file given and the checkpoint names no dev_file");
  std::vector<TokenId> ids = l.vocab.encode(read_text_file(file));
  if (limit > 0 && ids.size() > limit) ids.resize(limit);
  return ids;
}

ModelConfig config_or_preset(const std::string& what) {
  if (is_model_preset(what)) return model_preset(what);
  return RunConfig::load(what).model;
}

std::string dims_text(std::size_t q, std::size_t k) {
  return std::to_string(q) + "x" + std::to_string(k);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Position-infused attention language models"};
  app.require_subcommand(1);

  std::string config_path;
  bool resume = false;
  auto* train = app.add_subcommand("train", "Train from a key=value config file");
  train->add_option("config", config_path, "Run config")->required();
  train->add_flag("--resume", resume, "Continue from <checkpoint>.train");

  std::string ckpt, mode_name, data_file, vocab_file;
  std::size_t stride = 0, limit = 0;
  auto* eval = app.add_subcommand("eval", "Perplexity of a checkpoint on a text file");
  eval->add_option("checkpoint", ckpt)->required();
  eval->add_option("mode", mode_name, "nonoverlapping, sliding or cached")->required();
  eval->add_option("--stride", stride, "Sliding-window stride S (default L)");
  eval->add_option("--data", data_file, "Text to score (default: the checkpoint's dev_file)");
  eval->add_option("--vocab", vocab_file, "Vocab file (default: <checkpoint>.vocab)");
  eval->add_option("--limit", limit, "Score only the first N tokens");

  std::size_t n_tokens = 0;
  bool teacher_forced = false, no_cache = false;
  std::string prompt, out_file;
  auto* gen = app.add_subcommand("generate", "Greedy token-by-token generation");
  gen->add_option("checkpoint", ckpt)->required();
  gen->add_option("--n", n_tokens, "Tokens to generate")->required();
  gen->add_flag("--teacher-forced", teacher_forced, "Feed the reference text and score it");
  gen->add_flag("--no-cache", no_cache, "Re-encode the window every step");
  gen->add_option("--prompt", prompt, "Prompt text (free generation)");
  gen->add_option("--data", data_file, "Reference text (default: the checkpoint's dev_file)");
  gen->add_option("--vocab", vocab_file, "Vocab file (default: <checkpoint>.vocab)");
  gen->add_option("--out", out_file, "Write per-step CSV here");

  std::size_t len = 0, k = 0;
  bool inclusive = false, brute = false;
  auto* ctx = app.add_subcommand("ctxwin", "Share of positions with a long enough history");
  ctx->add_option("--len", len, "Subsequence length L")->required()->check(CLI::PositiveNumber);
  ctx->add_option("--k", k, "History threshold")->required();
  ctx->add_flag("--inclusive", inclusive, "Count histories of at least k (default: more than k)");
  ctx->add_flag("--brute", brute, "Enumerate positions instead of the closed form");

  std::string what;
  auto* dims = app.add_subcommand("dims", "Attention matrix sizes and cost of one pass");
  dims->add_option("config", what, "Run config file or preset name")->required();
  dims->add_option("mode", mode_name, "nonoverlapping, cached or generation")->required();

  std::string recipe_name;
  auto* recipe = app.add_subcommand("recipe", "Run an experiment grid and print CSV");
  recipe->add_option("name", recipe_name, "table1-sweep, table2-grid, table3-pia-sweep or shortformer-vs-baseline")
      ->required();
  recipe->add_option("--config", config_path, "Run config (default: data/desk.cfg)");
  recipe->add_option("--out", out_file, "Write the CSV here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const RunConfig rc = RunConfig::load(config_path);
      const TrainingOutcome out = train_from_config(rc, resume, std::cerr);
      if (!out.epochs.empty()) {
        std::cout << metrics_csv_header << '\n' << metrics_csv_row(out.epochs.back()) << '\n';
      }
    } else if (*eval) {
      const Loaded l = load_model(ckpt, vocab_file);
      const std::vector<TokenId> stream = load_stream(l, data_file, limit);
      Model<float> model{l.ck.config, l.ck.params};
      const EvalKind kind = parse_eval_kind(mode_name);
      if (stride != 0 && kind != EvalKind::sliding) throw ConfigError("--stride applies to sliding evaluation only");
      const std::size_t L = static_cast<std::size_t>(model.config.seq_len);
      const std::size_t S = stride == 0 ? L : stride;
      const EvalReport r = kind == EvalKind::sliding ? eval_sliding(model, stream, S)
                           : kind == EvalKind::cached ? eval_cached(model, stream)
                                                      : eval_nonoverlapping(model, stream);
      std::printf("mode,stride,L,L_cache,tokens,mean_loss,ppl,dot_products,tokens_per_s\n");
      std::printf("%s,%zu,%zu,%d,%zu,%.6f,%.4f,%llu,%.1f\n", std::string(to_string(kind)).c_str(),
                  kind == EvalKind::sliding ? S : L, L, model.config.cache_len, r.tokens_scored,
                  r.mean_loss(), r.perplexity(), static_cast<unsigned long long>(r.dot_products),
                  r.wall_seconds > 0 ? static_cast<double>(r.tokens_scored) / r.wall_seconds : 0.0);
      const auto [lo, hi] = context_window_bounds(
          L, kind == EvalKind::sliding ? S : L,
          static_cast<std::size_t>(model.config.cache_len), kind);
      std::fprintf(stderr, "effective context between %zu and %zu tokens\n", lo, hi);
    } else if (*gen) {
      const Loaded l = load_model(ckpt, vocab_file);
      Model<float> model{l.ck.config, l.ck.params};
      GenerationOptions g;
      g.n_tokens = n_tokens;
      g.use_cache = model.config.use_cache && !no_cache;
      g.teacher_forced = teacher_forced;
      std::vector<TokenId> prompt_ids, reference;
      if (teacher_forced) {
        if (!prompt.empty()) throw ConfigError("--prompt and --teacher-forced do not combine");
        reference = load_stream(l, data_file, n_tokens + 1);
        if (reference.size() < n_tokens + 1) {
          throw ConfigError("reference text has only " + std::to_string(reference.size()) + " tokens");
        }
        prompt_ids.assign(reference.begin(), reference.begin() + 1);
        reference.erase(reference.begin());
        g.reference = reference;
      } else {
        prompt_ids = l.vocab.encode(prompt.empty() ? std::string("\n") : prompt);
      }
      const GenerationResult r = generate(model, prompt_ids, g);
      std::uint64_t dots = 0;
      for (auto d : r.step_dot_products) dots += d;
      if (teacher_forced) {
        double loss = 0.0;
        for (double x : r.reference_losses) loss += x;
        const double mean = loss / static_cast<double>(r.reference_losses.size());
        std::printf("tokens,mean_loss,ppl,dot_products_per_token,tokens_per_s\n");
        std::printf("%zu,%.6f,%.4f,%.1f,%.1f\n", r.reference_losses.size(), mean, std::exp(mean),
                    static_cast<double>(dots) / static_cast<double>(n_tokens),
                    r.wall_seconds > 0 ? static_cast<double>(n_tokens) / r.wall_seconds : 0.0);
      } else {
        std::cout << l.vocab.decode(r.tokens) << '\n';
        std::fprintf(stderr, "%zu tokens, %.1f attention dot products per token, %.1f tokens/s\n",
                     r.tokens.size(), static_cast<double>(dots) / static_cast<double>(n_tokens),
                     r.wall_seconds > 0 ? static_cast<double>(n_tokens) / r.wall_seconds : 0.0);
      }
      if (!out_file.empty()) {
        std::ofstream out(out_file);
        if (!out) throw FormatError("cannot write " + out_file);
        out << "step,token,dot_products" << (teacher_forced ? ",loss" : "") << '\n';
        for (std::size_t t = 0; t < r.tokens.size(); ++t) {
          out << t << ',' << r.tokens[t] << ',' << r.step_dot_products[t];
          if (teacher_forced) out << ',' << r.reference_losses[t];
          out << '\n';
        }
      }
    } else if (*ctx) {
      const Fraction f = brute ? ctxwin_stats_brute(len, k, inclusive) : ctxwin_stats(len, k, inclusive);
      std::printf("%s %.6f\n", f.to_string().c_str(), f.value());
    } else if (*dims) {
      const ModelConfig cfg = config_or_preset(what);
      const CostReport r = attention_dims(cfg, parse_cost_mode(mode_name));
      std::printf("mode,attention,heads,layers,dot_products_per_pass,dot_products_per_token,parameters,peak_activation_elements\n");
      std::printf("%s,%s,%zu,%zu,%llu,%.1f,%zu,%llu\n", std::string(to_string(r.mode)).c_str(),
                  dims_text(r.queries, r.keys).c_str(), r.heads, r.layers,
                  static_cast<unsigned long long>(r.dot_products_per_pass), r.dot_products_per_token,
                  r.parameter_count, static_cast<unsigned long long>(r.peak_activation_elements));
    } else if (*recipe) {
      if (!is_recipe(recipe_name)) {
        std::string known;
        for (const auto& n : recipe_names()) known += " " + n;
        std::cerr << "unknown recipe '" << recipe_name << "'; choose one of:" << known << '\n';
        return 2;
      }
      const RunConfig rc =
          RunConfig::load(config_path.empty() ? std::string(PIALM_DATA_DIR) + "/desk.cfg" : config_path);
      std::unique_ptr<std::ofstream> file;
      if (!out_file.empty()) {
        file = std::make_unique<std::ofstream>(out_file);
        if (!*file) throw FormatError("cannot write " + out_file);
      }
      run_recipe(recipe_name, rc, file ? *file : std::cout, std::cerr);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
