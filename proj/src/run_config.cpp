#include "pialm/run_config.hpp"

#include <cstdio>
#include <filesystem>

#include "pialm/curriculum.hpp"
#include "pialm/errors.hpp"

namespace pialm {

namespace {

std::vector<std::size_t> to_sizes(const std::vector<long long>& in, const char* key) {
  std::vector<std::size_t> out;
  for (long long v : in) {
    if (v < 0) throw ConfigError(std::string(key) + " entries must be nonnegative");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

std::vector<long long> to_ll(const std::vector<std::size_t>& in) {
  return {in.begin(), in.end()};
}

std::size_t nonnegative(long long v, const char* key) {
  if (v < 0) throw ConfigError(std::string(key) + " must be nonnegative");
  return static_cast<std::size_t>(v);
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::size_t RunConfig::total_epochs() const {
  std::size_t n = 0;
  for (const auto& s : stages) n += s.second;
  return n;
}

CorpusOptions RunConfig::corpus_options() const {
  CorpusOptions o;
  o.mode = tokenizer;
  o.max_vocab = max_vocab;
  o.train_limit = train_limit_tokens;
  o.dev_limit = dev_limit_tokens;
  return o;
}

RunConfig RunConfig::from_kv(const KeyValueConfig& kv, const std::string& base_dir) {
  RunConfig c;
  c.model = ModelConfig::from_kv(kv, model_preset("desk"));
  const std::size_t epochs = nonnegative(kv.get_int("epochs", 1), "epochs");
  if (const auto stages = kv.get("stages")) {
    c.stages = parse_stages(*stages);
    if (kv.has("L") && static_cast<std::size_t>(c.model.seq_len) != c.stages.back().first) {
      throw ConfigError("L = " + std::to_string(c.model.seq_len) +
                        " disagrees with the final stage length " +
                        std::to_string(c.stages.back().first));
    }
    if (!kv.has("L")) {
      const bool tied = c.model.cache_len == c.model.seq_len;
      c.model.seq_len = static_cast<int>(c.stages.back().first);
      if (tied && !kv.has("L_cache")) c.model.cache_len = c.model.seq_len;
    }
    if (kv.has("epochs") && epochs != c.total_epochs()) {
      throw ConfigError("epochs = " + std::to_string(epochs) + " but stages sum to " +
                        std::to_string(c.total_epochs()));
    }
  } else {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    c.stages = {{static_cast<std::size_t>(c.model.seq_len), epochs}};
  }
  c.tokens_per_batch = nonnegative(kv.get_int("tokens_per_batch", 4096), "tokens_per_batch");
  c.adam.lr = kv.get_double("lr", c.adam.lr);
  c.adam.beta1 = kv.get_double("beta1", c.adam.beta1);
  c.adam.beta2 = kv.get_double("beta2", c.adam.beta2);
  c.adam.eps = kv.get_double("adam_eps", c.adam.eps);
  c.adam.clip_norm = kv.get_double("clip_norm", c.adam.clip_norm);
  c.adam.schedule = parse_schedule(kv.get_string("schedule", "constant"));
  c.adam.warmup_steps = nonnegative(kv.get_int("warmup_steps", 0), "warmup_steps");
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", 1));
  c.stop_dev_ppl = kv.get_double("stop_dev_ppl", 0.0);
  c.stop_dev_ratio = kv.get_double("stop_dev_ratio", 0.0);
  if (c.stop_dev_ppl < 0.0 || c.stop_dev_ratio < 0.0) throw ConfigError("stop thresholds must be >= 0");

  c.shuffle = kv.get_bool("shuffle", !c.model.use_cache);
  if (c.model.use_cache && c.shuffle) {
    throw ConfigError(
        "use_cache requires shuffle = false: the cache must hold the previous subsequence of "
        "the same stream");
  }

  auto path = [&](const char* key) {
    std::string p = kv.get_string(key, "");
    if (!p.empty() && !base_dir.empty() && std::filesystem::path(p).is_relative()) {
      p = (std::filesystem::path(base_dir) / p).string();
    }
    return p;
  };
  c.train_file = path("train_file");
  c.dev_file = path("dev_file");
  c.test_file = path("test_file");
  c.checkpoint = path("checkpoint");
  c.metrics = path("metrics");
  c.tokenizer = parse_tokenizer_mode(kv.get_string("tokenizer", "char"));
  c.max_vocab = nonnegative(kv.get_int("max_vocab", 0), "max_vocab");
  c.train_limit_tokens = nonnegative(kv.get_int("train_limit_tokens", 0), "train_limit_tokens");
  c.dev_limit_tokens = nonnegative(kv.get_int("dev_limit_tokens", 0), "dev_limit_tokens");

  c.sweep_lengths = to_sizes(kv.get_int_list("sweep_lengths", to_ll(c.sweep_lengths)), "sweep_lengths");
  c.grid_initial_lengths = to_sizes(
      kv.get_int_list("grid_initial_lengths", to_ll(c.grid_initial_lengths)), "grid_initial_lengths");
  c.grid_switch_epochs = to_sizes(
      kv.get_int_list("grid_switch_epochs", to_ll(c.grid_switch_epochs)), "grid_switch_epochs");
  c.sliding_eval_tokens =
      nonnegative(kv.get_int("sliding_eval_tokens", static_cast<long long>(c.sliding_eval_tokens)),
                  "sliding_eval_tokens");
  kv.reject_unused();
  c.model.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  const std::string dir = std::filesystem::path(path).parent_path().string();
  return from_kv(KeyValueConfig::load(path), dir);
}

KeyValueConfig RunConfig::to_kv() const {
  KeyValueConfig kv = model.to_kv();
  std::string st;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    st += (i ? "," : "") + std::to_string(stages[i].first) + ":" + std::to_string(stages[i].second);
  }
  kv.set("stages", st);
  kv.set("tokens_per_batch", std::to_string(tokens_per_batch));
  kv.set("lr", num(adam.lr));
  kv.set("beta1", num(adam.beta1));
  kv.set("beta2", num(adam.beta2));
  kv.set("adam_eps", num(adam.eps));
  kv.set("clip_norm", num(adam.clip_norm));
  kv.set("schedule", std::string(to_string(adam.schedule)));
  kv.set("warmup_steps", std::to_string(adam.warmup_steps));
  kv.set("seed", std::to_string(seed));
  kv.set("shuffle", shuffle ? "true" : "false");
  kv.set("stop_dev_ppl", num(stop_dev_ppl));
  kv.set("stop_dev_ratio", num(stop_dev_ratio));
  if (!train_file.empty()) kv.set("train_file", train_file);
  if (!dev_file.empty()) kv.set("dev_file", dev_file);
  if (!test_file.empty()) kv.set("test_file", test_file);
  kv.set("tokenizer", std::string(to_string(tokenizer)));
  kv.set("max_vocab", std::to_string(max_vocab));
  kv.set("train_limit_tokens", std::to_string(train_limit_tokens));
  kv.set("dev_limit_tokens", std::to_string(dev_limit_tokens));
  if (!checkpoint.empty()) kv.set("checkpoint", checkpoint);
  if (!metrics.empty()) kv.set("metrics", metrics);
  kv.set("sweep_lengths", join(sweep_lengths));
  kv.set("grid_initial_lengths", join(grid_initial_lengths));
  kv.set("grid_switch_epochs", join(grid_switch_epochs));
  kv.set("sliding_eval_tokens", std::to_string(sliding_eval_tokens));
  return kv;
}

}  // namespace pialm
