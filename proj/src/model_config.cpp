#include "pialm/model_config.hpp"

#include <cstdio>

#include "pialm/errors.hpp"

namespace pialm {

std::string_view to_string(AttentionVariant v) {
  return v == AttentionVariant::pia ? "pia" : "baseline";
}
std::string_view to_string(NormPlacement v) { return v == NormPlacement::pre ? "pre" : "post"; }
std::string_view to_string(Activation v) { return v == Activation::relu ? "relu" : "gelu"; }

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1) fail("d_model and n_heads must be >= 1");
  if (d_model % n_heads != 0) {
    fail("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
         std::to_string(n_heads) + ")");
  }
  if (d_ff < 1) fail("d_ff must be >= 1");
  if (vocab_size < 0) fail("vocab_size must be >= 0");
  if (seq_len < 1) fail("L must be >= 1");
  if (cache_len < 0) fail("L_cache must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0, 1)");
  if (ln_eps <= 0.0) fail("ln_eps must be positive");
}

ModelConfig ModelConfig::from_kv(const KeyValueConfig& kv, ModelConfig c) {
  if (const auto preset = kv.get("preset")) c = model_preset(*preset);
  c.n_layers = static_cast<int>(kv.get_int("n_layers", c.n_layers));
  c.d_model = static_cast<int>(kv.get_int("d_model", c.d_model));
  c.n_heads = static_cast<int>(kv.get_int("n_heads", c.n_heads));
  c.d_ff = static_cast<int>(kv.get_int("d_ff", c.d_ff));
  c.vocab_size = static_cast<int>(kv.get_int("vocab_size", c.vocab_size));
  const bool cache_tied = c.cache_len == c.seq_len;
  c.seq_len = static_cast<int>(kv.get_int("L", c.seq_len));
  // L' follows L unless set explicitly.
  c.cache_len = static_cast<int>(kv.get_int("L_cache", cache_tied ? c.seq_len : c.cache_len));
  const std::string variant = kv.get_string("variant", std::string(to_string(c.variant)));
  if (variant == "pia") {
    c.variant = AttentionVariant::pia;
  } else if (variant == "baseline") {
    c.variant = AttentionVariant::baseline;
  } else {
    throw ConfigError("variant must be baseline or pia, got '" + variant + "'");
  }
  c.use_cache = kv.get_bool("use_cache", c.use_cache);
  c.tie_embeddings = kv.get_bool("tie_embeddings", c.tie_embeddings);
  c.dropout = kv.get_double("dropout", c.dropout);
  const std::string act = kv.get_string("activation", std::string(to_string(c.activation)));
  if (act == "relu") {
    c.activation = Activation::relu;
  } else if (act == "gelu") {
    c.activation = Activation::gelu;
  } else {
    throw ConfigError("activation must be relu or gelu, got '" + act + "'");
  }
  const std::string norm = kv.get_string("norm", std::string(to_string(c.norm)));
  if (norm == "pre") {
    c.norm = NormPlacement::pre;
  } else if (norm == "post") {
    c.norm = NormPlacement::post;
  } else {
    throw ConfigError("norm must be pre or post, got '" + norm + "'");
  }
  c.ln_eps = kv.get_double("ln_eps", c.ln_eps);
  return c;
}

ModelConfig ModelConfig::from_kv(const KeyValueConfig& kv) { return from_kv(kv, ModelConfig{}); }

KeyValueConfig ModelConfig::to_kv() const {
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  KeyValueConfig kv;
  kv.set("n_layers", std::to_string(n_layers));
  kv.set("d_model", std::to_string(d_model));
  kv.set("n_heads", std::to_string(n_heads));
  kv.set("d_ff", std::to_string(d_ff));
  kv.set("vocab_size", std::to_string(vocab_size));
  kv.set("L", std::to_string(seq_len));
  kv.set("L_cache", std::to_string(cache_len));
  kv.set("variant", std::string(to_string(variant)));
  kv.set("use_cache", use_cache ? "true" : "false");
  kv.set("tie_embeddings", tie_embeddings ? "true" : "false");
  kv.set("dropout", num(dropout));
  kv.set("activation", std::string(to_string(activation)));
  kv.set("norm", std::string(to_string(norm)));
  kv.set("ln_eps", num(ln_eps));
  return kv;
}

bool is_model_preset(std::string_view name) {
  return name == "baevski-auli" || name == "shortformer" || name == "desk";
}

ModelConfig model_preset(std::string_view name) {
  ModelConfig c;
  if (name == "baevski-auli") {
    c.n_layers = 16;
    c.d_model = 1024;
    c.n_heads = 8;
    c.d_ff = 4096;
    c.seq_len = 3072;
    c.cache_len = 3072;
    c.variant = AttentionVariant::baseline;
    c.use_cache = false;
  } else if (name == "shortformer") {
    c.n_layers = 16;
    c.d_model = 1024;
    c.n_heads = 8;
    c.d_ff = 4096;
    c.seq_len = 512;
    c.cache_len = 512;
    c.variant = AttentionVariant::pia;
    c.use_cache = true;
  } else if (name == "desk") {
    // ModelConfig defaults.
  } else {
    throw ConfigError("unknown model preset '" + std::string(name) + "'");
  }
  return c;
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t ff = static_cast<std::size_t>(c.d_ff);
  const std::size_t v = static_cast<std::size_t>(c.vocab_size);
  const std::size_t attention = 4 * (d * d + d);
  const std::size_t feedforward = d * ff + ff + ff * d + d;
  const std::size_t norms = 2 * 2 * d;
  const std::size_t per_layer = attention + feedforward + norms;
  std::size_t total = v * d + static_cast<std::size_t>(c.n_layers) * per_layer + 2 * d;
  if (!c.tie_embeddings) total += v * d;
  return total;
}

}  // namespace pialm
