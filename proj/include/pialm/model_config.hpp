#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "pialm/kv_config.hpp"

namespace pialm {

enum class AttentionVariant {
  baseline,  // position embeddings added to word embeddings once, at the input
  pia,       // position embeddings added to queries and keys in every layer
};

enum class NormPlacement { pre, post };
enum class Activation { relu, gelu };

std::string_view to_string(AttentionVariant v);
std::string_view to_string(NormPlacement v);
std::string_view to_string(Activation v);

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 0;
  int seq_len = 64;    // L: tokens per forward pass
  int cache_len = 64;  // L': cached tokens attended alongside the new ones
  AttentionVariant variant = AttentionVariant::baseline;
  bool use_cache = false;
  bool tie_embeddings = true;
  double dropout = 0.0;
  Activation activation = Activation::relu;
  NormPlacement norm = NormPlacement::pre;
  double ln_eps = 1e-5;

  int head_dim() const { return d_model / n_heads; }
  // Throws ConfigError on violated invariants.
  void validate() const;

  // Reads model keys from `kv`; absent keys keep the values already in `base`.
  static ModelConfig from_kv(const KeyValueConfig& kv, ModelConfig base);
  static ModelConfig from_kv(const KeyValueConfig& kv);
  KeyValueConfig to_kv() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Named architectures:
//   "baevski-auli": 16 layers of width 1024, 8 heads, inner width 4096, L = 3072, baseline
//                   attention, tied embeddings, no cache.
//   "shortformer":  same widths with position-infused attention, L = L' = 512, cache on.
//   "desk":         2 layers of width 64, 4 heads, inner width 256, L = 64.
// vocab_size is 0 in every preset; it comes from the corpus.
ModelConfig model_preset(std::string_view name);
bool is_model_preset(std::string_view name);

// Trainable scalar count; a pure function of the config. Identical for both
// attention variants.
std::size_t parameter_count(const ModelConfig& config);

}  // namespace pialm
