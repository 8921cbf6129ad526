#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pialm/autodiff.hpp"
#include "pialm/model_config.hpp"
#include "pialm/tensor.hpp"

namespace pialm {

// ---- parameters ----------------------------------------------------------------

template <typename T>
struct LayerParameters {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> w1, b1, w2, b2;

  friend bool operator==(const LayerParameters&, const LayerParameters&) = default;
};

template <typename T>
struct Parameters {
  Tensor<T> token_embedding;  // [V x d]; doubles as the softmax matrix when tied
  std::vector<LayerParameters<T>> layers;
  Tensor<T> final_gain, final_bias;
  Tensor<T> output;  // [V x d]; empty when embeddings are tied

  // Visits every tensor in a fixed order with a stable dotted name.
  void for_each(const std::function<void(const std::string&, Tensor<T>&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor<T>&)>& fn) const;

  std::size_t count() const;

  template <typename U>
  Parameters<U> cast() const;

  friend bool operator==(const Parameters&, const Parameters&) = default;
};

// Weights uniform in +-1/sqrt(fan_in), biases zero, norms identity, embedding
// entries with standard deviation 0.01, which keeps untrained logits close to uniform.
template <typename T>
Parameters<T> init_parameters(const ModelConfig& config, std::uint64_t seed);

// ---- positions -------------------------------------------------------------------

// Canonical sinusoid: channel 2i = sin(p / 10000^(2i/d)), channel 2i+1 = cos(same).
std::vector<double> sinusoidal_pe(std::size_t position, std::size_t d_model);

// Rows for positions [first, first + count).
template <typename T>
Tensor<T> position_table(std::size_t first, std::size_t count, std::size_t d_model);

// ---- cache -------------------------------------------------------------------------

// Stored layer inputs (the residual stream entering each layer) for the most
// recent tokens of a stream. Never contains added position embeddings under PIA.
template <typename T>
struct Cache {
  std::vector<Tensor<T>> layers;  // per layer [token_count x d_model]

  std::size_t token_count() const { return layers.empty() ? 0 : layers.front().rows(); }
  bool empty() const { return token_count() == 0; }

  static Cache with_layers(std::size_t n_layers) {
    Cache c;
    c.layers.resize(n_layers);
    return c;
  }

  friend bool operator==(const Cache&, const Cache&) = default;
};

// Keeps the newest `capacity` tokens of old ++ fresh, per layer.
template <typename T>
Cache<T> advance_cache(const Cache<T>& old, const std::vector<Tensor<T>>& fresh,
                       std::size_t capacity);

// Stacks two caches token-wise (a's tokens first).
template <typename T>
Cache<T> concat_caches(const Cache<T>& a, const Cache<T>& b);

// ---- attention -------------------------------------------------------------------

// Row i permits every cache column and new columns 0..i.
AttentionMask causal_mask_with_cache(std::size_t n_new, std::size_t n_cache);

// Process-wide count of query-key dot products issued by attention().
std::uint64_t attention_dot_products();
void reset_attention_dot_products();

// Single-head scaled dot-product attention: softmax(q k^T / sqrt(d_head) + mask) v.
// Adds q.rows * k.rows to the dot-product counter.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const AttentionMask& mask);

// ---- forward passes -----------------------------------------------------------------

template <typename T>
struct BoundParameters {
  struct Layer {
    Var<T> ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain, ln2_bias, w1, b1, w2, b2;
  };
  Var<T> token_embedding;
  std::vector<Layer> layers;
  Var<T> final_gain, final_bias;
  Var<T> output;  // invalid when tied

  // Leaf ids in Parameters::for_each order, for gradient readout.
  std::vector<std::size_t> leaf_ids;
};

// Places every parameter tensor on `tape` as a leaf.
template <typename T>
BoundParameters<T> bind(Tape<T>& tape, const Parameters<T>& params, bool requires_grad);

// Gradients of the bound leaves, shaped like the parameters.
template <typename T>
Parameters<T> gradients(Tape<T>& tape, const BoundParameters<T>& bound, const Parameters<T>& like);

template <typename T>
struct ForwardOptions {
  // Skip the position-embedding addition entirely.
  bool add_positions = true;
  // Replaces the sinusoidal table rows used for the pass ([positions x d_model]).
  const Tensor<T>* position_override = nullptr;
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

template <typename T>
struct ForwardResult {
  Var<T> logits;                       // [n_new x V]
  std::vector<Tensor<T>> layer_inputs;  // per layer [n_new x d_model], detached
  Cache<T> new_cache;                   // advance_cache(context, layer_inputs, L')
};

// Baseline path: X = E[tokens] + P[0..n), causal self-attention over the new tokens.
template <typename T>
Var<T> forward_baseline(Tape<T>& tape, const BoundParameters<T>& params,
                        const ModelConfig& config, std::span<const TokenId> tokens,
                        const ForwardOptions<T>& options = {});

// Position-infused attention. Cached rows get positions 0..c-1, new rows c..c+n-1,
// added to queries and keys in every layer and never to values.
template <typename T>
ForwardResult<T> forward_pia(Tape<T>& tape, const BoundParameters<T>& params,
                             const ModelConfig& config, std::span<const TokenId> tokens,
                             const Cache<T>& cache, const ForwardOptions<T>& options = {});

// Baseline position handling (positions restart at 0 for every pass) while
// still attending to cached layer inputs.
template <typename T>
ForwardResult<T> forward_cache_no_pia(Tape<T>& tape, const BoundParameters<T>& params,
                                      const ModelConfig& config, std::span<const TokenId> tokens,
                                      const Cache<T>& cache, const ForwardOptions<T>& options = {});

// Picks the path implied by config.variant. `cache` may be empty.
template <typename T>
ForwardResult<T> forward(Tape<T>& tape, const BoundParameters<T>& params,
                         const ModelConfig& config, std::span<const TokenId> tokens,
                         const Cache<T>& cache, const ForwardOptions<T>& options = {});

// A configured model with frozen weights, for inference.
template <typename T>
struct Model {
  ModelConfig config;
  Parameters<T> params;
};

// Tape-free convenience wrapper around forward(); returns plain logits.
template <typename T>
struct InferenceResult {
  Tensor<T> logits;
  std::vector<Tensor<T>> layer_inputs;
  Cache<T> new_cache;
};

template <typename T>
InferenceResult<T> infer(const Model<T>& model, std::span<const TokenId> tokens,
                         const Cache<T>& cache);

}  // namespace pialm
