#include "pialm/model.hpp"

#include <atomic>
#include <cmath>
#include <random>

#include "pialm/errors.hpp"
#include "pialm/seed.hpp"

#define PIALM_LAYER_FIELDS(X) \
  X(ln1_gain)                 \
  X(ln1_bias)                 \
  X(wq)                       \
  X(bq)                       \
  X(wk)                       \
  X(bk)                       \
  X(wv)                       \
  X(bv)                       \
  X(wo)                       \
  X(bo)                       \
  X(ln2_gain)                 \
  X(ln2_bias)                 \
  X(w1)                       \
  X(b1)                       \
  X(w2)                       \
  X(b2)

namespace pialm {

namespace {

std::atomic<std::uint64_t> g_dot_products{0};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) { return derive_seed(seed, {salt}); }

}  // namespace

// ---- parameters ----------------------------------------------------------------

template <typename T>
void Parameters<T>::for_each(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
  fn("token_embedding", token_embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
#define PIALM_VISIT(name) fn(prefix + #name, layers[l].name);
    PIALM_LAYER_FIELDS(PIALM_VISIT)
#undef PIALM_VISIT
  }
  fn("final_gain", final_gain);
  fn("final_bias", final_bias);
  if (!output.empty()) fn("output", output);
}

template <typename T>
void Parameters<T>::for_each(
    const std::function<void(const std::string&, const Tensor<T>&)>& fn) const {
  const_cast<Parameters*>(this)->for_each(
      [&fn](const std::string& name, Tensor<T>& t) { fn(name, t); });
}

template <typename T>
std::size_t Parameters<T>::count() const {
  std::size_t n = 0;
  for_each([&n](const std::string&, const Tensor<T>& t) { n += t.size(); });
  return n;
}

template <typename T>
template <typename U>
Parameters<U> Parameters<T>::cast() const {
  Parameters<U> out;
  out.token_embedding = token_embedding.template cast<U>();
  out.layers.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
#define PIALM_CAST(name) out.layers[l].name = layers[l].name.template cast<U>();
    PIALM_LAYER_FIELDS(PIALM_CAST)
#undef PIALM_CAST
  }
  out.final_gain = final_gain.template cast<U>();
  out.final_bias = final_bias.template cast<U>();
  out.output = output.template cast<U>();
  return out;
}

template <typename T>
Parameters<T> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  if (config.vocab_size < 1) throw ConfigError("init_parameters: vocab_size must be set");
  const std::size_t d = static_cast<std::size_t>(config.d_model);
  const std::size_t ff = static_cast<std::size_t>(config.d_ff);
  const std::size_t v = static_cast<std::size_t>(config.vocab_size);
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](Tensor<T>& t, double bound) {
    for (T& x : t.data()) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      x = static_cast<T>((2.0 * u - 1.0) * bound);
    }
  };
  const double embed_bound = 0.01 * std::sqrt(3.0);

  Parameters<T> p;
  p.token_embedding = Tensor<T>({v, d});
  uniform(p.token_embedding, embed_bound);
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& layer : p.layers) {
    layer.ln1_gain = Tensor<T>::full({d}, T(1));
    layer.ln1_bias = Tensor<T>({d});
    for (Tensor<T>* w : {&layer.wq, &layer.wk, &layer.wv, &layer.wo}) {
      *w = Tensor<T>({d, d});
      uniform(*w, 1.0 / std::sqrt(static_cast<double>(d)));
    }
    for (Tensor<T>* b : {&layer.bq, &layer.bk, &layer.bv, &layer.bo}) *b = Tensor<T>({d});
    layer.ln2_gain = Tensor<T>::full({d}, T(1));
    layer.ln2_bias = Tensor<T>({d});
    layer.w1 = Tensor<T>({d, ff});
    uniform(layer.w1, 1.0 / std::sqrt(static_cast<double>(d)));
    layer.b1 = Tensor<T>({ff});
    layer.w2 = Tensor<T>({ff, d});
    uniform(layer.w2, 1.0 / std::sqrt(static_cast<double>(ff)));
    layer.b2 = Tensor<T>({d});
  }
  p.final_gain = Tensor<T>::full({d}, T(1));
  p.final_bias = Tensor<T>({d});
  if (!config.tie_embeddings) {
    p.output = Tensor<T>({v, d});
    uniform(p.output, embed_bound);
  }
  return p;
}

// ---- positions -------------------------------------------------------------------

std::vector<double> sinusoidal_pe(std::size_t position, std::size_t d_model) {
  std::vector<double> out(d_model);
  const double p = static_cast<double>(position);
  for (std::size_t c = 0; c < d_model; ++c) {
    const std::size_t pair = c / 2;
    const double angle =
        p / std::pow(10000.0, 2.0 * static_cast<double>(pair) / static_cast<double>(d_model));
    out[c] = (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
  return out;
}

template <typename T>
Tensor<T> position_table(std::size_t first, std::size_t count, std::size_t d_model) {
  Tensor<T> out({count, d_model});
  for (std::size_t r = 0; r < count; ++r) {
    const std::vector<double> row = sinusoidal_pe(first + r, d_model);
    for (std::size_t c = 0; c < d_model; ++c) out(r, c) = static_cast<T>(row[c]);
  }
  return out;
}

// ---- cache -------------------------------------------------------------------------

template <typename T>
Cache<T> advance_cache(const Cache<T>& old, const std::vector<Tensor<T>>& fresh,
                       std::size_t capacity) {
  Cache<T> out = Cache<T>::with_layers(fresh.size());
  if (!old.layers.empty() && old.layers.size() != fresh.size()) {
    throw ContractError("advance_cache: cache has " + std::to_string(old.layers.size()) +
                        " layers, update has " + std::to_string(fresh.size()));
  }
  for (std::size_t l = 0; l < fresh.size(); ++l) {
    const Tensor<T> joined = old.layers.empty() ? fresh[l] : concat_rows(old.layers[l], fresh[l]);
    const std::size_t keep = std::min(capacity, joined.rows());
    out.layers[l] = slice_rows(joined, joined.rows() - keep, keep);
  }
  return out;
}

template <typename T>
Cache<T> concat_caches(const Cache<T>& a, const Cache<T>& b) {
  if (a.layers.empty()) return b;
  if (b.layers.empty()) return a;
  if (a.layers.size() != b.layers.size()) throw ContractError("concat_caches: layer mismatch");
  Cache<T> out = Cache<T>::with_layers(a.layers.size());
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    out.layers[l] = concat_rows(a.layers[l], b.layers[l]);
  }
  return out;
}

// ---- attention -------------------------------------------------------------------

AttentionMask causal_mask_with_cache(std::size_t n_new, std::size_t n_cache) {
  AttentionMask mask;
  mask.rows = n_new;
  mask.cols = n_cache + n_new;
  mask.allowed.assign(mask.rows * mask.cols, 0);
  for (std::size_t i = 0; i < n_new; ++i) {
    for (std::size_t j = 0; j < n_cache + i + 1; ++j) mask.allowed[i * mask.cols + j] = 1;
  }
  return mask;
}

std::uint64_t attention_dot_products() { return g_dot_products.load(std::memory_order_relaxed); }
void reset_attention_dot_products() { g_dot_products.store(0, std::memory_order_relaxed); }

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const AttentionMask& mask) {
  if (q.value().rank() != 2 || k.value().rank() != 2 || v.value().rank() != 2) {
    throw DimensionError("attention expects matrices");
  }
  if (q.value().dim(1) != k.value().dim(1) || k.value().dim(0) != v.value().dim(0)) {
    throw DimensionError("attention: q " + shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " + shape_string(v.shape()));
  }
  if (mask.rows != q.value().dim(0) || mask.cols != k.value().dim(0)) {
    throw DimensionError("attention: mask [" + std::to_string(mask.rows) + "x" +
                         std::to_string(mask.cols) + "] for " + std::to_string(q.value().dim(0)) +
                         " queries and " + std::to_string(k.value().dim(0)) + " keys");
  }
  g_dot_products.fetch_add(q.value().dim(0) * k.value().dim(0), std::memory_order_relaxed);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(q.value().dim(1)));
  Var<T> scores = scale(matmul_nt(q, k), inv_sqrt);
  return matmul(masked_softmax(scores, mask), v);
}

// ---- binding -------------------------------------------------------------------------

template <typename T>
BoundParameters<T> bind(Tape<T>& tape, const Parameters<T>& params, bool requires_grad) {
  BoundParameters<T> b;
  auto put = [&](const Tensor<T>& t) {
    Var<T> var = tape.leaf(t, requires_grad);
    b.leaf_ids.push_back(var.id());
    return var;
  };
  b.token_embedding = put(params.token_embedding);
  b.layers.resize(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
#define PIALM_BIND(name) b.layers[l].name = put(params.layers[l].name);
    PIALM_LAYER_FIELDS(PIALM_BIND)
#undef PIALM_BIND
  }
  b.final_gain = put(params.final_gain);
  b.final_bias = put(params.final_bias);
  if (!params.output.empty()) b.output = put(params.output);
  return b;
}

template <typename T>
Parameters<T> gradients(Tape<T>& tape, const BoundParameters<T>& bound, const Parameters<T>& like) {
  Parameters<T> out = like;
  std::size_t i = 0;
  out.for_each([&](const std::string&, Tensor<T>& t) { t = tape.grad(bound.leaf_ids.at(i++)); });
  return out;
}

// ---- forward -------------------------------------------------------------------------

namespace {

enum class PositionPath { input, query_key };

template <typename T>
ForwardResult<T> run_model(Tape<T>& tape, const BoundParameters<T>& p, const ModelConfig& cfg,
                           std::span<const TokenId> tokens, const Cache<T>& cache,
                           PositionPath path, const ForwardOptions<T>& opt) {
  const std::size_t n_layers = static_cast<std::size_t>(cfg.n_layers);
  if (p.layers.size() != n_layers) throw ContractError("parameters do not match config layers");
  if (!cache.layers.empty() && cache.layers.size() != n_layers) {
    throw ContractError("cache has " + std::to_string(cache.layers.size()) +
                        " layers, model has " + std::to_string(n_layers));
  }
  const std::size_t n = tokens.size();
  const std::size_t c = cache.token_count();
  if (n == 0) throw ContractError("forward over zero tokens");
  if (n > static_cast<std::size_t>(cfg.seq_len)) {
    throw ContractError("forward over " + std::to_string(n) + " tokens exceeds L = " +
                        std::to_string(cfg.seq_len));
  }
  if (c > static_cast<std::size_t>(cfg.cache_len)) {
    throw ContractError("cache holds " + std::to_string(c) + " tokens, L_cache = " +
                        std::to_string(cfg.cache_len));
  }
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
  const bool pre = cfg.norm == NormPlacement::pre;
  const T eps = static_cast<T>(cfg.ln_eps);
  const double drop = opt.training ? cfg.dropout : 0.0;
  std::uint64_t salt = 0;

  const std::size_t n_positions = path == PositionPath::input ? n : c + n;
  Tensor<T> positions;
  if (opt.add_positions) {
    if (opt.position_override) {
      if (opt.position_override->rows() < n_positions || opt.position_override->cols() != d) {
        throw DimensionError("position override " + shape_string(opt.position_override->shape()) +
                             " too small for " + std::to_string(n_positions) + " positions");
      }
      positions = slice_rows(*opt.position_override, 0, n_positions);
    } else {
      positions = position_table<T>(0, n_positions, d);
    }
  }

  Var<T> x = embedding(p.token_embedding, tokens);
  if (path == PositionPath::input && opt.add_positions) {
    x = add(x, tape.constant(positions));
  }
  x = dropout(x, drop, mix_seed(opt.dropout_seed, salt++));
  Var<T> qk_positions;
  if (path == PositionPath::query_key && opt.add_positions) {
    qk_positions = tape.constant(std::move(positions));
  }

  const AttentionMask mask = causal_mask_with_cache(n, c);
  ForwardResult<T> result;
  result.layer_inputs.reserve(n_layers);

  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& w = p.layers[l];
    result.layer_inputs.push_back(x.value());

    Var<T> full = c > 0 ? concat_rows(tape.constant(cache.layers[l]), x) : x;
    Var<T> attn_in = pre ? layer_norm(full, w.ln1_gain, w.ln1_bias, eps) : full;
    Var<T> qk_in = qk_positions.valid() ? add(attn_in, qk_positions) : attn_in;
    Var<T> q_in = c > 0 ? slice_rows(qk_in, c, n) : qk_in;

    Var<T> q = add_bias(matmul(q_in, w.wq), w.bq);
    Var<T> k = add_bias(matmul(qk_in, w.wk), w.bk);
    Var<T> v = add_bias(matmul(attn_in, w.wv), w.bv);

    std::vector<Var<T>> heads;
    heads.reserve(static_cast<std::size_t>(cfg.n_heads));
    for (std::size_t h = 0; h < static_cast<std::size_t>(cfg.n_heads); ++h) {
      heads.push_back(attention(slice_cols(q, h * dh, dh), slice_cols(k, h * dh, dh),
                                slice_cols(v, h * dh, dh), mask));
    }
    Var<T> a = cfg.n_heads == 1 ? heads.front() : concat_cols(std::span<const Var<T>>(heads));
    a = add_bias(matmul(a, w.wo), w.bo);
    a = dropout(a, drop, mix_seed(opt.dropout_seed, salt++));

    auto feedforward = [&](Var<T> in) {
      Var<T> hidden = add_bias(matmul(in, w.w1), w.b1);
      hidden = cfg.activation == Activation::relu ? relu(hidden) : gelu(hidden);
      Var<T> out = add_bias(matmul(hidden, w.w2), w.b2);
      return dropout(out, drop, mix_seed(opt.dropout_seed, salt++));
    };
    if (pre) {
      x = add(x, a);
      x = add(x, feedforward(layer_norm(x, w.ln2_gain, w.ln2_bias, eps)));
    } else {
      x = layer_norm(add(x, a), w.ln1_gain, w.ln1_bias, eps);
      x = layer_norm(add(x, feedforward(x)), w.ln2_gain, w.ln2_bias, eps);
    }
  }

  Var<T> h = layer_norm(x, p.final_gain, p.final_bias, eps);
  result.logits = matmul_nt(h, p.output.valid() ? p.output : p.token_embedding);
  if (cfg.cache_len > 0) {
    result.new_cache = advance_cache(cache, result.layer_inputs,
                                     static_cast<std::size_t>(cfg.cache_len));
  } else {
    result.new_cache = Cache<T>::with_layers(n_layers);
  }
  return result;
}

}  // namespace

template <typename T>
Var<T> forward_baseline(Tape<T>& tape, const BoundParameters<T>& params,
                        const ModelConfig& config, std::span<const TokenId> tokens,
                        const ForwardOptions<T>& options) {
  return run_model(tape, params, config, tokens, Cache<T>{}, PositionPath::input, options).logits;
}

template <typename T>
ForwardResult<T> forward_pia(Tape<T>& tape, const BoundParameters<T>& params,
                             const ModelConfig& config, std::span<const TokenId> tokens,
                             const Cache<T>& cache, const ForwardOptions<T>& options) {
  return run_model(tape, params, config, tokens, cache, PositionPath::query_key, options);
}

template <typename T>
ForwardResult<T> forward_cache_no_pia(Tape<T>& tape, const BoundParameters<T>& params,
                                      const ModelConfig& config, std::span<const TokenId> tokens,
                                      const Cache<T>& cache, const ForwardOptions<T>& options) {
  return run_model(tape, params, config, tokens, cache, PositionPath::input, options);
}

template <typename T>
ForwardResult<T> forward(Tape<T>& tape, const BoundParameters<T>& params,
                         const ModelConfig& config, std::span<const TokenId> tokens,
                         const Cache<T>& cache, const ForwardOptions<T>& options) {
  if (config.variant == AttentionVariant::pia) {
    return forward_pia(tape, params, config, tokens, cache, options);
  }
  return forward_cache_no_pia(tape, params, config, tokens, cache, options);
}

template <typename T>
InferenceResult<T> infer(const Model<T>& model, std::span<const TokenId> tokens,
                         const Cache<T>& cache) {
  Tape<T> tape;
  const BoundParameters<T> bound = bind(tape, model.params, false);
  ForwardResult<T> r = forward(tape, bound, model.config, tokens, cache);
  return {r.logits.value(), std::move(r.layer_inputs), std::move(r.new_cache)};
}

#define PIALM_INSTANTIATE(T)                                                                   \
  template struct Parameters<T>;                                                               \
  template Parameters<T> init_parameters<T>(const ModelConfig&, std::uint64_t);                \
  template Tensor<T> position_table<T>(std::size_t, std::size_t, std::size_t);                 \
  template Cache<T> advance_cache<T>(const Cache<T>&, const std::vector<Tensor<T>>&,           \
                                     std::size_t);                                             \
  template Cache<T> concat_caches<T>(const Cache<T>&, const Cache<T>&);                        \
  template Var<T> attention<T>(Var<T>, Var<T>, Var<T>, const AttentionMask&);                  \
  template BoundParameters<T> bind<T>(Tape<T>&, const Parameters<T>&, bool);                   \
  template Parameters<T> gradients<T>(Tape<T>&, const BoundParameters<T>&,                     \
                                      const Parameters<T>&);                                   \
  template Var<T> forward_baseline<T>(Tape<T>&, const BoundParameters<T>&, const ModelConfig&, \
                                      std::span<const TokenId>, const ForwardOptions<T>&);     \
  template ForwardResult<T> forward_pia<T>(Tape<T>&, const BoundParameters<T>&,                \
                                           const ModelConfig&, std::span<const TokenId>,       \
                                           const Cache<T>&, const ForwardOptions<T>&);         \
  template ForwardResult<T> forward_cache_no_pia<T>(                                           \
      Tape<T>&, const BoundParameters<T>&, const ModelConfig&, std::span<const TokenId>,       \
      const Cache<T>&, const ForwardOptions<T>&);                                              \
  template ForwardResult<T> forward<T>(Tape<T>&, const BoundParameters<T>&, const ModelConfig&, \
                                       std::span<const TokenId>, const Cache<T>&,              \
                                       const ForwardOptions<T>&);                              \
  template InferenceResult<T> infer<T>(const Model<T>&, std::span<const TokenId>,              \
                                       const Cache<T>&);

PIALM_INSTANTIATE(float)
PIALM_INSTANTIATE(double)
#undef PIALM_INSTANTIATE

template Parameters<double> Parameters<float>::cast<double>() const;
template Parameters<float> Parameters<double>::cast<float>() const;
template Parameters<float> Parameters<float>::cast<float>() const;
template Parameters<double> Parameters<double>::cast<double>() const;

}  // namespace pialm
