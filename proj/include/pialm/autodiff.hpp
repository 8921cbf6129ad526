#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "pialm/tensor.hpp"

namespace pialm {

using TokenId = std::int32_t;

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  const Tensor<T>& grad() const { return tape_->grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Wengert list for reverse-mode differentiation. Nodes are appended in
// evaluation order, so every node's inputs precede it; backward() walks the
// list once in reverse.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad);
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // Appends an op output. `backward` is dropped when no input needs a gradient.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                Backward backward);
  Var<T> record(const char* op, Tensor<T> value, std::span<const Var<T>> inputs,
                Backward backward);

  // Seeds d(loss)/d(loss) = 1 and propagates. One call per tape.
  void backward(Var<T> loss);

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  // Zero tensor of the value's shape when nothing flowed into the node.
  const Tensor<T>& grad(std::size_t id);
  // Accumulation target for a node's gradient; nullptr when it needs none.
  Tensor<T>* grad_sink(std::size_t id);

  std::size_t size() const { return nodes_.size(); }
  std::size_t backward_visits() const { return backward_visits_; }

 private:
  struct Node {
    const char* op = "";
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  std::size_t backward_visits_ = 0;
};

// Which (query, key) pairs may interact. Row-major [rows x cols].
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  bool operator()(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }
  std::size_t permitted_in_row(std::size_t r) const;
};

// ---- differentiable primitives ----------------------------------------------

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// a[m x k] * b[n x k]^T
template <typename T> Var<T> matmul_nt(Var<T> a, Var<T> b);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
// x[m x n] + bias[n] broadcast over rows
template <typename T> Var<T> add_bias(Var<T> x, Var<T> bias);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> x, T factor);
template <typename T> Var<T> relu(Var<T> x);
// tanh approximation
template <typename T> Var<T> gelu(Var<T> x);
template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> softmax(Var<T> x, std::size_t axis);
// Row softmax over permitted entries; masked entries come out exactly 0.
template <typename T> Var<T> masked_softmax(Var<T> x, const AttentionMask& mask);
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));
template <typename T> Var<T> embedding(Var<T> table, std::span<const TokenId> ids);
// Mean natural-log loss per target.
template <typename T> Var<T> cross_entropy(Var<T> logits, std::span<const TokenId> targets);
template <typename T> Var<T> concat_rows(Var<T> a, Var<T> b);
template <typename T> Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t count);
template <typename T> Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t width);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
// Inverted dropout; p == 0 returns x unchanged.
template <typename T> Var<T> dropout(Var<T> x, double p, std::uint64_t seed);

// ---- non-differentiable helpers ---------------------------------------------

// -log softmax(logits[i])[targets[i]] per row, accumulated in double.
template <typename T>
std::vector<double> token_losses(const Tensor<T>& logits, std::span<const TokenId> targets);

// Plain matrix product without a tape.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace pialm
