#include "pialm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace pialm {

// ---- Tape --------------------------------------------------------------------

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("leaf tensor contains NaN/Inf");
  Node node;
  node.op = "leaf";
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                       Backward backward) {
  return record(op, std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                std::move(backward));
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, std::span<const Var<T>> inputs,
                       Backward backward) {
  if (backward_done_) throw ContractError(std::string(op) + ": tape already differentiated");
  if (!value.all_finite()) {
    throw NumericError(std::string(op) + " produced NaN/Inf (output shape " +
                       shape_string(value.shape()) + ")");
  }
  bool needs = false;
  for (const Var<T>& in : inputs) {
    if (&in.tape() != this) throw ContractError(std::string(op) + ": input from another tape");
    needs = needs || requires_grad(in.id());
  }
  Node node;
  node.op = op;
  node.value = std::move(value);
  node.requires_grad = needs;
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
const Tensor<T>& Tape<T>::grad(std::size_t id) {
  Node& node = nodes_.at(id);
  if (node.grad.empty() && !node.value.empty()) node.grad = Tensor<T>(node.value.shape());
  return node.grad;
}

template <typename T>
Tensor<T>* Tape<T>::grad_sink(std::size_t id) {
  Node& node = nodes_.at(id);
  if (!node.requires_grad) return nullptr;
  if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
  return &node.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (&loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_string(loss.value().shape()));
  }
  if (backward_done_) throw ContractError("backward called twice on the same tape");
  backward_done_ = true;
  if (!requires_grad(loss.id())) return;
  nodes_[loss.id()].grad = Tensor<T>(nodes_[loss.id()].value.shape());
  nodes_[loss.id()].grad[0] = T(1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || !node.backward || node.grad.empty()) continue;
    ++backward_visits_;
    node.backward(*this, node.grad);
  }
}

std::size_t AttentionMask::permitted_in_row(std::size_t r) const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < cols; ++c) n += (*this)(r, c) ? 1 : 0;
  return n;
}

// ---- helpers -----------------------------------------------------------------

namespace {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

// ---- matmul ------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c({m, n});
  kernels::gemm_nn(m, k, n, a.data().data(), b.data().data(), c.data().data());
  return c;
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tensor<T> out = matmul(a.value(), b.value());
  const std::size_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(out), {a, b},
                         [ia, ib, m, k, n](Tape<T>& tape, const Tensor<T>& g) {
                           if (Tensor<T>* ga = tape.grad_sink(ia)) {
                             // dA = dC * B^T
                             kernels::gemm_nt(m, n, k, g.data().data(),
                                              tape.value(ib).data().data(), ga->data().data());
                           }
                           if (Tensor<T>* gb = tape.grad_sink(ib)) {
                             // dB = A^T * dC
                             kernels::gemm_tn(k, m, n, tape.value(ia).data().data(),
                                              g.data().data(), gb->data().data());
                           }
                         });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  require_matrix(a.value(), "matmul_nt");
  require_matrix(b.value(), "matmul_nt");
  if (a.value().dim(1) != b.value().dim(1)) {
    throw DimensionError("matmul_nt: inner extents differ, " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()) + "^T");
  }
  const std::size_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(0);
  Tensor<T> out({m, n});
  kernels::gemm_nt(m, k, n, a.value().data().data(), b.value().data().data(), out.data().data());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("matmul_nt", std::move(out), {a, b},
                         [ia, ib, m, k, n](Tape<T>& tape, const Tensor<T>& g) {
                           if (Tensor<T>* ga = tape.grad_sink(ia)) {
                             // dA = dC * B
                             kernels::gemm_nn(m, n, k, g.data().data(),
                                              tape.value(ib).data().data(), ga->data().data());
                           }
                           if (Tensor<T>* gb = tape.grad_sink(ib)) {
                             // dB = dC^T * A
                             kernels::gemm_tn(n, m, k, g.data().data(),
                                              tape.value(ia).data().data(), gb->data().data());
                           }
                         });
}

// ---- elementwise -------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  add_into(out, b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("add", std::move(out), {a, b},
                         [ia, ib](Tape<T>& tape, const Tensor<T>& g) {
                           if (Tensor<T>* ga = tape.grad_sink(ia)) add_into(*ga, g);
                           if (Tensor<T>* gb = tape.grad_sink(ib)) add_into(*gb, g);
                         });
}

template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  const Tensor<T>& xv = x.value();
  if (bias.value().size() != xv.cols()) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " vs input " +
                         shape_string(xv.shape()));
  }
  Tensor<T> out = xv;
  const std::size_t rows = xv.rows(), cols = xv.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out(r, c) += bias.value()[c];
  }
  const std::size_t ix = x.id(), ib = bias.id();
  return x.tape().record("add_bias", std::move(out), {x, bias},
                         [ix, ib, rows, cols](Tape<T>& tape, const Tensor<T>& g) {
                           if (Tensor<T>* gx = tape.grad_sink(ix)) add_into(*gx, g);
                           if (Tensor<T>* gb = tape.grad_sink(ib)) {
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += g(r, c);
                             }
                           }
                         });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("mul", std::move(out), {a, b},
                         [ia, ib](Tape<T>& tape, const Tensor<T>& g) {
                           if (Tensor<T>* ga = tape.grad_sink(ia)) {
                             const Tensor<T>& bv = tape.value(ib);
                             for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
                           }
                           if (Tensor<T>* gb = tape.grad_sink(ib)) {
                             const Tensor<T>& av = tape.value(ia);
                             for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
                           }
                         });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v *= factor;
  const std::size_t ix = x.id();
  return x.tape().record("scale", std::move(out), {x},
                         [ix, factor](Tape<T>& tape, const Tensor<T>& g) {
                           if (Tensor<T>* gx = tape.grad_sink(ix)) {
                             for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * factor;
                           }
                         });
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = v > T(0) ? v : T(0);
  const std::size_t ix = x.id();
  return x.tape().record("relu", std::move(out), {x}, [ix](Tape<T>& tape, const Tensor<T>& g) {
    if (Tensor<T>* gx = tape.grad_sink(ix)) {
      const Tensor<T>& xv = tape.value(ix);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] > T(0)) (*gx)[i] += g[i];
      }
    }
  });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  Tensor<T> out = x.value();
  for (T& v : out.data()) {
    const T u = kC * (v + kA * v * v * v);
    v = T(0.5) * v * (T(1) + std::tanh(u));
  }
  const std::size_t ix = x.id();
  return x.tape().record("gelu", std::move(out), {x}, [ix](Tape<T>& tape, const Tensor<T>& g) {
    if (Tensor<T>* gx = tape.grad_sink(ix)) {
      const Tensor<T>& xv = tape.value(ix);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = xv[i];
        const T u = kC * (v + kA * v * v * v);
        const T t = std::tanh(u);
        const T du = kC * (T(1) + T(3) * kA * v * v);
        (*gx)[i] += g[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du);
      }
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  double s = 0.0;
  for (const T v : x.value().data()) s += static_cast<double>(v);
  const std::size_t ix = x.id();
  return x.tape().record("sum", Tensor<T>::scalar(static_cast<T>(s)), {x},
                         [ix](Tape<T>& tape, const Tensor<T>& g) {
                           if (Tensor<T>* gx = tape.grad_sink(ix)) {
                             for (T& v : gx->data()) v += g[0];
                           }
                         });
}

// ---- softmax -----------------------------------------------------------------

template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  const Tensor<T>& xv = x.value();
  if (axis >= xv.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_string(xv.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
  const std::size_t extent = xv.dim(axis);
  Tensor<T> out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * extent * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < extent; ++e) mx = std::max(mx, xv[base + e * inner]);
      T z = T(0);
      for (std::size_t e = 0; e < extent; ++e) {
        const T ev = std::exp(xv[base + e * inner] - mx);
        out[base + e * inner] = ev;
        z += ev;
      }
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] /= z;
    }
  }
  // Backward closures read their own output through the index the node
  // will occupy.
  const std::size_t self = x.tape().size();
  return x.tape().record(
      "softmax", std::move(out), {x},
      [ix = x.id(), self, outer, inner, extent](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T>* gx = tape.grad_sink(ix);
        if (!gx) return;
        const Tensor<T>& y = tape.value(self);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * extent * inner + in;
            T dot = T(0);
            for (std::size_t e = 0; e < extent; ++e) {
              dot += g[base + e * inner] * y[base + e * inner];
            }
            for (std::size_t e = 0; e < extent; ++e) {
              const std::size_t j = base + e * inner;
              (*gx)[j] += y[j] * (g[j] - dot);
            }
          }
        }
      });
}

// ---- attention and normalization ----------------------------------------------

template <typename T>
Var<T> masked_softmax(Var<T> x, const AttentionMask& mask) {
  const Tensor<T>& xv = x.value();
  require_matrix(xv, "masked_softmax");
  if (mask.rows != xv.dim(0) || mask.cols != xv.dim(1)) {
    throw DimensionError("masked_softmax: mask [" + std::to_string(mask.rows) + "x" +
                         std::to_string(mask.cols) + "] vs scores " + shape_string(xv.shape()));
  }
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask(r, c)) mx = std::max(mx, xv(r, c));
    }
    if (!std::isfinite(mx)) continue;  // fully masked row stays zero
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      if (!mask(r, c)) continue;
      const T ev = std::exp(xv(r, c) - mx);
      out(r, c) = ev;
      z += ev;
    }
    for (std::size_t c = 0; c < cols; ++c) out(r, c) /= z;
  }
  const std::size_t self = x.tape().size();
  return x.tape().record("masked_softmax", std::move(out), {x},
                         [ix = x.id(), self, rows, cols](Tape<T>& tape, const Tensor<T>& g) {
                           Tensor<T>* gx = tape.grad_sink(ix);
                           if (!gx) return;
                           const Tensor<T>& y = tape.value(self);
                           for (std::size_t r = 0; r < rows; ++r) {
                             T dot = T(0);
                             for (std::size_t c = 0; c < cols; ++c) dot += g(r, c) * y(r, c);
                             for (std::size_t c = 0; c < cols; ++c) {
                               (*gx)(r, c) += y(r, c) * (g(r, c) - dot);
                             }
                           }
                         });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  const Tensor<T>& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (cols == 0) throw DimensionError("layer_norm over an empty axis");
  if (gain.value().size() != cols || bias.value().size() != cols) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                         shape_string(bias.shape()) + " vs input " + shape_string(xv.shape()));
  }
  Tensor<T> out(xv.shape());
  Tensor<T> normed(xv.shape());
  std::vector<T> inv_std(rows);
  const Tensor<T>& gv = gain.value();
  const Tensor<T>& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T mean = T(0);
    for (std::size_t c = 0; c < cols; ++c) mean += xv(r, c);
    mean /= static_cast<T>(cols);
    T var = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      const T d = xv(r, c) - mean;
      var += d * d;
    }
    var /= static_cast<T>(cols);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = (xv(r, c) - mean) * is;
      normed(r, c) = h;
      out(r, c) = h * gv[c] + bv[c];
    }
  }
  return x.tape().record(
      "layer_norm", std::move(out), {x, gain, bias},
      [ix = x.id(), ig = gain.id(), ib = bias.id(), rows, cols, normed = std::move(normed),
       inv_std = std::move(inv_std)](Tape<T>& tape, const Tensor<T>& g) {
        if (Tensor<T>* gg = tape.grad_sink(ig)) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) (*gg)[c] += g(r, c) * normed(r, c);
          }
        }
        if (Tensor<T>* gb = tape.grad_sink(ib)) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += g(r, c);
          }
        }
        if (Tensor<T>* gx = tape.grad_sink(ix)) {
          const Tensor<T>& gv = tape.value(ig);
          const T n = static_cast<T>(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh = T(0), mean_dh_h = T(0);
            for (std::size_t c = 0; c < cols; ++c) {
              const T dh = g(r, c) * gv[c];
              mean_dh += dh;
              mean_dh_h += dh * normed(r, c);
            }
            mean_dh /= n;
            mean_dh_h /= n;
            for (std::size_t c = 0; c < cols; ++c) {
              const T dh = g(r, c) * gv[c];
              (*gx)(r, c) += inv_std[r] * (dh - mean_dh - normed(r, c) * mean_dh_h);
            }
          }
        }
      });
}

template <typename T>
Var<T> embedding(Var<T> table, std::span<const TokenId> ids) {
  const Tensor<T>& tv = table.value();
  require_matrix(tv, "embedding");
  const std::size_t vocab = tv.dim(0), width = tv.dim(1);
  Tensor<T> out({ids.size(), width});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
    std::copy_n(tv.row(static_cast<std::size_t>(ids[i])).begin(), width, out.row(i).begin());
  }
  return table.tape().record(
      "embedding", std::move(out), {table},
      [it = table.id(), ids = std::vector<TokenId>(ids.begin(), ids.end()), width](
          Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T>* gt = tape.grad_sink(it);
        if (!gt) return;
        for (std::size_t i = 0; i < ids.size(); ++i) {
          auto dst = gt->row(static_cast<std::size_t>(ids[i]));
          for (std::size_t c = 0; c < width; ++c) dst[c] += g(i, c);
        }
      });
}

template <typename T>
std::vector<double> token_losses(const Tensor<T>& logits, std::span<const TokenId> targets) {
  require_matrix(logits, "token_losses");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_string(logits.shape()));
  }
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw IndexError("target id " + std::to_string(targets[r]) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < vocab; ++c) mx = std::max(mx, static_cast<double>(logits(r, c)));
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) z += std::exp(static_cast<double>(logits(r, c)) - mx);
    out[r] = std::log(z) + mx - static_cast<double>(logits(r, static_cast<std::size_t>(targets[r])));
  }
  return out;
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const TokenId> targets) {
  const std::vector<double> losses = token_losses(logits.value(), targets);
  if (losses.empty()) throw ContractError("cross_entropy over zero targets");
  double total = 0.0;
  for (const double l : losses) total += l;
  const double mean = total / static_cast<double>(losses.size());
  return logits.tape().record(
      "cross_entropy", Tensor<T>::scalar(static_cast<T>(mean)), {logits},
      [il = logits.id(), tg = std::vector<TokenId>(targets.begin(), targets.end())](
          Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T>* gl = tape.grad_sink(il);
        if (!gl) return;
        const Tensor<T>& lv = tape.value(il);
        const std::size_t rows = lv.dim(0), vocab = lv.dim(1);
        const T w = g[0] / static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t c = 0; c < vocab; ++c) mx = std::max(mx, lv(r, c));
          T z = T(0);
          for (std::size_t c = 0; c < vocab; ++c) z += std::exp(lv(r, c) - mx);
          for (std::size_t c = 0; c < vocab; ++c) {
            const T p = std::exp(lv(r, c) - mx) / z;
            (*gl)(r, c) += w * (p - (static_cast<std::size_t>(tg[r]) == c ? T(1) : T(0)));
          }
        }
      });
}

// ---- structural ----------------------------------------------------------------

template <typename T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  Tensor<T> out = concat_rows(a.value(), b.value());
  const std::size_t na = a.value().size();
  return a.tape().record("concat_rows", std::move(out), {a, b},
                         [ia = a.id(), ib = b.id(), na](Tape<T>& tape, const Tensor<T>& g) {
                           if (Tensor<T>* ga = tape.grad_sink(ia)) {
                             for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[i];
                           }
                           if (Tensor<T>* gb = tape.grad_sink(ib)) {
                             for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += g[na + i];
                           }
                         });
}

template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t count) {
  Tensor<T> out = slice_rows(x.value(), begin, count);
  const std::size_t offset = begin * x.value().cols();
  return x.tape().record("slice_rows", std::move(out), {x},
                         [ix = x.id(), offset](Tape<T>& tape, const Tensor<T>& g) {
                           if (Tensor<T>* gx = tape.grad_sink(ix)) {
                             for (std::size_t i = 0; i < g.size(); ++i) (*gx)[offset + i] += g[i];
                           }
                         });
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t width) {
  const Tensor<T>& xv = x.value();
  require_matrix(xv, "slice_cols");
  if (begin + width > xv.dim(1)) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + ", " +
                         std::to_string(begin + width) + ") out of " + shape_string(xv.shape()));
  }
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  Tensor<T> out({rows, width});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < width; ++c) out(r, c) = xv(r, begin + c);
  }
  return x.tape().record("slice_cols", std::move(out), {x},
                         [ix = x.id(), begin, width, rows, cols](Tape<T>& tape, const Tensor<T>& g) {
                           if (Tensor<T>* gx = tape.grad_sink(ix)) {
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t c = 0; c < width; ++c) {
                                 (*gx)[r * cols + begin + c] += g(r, c);
                               }
                             }
                           }
                         });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ContractError("concat_cols of zero parts");
  const std::size_t rows = parts[0].value().dim(0);
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const Var<T>& p : parts) {
    require_matrix(p.value(), "concat_cols");
    if (p.value().dim(0) != rows) {
      throw DimensionError("concat_cols: " + shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    }
    offsets.push_back(total);
    total += p.value().dim(1);
  }
  Tensor<T> out({rows, total});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor<T>& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.row(r).begin(), pv.dim(1), out.row(r).begin() + offsets[k]);
    }
  }
  std::vector<std::size_t> ids;
  for (const Var<T>& p : parts) ids.push_back(p.id());
  return parts[0].tape().record(
      "concat_cols", std::move(out), parts,
      [ids = std::move(ids), offsets = std::move(offsets), rows, total](Tape<T>& tape,
                                                                        const Tensor<T>& g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
          Tensor<T>* gp = tape.grad_sink(ids[k]);
          if (!gp) continue;
          const std::size_t width = gp->dim(1);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < width; ++c) (*gp)(r, c) += g[r * total + offsets[k] + c];
          }
        }
      });
}

template <typename T>
Var<T> dropout(Var<T> x, double p, std::uint64_t seed) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout probability must be < 1");
  Tensor<T> keep(x.value().shape());
  std::uint64_t state = seed;
  const T factor = static_cast<T>(1.0 / (1.0 - p));
  for (T& k : keep.data()) {
    const double u = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
    k = u >= p ? factor : T(0);
  }
  Var<T> mask = x.tape().constant(std::move(keep));
  return mul(x, mask);
}

#define PIALM_INSTANTIATE(T)                                                              \
  template class Tape<T>;                                                                 \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                              \
  template Var<T> matmul_nt<T>(Var<T>, Var<T>);                                           \
  template Var<T> add<T>(Var<T>, Var<T>);                                                 \
  template Var<T> add_bias<T>(Var<T>, Var<T>);                                            \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                 \
  template Var<T> scale<T>(Var<T>, T);                                                    \
  template Var<T> relu<T>(Var<T>);                                                        \
  template Var<T> gelu<T>(Var<T>);                                                        \
  template Var<T> sum<T>(Var<T>);                                                         \
  template Var<T> softmax<T>(Var<T>, std::size_t);                                        \
  template Var<T> masked_softmax<T>(Var<T>, const AttentionMask&);                        \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                               \
  template Var<T> embedding<T>(Var<T>, std::span<const TokenId>);                         \
  template Var<T> cross_entropy<T>(Var<T>, std::span<const TokenId>);                     \
  template Var<T> concat_rows<T>(Var<T>, Var<T>);                                         \
  template Var<T> slice_rows<T>(Var<T>, std::size_t, std::size_t);                        \
  template Var<T> slice_cols<T>(Var<T>, std::size_t, std::size_t);                        \
  template Var<T> concat_cols<T>(std::span<const Var<T>>);                                \
  template Var<T> dropout<T>(Var<T>, double, std::uint64_t);                              \
  template std::vector<double> token_losses<T>(const Tensor<T>&, std::span<const TokenId>);

PIALM_INSTANTIATE(float)
PIALM_INSTANTIATE(double)

#undef PIALM_INSTANTIATE

}  // namespace pialm
