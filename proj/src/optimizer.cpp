#include "pialm/optimizer.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "pialm/errors.hpp"

namespace pialm {

std::string_view to_string(Schedule s) {
  switch (s) {
    case Schedule::constant: return "constant";
    case Schedule::cosine: return "cosine";
    case Schedule::inverse_sqrt: return "inverse_sqrt";
  }
  return "?";
}

Schedule parse_schedule(std::string_view text) {
  if (text == "constant") return Schedule::constant;
  if (text == "cosine") return Schedule::cosine;
  if (text == "inverse_sqrt") return Schedule::inverse_sqrt;
  throw ConfigError("unknown schedule '" + std::string(text) +
                    "' (expected constant, cosine or inverse_sqrt)");
}

double learning_rate(const AdamConfig& c, std::size_t step) {
  const double s = static_cast<double>(step);
  const double warm = static_cast<double>(c.warmup_steps);
  if (c.warmup_steps > 0 && step < c.warmup_steps) return c.lr * s / warm;
  switch (c.schedule) {
    case Schedule::constant:
      return c.lr;
    case Schedule::cosine: {
      if (c.total_steps <= c.warmup_steps) return c.lr;
      const double progress =
          std::min(1.0, (s - warm) / static_cast<double>(c.total_steps - c.warmup_steps));
      return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    }
    case Schedule::inverse_sqrt:
      return c.lr * std::sqrt(std::max(1.0, warm) / std::max(1.0, s));
  }
  return c.lr;
}

OptimizerState make_optimizer_state(const Parameters<float>& like) {
  OptimizerState s;
  s.m = like;
  s.m.for_each([](const std::string&, Tensor<float>& t) { std::fill(t.data().begin(), t.data().end(), 0.0f); });
  s.v = s.m;
  return s;
}

double global_norm(const Parameters<float>& grads) {
  double sq = 0.0;
  grads.for_each([&sq](const std::string&, const Tensor<float>& g) {
    for (float x : g.data()) sq += static_cast<double>(x) * x;
  });
  return std::sqrt(sq);
}

double clip_by_global_norm(Parameters<float>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (max_norm > 0.0 && norm > max_norm) {
    const float factor = static_cast<float>(max_norm / norm);
    grads.for_each([factor](const std::string&, Tensor<float>& g) {
      for (float& x : g.data()) x *= factor;
    });
  }
  return norm;
}

void adam_update(std::span<float> param, std::span<const float> grad, std::span<float> m,
                 std::span<float> v, std::size_t step, double lr, double beta1, double beta2,
                 double eps) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw DimensionError("adam_update: mismatched buffer sizes");
  }
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = beta1 * m[i] + (1.0 - beta1) * g;
    const double vi = beta2 * v[i] + (1.0 - beta2) * g * g;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    param[i] = static_cast<float>(param[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
  }
}

void adam_step(Parameters<float>& params, const Parameters<float>& grads, OptimizerState& state,
               const AdamConfig& config) {
  ++state.step;
  const double lr = learning_rate(config, state.step);
  std::vector<Tensor<float>*> p, m, v;
  std::vector<const Tensor<float>*> g;
  params.for_each([&](const std::string&, Tensor<float>& t) { p.push_back(&t); });
  state.m.for_each([&](const std::string&, Tensor<float>& t) { m.push_back(&t); });
  state.v.for_each([&](const std::string&, Tensor<float>& t) { v.push_back(&t); });
  grads.for_each([&](const std::string&, const Tensor<float>& t) { g.push_back(&t); });
  if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
    throw ContractError("adam_step: gradient/state layout differs from parameters");
  }
  for (std::size_t i = 0; i < p.size(); ++i) {
    adam_update(p[i]->data(), g[i]->data(), m[i]->data(), v[i]->data(), state.step, lr,
                config.beta1, config.beta2, config.eps);
  }
}

}  // namespace pialm
