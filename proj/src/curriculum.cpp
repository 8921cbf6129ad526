#include "pialm/curriculum.hpp"

#include <sstream>

#include "pialm/errors.hpp"

namespace pialm {

std::size_t Curriculum::total_epochs() const {
  std::size_t n = 0;
  for (const auto& s : stages) n += s.epochs;
  return n;
}

std::size_t Curriculum::stage_of_epoch(std::size_t epoch) const {
  std::size_t end = 0;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    end += stages[i].epochs;
    if (epoch < end) return i;
  }
  throw IndexError("epoch " + std::to_string(epoch) + " is past the curriculum's " +
                   std::to_string(end) + " epochs");
}

Curriculum make_curriculum(const std::vector<std::pair<std::size_t, std::size_t>>& stages,
                           std::size_t tokens_per_batch) {
  if (stages.empty()) throw ContractError("curriculum needs at least one stage");
  Curriculum c;
  c.tokens_per_batch = tokens_per_batch;
  for (const auto& [L, epochs] : stages) {
    if (L < 2) throw ContractError("stage L must be at least 2, got " + std::to_string(L));
    if (epochs < 1) throw ContractError("stage epochs must be at least 1");
    if (L > tokens_per_batch) {
      throw ContractError("stage L = " + std::to_string(L) + " exceeds tokens_per_batch = " +
                          std::to_string(tokens_per_batch));
    }
    if (tokens_per_batch % L != 0) {
      c.warnings.push_back("L = " + std::to_string(L) + " does not divide tokens_per_batch = " +
                           std::to_string(tokens_per_batch) + "; batch size rounded down to " +
                           std::to_string(tokens_per_batch / L));
    }
    c.stages.push_back({L, epochs, tokens_per_batch / L});
  }
  return c;
}

Curriculum make_two_stage(std::size_t L1, std::size_t epochs1, std::size_t L2,
                          std::size_t total_epochs, std::size_t tokens_per_batch) {
  if (epochs1 < 1 || epochs1 >= total_epochs) {
    throw ContractError("switch epoch " + std::to_string(epochs1) + " must lie in [1, " +
                        std::to_string(total_epochs) + ")");
  }
  return make_curriculum({{L1, epochs1}, {L2, total_epochs - epochs1}}, tokens_per_batch);
}

std::vector<std::pair<std::size_t, std::size_t>> parse_stages(const std::string& text) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw ConfigError("stage '" + item + "' is not of the form L:epochs");
    }
    try {
      std::size_t used = 0;
      const std::string l = item.substr(0, colon), e = item.substr(colon + 1);
      const long long L = std::stoll(l, &used);
      if (used != l.size()) throw std::invalid_argument(l);
      const long long epochs = std::stoll(e, &used);
      if (used != e.size()) throw std::invalid_argument(e);
      if (L < 1 || epochs < 1) throw std::invalid_argument(item);
      out.emplace_back(static_cast<std::size_t>(L), static_cast<std::size_t>(epochs));
    } catch (const std::logic_error&) {
      throw ConfigError("stage '" + item + "' is not of the form L:epochs");
    }
  }
  if (out.empty()) throw ConfigError("empty stage list");
  return out;
}

}  // namespace pialm
