#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace pialm {

struct Stage {
  std::size_t L = 0;
  std::size_t epochs = 0;
  std::size_t batch_size = 0;

  friend bool operator==(const Stage&, const Stage&) = default;
};

struct Curriculum {
  std::vector<Stage> stages;
  std::size_t tokens_per_batch = 0;
  // Set when some L did not divide the token budget and its batch size was
  // rounded down.
  std::vector<std::string> warnings;

  std::size_t total_epochs() const;
  // Stage index for a 0-based epoch.
  std::size_t stage_of_epoch(std::size_t epoch) const;
};

// Stages given as (L, epochs); batch sizes are tokens_per_batch / L.
Curriculum make_curriculum(const std::vector<std::pair<std::size_t, std::size_t>>& stages,
                           std::size_t tokens_per_batch);

// L1 for the first epochs1 epochs, then L2 until total_epochs.
Curriculum make_two_stage(std::size_t L1, std::size_t epochs1, std::size_t L2,
                          std::size_t total_epochs, std::size_t tokens_per_batch);

// "128:50,3072:155" -> [(128, 50), (3072, 155)].
std::vector<std::pair<std::size_t, std::size_t>> parse_stages(const std::string& text);

}  // namespace pialm
