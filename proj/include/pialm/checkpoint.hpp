#pragma once

#include <cstdint>
#include <string>

#include "pialm/kv_config.hpp"
#include "pialm/model.hpp"
#include "pialm/optimizer.hpp"

namespace pialm {

// Binary layout, all integers little-endian:
//   "PIALMCK\0"  u32 version  u32 n  <n bytes of key=value header text>
//   u32 tensor count, then per tensor:
//     u32 n  <n bytes name>  u32 rank  u64 dims[rank]  f32 data[prod(dims)]
// The header carries the model config plus any extra metadata keys.
inline constexpr std::uint32_t checkpoint_version = 1;

struct Checkpoint {
  ModelConfig config;
  Parameters<float> params;
  KeyValueConfig metadata;  // header keys that are not model keys
};

void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const Parameters<float>& params, const KeyValueConfig& metadata = {});
Checkpoint load_checkpoint(const std::string& path);

// Optimizer state and progress needed to resume training at an epoch edge,
// stored next to the checkpoint as "<path>.train".
struct TrainingState {
  std::size_t epochs_done = 0;
  OptimizerState optimizer;

  friend bool operator==(const TrainingState&, const TrainingState&) = default;
};

std::string training_state_path(const std::string& checkpoint_path);
void save_training_state(const std::string& path, const TrainingState& state);
TrainingState load_training_state(const std::string& path, const Parameters<float>& like);

}  // namespace pialm
