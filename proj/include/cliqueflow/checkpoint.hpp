#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>

#include "cliqueflow/model.hpp"
#include "cliqueflow/nn/adam.hpp"
#include "cliqueflow/trainer.hpp"

namespace cliqueflow {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  TrainConfig train{};
  FlowConfig flow{};
  std::uint64_t seed = 0;  // trainer seed; with `step` this fixes every future draw
  std::size_t step = 0;
};

struct LoadedCheckpoint {
  std::unique_ptr<CliqueFlowModel> model;
  CheckpointMeta meta;
  bool has_optimizer = false;
  std::size_t adam_steps = 0;
  std::map<std::string, nn::Tensor> adam_m, adam_v;

  // Copies optimizer moments and the step counter into a trainer built on *model.
  void restore(Trainer& trainer) const;
};

// Layout: magic "CLQFLOW\0", u32 version, u32 entry count, entries of
// (u32 name length, name, u32 rank, u64 dims...), f64 arrays in entry order,
// u64 JSON length, canonical JSON, u64 FNV-1a of all preceding bytes.
// Integers and floats are little-endian.
void save_checkpoint(const std::string& path, const CliqueFlowModel& model, const CheckpointMeta& meta,
                     const nn::Adam* adam = nullptr);
void save_checkpoint(const std::string& path, const Trainer& trainer);
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace cliqueflow
