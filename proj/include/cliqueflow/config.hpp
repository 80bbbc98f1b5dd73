#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "cliqueflow/atom_decoder.hpp"
#include "cliqueflow/batch.hpp"
#include "cliqueflow/flow.hpp"
#include "cliqueflow/mbo.hpp"
#include "cliqueflow/toy.hpp"
#include "cliqueflow/trainer.hpp"

namespace cliqueflow {

using Json = nlohmann::json;

enum class Profile { kDesk, kPaper };
Profile profile_from_string(const std::string& s);
std::string to_string(Profile p);

struct RunPaths {
  std::string dataset;
  std::string checkpoint;
  std::string output = "out";
};

struct ExperimentConfig {
  std::size_t n_records = 5000;       // gen-data
  std::size_t n_starts = 100;         // optimize / reconstruct / ablate
  std::vector<double> omegas{0.0, 2.0, 4.0};
  std::vector<double> decay_sweep{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
  std::vector<std::size_t> timing_sizes{100, 500, 1000};
  std::size_t interpolation_steps = 8;
  double time_budget_seconds = 0.0;   // train: stop after this wall time when > 0
};

struct RunConfig {
  std::uint64_t seed = 0;
  Profile profile = Profile::kDesk;
  RunPaths paths{};
  ModelConfig model{};
  TrainConfig train{};
  FlowConfig flow{};
  BeamConfig beam{};
  ESConfig es{};
  OracleSpec oracle{};
  ToyDataConfig data{};
  ExperimentConfig experiment{};

  static RunConfig for_profile(Profile p);
  void validate() const;
};

Json to_json(const nn::TransformerConfig& c);
Json to_json(const ModelConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const FlowConfig& c);
Json to_json(const BeamConfig& c);
Json to_json(const ESConfig& c);
Json to_json(const LengthPrior& p);
Json to_json(const OracleSpec& s);
Json to_json(const ToyDataConfig& c);
Json to_json(const RunConfig& c);

// Each reader starts from `base` and overrides the keys present in j. Unknown
// keys and wrongly typed values raise ConfigError naming the key path.
ModelConfig model_config_from_json(const Json& j, ModelConfig base = {});
TrainConfig train_config_from_json(const Json& j, TrainConfig base = {});
FlowConfig flow_config_from_json(const Json& j, FlowConfig base = {});
BeamConfig beam_config_from_json(const Json& j, BeamConfig base = {});
ESConfig es_config_from_json(const Json& j, ESConfig base = {});
LengthPrior length_prior_from_json(const Json& j);
OracleSpec oracle_from_json(const Json& j, OracleSpec base = {});
ToyDataConfig data_config_from_json(const Json& j, ToyDataConfig base = {});
// The profile key (if any) selects the defaults the rest of the file overrides.
RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const std::string& path);

std::string canonical(const Json& j);
// 64-bit FNV-1a of the canonical JSON text.
std::uint64_t config_hash(const Json& j);
std::string hex64(std::uint64_t v);

}  // namespace cliqueflow
