#pragma once

#include <cstdint>

#include "cliqueflow/atom_decoder.hpp"
#include "cliqueflow/encoder.hpp"
#include "cliqueflow/flow.hpp"
#include "cliqueflow/predictor.hpp"

namespace cliqueflow {

// Parameters plus the modules that read them. Modules only hold parameter
// names, so copies share nothing.
class CliqueFlowModel {
 public:
  CliqueFlowModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  nn::ParameterStore params;
  Encoder encoder;
  AtomDecoder atoms;
  GeometryFlow flow;
  Predictor predictor;
  LengthPrior prior;

 private:
  ModelConfig config_;
};

}  // namespace cliqueflow
