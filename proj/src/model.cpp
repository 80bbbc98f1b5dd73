#include "cliqueflow/model.hpp"

namespace cliqueflow {

CliqueFlowModel::CliqueFlowModel(const ModelConfig& cfg, std::uint64_t seed) : config_(cfg) {
  cfg.validate();
  Rng root(seed, 0x1417);
  Rng r_enc = root.split(1), r_atom = root.split(2), r_flow = root.split(3), r_pred = root.split(4);
  encoder = Encoder(params, cfg, r_enc);
  atoms = AtomDecoder(params, cfg, r_atom);
  flow = GeometryFlow(params, cfg, r_flow);
  predictor = Predictor(params, "predictor", cfg.shape, cfg.predictor, r_pred);
}

}  // namespace cliqueflow
