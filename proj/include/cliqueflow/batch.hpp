#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cliqueflow/clique.hpp"
#include "cliqueflow/crystal.hpp"
#include "cliqueflow/nn/layers.hpp"
#include "cliqueflow/predictor.hpp"

namespace cliqueflow {

struct ModelConfig {
  Vocabulary vocab{};
  std::size_t max_atoms = kDefaultMaxAtoms;
  nn::TransformerConfig transformer{};
  CliqueShape shape{};
  PredictorConfig predictor{};

  void validate() const;
  MaterialLimits limits() const { return {vocab, max_atoms}; }
  static ModelConfig desk() { return {}; }
  static ModelConfig paper() {
    ModelConfig c;
    c.transformer = nn::TransformerConfig::paper();
    return c;
  }
};

// Materials padded to a common atom count. Row b*width + i holds atom i of record b.
struct MaterialBatch {
  std::size_t batch = 0;
  std::size_t width = 0;
  std::vector<std::size_t> n_atoms;
  std::vector<std::size_t> species;  // Pad token in padded slots
  std::vector<char> atom_mask;
  nn::Tensor lengths;    // batch x 3
  nn::Tensor angles;     // batch x 3
  nn::Tensor positions;  // batch*width x 3, zero in padded slots

  static MaterialBatch build(std::span<const Material* const> materials, const Vocabulary& vocab);
  static MaterialBatch build(std::span<const Material> materials, const Vocabulary& vocab);
  // Per-atom weights 1/n_atoms (0 on padding); used for mean pooling.
  std::vector<double> mean_weights() const;
};

// Encoder/flow features of fractional positions: x, sin 2πx, cos 2πx per axis.
nn::Tensor position_features(const nn::Tensor& positions);
inline constexpr std::size_t kPositionFeatures = 9;

// Sinusoidal embedding of t (scaled by 1000) with `dim` channels.
nn::Tensor time_features(std::span<const double> t, std::size_t dim);

}  // namespace cliqueflow
