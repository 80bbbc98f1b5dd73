#include "cliqueflow/batch.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cliqueflow/error.hpp"

namespace cliqueflow {

void ModelConfig::validate() const {
  transformer.validate();
  shape.validate();
  if (vocab.species == 0) throw ConfigError("vocabulary needs at least one species");
  if (max_atoms == 0) throw ConfigError("max_atoms must be positive");
  if (predictor.hidden == 0 || predictor.embed_dim == 0) throw ConfigError("predictor sizes must be positive");
}

MaterialBatch MaterialBatch::build(std::span<const Material* const> materials, const Vocabulary& vocab) {
  MaterialBatch b;
  b.batch = materials.size();
  for (const Material* m : materials) b.width = std::max(b.width, m->atom_count());
  if (b.batch == 0 || b.width == 0) throw DimensionError("material batch must hold at least one atom");
  b.species.assign(b.batch * b.width, vocab.pad());
  b.atom_mask.assign(b.batch * b.width, 0);
  b.lengths = nn::Tensor::matrix(b.batch, 3);
  b.angles = nn::Tensor::matrix(b.batch, 3);
  b.positions = nn::Tensor::matrix(b.batch * b.width, 3);
  for (std::size_t r = 0; r < b.batch; ++r) {
    const Material& m = *materials[r];
    b.n_atoms.push_back(m.atom_count());
    for (int k = 0; k < 3; ++k) {
      b.lengths(r, k) = m.geometry.lengths[k];
      b.angles(r, k) = m.geometry.angles[k];
    }
    for (std::size_t i = 0; i < m.atom_count(); ++i) {
      const std::size_t row = r * b.width + i;
      b.species[row] = m.species[i];
      b.atom_mask[row] = 1;
      for (int k = 0; k < 3; ++k) b.positions(row, k) = m.geometry.positions[i][k];
    }
  }
  return b;
}

MaterialBatch MaterialBatch::build(std::span<const Material> materials, const Vocabulary& vocab) {
  std::vector<const Material*> ptrs;
  for (const auto& m : materials) ptrs.push_back(&m);
  return build(ptrs, vocab);
}

std::vector<double> MaterialBatch::mean_weights() const {
  std::vector<double> w(batch * width, 0.0);
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t i = 0; i < n_atoms[r]; ++i) w[r * width + i] = 1.0 / static_cast<double>(n_atoms[r]);
  return w;
}

nn::Tensor position_features(const nn::Tensor& positions) {
  const double two_pi = 2.0 * std::numbers::pi;
  nn::Tensor f = nn::Tensor::matrix(positions.rows(), kPositionFeatures);
  for (std::size_t r = 0; r < positions.rows(); ++r)
    for (std::size_t k = 0; k < 3; ++k) {
      const double x = positions(r, k);
      f(r, k) = x;
      f(r, 3 + k) = std::sin(two_pi * x);
      f(r, 6 + k) = std::cos(two_pi * x);
    }
  return f;
}

nn::Tensor time_features(std::span<const double> t, std::size_t dim) {
  nn::Tensor f = nn::Tensor::matrix(t.size(), dim);
  const std::size_t half = dim / 2;
  for (std::size_t r = 0; r < t.size(); ++r)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = 1000.0 * t[r] * freq;
      f(r, i) = std::sin(arg);
      f(r, half + i) = std::cos(arg);
    }
  return f;
}

}  // namespace cliqueflow
