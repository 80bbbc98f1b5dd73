#include "cliqueflow/crystal.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "cliqueflow/error.hpp"

namespace cliqueflow {

void validate(const Geometry& g) {
  static const char* axis[] = {"a", "b", "c"};
  static const char* angle[] = {"alpha", "beta", "gamma"};
  for (int i = 0; i < 3; ++i) {
    if (!(g.lengths[i] > 0.0) || !std::isfinite(g.lengths[i]))
      throw InvariantError(std::string("length ") + axis[i] + " must be finite and > 0");
    if (!(g.angles[i] > 0.0 && g.angles[i] < std::numbers::pi))
      throw InvariantError(std::string("angle ") + angle[i] + " must lie strictly inside (0, pi)");
  }
  for (std::size_t r = 0; r < g.positions.size(); ++r)
    for (double x : g.positions[r])
      if (!(x >= 0.0 && x < 1.0))
        throw InvariantError("position row " + std::to_string(r) + " has a coordinate outside [0, 1)");
}

void validate(const Material& m, const MaterialLimits& limits) {
  if (m.species.empty()) throw InvariantError("material must contain at least one atom");
  if (m.species.size() > limits.max_atoms)
    throw InvariantError("atom count " + std::to_string(m.species.size()) + " exceeds N_max = " +
                         std::to_string(limits.max_atoms));
  for (auto s : m.species)
    if (!limits.vocab.is_species(s))
      throw InvariantError("species id " + std::to_string(s) + " is not a species token (V = " +
                           std::to_string(limits.vocab.species) + ")");
  if (m.geometry.positions.size() != m.species.size())
    throw InvariantError("position row count must equal atom count");
  validate(m.geometry);
}

void validate(const MaterialRecord& r, const MaterialLimits& limits) {
  validate(r.material, limits);
  if (!std::isfinite(r.property)) throw InvariantError("property must be finite");
}

double angular_factor(const Vec3& angles) {
  const double ca = std::cos(angles[0]);
  const double cb = std::cos(angles[1]);
  const double cg = std::cos(angles[2]);
  const double radicand = 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg;
  if (!(radicand > 1e-12)) throw DegenerateCellError("degenerate cell: axes are numerically coplanar");
  return std::sqrt(radicand);
}

double volume(const Geometry& g) {
  return g.lengths[0] * g.lengths[1] * g.lengths[2] * angular_factor(g.angles);
}

double density(const Material& m) {
  return static_cast<double>(m.atom_count()) / volume(m.geometry);
}

Vec3 canonicalize_lengths(const Vec3& lengths, std::size_t n_atom) {
  const double s = std::cbrt(static_cast<double>(n_atom));
  return {lengths[0] / s, lengths[1] / s, lengths[2] / s};
}

Vec3 decanonicalize_lengths(const Vec3& canonical, std::size_t n_atom) {
  const double s = std::cbrt(static_cast<double>(n_atom));
  return {canonical[0] * s, canonical[1] * s, canonical[2] * s};
}

}  // namespace cliqueflow
