#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace cliqueflow {

inline constexpr std::size_t kDefaultSpecies = 16;
inline constexpr std::size_t kDefaultMaxAtoms = 20;

// Token ids: 0..V-1 are species, V = Start, V+1 = Stop, V+2 = Pad.
struct Vocabulary {
  std::size_t species = kDefaultSpecies;

  std::size_t start() const noexcept { return species; }
  std::size_t stop() const noexcept { return species + 1; }
  std::size_t pad() const noexcept { return species + 2; }
  std::size_t size() const noexcept { return species + 3; }
  bool is_species(std::size_t token) const noexcept { return token < species; }
};

using Vec3 = std::array<double, 3>;

// Unit cell and fractional positions. Angles in radians.
struct Geometry {
  Vec3 lengths{};
  Vec3 angles{};
  std::vector<Vec3> positions;

  std::size_t atom_count() const noexcept { return positions.size(); }
  bool operator==(const Geometry&) const = default;
};

struct Material {
  std::vector<std::uint32_t> species;
  Geometry geometry;

  std::size_t atom_count() const noexcept { return species.size(); }
  bool operator==(const Material&) const = default;
};

struct MaterialRecord {
  Material material;
  double property = 0.0;

  bool operator==(const MaterialRecord&) const = default;
};

struct MaterialLimits {
  Vocabulary vocab{};
  std::size_t max_atoms = kDefaultMaxAtoms;
};

// Throw InvariantError naming the violated invariant.
void validate(const Geometry& g);
void validate(const Material& m, const MaterialLimits& limits = {});
void validate(const MaterialRecord& r, const MaterialLimits& limits = {});

// Angular factor sqrt(1 - cos^2 a - cos^2 b - cos^2 g + 2 cos a cos b cos g).
// Throws DegenerateCellError when the radicand is <= 1e-12.
double angular_factor(const Vec3& angles);
double volume(const Geometry& g);
double density(const Material& m);

Vec3 canonicalize_lengths(const Vec3& lengths, std::size_t n_atom);
Vec3 decanonicalize_lengths(const Vec3& canonical, std::size_t n_atom);

}  // namespace cliqueflow
