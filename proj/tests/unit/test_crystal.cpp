#include <cmath>
#include <sstream>

#include <doctest.h>

#include "cliqueflow/crystal.hpp"
#include "cliqueflow/error.hpp"
#include "cliqueflow/records_io.hpp"
#include "cliqueflow/rng.hpp"

using namespace cliqueflow;

namespace {

Geometry cell(Vec3 lengths, Vec3 angles, std::size_t n = 1) {
  Geometry g{lengths, angles, std::vector<Vec3>(n, Vec3{0.25, 0.5, 0.75})};
  return g;
}

MaterialRecord random_record(Rng& rng) {
  MaterialRecord r;
  const std::size_t n = 1 + rng.index(20);
  for (std::size_t i = 0; i < n; ++i) {
    r.material.species.push_back(static_cast<std::uint32_t>(rng.index(16)));
    r.material.geometry.positions.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  }
  r.material.geometry.lengths = {rng.uniform(2, 8), rng.uniform(2, 8), rng.uniform(2, 8)};
  r.material.geometry.angles = {rng.uniform(1.2, 1.9), rng.uniform(1.2, 1.9), rng.uniform(1.2, 1.9)};
  r.property = rng.normal(0, 3);
  return r;
}

// Volume from the cell matrix determinant.
double det_volume(const Geometry& g) {
  const auto [a, b, c] = g.lengths;
  const auto [al, be, ga] = g.angles;
  const double ax = a, by = b * std::sin(ga);
  const double cx = c * std::cos(be);
  const double cy = c * (std::cos(al) - std::cos(be) * std::cos(ga)) / std::sin(ga);
  const double cz = std::sqrt(c * c - cx * cx - cy * cy);
  return ax * by * cz;
}

}  // namespace

TEST_CASE("volume examples") {
  CHECK(volume(cell({2, 2, 2}, {M_PI / 2, M_PI / 2, M_PI / 2})) == doctest::Approx(8.0));
  CHECK(volume(cell({1, 2, 3}, {M_PI / 2, M_PI / 2, M_PI / 2})) == doctest::Approx(6.0));
  CHECK(volume(cell({1, 1, 1}, {M_PI / 3, M_PI / 3, M_PI / 3})) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-10));
  CHECK(std::abs(volume(cell({1, 1, 1}, {M_PI / 3, M_PI / 3, M_PI / 3})) - 0.70711) < 1e-5);
  CHECK_THROWS_AS(volume(cell({1, 1, 1}, {2 * M_PI / 3, 2 * M_PI / 3, 2 * M_PI / 3})), DegenerateCellError);
}

TEST_CASE("volume agrees with the cell-matrix determinant and permutation symmetry") {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    Geometry g = random_record(rng).material.geometry;
    CHECK(volume(g) == doctest::Approx(det_volume(g)).epsilon(1e-10));
    Geometry p = g;
    p.lengths = {g.lengths[1], g.lengths[2], g.lengths[0]};
    p.angles = {g.angles[1], g.angles[2], g.angles[0]};
    CHECK(volume(p) == doctest::Approx(volume(g)).epsilon(1e-12));
  }
}

TEST_CASE("density examples and canonical form") {
  Material m{std::vector<std::uint32_t>(8, 0), cell({2, 2, 2}, {M_PI / 2, M_PI / 2, M_PI / 2}, 8)};
  CHECK(density(m) == doctest::Approx(1.0));
  Material one{{3}, cell({1, 1, 1}, {M_PI / 2, M_PI / 2, M_PI / 2})};
  CHECK(density(one) == doctest::Approx(1.0));
  Material four{{0, 1, 2, 3}, cell({1, 2, 3}, {M_PI / 2, M_PI / 2, M_PI / 2}, 4)};
  CHECK(std::abs(density(four) - 0.66667) < 1e-5);

  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    Material r = random_record(rng).material;
    Vec3 c = canonicalize_lengths(r.geometry.lengths, r.atom_count());
    const double via_canonical = 1.0 / (c[0] * c[1] * c[2] * angular_factor(r.geometry.angles));
    CHECK(via_canonical == doctest::Approx(density(r)).epsilon(1e-10));
    Vec3 back = decanonicalize_lengths(c, r.atom_count());
    for (int k = 0; k < 3; ++k) CHECK(back[k] == doctest::Approx(r.geometry.lengths[k]).epsilon(1e-12));
  }
  CHECK(canonicalize_lengths({4, 4, 4}, 8)[0] == doctest::Approx(2.0));
  CHECK(canonicalize_lengths({3, 1, 1}, 27)[0] == doctest::Approx(1.0));
  CHECK(canonicalize_lengths({3.7, 1, 1}, 1)[0] == 3.7);
}

TEST_CASE("material invariants") {
  Material m{{0, 1}, cell({1, 1, 1}, {1, 1, 1}, 2)};
  CHECK_NOTHROW(validate(m));
  Material bad = m;
  bad.geometry.angles[1] = M_PI;
  CHECK_THROWS_AS(validate(bad), InvariantError);
  bad = m;
  bad.geometry.lengths[0] = 0.0;
  CHECK_THROWS_AS(validate(bad), InvariantError);
  bad = m;
  bad.geometry.positions[0][2] = 1.0;
  CHECK_THROWS_AS(validate(bad), InvariantError);
  bad = m;
  bad.species[0] = 16;
  CHECK_THROWS_AS(validate(bad), InvariantError);
  bad = m;
  bad.species.pop_back();
  CHECK_THROWS_AS(validate(bad), InvariantError);
  Material big{std::vector<std::uint32_t>(21, 0), cell({1, 1, 1}, {1, 1, 1}, 21)};
  CHECK_THROWS_AS(validate(big), InvariantError);
  MaterialRecord r{m, NAN};
  CHECK_THROWS_AS(validate(r), InvariantError);
}

TEST_CASE("records round-trip through json lines") {
  Rng rng(5);
  std::vector<MaterialRecord> records;
  for (int i = 0; i < 100; ++i) records.push_back(random_record(rng));
  std::stringstream ss;
  write_records(ss, records);
  auto back = read_records(ss);
  REQUIRE(back.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(back[i].material.species == records[i].material.species);
    CHECK(back[i].property == records[i].property);
    for (int k = 0; k < 3; ++k) {
      CHECK(back[i].material.geometry.lengths[k] == records[i].material.geometry.lengths[k]);
      CHECK(back[i].material.geometry.angles[k] == doctest::Approx(records[i].material.geometry.angles[k]).epsilon(1e-12));
    }
    CHECK(back[i].material.geometry.positions == records[i].material.geometry.positions);
  }
}

TEST_CASE("record parsing errors") {
  std::stringstream empty;
  CHECK(read_records(empty).empty());
  std::stringstream pi(
      R"({"lengths":[1,1,1],"angles_deg":[90,180,90],"species":[0],"frac_coords":[[0,0,0]],"property":1})"
      "\n");
  CHECK_THROWS_AS(read_records(pi), InvariantError);
  std::stringstream missing(
      R"({"lengths":[1,1,1],"angles_deg":[90,90,90],"species":[0],"frac_coords":[[0,0,0]],"property":1})"
      "\n"
      R"({"lengths":[1,1,1],"angles_deg":[90,90,90],"species":[0],"property":1})"
      "\n");
  try {
    read_records(missing);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
    CHECK(e.field() == "frac_coords");
  }
}
