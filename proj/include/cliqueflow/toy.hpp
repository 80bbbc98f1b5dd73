#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cliqueflow/crystal.hpp"
#include "cliqueflow/flow.hpp"

namespace cliqueflow {

enum class OracleKind { kCompositionAffinity, kPacking, kRegularized };

struct OracleSpec {
  OracleKind kind = OracleKind::kCompositionAffinity;
  std::vector<double> weights;  // one per species
  double target_density = 1.0;
  double coupling = 0.0;
  double lambda_reg = 20.0;
  double tau_reg = -0.2;
  // kRegularized: primary + lambda_reg * max(0, constraint - tau_reg).
  std::shared_ptr<const OracleSpec> primary;
  std::shared_ptr<const OracleSpec> constraint;

  void validate(std::size_t species) const;
};

double oracle(const Material& m, const OracleSpec& spec);
std::string to_string(OracleKind kind);
OracleKind oracle_kind_from_string(const std::string& s);

// Species weights w_s ~ U(0, 1).
std::vector<double> random_weights(std::size_t species, Rng& rng);

struct ToyDataConfig {
  std::size_t max_atoms = kDefaultMaxAtoms;
  Vocabulary vocab{};
  // Species are drawn with probability proportional to exp(skew * w_s).
  double skew = 3.0;
  // Canonical log-length prior used to draw cells.
  LengthPrior prior{{0.9, 0.9, 0.9}, {0.15, 0.15, 0.15}};
};

std::vector<double> species_probabilities(const std::vector<double>& weights, double skew);

// Record i uses rng.split(i): atom count ~ U{1..max_atoms}, species i.i.d.
// from the skewed categorical (stored in ascending id order), cell from the prior.
std::vector<MaterialRecord> generate_dataset(std::size_t n, const OracleSpec& spec, const ToyDataConfig& cfg,
                                             const Rng& rng);

}  // namespace cliqueflow
