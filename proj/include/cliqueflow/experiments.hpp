#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cliqueflow/config.hpp"
#include "cliqueflow/mbo.hpp"
#include "cliqueflow/model.hpp"

namespace cliqueflow {

// The configured oracle, with species weights drawn from the run seed when none are given.
OracleSpec resolve_oracle(const RunConfig& cfg);

struct MatchTolerance {
  double length_rel = 0.02;
  double angle_deg = 2.0;
  double position = 0.05;  // per fractional coordinate, after wrapping
};

// Same species sequence, cell within tolerance, and a one-to-one pairing of
// same-species atoms whose wrapped positions agree.
bool structure_match(const Material& a, const Material& b, const MatchTolerance& tol = {});

struct ReconstructRow {
  double omega = 0.0;
  std::size_t n = 0;
  std::size_t matched = 0;          // species and geometry
  std::size_t species_matched = 0;  // species only
  double match_ratio() const { return n ? static_cast<double>(matched) / static_cast<double>(n) : 0.0; }
  double species_ratio() const { return n ? static_cast<double>(species_matched) / static_cast<double>(n) : 0.0; }
};

// Encode each record to its posterior mean, decode once per guidance strength, compare.
std::vector<ReconstructRow> reconstruct(const CliqueFlowModel& model, std::span<const MaterialRecord> records,
                                        std::span<const double> omegas, std::size_t beam_width,
                                        std::size_t flow_steps, const Rng& rng);

struct AblationRow {
  std::string method;  // BP, BP+W, ES, ES+W, or ES-sweep
  double decay = 0.0;
  double mean_pred_change = 0.0;    // surrogate value after minus before
  double mean_oracle_change = 0.0;  // oracle of decoded material minus oracle of the start
  bool has_oracle = false;
};

struct AblationOptions {
  std::vector<double> decay_sweep;
  bool decode = true;
  std::size_t beam_width = 10;
  std::size_t flow_steps = 1000;
  double omega = 2.0;
};

std::vector<AblationRow> ablate_gradients(const CliqueFlowModel& model, std::span<const MaterialRecord> records,
                                          const OracleSpec& oracle_spec, const ESConfig& es,
                                          const AblationOptions& opt, const Rng& rng);

struct TimingRow {
  std::size_t n = 0;
  double mbo_seconds = 0.0;
  double decode_seconds = 0.0;
};

// Runs the full pipeline on the first N records (cycling when there are fewer).
std::vector<TimingRow> time_pipeline(const CliqueFlowModel& model, std::span<const MaterialRecord> records,
                                     std::span<const std::size_t> sizes, const DiscoverConfig& cfg, const Rng& rng);

struct InterpolationRow {
  std::string mode;  // full or clique
  std::size_t clique = 0;
  std::size_t step = 0;
  double t = 0.0;
  double prediction = 0.0;
  double oracle_value = 0.0;
  Material material;
};

// steps+1 evenly spaced points from z(a) to z(b): the full latent, then each clique alone.
std::vector<InterpolationRow> interpolation_sweep(const CliqueFlowModel& model, const Material& a, const Material& b,
                                                  std::size_t steps, const OracleSpec& oracle_spec,
                                                  std::size_t beam_width, std::size_t flow_steps, double omega,
                                                  const Rng& rng);

std::string species_string(const std::vector<std::uint32_t>& species);

}  // namespace cliqueflow
