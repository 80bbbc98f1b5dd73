#include "cliqueflow/experiments.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>

#include "cliqueflow/error.hpp"

namespace cliqueflow {

namespace {

void fill_weights(OracleSpec& spec, std::size_t species, const Rng& rng, std::uint64_t id) {
  if (spec.weights.empty()) {
    Rng r = rng.split(id);
    spec.weights = random_weights(species, r);
  }
  if (spec.primary) {
    auto p = std::make_shared<OracleSpec>(*spec.primary);
    fill_weights(*p, species, rng, 2 * id + 1);
    spec.primary = p;
  }
  if (spec.constraint) {
    auto c = std::make_shared<OracleSpec>(*spec.constraint);
    fill_weights(*c, species, rng, 2 * id + 2);
    spec.constraint = c;
  }
}

double wrapped(double a, double b) {
  double d = std::fmod(std::abs(a - b), 1.0);
  return std::min(d, 1.0 - d);
}

std::vector<LatentVector> posterior_means(const CliqueFlowModel& model, std::span<const MaterialRecord> records) {
  std::vector<Material> ms;
  ms.reserve(records.size());
  for (const auto& r : records) ms.push_back(r.material);
  std::vector<LatentVector> z;
  for (auto& e : model.encoder.encode_all(model.params, ms)) z.push_back(std::move(e.mu));
  return z;
}

}  // namespace

OracleSpec resolve_oracle(const RunConfig& cfg) {
  OracleSpec spec = cfg.oracle;
  fill_weights(spec, cfg.model.vocab.species, Rng(cfg.seed, 0x0c1e), 0);
  spec.validate(cfg.model.vocab.species);
  return spec;
}

bool structure_match(const Material& a, const Material& b, const MatchTolerance& tol) {
  if (a.species != b.species) return false;
  const Geometry& ga = a.geometry;
  const Geometry& gb = b.geometry;
  const double angle_tol = tol.angle_deg * std::numbers::pi / 180.0;
  for (int k = 0; k < 3; ++k) {
    if (std::abs(ga.lengths[k] - gb.lengths[k]) > tol.length_rel * std::abs(gb.lengths[k])) return false;
    if (std::abs(ga.angles[k] - gb.angles[k]) > angle_tol) return false;
  }
  const std::size_t n = a.species.size();
  if (ga.positions.size() != n || gb.positions.size() != n) return false;
  auto close = [&](std::size_t i, std::size_t j) {
    if (a.species[i] != b.species[j]) return false;
    for (int k = 0; k < 3; ++k)
      if (wrapped(ga.positions[i][k], gb.positions[j][k]) > tol.position) return false;
    return true;
  };
  // Bipartite matching by augmenting paths.
  std::vector<std::ptrdiff_t> owner(n, -1);
  std::vector<char> seen;
  std::function<bool(std::size_t)> augment = [&](std::size_t i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (seen[j] || !close(i, j)) continue;
      seen[j] = 1;
      if (owner[j] < 0 || augment(static_cast<std::size_t>(owner[j]))) {
        owner[j] = static_cast<std::ptrdiff_t>(i);
        return true;
      }
    }
    return false;
  };
  for (std::size_t i = 0; i < n; ++i) {
    seen.assign(n, 0);
    if (!augment(i)) return false;
  }
  return true;
}

std::vector<ReconstructRow> reconstruct(const CliqueFlowModel& model, std::span<const MaterialRecord> records,
                                        std::span<const double> omegas, std::size_t beam_width,
                                        std::size_t flow_steps, const Rng& rng) {
  if (records.empty()) throw InvariantError("reconstruct: no records");
  const std::vector<LatentVector> z = posterior_means(model, records);
  const auto species = decode_species(model, z, beam_width);
  std::size_t species_ok = 0;
  for (std::size_t i = 0; i < records.size(); ++i) species_ok += species[i] == records[i].material.species;
  std::vector<ReconstructRow> rows;
  for (double omega : omegas) {
    const auto decoded = decode_geometry(model, z, species, flow_steps, omega, rng);
    ReconstructRow row{omega, records.size(), 0, species_ok};
    for (std::size_t i = 0; i < records.size(); ++i) row.matched += structure_match(decoded[i], records[i].material);
    rows.push_back(row);
  }
  return rows;
}

std::vector<AblationRow> ablate_gradients(const CliqueFlowModel& model, std::span<const MaterialRecord> records,
                                          const OracleSpec& oracle_spec, const ESConfig& es,
                                          const AblationOptions& opt, const Rng& rng) {
  if (records.empty()) throw InvariantError("ablate_gradients: no records");
  const std::vector<LatentVector> z0 = posterior_means(model, records);
  const Surrogate f = predictor_surrogate(model);
  double start_oracle = 0.0;
  for (const auto& r : records) start_oracle += oracle(r.material, oracle_spec);
  start_oracle /= static_cast<double>(records.size());

  struct Arm {
    std::string name;
    GradientKind kind;
    double decay;
  };
  std::vector<Arm> arms{{"BP", GradientKind::kBackprop, 0.0},
                        {"BP+W", GradientKind::kBackprop, es.decay},
                        {"ES", GradientKind::kEvolution, 0.0},
                        {"ES+W", GradientKind::kEvolution, es.decay}};
  for (double d : opt.decay_sweep) arms.push_back({"ES-sweep", GradientKind::kEvolution, d});

  std::vector<AblationRow> rows;
  for (const Arm& arm : arms) {
    ESConfig c = es;
    c.decay = arm.decay;
    const OptimizeResult res = optimize(z0, f, c, rng.split(0), arm.kind);
    AblationRow row{arm.name, arm.decay};
    for (const auto& t : res.trace) row.mean_pred_change += (t.back() - t.front()) / static_cast<double>(z0.size());
    if (opt.decode) {
      const auto decoded = decode_latents(model, res.latents, opt.beam_width, opt.flow_steps, opt.omega, rng.split(1));
      double end = 0.0;
      for (const auto& m : decoded) end += oracle(m, oracle_spec);
      row.mean_oracle_change = end / static_cast<double>(decoded.size()) - start_oracle;
      row.has_oracle = true;
    }
    rows.push_back(row);
  }
  return rows;
}

std::vector<TimingRow> time_pipeline(const CliqueFlowModel& model, std::span<const MaterialRecord> records,
                                     std::span<const std::size_t> sizes, const DiscoverConfig& cfg, const Rng& rng) {
  if (records.empty()) throw InvariantError("time_pipeline: no records");
  std::vector<TimingRow> rows;
  for (std::size_t n : sizes) {
    std::vector<MaterialRecord> batch;
    for (std::size_t i = 0; i < n; ++i) batch.push_back(records[i % records.size()]);
    DiscoverTiming t;
    discover(model, batch, cfg, rng, &t);
    rows.push_back({n, t.mbo_seconds, t.decode_seconds});
  }
  return rows;
}

std::vector<InterpolationRow> interpolation_sweep(const CliqueFlowModel& model, const Material& a, const Material& b,
                                                  std::size_t steps, const OracleSpec& oracle_spec,
                                                  std::size_t beam_width, std::size_t flow_steps, double omega,
                                                  const Rng& rng) {
  if (steps == 0) throw ConfigError("interpolation needs at least one step");
  const LatentVector za = model.encoder.encode(model.params, a).mu;
  const LatentVector zb = model.encoder.encode(model.params, b).mu;
  const CliqueShape& shape = model.config().shape;
  std::vector<InterpolationRow> rows;
  std::vector<LatentVector> zs;
  for (std::size_t c = 0; c <= shape.n_cliques; ++c)
    for (std::size_t s = 0; s <= steps; ++s) {
      const double t = static_cast<double>(s) / static_cast<double>(steps);
      InterpolationRow row;
      row.step = s;
      row.t = t;
      if (c == 0) {
        row.mode = "full";
        zs.push_back(interpolate_latent(za, zb, t));
      } else {
        row.mode = "clique";
        row.clique = c - 1;
        zs.push_back(interpolate_clique(za, zb, shape, c - 1, t));
      }
      rows.push_back(row);
    }
  std::vector<double> flat;
  for (const auto& z : zs) flat.insert(flat.end(), z.begin(), z.end());
  const std::vector<double> pred = predictor_surrogate(model).batch(flat, zs.size());
  const auto decoded = decode_latents(model, zs, beam_width, flow_steps, omega, rng);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].prediction = pred[i];
    rows[i].material = decoded[i];
    rows[i].oracle_value = oracle(decoded[i], oracle_spec);
  }
  return rows;
}

std::string species_string(const std::vector<std::uint32_t>& species) {
  std::string s;
  for (std::size_t i = 0; i < species.size(); ++i) {
    if (i) s += '-';
    s += std::to_string(species[i]);
  }
  return s;
}

}  // namespace cliqueflow
