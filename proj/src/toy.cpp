#include "cliqueflow/toy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cliqueflow/error.hpp"

namespace cliqueflow {

void OracleSpec::validate(std::size_t species) const {
  switch (kind) {
    case OracleKind::kCompositionAffinity:
    case OracleKind::kPacking:
      if (weights.size() != species) throw ConfigError("oracle weights must have one entry per species");
      for (double w : weights)
        if (!std::isfinite(w)) throw ConfigError("oracle weights must be finite");
      if (kind == OracleKind::kPacking && !(target_density > 0.0 && coupling >= 0.0))
        throw ConfigError("packing oracle needs target_density > 0 and coupling >= 0");
      break;
    case OracleKind::kRegularized:
      if (!primary || !constraint) throw ConfigError("regularized oracle needs primary and constraint oracles");
      primary->validate(species);
      constraint->validate(species);
      break;
  }
}

namespace {

double mean_weight(const Material& m, const std::vector<double>& w) {
  double s = 0.0;
  for (auto a : m.species) s += w.at(a);
  return s / static_cast<double>(m.species.size());
}

}  // namespace

double oracle(const Material& m, const OracleSpec& spec) {
  switch (spec.kind) {
    case OracleKind::kCompositionAffinity:
      return mean_weight(m, spec.weights);
    case OracleKind::kPacking:
      return std::abs(density(m) - spec.target_density) + spec.coupling * mean_weight(m, spec.weights);
    case OracleKind::kRegularized:
      return oracle(m, *spec.primary) + spec.lambda_reg * std::max(0.0, oracle(m, *spec.constraint) - spec.tau_reg);
  }
  throw ConfigError("unknown oracle kind");
}

std::string to_string(OracleKind kind) {
  switch (kind) {
    case OracleKind::kCompositionAffinity:
      return "composition-affinity";
    case OracleKind::kPacking:
      return "packing";
    case OracleKind::kRegularized:
      return "regularized";
  }
  return "?";
}

OracleKind oracle_kind_from_string(const std::string& s) {
  if (s == "composition-affinity") return OracleKind::kCompositionAffinity;
  if (s == "packing") return OracleKind::kPacking;
  if (s == "regularized") return OracleKind::kRegularized;
  throw ConfigError("unknown oracle kind '" + s + "'");
}

std::vector<double> random_weights(std::size_t species, Rng& rng) {
  std::vector<double> w(species);
  for (auto& v : w) v = rng.uniform();
  return w;
}

std::vector<double> species_probabilities(const std::vector<double>& weights, double skew) {
  std::vector<double> p(weights.size());
  double z = 0.0;
  for (std::size_t s = 0; s < p.size(); ++s) z += (p[s] = std::exp(skew * weights[s]));
  for (auto& v : p) v /= z;
  return p;
}

std::vector<MaterialRecord> generate_dataset(std::size_t n, const OracleSpec& spec, const ToyDataConfig& cfg,
                                             const Rng& rng) {
  if (n == 0) throw ConfigError("dataset size must be at least 1");
  spec.validate(cfg.vocab.species);
  const OracleSpec* base = &spec;
  while (base->kind == OracleKind::kRegularized) base = base->primary.get();
  const auto p = species_probabilities(base->weights, cfg.skew);
  std::vector<double> cdf(p.size());
  std::partial_sum(p.begin(), p.end(), cdf.begin());
  std::vector<MaterialRecord> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = rng.split(i);
    const std::size_t atoms = 1 + r.index(cfg.max_atoms);
    Material& m = out[i].material;
    for (std::size_t k = 0; k < atoms; ++k) {
      const double u = r.uniform() * cdf.back();
      const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
      m.species.push_back(static_cast<std::uint32_t>(std::min<std::size_t>(it - cdf.begin(), p.size() - 1)));
    }
    std::sort(m.species.begin(), m.species.end());
    m.geometry = sample_prior(atoms, cfg.prior, r);
    out[i].property = oracle(m, spec);
  }
  return out;
}

}  // namespace cliqueflow
