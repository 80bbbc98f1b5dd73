#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "cliqueflow/clique.hpp"
#include "cliqueflow/crystal.hpp"
#include "cliqueflow/rng.hpp"

namespace cliqueflow {

class CliqueFlowModel;
struct FlowConfig;
struct BeamConfig;

struct ESConfig {
  std::size_t n_pert = 20;
  double sigma = 0.05;
  double learning_rate = 3e-4;
  std::size_t steps = 2000;
  double decay = 0.4;
  bool antithetic = true;
  double top_k_percent = 10.0;
  // Multiply z by (1 - decay) every step instead of the decoupled lr*decay shrink.
  bool literal_decay = false;

  void validate() const;
  static ESConfig paper() { return {}; }
  // Desk-trained latents are wide relative to a 3e-4 step: 2000 steps move them by a few percent.
  static ESConfig desk() {
    ESConfig c;
    c.learning_rate = 1e-2;
    return c;
  }
};

// Evaluates `count` points stored back to back (count x dim) and returns one value per point.
using BatchFn = std::function<std::vector<double>(std::span<const double> points, std::size_t count)>;
// Returns f(z) and writes df/dz into grad.
using ValueGradFn = std::function<double(std::span<const double> z, std::span<double> grad)>;

struct Surrogate {
  std::size_t dim = 0;
  BatchFn batch;
  ValueGradFn value_grad;  // optional; needed for back-propagated gradients

  double operator()(std::span<const double> z) const { return batch(z, 1).at(0); }
};

Surrogate pointwise(std::size_t dim, std::function<double(std::span<const double>)> f);

// Surrogate f(z) from the model's predictor.
Surrogate predictor_surrogate(const CliqueFlowModel& model);

// Rank-based estimator. Draws n_pert normals (2*n_pert without antithetic
// pairs) from rng, ranks all evaluations jointly with midranks for ties,
// standardizes with the population variance, and returns the search gradient.
std::vector<double> es_gradient(std::span<const double> z, const Surrogate& f, const ESConfig& cfg, Rng& rng);

// Same estimator given explicit noise (n_pert rows of dim) and the evaluations
// at z + sigma*eps_i and, when antithetic, z - sigma*eps_i.
std::vector<double> es_gradient_from_values(std::span<const double> eps, std::size_t dim, double sigma,
                                            std::span<const double> plus, std::span<const double> minus);

std::vector<double> bp_gradient(std::span<const double> z, const Surrogate& f);

struct AdamState {
  std::vector<double> m, v;
  std::size_t step = 0;

  explicit AdamState(std::size_t dim = 0) : m(dim, 0.0), v(dim, 0.0) {}
};

// Adam descent step followed by decay (decoupled unless cfg.literal_decay).
void adamw_step(std::span<double> z, std::span<const double> grad, AdamState& state, const ESConfig& cfg);

enum class GradientKind { kEvolution, kBackprop };

struct OptimizeResult {
  std::vector<LatentVector> latents;
  // trace[i][s]: surrogate value of latent i after s steps (s = 0..steps).
  std::vector<std::vector<double>> trace;
  // norms[i][s]: Euclidean norm of latent i after s steps.
  std::vector<std::vector<double>> norms;
};

// Each latent uses its own stream rng.split(i); results do not depend on the
// thread count.
OptimizeResult optimize(std::span<const LatentVector> latents, const Surrogate& f, const ESConfig& cfg,
                        const Rng& rng, GradientKind kind = GradientKind::kEvolution);
// Single-threaded reference of optimize.
OptimizeResult optimize_serial(std::span<const LatentVector> latents, const Surrogate& f, const ESConfig& cfg,
                               const Rng& rng, GradientKind kind = GradientKind::kEvolution);

// Indices of the ceil(k*N/100) lowest values, in input order.
std::vector<std::size_t> top_k_indices(std::span<const double> values, double k_percent);
std::vector<LatentVector> top_k_filter(std::span<const LatentVector> latents, std::span<const double> values,
                                       double k_percent);

struct DiscoverConfig {
  ESConfig es{};
  bool filter = false;
  GradientKind gradient = GradientKind::kEvolution;
  std::size_t beam_width = 10;
  std::size_t flow_steps = 1000;
  double omega = 2.0;
};

struct Discovery {
  std::size_t source = 0;  // index of the starting record
  Material material;
  double initial_prediction = 0.0;
  double prediction = 0.0;
  LatentVector latent;
};

struct DiscoverTiming {
  double mbo_seconds = 0.0;
  double decode_seconds = 0.0;
};

std::vector<Discovery> discover(const CliqueFlowModel& model, std::span<const MaterialRecord> records,
                                const DiscoverConfig& cfg, const Rng& rng, DiscoverTiming* timing = nullptr,
                                OptimizeResult* optimized = nullptr);

// Best non-empty beam hypothesis per latent; the likeliest single species when
// every hypothesis is empty.
std::vector<std::vector<std::uint32_t>> decode_species(const CliqueFlowModel& model,
                                                       std::span<const LatentVector> latents, std::size_t beam_width);
std::vector<Material> decode_geometry(const CliqueFlowModel& model, std::span<const LatentVector> latents,
                                      std::vector<std::vector<std::uint32_t>> species, std::size_t flow_steps,
                                      double omega, const Rng& rng);

// Beam decode species from each latent (falling back to the best non-empty
// hypothesis) and integrate geometry with guidance.
std::vector<Material> decode_latents(const CliqueFlowModel& model, std::span<const LatentVector> latents,
                                     std::size_t beam_width, std::size_t flow_steps, double omega, const Rng& rng);

LatentVector interpolate_latent(std::span<const double> z0, std::span<const double> z1, double t);
// Only the coordinates of clique c (0-based, knots included) move.
LatentVector interpolate_clique(std::span<const double> z0, std::span<const double> z1, const CliqueShape& shape,
                                std::size_t c, double t);

}  // namespace cliqueflow
