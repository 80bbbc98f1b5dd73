#pragma once

#include <functional>
#include <span>
#include <vector>

#include "cliqueflow/batch.hpp"

namespace cliqueflow {

struct FlowConfig {
  std::size_t n_step = 1000;
  double omega = 2.0;
  double eps_mix = 0.1;
  double tau_pos = 16.0;
  double p_lat = 0.1;
  void validate() const;
};

// Log-normal model of canonical lengths l / cbrt(N) per axis.
struct LengthPrior {
  Vec3 mean{0.0, 0.0, 0.0};
  Vec3 stddev{1.0, 1.0, 1.0};
  bool operator==(const LengthPrior&) const = default;
};

inline constexpr double kPriorStdFloor = 1e-6;
inline constexpr double kAngleMargin = 1e-3;
inline constexpr double kMinLength = 1e-3;

LengthPrior fit_length_prior(std::span<const Material> materials);
LengthPrior fit_length_prior(std::span<const MaterialRecord> records);
Geometry sample_prior(std::size_t n_atom, const LengthPrior& prior, Rng& rng);
double sample_time(const FlowConfig& cfg, Rng& rng);
Geometry interpolate(const Geometry& g0, const Geometry& g1, double t);

// Geometry of a padded batch, same layout as MaterialBatch.
struct FlowState {
  nn::Tensor lengths;    // batch x 3
  nn::Tensor angles;     // batch x 3
  nn::Tensor positions;  // batch*width x 3
};

struct Velocity {
  nn::Var lengths;
  nn::Var angles;
  nn::Var positions;
};

class GeometryFlow {
 public:
  GeometryFlow() = default;
  GeometryFlow(nn::ParameterStore& ps, const ModelConfig& cfg, Rng& rng);

  // H_z from clique rows (batch*n_cliques x d_clique): batch*n_cliques x d.
  nn::Var latent_memory(nn::Context& ctx, nn::Var Z) const;
  // Velocity of a padded batch. `batch` supplies species, masks and widths; its geometry is ignored.
  Velocity velocity(nn::Context& ctx, const FlowState& state, std::span<const double> t, const MaterialBatch& batch,
                    nn::Var memory) const;

  const nn::Transformer& transformer() const { return transformer_; }
  const std::string& time_mlp_prefix() const { return time_prefix_; }
  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  nn::Mlp len_mlp_, ang_mlp_, pos_mlp_, time_mlp_, lat_mlp_;
  nn::Mlp out_len_, out_ang_, out_pos_;
  nn::Embedding species_;
  std::string registers_, time_prefix_;
  nn::Transformer transformer_;
};

FlowState flow_state(const MaterialBatch& batch);
FlowState interpolate(const FlowState& g0, const FlowState& g1, std::span<const double> t, std::size_t width);

// Per-record flow losses: sum of squared velocity errors for lengths and
// angles plus tau_pos times that of the unpadded positions. Returns batch x 1.
nn::Var flow_loss_terms(nn::Graph& g, const Velocity& v, const FlowState& target, const MaterialBatch& batch,
                        double tau_pos);

// Draws G0 and t for every record of a batch from its own stream rngs[b].
struct FlowDraw {
  FlowState g0;
  std::vector<double> t;
};
FlowDraw draw_flow_inputs(const MaterialBatch& batch, const LengthPrior& prior, const FlowConfig& cfg,
                          std::span<Rng> rngs);

// Euler integration of dx/dt = f(t, x) from t=0 to 1 in n_step steps. The
// velocity callback writes into its third argument.
using VelocityField = std::function<void(double t, std::span<const double> x, std::span<double> v)>;
void euler_integrate(std::span<double> x, std::size_t n_step, const VelocityField& f);

// (1 + omega) * cond - omega * uncond; omega == 0 returns cond untouched.
void guided_velocity(std::span<const double> cond, std::span<const double> uncond, double omega,
                     std::span<double> out);

struct DecodeTask {
  LatentVector z;
  std::vector<std::uint32_t> species;
};

// Integrates every task with classifier-free guidance. Task i draws G0 and its
// unconditional latent from rng.split(i).
std::vector<Geometry> integrate(const GeometryFlow& flow, const nn::ParameterStore& ps, std::span<const DecodeTask> tasks,
                                const FlowConfig& cfg, const LengthPrior& prior, const Rng& rng,
                                std::size_t chunk = 64);

// Wraps positions into [0,1) and clamps angles and lengths into valid ranges.
void finalize_geometry(Geometry& g);

}  // namespace cliqueflow
