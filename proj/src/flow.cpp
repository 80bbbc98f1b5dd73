#include "cliqueflow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <numbers>
#include <string>

#include "cliqueflow/error.hpp"

namespace cliqueflow {

void FlowConfig::validate() const {
  if (n_step == 0) throw ConfigError("n_step must be at least 1");
  if (!(omega >= 0.0)) throw ConfigError("omega must be non-negative");
  if (!(eps_mix >= 0.0 && eps_mix <= 1.0)) throw ConfigError("eps_mix must lie in [0, 1]");
  if (!(tau_pos > 0.0)) throw ConfigError("tau_pos must be positive");
  if (!(p_lat >= 0.0 && p_lat <= 1.0)) throw ConfigError("p_lat must lie in [0, 1]");
}

LengthPrior fit_length_prior(std::span<const Material> materials) {
  if (materials.size() < 2) throw InvariantError("length prior needs at least 2 records");
  LengthPrior p;
  const double n = static_cast<double>(materials.size());
  for (int k = 0; k < 3; ++k) {
    double sum = 0.0;
    for (const auto& m : materials)
      sum += std::log(canonicalize_lengths(m.geometry.lengths, m.atom_count())[k]);
    const double mean = sum / n;
    double ss = 0.0;
    for (const auto& m : materials) {
      const double d = std::log(canonicalize_lengths(m.geometry.lengths, m.atom_count())[k]) - mean;
      ss += d * d;
    }
    p.mean[k] = mean;
    p.stddev[k] = std::max(kPriorStdFloor, std::sqrt(ss / (n - 1.0)));
  }
  return p;
}

LengthPrior fit_length_prior(std::span<const MaterialRecord> records) {
  std::vector<Material> ms;
  ms.reserve(records.size());
  for (const auto& r : records) ms.push_back(r.material);
  return fit_length_prior(ms);
}

Geometry sample_prior(std::size_t n_atom, const LengthPrior& prior, Rng& rng) {
  if (n_atom == 0) throw InvariantError("sample_prior needs at least one atom");
  Geometry g;
  const double scale = std::cbrt(static_cast<double>(n_atom));
  for (int k = 0; k < 3; ++k) g.lengths[k] = scale * std::exp(rng.normal(prior.mean[k], prior.stddev[k]));
  const double lo = std::numbers::pi / 3.0, hi = 2.0 * std::numbers::pi / 3.0;
  for (int k = 0; k < 3; ++k) g.angles[k] = rng.uniform(lo, hi);
  g.positions.resize(n_atom);
  for (auto& p : g.positions)
    for (auto& x : p) x = rng.uniform();
  return g;
}

double sample_time(const FlowConfig& cfg, Rng& rng) {
  if (rng.uniform() < cfg.eps_mix) return rng.uniform();
  return 1.0 / (1.0 + std::exp(-rng.normal()));
}

Geometry interpolate(const Geometry& g0, const Geometry& g1, double t) {
  if (g0.atom_count() != g1.atom_count()) throw DimensionError("interpolate: atom counts differ");
  Geometry g;
  for (int k = 0; k < 3; ++k) {
    g.lengths[k] = (1.0 - t) * g0.lengths[k] + t * g1.lengths[k];
    g.angles[k] = (1.0 - t) * g0.angles[k] + t * g1.angles[k];
  }
  g.positions.resize(g0.atom_count());
  for (std::size_t i = 0; i < g.positions.size(); ++i)
    for (int k = 0; k < 3; ++k) g.positions[i][k] = (1.0 - t) * g0.positions[i][k] + t * g1.positions[i][k];
  return g;
}

GeometryFlow::GeometryFlow(nn::ParameterStore& ps, const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  const auto& t = cfg.transformer;
  const std::size_t d = t.d_model;
  len_mlp_ = nn::Mlp(ps, "flow.len", 3, d, 1, d, rng);
  ang_mlp_ = nn::Mlp(ps, "flow.ang", 3, d, 1, d, rng);
  pos_mlp_ = nn::Mlp(ps, "flow.pos", kPositionFeatures, d, 1, d, rng);
  time_prefix_ = "flow.time";
  time_mlp_ = nn::Mlp(ps, time_prefix_, d, d, 1, d, rng);
  lat_mlp_ = nn::Mlp(ps, "flow.latent", cfg.shape.d_clique + cfg.shape.n_cliques, d, 1, d, rng);
  species_ = nn::Embedding(ps, "flow.species", cfg.vocab.size(), d, rng);
  registers_ = "flow.registers";
  nn::Tensor regs({t.n_registers, d});
  for (auto& v : regs.values()) v = rng.normal();
  ps.add(registers_, std::move(regs));
  transformer_ = nn::Transformer(ps, "flow.tf", t, true, rng);
  out_len_ = nn::Mlp(ps, "flow.out_len", d, t.mlp_dim, 1, 3, rng, nn::Init::kSmall);
  out_ang_ = nn::Mlp(ps, "flow.out_ang", d, t.mlp_dim, 1, 3, rng, nn::Init::kSmall);
  out_pos_ = nn::Mlp(ps, "flow.out_pos", d, t.mlp_dim, 1, 3, rng, nn::Init::kSmall);
}

nn::Var GeometryFlow::latent_memory(nn::Context& ctx, nn::Var Z) const {
  nn::Graph& g = ctx.graph;
  const std::size_t C = cfg_.shape.n_cliques;
  const std::size_t rows = g.value(Z).rows();
  if (g.value(Z).cols() != cfg_.shape.d_clique || rows % C != 0)
    throw DimensionError("latent_memory: rows do not match the clique shape");
  nn::Tensor onehot = nn::Tensor::matrix(rows, C);
  for (std::size_t r = 0; r < rows; ++r) onehot(r, r % C) = 1.0;
  nn::Var h = lat_mlp_(ctx, nn::concat_cols(g, Z, g.constant(std::move(onehot))));
  return nn::layer_norm(g, nn::gelu(g, h));
}

Velocity GeometryFlow::velocity(nn::Context& ctx, const FlowState& state, std::span<const double> t,
                                const MaterialBatch& batch, nn::Var memory) const {
  nn::Graph& g = ctx.graph;
  const std::size_t B = batch.batch, W = batch.width, R = cfg_.transformer.n_registers;
  const std::size_t L = R + 2 + W, d = cfg_.transformer.d_model;
  if (t.size() != B || state.lengths.rows() != B || state.positions.rows() != B * W)
    throw DimensionError("velocity: state does not match the batch layout");

  nn::Var h_len = len_mlp_(ctx, g.constant(state.lengths));
  nn::Var h_ang = ang_mlp_(ctx, g.constant(state.angles));
  nn::Var h_pos = pos_mlp_(ctx, g.constant(position_features(state.positions)));
  std::vector<nn::Var> parts{ctx.param(registers_), h_len, h_ang, h_pos};
  nn::Var all = nn::concat_rows(g, parts);

  nn::Var h_atom = species_(ctx, batch.species);
  nn::Var mean_atom = nn::weighted_segment_sum(g, h_atom, batch.mean_weights(), W);
  std::vector<nn::Var> cond_parts{mean_atom, h_atom};
  nn::Var cond_all = nn::concat_rows(g, cond_parts);
  nn::Var time = time_mlp_(ctx, g.constant(time_features(t, d)));

  std::vector<std::size_t> seq_idx, cond_idx, time_idx, len_rows, ang_rows, pos_rows;
  std::vector<char> mask;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t r = 0; r < R; ++r) {
      seq_idx.push_back(r);
      cond_idx.push_back(b);
      mask.push_back(1);
    }
    len_rows.push_back(seq_idx.size());
    seq_idx.push_back(R + b);
    ang_rows.push_back(seq_idx.size());
    seq_idx.push_back(R + B + b);
    cond_idx.insert(cond_idx.end(), {b, b});
    mask.insert(mask.end(), {1, 1});
    for (std::size_t i = 0; i < W; ++i) {
      pos_rows.push_back(seq_idx.size());
      seq_idx.push_back(R + 2 * B + b * W + i);
      cond_idx.push_back(B + b * W + i);
      mask.push_back(batch.atom_mask[b * W + i]);
    }
    for (std::size_t l = 0; l < L; ++l) time_idx.push_back(b);
  }
  nn::Var seq = nn::gather_rows(g, all, std::move(seq_idx));
  nn::Var cond = nn::add(g, nn::gather_rows(g, cond_all, std::move(cond_idx)), nn::gather_rows(g, time, std::move(time_idx)));
  nn::Var h = transformer_(ctx, seq, cond, nn::SequenceLayout{B, L, std::move(mask), false}, memory,
                           cfg_.shape.n_cliques);
  const double rate = cfg_.transformer.dropout;
  return {out_len_(ctx, nn::gather_rows(g, h, std::move(len_rows)), rate),
          out_ang_(ctx, nn::gather_rows(g, h, std::move(ang_rows)), rate),
          out_pos_(ctx, nn::gather_rows(g, h, std::move(pos_rows)), rate)};
}

FlowState flow_state(const MaterialBatch& batch) { return {batch.lengths, batch.angles, batch.positions}; }

FlowState interpolate(const FlowState& g0, const FlowState& g1, std::span<const double> t, std::size_t width) {
  FlowState out = g0;
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t k = 0; k < 3; ++k) {
      out.lengths(b, k) = (1.0 - t[b]) * g0.lengths(b, k) + t[b] * g1.lengths(b, k);
      out.angles(b, k) = (1.0 - t[b]) * g0.angles(b, k) + t[b] * g1.angles(b, k);
    }
    for (std::size_t i = 0; i < width; ++i)
      for (std::size_t k = 0; k < 3; ++k) {
        const std::size_t r = b * width + i;
        out.positions(r, k) = (1.0 - t[b]) * g0.positions(r, k) + t[b] * g1.positions(r, k);
      }
  }
  return out;
}

nn::Var flow_loss_terms(nn::Graph& g, const Velocity& v, const FlowState& target, const MaterialBatch& batch,
                        double tau_pos) {
  auto sq = [&](nn::Var pred, const nn::Tensor& tgt) { return nn::square(g, nn::sub(g, pred, g.constant(tgt))); };
  nn::Var len = nn::row_sum(g, sq(v.lengths, target.lengths));
  nn::Var ang = nn::row_sum(g, sq(v.angles, target.angles));
  std::vector<double> w(batch.atom_mask.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = batch.atom_mask[i] ? tau_pos : 0.0;
  nn::Var pos = nn::weighted_segment_sum(g, nn::row_sum(g, sq(v.positions, target.positions)), std::move(w),
                                         batch.width);
  return nn::add(g, nn::add(g, len, ang), pos);
}

FlowDraw draw_flow_inputs(const MaterialBatch& batch, const LengthPrior& prior, const FlowConfig& cfg,
                          std::span<Rng> rngs) {
  if (rngs.size() != batch.batch) throw DimensionError("draw_flow_inputs: one rng per record required");
  FlowDraw d;
  d.g0.lengths = nn::Tensor::matrix(batch.batch, 3);
  d.g0.angles = nn::Tensor::matrix(batch.batch, 3);
  d.g0.positions = nn::Tensor::matrix(batch.batch * batch.width, 3);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    d.t.push_back(sample_time(cfg, rngs[b]));
    Geometry g0 = sample_prior(batch.n_atoms[b], prior, rngs[b]);
    for (std::size_t k = 0; k < 3; ++k) {
      d.g0.lengths(b, k) = g0.lengths[k];
      d.g0.angles(b, k) = g0.angles[k];
    }
    for (std::size_t i = 0; i < g0.atom_count(); ++i)
      for (std::size_t k = 0; k < 3; ++k) d.g0.positions(b * batch.width + i, k) = g0.positions[i][k];
  }
  return d;
}

void euler_integrate(std::span<double> x, std::size_t n_step, const VelocityField& f) {
  if (n_step == 0) throw ConfigError("euler_integrate needs at least one step");
  const double dt = 1.0 / static_cast<double>(n_step);
  std::vector<double> v(x.size());
  for (std::size_t s = 0; s < n_step; ++s) {
    f(static_cast<double>(s) * dt, x, v);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] += dt * v[i];
      if (!std::isfinite(x[i]))
        throw NonFiniteError("integration state became non-finite at step " + std::to_string(s) + ", entry " +
                             std::to_string(i));
    }
  }
}

void guided_velocity(std::span<const double> cond, std::span<const double> uncond, double omega,
                     std::span<double> out) {
  if (omega == 0.0) {
    std::copy(cond.begin(), cond.end(), out.begin());
    return;
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 + omega) * cond[i] - omega * uncond[i];
}

void finalize_geometry(Geometry& g) {
  for (auto& p : g.positions)
    for (auto& x : p) {
      x -= std::floor(x);
      if (x >= 1.0 || x < 0.0) x = 0.0;
    }
  for (auto& a : g.angles) a = std::clamp(a, kAngleMargin, std::numbers::pi - kAngleMargin);
  for (auto& l : g.lengths) l = std::max(l, kMinLength);
}

namespace {

nn::Tensor memory_for(const GeometryFlow& flow, const nn::ParameterStore& ps, const std::vector<double>& latents,
                      std::size_t count) {
  const CliqueShape& s = flow.config().shape;
  nn::Graph g(false);
  nn::Context ctx{g, ps};
  nn::Var z = g.input(nn::Tensor({count, s.d_z()}, latents));
  return g.value(flow.latent_memory(ctx, chain(g, z, s)));
}

}  // namespace

std::vector<Geometry> integrate(const GeometryFlow& flow, const nn::ParameterStore& ps, std::span<const DecodeTask> tasks,
                                const FlowConfig& cfg, const LengthPrior& prior, const Rng& rng, std::size_t chunk) {
  cfg.validate();
  const ModelConfig& mc = flow.config();
  const std::size_t dz = mc.shape.d_z();
  std::map<std::size_t, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (tasks[i].species.empty()) throw InvariantError("integrate: species sequence is empty");
    if (tasks[i].z.size() != dz) throw DimensionError("integrate: latent has the wrong size");
    buckets[tasks[i].species.size()].push_back(i);
  }
  std::vector<Geometry> out(tasks.size());
  struct Job {
    std::size_t n;
    const std::vector<std::size_t>* members;
    std::size_t begin;
  };
  std::vector<Job> jobs;
  for (const auto& [n, members] : buckets)
    for (std::size_t begin = 0; begin < members.size(); begin += chunk) jobs.push_back({n, &members, begin});
  std::vector<std::exception_ptr> errors(jobs.size());

  // Chunks are independent: each record draws from rng.split(id) and writes only its own output slot.
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(jobs.size()); ++j) {
    try {
      const std::size_t n = jobs[static_cast<std::size_t>(j)].n;
      const std::vector<std::size_t>& members = *jobs[static_cast<std::size_t>(j)].members;
      const std::size_t begin = jobs[static_cast<std::size_t>(j)].begin;
      const std::size_t B = std::min(chunk, members.size() - begin);
      std::vector<Material> shells(B);
      std::vector<double> zc, zu;
      std::vector<double> x(B * 6 + B * n * 3);
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t id = members[begin + b];
        Rng r = rng.split(id);
        Geometry g0 = sample_prior(n, prior, r);
        shells[b].species = tasks[id].species;
        shells[b].geometry = g0;
        zc.insert(zc.end(), tasks[id].z.begin(), tasks[id].z.end());
        for (std::size_t k = 0; k < dz; ++k) zu.push_back(r.normal());
        for (std::size_t k = 0; k < 3; ++k) {
          x[b * 3 + k] = g0.lengths[k];
          x[B * 3 + b * 3 + k] = g0.angles[k];
        }
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < 3; ++k) x[B * 6 + (b * n + i) * 3 + k] = g0.positions[i][k];
      }
      const MaterialBatch batch = MaterialBatch::build(std::span<const Material>(shells), mc.vocab);
      const nn::Tensor mem_c = memory_for(flow, ps, zc, B);
      const nn::Tensor mem_u = cfg.omega != 0.0 ? memory_for(flow, ps, zu, B) : nn::Tensor();
      std::vector<double> vc(x.size()), vu(x.size());
      auto eval = [&](double t, std::span<const double> state, const nn::Tensor& mem, std::span<double> v) {
        FlowState s{nn::Tensor({B, 3}, std::vector<double>(state.begin(), state.begin() + B * 3)),
                    nn::Tensor({B, 3}, std::vector<double>(state.begin() + B * 3, state.begin() + B * 6)),
                    nn::Tensor({B * n, 3}, std::vector<double>(state.begin() + B * 6, state.end()))};
        std::vector<double> ts(B, t);
        nn::Graph g(false);
        nn::Context ctx{g, ps};
        Velocity vel = flow.velocity(ctx, s, ts, batch, g.input(mem));
        auto put = [&](nn::Var var, std::size_t offset) {
          const nn::Tensor& tv = g.value(var);
          std::copy(tv.values().begin(), tv.values().end(), v.begin() + offset);
        };
        put(vel.lengths, 0);
        put(vel.angles, B * 3);
        put(vel.positions, B * 6);
      };
      euler_integrate(x, cfg.n_step, [&](double t, std::span<const double> state, std::span<double> v) {
        eval(t, state, mem_c, vc);
        if (cfg.omega != 0.0) eval(t, state, mem_u, vu);
        guided_velocity(vc, vu, cfg.omega, v);
      });
      for (std::size_t b = 0; b < B; ++b) {
        Geometry& g = out[members[begin + b]];
        for (std::size_t k = 0; k < 3; ++k) {
          g.lengths[k] = x[b * 3 + k];
          g.angles[k] = x[B * 3 + b * 3 + k];
        }
        g.positions.resize(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < 3; ++k) g.positions[i][k] = x[B * 6 + (b * n + i) * 3 + k];
        finalize_geometry(g);
      }
    } catch (...) {
      errors[static_cast<std::size_t>(j)] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace cliqueflow
