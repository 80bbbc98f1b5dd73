#include "cliqueflow/mbo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>

#include "cliqueflow/error.hpp"
#include "cliqueflow/model.hpp"

namespace cliqueflow {

void ESConfig::validate() const {
  if (n_pert < 1) throw ConfigError("es: n_pert must be at least 1");
  if (!(sigma > 0.0)) throw ConfigError("es: sigma must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("es: learning_rate must be positive");
  if (!(decay >= 0.0 && decay < 1.0)) throw ConfigError("es: decay must lie in [0, 1)");
  if (!(top_k_percent > 0.0 && top_k_percent <= 100.0)) throw ConfigError("es: top_k_percent must lie in (0, 100]");
}

Surrogate pointwise(std::size_t dim, std::function<double(std::span<const double>)> f) {
  Surrogate s;
  s.dim = dim;
  s.batch = [dim, f = std::move(f)](std::span<const double> pts, std::size_t count) {
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = f(pts.subspan(i * dim, dim));
    return out;
  };
  return s;
}

Surrogate predictor_surrogate(const CliqueFlowModel& model) {
  Surrogate s;
  const Predictor* pred = &model.predictor;
  const nn::ParameterStore* ps = &model.params;
  s.dim = pred->shape().d_z();
  s.batch = [pred, ps](std::span<const double> pts, std::size_t count) {
    return pred->predict_latents(*ps, pts, count);
  };
  s.value_grad = [pred, ps](std::span<const double> z, std::span<double> grad) {
    nn::Graph g;
    nn::Context ctx{g, *ps};
    nn::Var zin = g.input(nn::Tensor({1, z.size()}, std::vector<double>(z.begin(), z.end())));
    nn::Var out = pred->from_latent(ctx, zin);
    g.backward(out);
    const nn::Tensor gz = g.grad(zin);
    std::copy(gz.values().begin(), gz.values().end(), grad.begin());
    return g.value(out).item();
  };
  return s;
}

namespace {

// Ascending ranks 1..n; tied values share their mean rank.
std::vector<double> midranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && v[order[j]] == v[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) r[order[k]] = mid;
    i = j;
  }
  return r;
}

void standardize(std::vector<double>& r) {
  const double n = static_cast<double>(r.size());
  double mean = 0.0;
  for (double x : r) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : r) var += (x - mean) * (x - mean);
  var /= n;
  const double sd = std::sqrt(var);
  for (double& x : r) x = sd > 0.0 ? (x - mean) / sd : 0.0;
}

}  // namespace

std::vector<double> es_gradient_from_values(std::span<const double> eps, std::size_t dim, double sigma,
                                            std::span<const double> plus, std::span<const double> minus) {
  const std::size_t n = plus.size();
  if (eps.size() != n * dim) throw DimensionError("es_gradient: noise buffer does not match the evaluations");
  if (!minus.empty() && minus.size() != n) throw DimensionError("es_gradient: antithetic evaluations mismatch");
  std::vector<double> all(plus.begin(), plus.end());
  all.insert(all.end(), minus.begin(), minus.end());
  for (double x : all)
    if (!std::isfinite(x)) throw NonFiniteError("es_gradient: non-finite surrogate value");
  std::vector<double> r = midranks(all);
  standardize(r);
  std::vector<double> grad(dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = minus.empty() ? r[i] : r[i] - r[n + i];
    const double* e = eps.data() + i * dim;
    for (std::size_t k = 0; k < dim; ++k) grad[k] += w * e[k];
  }
  // Antithetic: 1/(2 sigma n) sum (R+ - R-) eps. Plain: 1/(sigma n) sum R eps.
  const double scale = minus.empty() ? 1.0 / (sigma * static_cast<double>(n)) : 1.0 / (2.0 * sigma * static_cast<double>(n));
  for (double& g : grad) g *= scale;
  return grad;
}

namespace {

std::size_t noise_rows(const ESConfig& cfg) { return cfg.antithetic ? cfg.n_pert : 2 * cfg.n_pert; }

// Appends the perturbed points of z to pts and returns the noise used.
std::vector<double> perturb(std::span<const double> z, const ESConfig& cfg, Rng& rng, std::vector<double>& pts) {
  const std::size_t d = z.size(), n = noise_rows(cfg);
  std::vector<double> eps(n * d);
  rng.fill_normal(eps);
  for (int sign : {1, -1}) {
    if (sign < 0 && !cfg.antithetic) break;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) pts.push_back(z[k] + sign * cfg.sigma * eps[i * d + k]);
  }
  return eps;
}

std::vector<double> gradient_from_batch(std::span<const double> eps, std::span<const double> vals,
                                        std::size_t dim, const ESConfig& cfg) {
  const std::size_t n = noise_rows(cfg);
  if (cfg.antithetic) return es_gradient_from_values(eps, dim, cfg.sigma, vals.subspan(0, n), vals.subspan(n, n));
  return es_gradient_from_values(eps, dim, cfg.sigma, vals.subspan(0, n), {});
}

}  // namespace

std::vector<double> es_gradient(std::span<const double> z, const Surrogate& f, const ESConfig& cfg, Rng& rng) {
  std::vector<double> pts;
  const std::vector<double> eps = perturb(z, cfg, rng, pts);
  const std::size_t count = pts.size() / z.size();
  const std::vector<double> vals = f.batch(pts, count);
  return gradient_from_batch(eps, vals, z.size(), cfg);
}

std::vector<double> bp_gradient(std::span<const double> z, const Surrogate& f) {
  if (!f.value_grad) throw ConfigError("bp_gradient: surrogate is not differentiable");
  std::vector<double> grad(z.size(), 0.0);
  f.value_grad(z, grad);
  return grad;
}

void adamw_step(std::span<double> z, std::span<const double> grad, AdamState& state, const ESConfig& cfg) {
  if (state.m.size() != z.size()) {
    state.m.assign(z.size(), 0.0);
    state.v.assign(z.size(), 0.0);
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++state.step;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < z.size(); ++k) {
    state.m[k] = b1 * state.m[k] + (1.0 - b1) * grad[k];
    state.v[k] = b2 * state.v[k] + (1.0 - b2) * grad[k] * grad[k];
    z[k] -= cfg.learning_rate * (state.m[k] / c1) / (std::sqrt(state.v[k] / c2) + eps);
  }
  const double shrink = cfg.literal_decay ? cfg.decay : cfg.learning_rate * cfg.decay;
  if (shrink != 0.0)
    for (double& x : z) x -= shrink * x;
}

namespace {

constexpr std::size_t kLatentChunk = 16;

double l2(std::span<const double> z) {
  double s = 0.0;
  for (double x : z) s += x * x;
  return std::sqrt(s);
}

void check_finite(std::span<const double> v, std::size_t latent, std::size_t step, const char* what) {
  for (double x : v)
    if (!std::isfinite(x))
      throw NonFiniteError(std::string("optimize: non-finite ") + what + " for latent " + std::to_string(latent) +
                           " at step " + std::to_string(step));
}

// Runs every step for latents [lo, hi). The chunking is fixed so that the
// batched surrogate sees the same inputs whatever the thread count.
void optimize_chunk(std::size_t lo, std::size_t hi, const Surrogate& f, const ESConfig& cfg, const Rng& rng,
                    GradientKind kind, OptimizeResult& res) {
  const std::size_t d = f.dim, m = hi - lo;
  std::vector<Rng> streams;
  std::vector<AdamState> states(m, AdamState(d));
  for (std::size_t i = lo; i < hi; ++i) streams.push_back(rng.split(i));
  const std::size_t per = 1 + noise_rows(cfg) * (cfg.antithetic ? 2 : 1);
  std::vector<double> grad(d);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (kind == GradientKind::kBackprop) {
      for (std::size_t j = 0; j < m; ++j) {
        std::vector<double>& z = res.latents[lo + j];
        const double val = f.value_grad(z, grad);
        check_finite({&val, 1}, lo + j, step, "surrogate value");
        check_finite(grad, lo + j, step, "gradient");
        res.trace[lo + j].push_back(val);
        res.norms[lo + j].push_back(l2(z));
        adamw_step(z, grad, states[j], cfg);
      }
      continue;
    }
    std::vector<double> pts;
    pts.reserve(m * per * d);
    std::vector<std::vector<double>> eps(m);
    for (std::size_t j = 0; j < m; ++j) {
      const std::vector<double>& z = res.latents[lo + j];
      pts.insert(pts.end(), z.begin(), z.end());
      eps[j] = perturb(z, cfg, streams[j], pts);
    }
    const std::vector<double> vals = f.batch(pts, m * per);
    for (std::size_t j = 0; j < m; ++j) {
      std::span<const double> v(vals.data() + j * per, per);
      check_finite(v, lo + j, step, "surrogate value");
      res.trace[lo + j].push_back(v[0]);
      res.norms[lo + j].push_back(l2(res.latents[lo + j]));
      const std::vector<double> g = gradient_from_batch(eps[j], v.subspan(1), d, cfg);
      adamw_step(res.latents[lo + j], g, states[j], cfg);
    }
  }
  std::vector<double> pts;
  for (std::size_t j = 0; j < m; ++j) pts.insert(pts.end(), res.latents[lo + j].begin(), res.latents[lo + j].end());
  const std::vector<double> last = f.batch(pts, m);
  for (std::size_t j = 0; j < m; ++j) {
    check_finite({&last[j], 1}, lo + j, cfg.steps, "surrogate value");
    res.trace[lo + j].push_back(last[j]);
    res.norms[lo + j].push_back(l2(res.latents[lo + j]));
  }
}

OptimizeResult start(std::span<const LatentVector> latents, const Surrogate& f, const ESConfig& cfg,
                     GradientKind kind) {
  cfg.validate();
  if (kind == GradientKind::kBackprop && !f.value_grad)
    throw ConfigError("optimize: back-propagated gradients need a differentiable surrogate");
  OptimizeResult res;
  res.latents.assign(latents.begin(), latents.end());
  res.trace.resize(latents.size());
  res.norms.resize(latents.size());
  for (std::size_t i = 0; i < latents.size(); ++i) {
    if (latents[i].size() != f.dim) throw DimensionError("optimize: latent " + std::to_string(i) + " has wrong size");
    check_finite(latents[i], i, 0, "latent");
    res.trace[i].reserve(cfg.steps + 1);
    res.norms[i].reserve(cfg.steps + 1);
  }
  return res;
}

}  // namespace

OptimizeResult optimize(std::span<const LatentVector> latents, const Surrogate& f, const ESConfig& cfg,
                        const Rng& rng, GradientKind kind) {
  OptimizeResult res = start(latents, f, cfg, kind);
  const std::size_t n = latents.size();
  const std::ptrdiff_t chunks = static_cast<std::ptrdiff_t>((n + kLatentChunk - 1) / kLatentChunk);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(chunks));
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t c = 0; c < chunks; ++c) {
    const std::size_t lo = static_cast<std::size_t>(c) * kLatentChunk;
    try {
      optimize_chunk(lo, std::min(n, lo + kLatentChunk), f, cfg, rng, kind, res);
    } catch (...) {
      errors[static_cast<std::size_t>(c)] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return res;
}

OptimizeResult optimize_serial(std::span<const LatentVector> latents, const Surrogate& f, const ESConfig& cfg,
                               const Rng& rng, GradientKind kind) {
  OptimizeResult res = start(latents, f, cfg, kind);
  for (std::size_t lo = 0; lo < latents.size(); lo += kLatentChunk)
    optimize_chunk(lo, std::min(latents.size(), lo + kLatentChunk), f, cfg, rng, kind, res);
  return res;
}

std::vector<std::size_t> top_k_indices(std::span<const double> values, double k_percent) {
  if (values.empty()) throw InvariantError("top_k_filter: empty input");
  if (!(k_percent > 0.0 && k_percent <= 100.0)) throw ConfigError("top_k_filter: k must lie in (0, 100]");
  const std::size_t n = values.size();
  const auto keep = std::min<std::size_t>(
      n, static_cast<std::size_t>(std::ceil(k_percent * static_cast<double>(n) / 100.0 - 1e-9)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<LatentVector> top_k_filter(std::span<const LatentVector> latents, std::span<const double> values,
                                       double k_percent) {
  if (latents.size() != values.size()) throw DimensionError("top_k_filter: one value per latent required");
  std::vector<LatentVector> out;
  for (std::size_t i : top_k_indices(values, k_percent)) out.push_back(latents[i]);
  return out;
}

std::vector<std::vector<std::uint32_t>> decode_species(const CliqueFlowModel& model,
                                                       std::span<const LatentVector> latents, std::size_t beam_width) {
  const Vocabulary vocab = model.config().vocab;
  const BeamConfig beam{beam_width, model.config().max_atoms};
  beam.validate();
  std::vector<std::vector<std::uint32_t>> out(latents.size());
  const auto n = static_cast<std::ptrdiff_t>(latents.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t ii = 0; ii < n; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    std::vector<double> zmod = model.atoms.modulate_latent(model.params, latents[i]);
    NextTokenModel next = decoder_model(model.atoms, model.params, zmod);
    const std::vector<Hypothesis> hyps = beam_search(next, vocab, beam);
    auto it = std::find_if(hyps.begin(), hyps.end(), [](const Hypothesis& h) { return !h.species.empty(); });
    if (it != hyps.end()) {
      out[i] = it->species;
    } else {
      // Nothing but immediate stops: take the likeliest first species.
      const std::vector<double> lp = next({{vocab.start()}}).at(0);
      out[i] = {static_cast<std::uint32_t>(std::max_element(lp.begin(), lp.begin() + vocab.species) - lp.begin())};
    }
  }
  return out;
}

std::vector<Material> decode_geometry(const CliqueFlowModel& model, std::span<const LatentVector> latents,
                                      std::vector<std::vector<std::uint32_t>> species, std::size_t flow_steps,
                                      double omega, const Rng& rng) {
  if (species.size() != latents.size()) throw DimensionError("decode_geometry: one species list per latent");
  std::vector<DecodeTask> tasks(latents.size());
  for (std::size_t i = 0; i < latents.size(); ++i) {
    tasks[i].z = latents[i];
    tasks[i].species = std::move(species[i]);
  }
  FlowConfig fcfg;
  fcfg.n_step = flow_steps;
  fcfg.omega = omega;
  const std::vector<Geometry> geoms = integrate(model.flow, model.params, tasks, fcfg, model.prior, rng);
  std::vector<Material> out(latents.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = Material{std::move(tasks[i].species), geoms[i]};
  return out;
}

std::vector<Material> decode_latents(const CliqueFlowModel& model, std::span<const LatentVector> latents,
                                     std::size_t beam_width, std::size_t flow_steps, double omega, const Rng& rng) {
  return decode_geometry(model, latents, decode_species(model, latents, beam_width), flow_steps, omega, rng);
}

std::vector<Discovery> discover(const CliqueFlowModel& model, std::span<const MaterialRecord> records,
                                const DiscoverConfig& cfg, const Rng& rng, DiscoverTiming* timing,
                                OptimizeResult* optimized) {
  if (records.empty()) throw InvariantError("discover: no records");
  using clock = std::chrono::steady_clock;
  std::vector<Material> mats;
  for (const auto& r : records) mats.push_back(r.material);
  const auto t0 = clock::now();
  const std::vector<EncoderOutput> enc = model.encoder.encode_all(model.params, mats);
  std::vector<LatentVector> z0;
  for (const auto& e : enc) z0.push_back(e.mu);
  const Surrogate f = predictor_surrogate(model);
  OptimizeResult opt = optimize(z0, f, cfg.es, rng.split(0), cfg.gradient);

  std::vector<std::size_t> keep(records.size());
  std::iota(keep.begin(), keep.end(), 0);
  if (cfg.filter) {
    std::vector<double> last;
    for (const auto& t : opt.trace) last.push_back(t.back());
    keep = top_k_indices(last, cfg.es.top_k_percent);
  }
  std::vector<LatentVector> chosen;
  for (std::size_t i : keep) chosen.push_back(opt.latents[i]);
  const auto t1 = clock::now();
  const std::vector<Material> decoded = decode_latents(model, chosen, cfg.beam_width, cfg.flow_steps, cfg.omega,
                                                       rng.split(1));
  const auto t2 = clock::now();
  if (timing) {
    timing->mbo_seconds = std::chrono::duration<double>(t1 - t0).count();
    timing->decode_seconds = std::chrono::duration<double>(t2 - t1).count();
  }
  if (optimized) *optimized = opt;

  std::vector<Discovery> out;
  for (std::size_t j = 0; j < keep.size(); ++j) {
    const std::size_t i = keep[j];
    out.push_back({i, decoded[j], opt.trace[i].front(), opt.trace[i].back(), opt.latents[i]});
  }
  return out;
}

LatentVector interpolate_latent(std::span<const double> z0, std::span<const double> z1, double t) {
  if (z0.size() != z1.size()) throw DimensionError("interpolate_latent: size mismatch");
  LatentVector out(z0.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = (1.0 - t) * z0[k] + t * z1[k];
  return out;
}

LatentVector interpolate_clique(std::span<const double> z0, std::span<const double> z1, const CliqueShape& shape,
                                std::size_t c, double t) {
  if (z0.size() != shape.d_z() || z1.size() != shape.d_z()) throw DimensionError("interpolate_clique: size mismatch");
  if (c >= shape.n_cliques) throw DimensionError("interpolate_clique: clique index out of range");
  LatentVector out(z0.begin(), z0.end());
  for (std::size_t col = 0; col < shape.d_clique; ++col) {
    const std::size_t k = shape.latent_index(c, col);
    out[k] = (1.0 - t) * z0[k] + t * z1[k];
  }
  return out;
}

}  // namespace cliqueflow
