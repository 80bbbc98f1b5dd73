#include <algorithm>
#include <cmath>
#include <numbers>

#include <doctest.h>

#include "cliqueflow/error.hpp"
#include "cliqueflow/flow.hpp"
#include "cliqueflow/model.hpp"
#include "cliqueflow/nn/adam.hpp"
#include "cliqueflow/nn/ops.hpp"
#include "gradcheck.hpp"

using namespace cliqueflow;

namespace {

ModelConfig tiny() {
  ModelConfig mc;
  mc.transformer.d_model = 16;
  mc.transformer.n_heads = 2;
  mc.transformer.mlp_dim = 16;
  mc.transformer.n_blocks = 1;
  mc.max_atoms = 8;
  mc.vocab.species = 5;
  return mc;
}

// Gives every parameter a nonzero value so zero-initialised paths are exercised.
void randomize(nn::ParameterStore& ps, std::uint64_t seed, double scale = 0.2) {
  Rng r(seed);
  ps.for_each([&](nn::Parameter& p) {
    for (auto& v : p.value.values()) v = scale * r.normal();
  });
}

Material random_material(std::size_t n, std::uint64_t seed) {
  Rng r(seed);
  Material m;
  for (std::size_t i = 0; i < n; ++i) m.species.push_back(static_cast<std::uint32_t>(r.index(5)));
  m.geometry = sample_prior(n, LengthPrior{{0.9, 0.9, 0.9}, {0.1, 0.1, 0.1}}, r);
  return m;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Kolmogorov-Smirnov statistic of samples against a CDF.
template <typename Cdf>
double ks_statistic(std::vector<double> xs, Cdf cdf) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = cdf(xs[i]);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  return d;
}

}  // namespace

TEST_CASE("length prior fit") {
  std::vector<Material> same(3, random_material(4, 1));
  for (auto& m : same) m.geometry.lengths = {std::exp(1.0) * std::cbrt(4.0), 2.0, 2.0};
  const LengthPrior p = fit_length_prior(same);
  CHECK(p.mean[0] == doctest::Approx(1.0));
  CHECK(p.stddev[0] == kPriorStdFloor);

  Rng r(5);
  std::vector<Material> drawn;
  const LengthPrior truth{{0.5, 0.5, 0.5}, {0.2, 0.2, 0.2}};
  for (int i = 0; i < 4000; ++i) {
    const std::size_t n = 1 + r.index(8);
    drawn.push_back(Material{std::vector<std::uint32_t>(n, 0), sample_prior(n, truth, r)});
  }
  const LengthPrior fit = fit_length_prior(drawn);
  for (int k = 0; k < 3; ++k) {
    CHECK(std::abs(fit.mean[k] - 0.5) < 3 * 0.2 / std::sqrt(4000.0));
    CHECK(std::abs(fit.stddev[k] - 0.2) < 0.02);
  }
  const std::vector<Material> two{random_material(2, 3), random_material(5, 4)};
  CHECK(std::isfinite(fit_length_prior(two).mean[0]));
  CHECK_THROWS_AS(fit_length_prior(std::span<const Material>(two.data(), 1)), InvariantError);
}

TEST_CASE("prior samples: ranges, density invariance, degenerate prior") {
  const LengthPrior prior{{0.9, 0.9, 0.9}, {0.15, 0.15, 0.15}};
  Rng r(8);
  std::vector<double> mean_density;
  for (std::size_t n : {2, 8, 20}) {
    double acc = 0.0;
    for (int i = 0; i < 10000; ++i) {
      const Geometry g = sample_prior(n, prior, r);
      for (double a : g.angles) REQUIRE((a > std::numbers::pi / 3 && a < 2 * std::numbers::pi / 3));
      for (const auto& p : g.positions)
        for (double x : p) REQUIRE((x >= 0.0 && x < 1.0));
      REQUIRE(g.atom_count() == n);
      acc += static_cast<double>(n) / volume(g);
    }
    mean_density.push_back(acc / 10000);
  }
  const auto [lo, hi] = std::minmax_element(mean_density.begin(), mean_density.end());
  CHECK((*hi - *lo) / *lo < 0.05);

  const LengthPrior flat{{0.3, 0.3, 0.3}, {kPriorStdFloor, kPriorStdFloor, kPriorStdFloor}};
  const Geometry g = sample_prior(1, flat, r);
  for (double l : g.lengths) CHECK(l == doctest::Approx(std::exp(0.3)).epsilon(1e-4));
}

TEST_CASE("time sampling distribution") {
  const std::size_t n = 100000;
  const double crit = 1.628 / std::sqrt(static_cast<double>(n));  // 1% level
  for (double eps : {1.0, 0.1}) {
    FlowConfig cfg;
    cfg.eps_mix = eps;
    Rng r(17);
    std::vector<double> ts(n);
    for (auto& t : ts) {
      t = sample_time(cfg, r);
      REQUIRE((t >= 0.0 && t <= 1.0));
    }
    const double d = ks_statistic(ts, [eps](double t) {
      const double logit = std::log(t / (1.0 - t));
      return (1.0 - eps) * normal_cdf(logit) + eps * t;
    });
    CHECK(d < crit);
  }
  FlowConfig pure;
  pure.eps_mix = 0.0;
  Rng r(3);
  std::vector<double> ts(n);
  for (auto& t : ts) t = sample_time(pure, r);
  std::nth_element(ts.begin(), ts.begin() + n / 2, ts.end());
  CHECK(std::abs(ts[n / 2] - 0.5) < 0.01);
}

TEST_CASE("geometry interpolation") {
  Geometry a, b;
  a.lengths = {2, 2, 2};
  b.lengths = {4, 4, 4};
  a.angles = b.angles = {1.5, 1.5, 1.5};
  a.positions = {{0.1, 0.2, 0.3}};
  b.positions = {{0.9, 0.8, 0.7}};
  CHECK(interpolate(a, b, 0.0) == a);
  CHECK(interpolate(a, b, 1.0) == b);
  CHECK(interpolate(a, b, 0.5).lengths == Vec3{3, 3, 3});
  b.positions.push_back({0, 0, 0});
  CHECK_THROWS_AS(interpolate(a, b, 0.5), DimensionError);
}

TEST_CASE("euler integration and guidance") {
  std::vector<double> x{1.0, -2.0, 0.25};
  const std::vector<double> v{0.5, 3.0, -1.0};
  for (std::size_t steps : {1, 7, 1000}) {
    std::vector<double> y = x;
    euler_integrate(y, steps, [&](double, std::span<const double>, std::span<double> out) {
      std::copy(v.begin(), v.end(), out.begin());
    });
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(x[i] + v[i]).epsilon(1e-12));
  }

  for (double x0 : {1.0, -3.0, 0.01}) {
    std::vector<double> y{x0};
    euler_integrate(y, 1000, [](double, std::span<const double> s, std::span<double> out) { out[0] = -s[0]; });
    const double analytic = x0 * std::exp(-1.0);
    const double bound = std::abs(std::exp(-1.0) - std::pow(1.0 - 1e-3, 1000)) * std::abs(x0);
    CHECK(std::abs(y[0] - analytic) <= bound * (1 + 1e-9));
    CHECK(std::abs(y[0] - analytic) < 2e-4 * std::abs(x0));
  }

  std::vector<double> y{1.0};
  CHECK_THROWS_AS(euler_integrate(y, 10, [](double, std::span<const double>, std::span<double> out) {
                    out[0] = std::numeric_limits<double>::infinity();
                  }),
                  NonFiniteError);

  const std::vector<double> c{0.3, -1.7}, u{9.0, 2.0};
  std::vector<double> out(2);
  guided_velocity(c, u, 0.0, out);
  CHECK(out == c);
  guided_velocity(c, u, 2.0, out);
  CHECK(out[0] == doctest::Approx(3 * 0.3 - 2 * 9.0));
}

TEST_CASE("velocity: shapes, latent independence without cross values, time-MLP gradient") {
  const ModelConfig mc = tiny();
  nn::ParameterStore ps;
  Rng rng(2);
  GeometryFlow flow(ps, mc, rng);
  randomize(ps, 4);

  for (std::size_t n : {1, 3, 8}) {
    std::vector<Material> ms{random_material(n, 10 + n), random_material(std::max<std::size_t>(1, n - 1), 20 + n)};
    const MaterialBatch batch = MaterialBatch::build(std::span<const Material>(ms), mc.vocab);
    nn::Graph g(false);
    nn::Context ctx{g, ps};
    const nn::Tensor Z = testutil::random_tensor(2 * mc.shape.n_cliques, mc.shape.d_clique, 3);
    const Velocity v = flow.velocity(ctx, flow_state(batch), std::vector<double>{0.2, 0.7}, batch,
                                     flow.latent_memory(ctx, g.input(Z)));
    CHECK(g.value(v.lengths).shape() == nn::Shape{2, 3});
    CHECK(g.value(v.angles).shape() == nn::Shape{2, 3});
    CHECK(g.value(v.positions).shape() == nn::Shape{2 * n, 3});
  }

  std::vector<Material> ms{random_material(4, 1)};
  const MaterialBatch batch = MaterialBatch::build(std::span<const Material>(ms), mc.vocab);
  auto run = [&](const nn::ParameterStore& params, std::uint64_t zseed) {
    nn::Graph g(false);
    nn::Context ctx{g, params};
    const nn::Tensor Z = testutil::random_tensor(mc.shape.n_cliques, mc.shape.d_clique, zseed);
    const Velocity v = flow.velocity(ctx, flow_state(batch), std::vector<double>{0.4}, batch,
                                     flow.latent_memory(ctx, g.input(Z)));
    return g.value(v.positions);
  };
  CHECK(run(ps, 1) != run(ps, 2));
  nn::ParameterStore cut = ps;
  for (const auto& name : cut.names())
    if (name.find(".cross.") != std::string::npos &&
        (name.ends_with(".v.w") || name.ends_with(".v.b")))
      cut.get(name).value.fill(0.0);
  CHECK(run(cut, 1) == run(cut, 2));

  // Mean squared output against the time-embedding MLP parameters.
  auto objective = [&](const nn::ParameterStore& params, nn::Graph& g) {
    nn::Context ctx{g, params};
    const nn::Tensor Z = testutil::random_tensor(mc.shape.n_cliques, mc.shape.d_clique, 5);
    const Velocity v = flow.velocity(ctx, flow_state(batch), std::vector<double>{0.4}, batch,
                                     flow.latent_memory(ctx, g.input(Z)));
    nn::Var s = nn::add(g, nn::add(g, nn::mean(g, nn::square(g, v.lengths)), nn::mean(g, nn::square(g, v.angles))),
                        nn::mean(g, nn::square(g, v.positions)));
    return s;
  };
  nn::ParameterStore only_time;
  for (const auto& name : ps.names())
    if (name.rfind(flow.time_mlp_prefix(), 0) == 0) only_time.add(name, ps.get(name).value);
  REQUIRE(only_time.count() > 0);
  nn::Graph g;
  nn::Var loss = objective(ps, g);
  g.backward(loss);
  ps.zero_grad();
  g.accumulate_param_grads(ps);
  const double h = 1e-6;
  for (const auto& name : only_time.names()) {
    nn::Parameter& p = ps.get(name);
    for (std::size_t k = 0; k < p.value.size(); k += std::max<std::size_t>(1, p.value.size() / 5)) {
      const double keep = p.value[k];
      p.value[k] = keep + h;
      nn::Graph gp(false);
      const double up = gp.value(objective(ps, gp)).item();
      p.value[k] = keep - h;
      nn::Graph gm(false);
      const double down = gm.value(objective(ps, gm)).item();
      p.value[k] = keep;
      const double fd = (up - down) / (2 * h);
      CHECK(p.grad[k] == doctest::Approx(fd).epsilon(1e-4).scale(1e-6));
    }
  }
}

TEST_CASE("flow loss oracles") {
  const ModelConfig mc = tiny();
  nn::ParameterStore ps;
  Rng rng(7);
  GeometryFlow flow(ps, mc, rng);
  // Zero the output layers: every velocity is exactly zero.
  for (const auto& name : ps.names())
    if (name.rfind("flow.out_", 0) == 0 && name.find(".out.") != std::string::npos) ps.get(name).value.fill(0.0);

  std::vector<Material> ms{random_material(3, 1), random_material(5, 2)};
  const MaterialBatch batch = MaterialBatch::build(std::span<const Material>(ms), mc.vocab);
  const LengthPrior prior{{0.9, 0.9, 0.9}, {0.1, 0.1, 0.1}};
  const FlowConfig fc;
  for (double t : {0.0, 0.5, 1.0}) {
    std::vector<Rng> rngs{Rng(1), Rng(2)};
    FlowDraw draw = draw_flow_inputs(batch, prior, fc, rngs);
    draw.t = {t, t};
    const FlowState g1 = flow_state(batch);
    const FlowState gt = interpolate(draw.g0, g1, draw.t, batch.width);
    nn::Graph g(false);
    nn::Context ctx{g, ps};
    const nn::Tensor Z = testutil::random_tensor(2 * mc.shape.n_cliques, mc.shape.d_clique, 3);
    const Velocity v = flow.velocity(ctx, gt, draw.t, batch, flow.latent_memory(ctx, g.input(Z)));
    FlowState target{g1.lengths, g1.angles, g1.positions};
    for (std::size_t i = 0; i < target.lengths.size(); ++i) target.lengths[i] -= draw.g0.lengths[i];
    for (std::size_t i = 0; i < target.angles.size(); ++i) target.angles[i] -= draw.g0.angles[i];
    for (std::size_t i = 0; i < target.positions.size(); ++i) target.positions[i] -= draw.g0.positions[i];
    const nn::Tensor& loss = g.value(flow_loss_terms(g, v, target, batch, fc.tau_pos));
    for (std::size_t b = 0; b < 2; ++b) {
      double expect = 0.0;
      for (int k = 0; k < 3; ++k) {
        expect += std::pow(target.lengths(b, k), 2) + std::pow(target.angles(b, k), 2);
        for (std::size_t i = 0; i < ms[b].atom_count(); ++i)
          expect += fc.tau_pos * std::pow(target.positions(b * batch.width + i, k), 2);
      }
      CHECK(std::isfinite(loss[b]));
      CHECK(loss[b] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("integration: guidance identity and non-finite detection") {
  const ModelConfig mc = tiny();
  nn::ParameterStore ps;
  Rng rng(3);
  GeometryFlow flow(ps, mc, rng);
  randomize(ps, 9, 0.05);
  const LengthPrior prior{{0.9, 0.9, 0.9}, {0.1, 0.1, 0.1}};
  std::vector<DecodeTask> tasks(3);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    Rng r(40 + i);
    tasks[i].z.resize(mc.shape.d_z());
    r.fill_normal(tasks[i].z);
    tasks[i].species.assign(1 + i, 2);
  }
  FlowConfig fc;
  fc.n_step = 5;
  fc.omega = 0.0;
  const auto a = integrate(flow, ps, tasks, fc, prior, Rng(1));
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    CHECK(a[i].atom_count() == tasks[i].species.size());
    validate(a[i]);
  }
  fc.omega = 2.0;
  const auto b = integrate(flow, ps, tasks, fc, prior, Rng(1));
  CHECK(b[1].lengths != a[1].lengths);

  std::vector<DecodeTask> empty{{tasks[0].z, {}}};
  CHECK_THROWS_AS(integrate(flow, ps, empty, fc, prior, Rng(1)), InvariantError);
  for (const auto& name : ps.names())
    if (name.rfind("flow.out_len", 0) == 0 && name.ends_with(".out.b")) ps.get(name).value.fill(1e308);
  CHECK_THROWS_AS(integrate(flow, ps, tasks, fc, prior, Rng(1)), NonFiniteError);
}

TEST_CASE("a small flow learns a 1-D Gaussian") {
  // Source N(0,1), target N(m, s^2), straight-line matching with an MLP v(x, t).
  const double m = 2.0, s = 0.5;
  nn::ParameterStore ps;
  Rng init(1);
  nn::Mlp net(ps, "v", 2, 64, 2, 1, init);
  nn::Adam adam(nn::AdamHyper{3e-3});
  Rng data(2);
  const std::size_t B = 128;
  for (int step = 0; step < 3000; ++step) {
    nn::Tensor in = nn::Tensor::matrix(B, 2), target = nn::Tensor::matrix(B, 1);
    for (std::size_t b = 0; b < B; ++b) {
      const double x0 = data.normal(), x1 = m + s * data.normal(), t = data.uniform();
      in(b, 0) = (1 - t) * x0 + t * x1;
      in(b, 1) = t;
      target(b, 0) = x1 - x0;
    }
    nn::Graph g;
    nn::Context ctx{g, ps};
    nn::Var loss = nn::mean(g, nn::square(g, nn::sub(g, net(ctx, g.input(in)), g.constant(target))));
    g.backward(loss);
    ps.zero_grad();
    g.accumulate_param_grads(ps);
    adam.step(ps);
  }
  std::vector<double> xs(4000);
  Rng src(3);
  for (auto& x : xs) x = src.normal();
  euler_integrate(xs, 100, [&](double t, std::span<const double> x, std::span<double> v) {
    nn::Tensor in = nn::Tensor::matrix(x.size(), 2);
    for (std::size_t i = 0; i < x.size(); ++i) {
      in(i, 0) = x[i];
      in(i, 1) = t;
    }
    nn::Graph g(false);
    nn::Context ctx{g, ps};
    const nn::Tensor& out = g.value(net(ctx, g.input(in)));
    std::copy(out.values().begin(), out.values().end(), v.begin());
  });
  double mean = 0.0, var = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size());
  CHECK(std::abs(mean - m) < 0.1 * m);
  CHECK(std::abs(std::sqrt(var) - s) < 0.1 * s);
}
