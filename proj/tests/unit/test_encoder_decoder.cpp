#include <cmath>
#include <functional>
#include <limits>

#include <doctest.h>

#include "cliqueflow/error.hpp"
#include "cliqueflow/model.hpp"
#include "cliqueflow/nn/adam.hpp"
#include "cliqueflow/nn/ops.hpp"

using namespace cliqueflow;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

ModelConfig tiny() {
  ModelConfig mc;
  mc.transformer.d_model = 16;
  mc.transformer.n_heads = 2;
  mc.transformer.mlp_dim = 16;
  mc.transformer.n_blocks = 1;
  mc.max_atoms = 20;
  mc.vocab.species = 6;
  return mc;
}

void randomize(nn::ParameterStore& ps, std::uint64_t seed, double scale = 0.2) {
  Rng r(seed);
  ps.for_each([&](nn::Parameter& p) {
    for (auto& v : p.value.values()) v = scale * r.normal();
  });
}

Material random_material(std::size_t n, std::uint64_t seed, std::size_t species = 6) {
  Rng r(seed);
  Material m;
  for (std::size_t i = 0; i < n; ++i) m.species.push_back(static_cast<std::uint32_t>(r.index(species)));
  m.geometry = sample_prior(n, LengthPrior{{0.9, 0.9, 0.9}, {0.1, 0.1, 0.1}}, r);
  return m;
}

// Deterministic random next-token model over `species` tokens plus Stop.
NextTokenModel random_model(const Vocabulary& vocab, std::uint64_t seed) {
  return [vocab, seed](const std::vector<std::vector<std::size_t>>& prefixes) {
    std::vector<std::vector<double>> out;
    for (const auto& p : prefixes) {
      std::uint64_t h = seed;
      for (std::size_t t : p) h = h * 1000003ULL + t + 1;
      Rng r(h, 77);
      std::vector<double> logits(vocab.size(), kNegInf);
      double mx = kNegInf;
      for (std::size_t t = 0; t <= vocab.stop(); ++t) {
        if (t == vocab.start()) continue;
        logits[t] = 2.0 * r.normal();
        mx = std::max(mx, logits[t]);
      }
      double z = 0.0;
      for (double l : logits)
        if (l != kNegInf) z += std::exp(l - mx);
      for (double& l : logits)
        if (l != kNegInf) l = l - mx - std::log(z);
      out.push_back(std::move(logits));
    }
    return out;
  };
}

struct Best {
  std::vector<std::uint32_t> species;
  double score = kNegInf;
};

// Every sequence of length 0..L-1 ending in Stop and every length-L sequence (truncated, no Stop term).
void enumerate(const NextTokenModel& model, const Vocabulary& vocab, std::size_t L, std::vector<std::size_t>& prefix,
               double score, Best& best) {
  const auto lp = model({prefix}).at(0);
  const std::size_t len = prefix.size() - 1;
  if (len == L) {
    if (score > best.score) best = {std::vector<std::uint32_t>(prefix.begin() + 1, prefix.end()), score};
    return;
  }
  if (score + lp[vocab.stop()] > best.score)
    best = {std::vector<std::uint32_t>(prefix.begin() + 1, prefix.end()), score + lp[vocab.stop()]};
  for (std::size_t t = 0; t < vocab.species; ++t) {
    prefix.push_back(t);
    enumerate(model, vocab, L, prefix, score + lp[t], best);
    prefix.pop_back();
  }
}

}  // namespace

TEST_CASE("encoder inputs and outputs") {
  const ModelConfig mc = tiny();
  nn::ParameterStore ps;
  Rng rng(1);
  Encoder enc(ps, mc, rng);
  randomize(ps, 2);

  Material a = random_material(5, 3), b = a;
  for (auto& s : b.species) s = (s + 1) % 6;
  std::vector<Material> ms{a, b};
  const MaterialBatch batch = MaterialBatch::build(std::span<const Material>(ms), mc.vocab);
  nn::Graph g(false);
  nn::Context ctx{g, ps};
  const EncoderInputs in = enc.embed_inputs(ctx, batch);
  CHECK(g.value(enc.stack_inputs(ctx, in, batch)).rows() == 2 * 7);
  const nn::Tensor& pos = g.value(in.h_pos);
  const nn::Tensor& atom = g.value(in.h_atom);
  bool pos_same = true, atom_same = true;
  for (std::size_t c = 0; c < pos.cols(); ++c)
    for (std::size_t i = 0; i < 5; ++i) {
      pos_same = pos_same && pos(i, c) == pos(5 + i, c);
      atom_same = atom_same && atom(i, c) == atom(5 + i, c);
    }
  CHECK(pos_same);
  CHECK_FALSE(atom_same);
  CHECK(g.value(in.h_len).rows() == 2);

  for (std::size_t n = 1; n <= mc.max_atoms; ++n) {
    const Material m = random_material(n, 100 + n);
    const EncoderOutput out = enc.encode(ps, m);
    REQUIRE(out.mu.size() == 121);
    REQUIRE(out.log_sigma.size() == 121);
    for (double x : out.log_sigma) REQUIRE((x >= kLogSigmaMin && x <= kLogSigmaMax));
    const EncoderOutput again = enc.encode(ps, m);
    CHECK(again.mu == out.mu);
  }

  std::vector<Material> many;
  for (std::size_t i = 0; i < 30; ++i) many.push_back(random_material(1 + i % 9, 500 + i));
  const auto all = enc.encode_all(ps, many, 8);
  for (std::size_t i = 0; i < many.size(); ++i) {
    const auto one = enc.encode(ps, many[i]);
    for (std::size_t k = 0; k < one.mu.size(); k += 10) CHECK(all[i].mu[k] == doctest::Approx(one.mu[k]).epsilon(1e-10));
  }
}

TEST_CASE("latent sampling") {
  EncoderOutput out{LatentVector(121, 0.5), LatentVector(121, kLogSigmaMin)};
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    const auto z = sample_latent(out, rng);
    for (double x : z) CHECK(std::abs(x - 0.5) < 4e-4 * 5);  // |eps| below 5 in practice
  }
  out.log_sigma.assign(121, std::log(0.7));
  std::vector<double> mean(121, 0.0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto z = sample_latent(out, rng);
    for (std::size_t k = 0; k < z.size(); ++k) mean[k] += z[k] / n;
  }
  for (double m : mean) CHECK(std::abs(m - 0.5) < 3 * 0.7 / std::sqrt(double(n)) * 1.5);

  Rng first(9), second(9);
  CHECK(sample_latent(out, first) == sample_latent(out, second));

  // Reparameterization: dz/dmu = 1, dz/dlog_sigma = z - mu.
  nn::Graph g;
  nn::Var mu = g.input(nn::Tensor::row({0.1, -0.3}));
  nn::Var ls = g.input(nn::Tensor::row({0.2, -1.0}));
  const nn::Tensor eps = nn::Tensor::row({0.7, -1.3});
  nn::Var z = sample_latent(g, EncodedBatch{mu, ls}, eps);
  g.backward(nn::sum(g, z));
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(g.grad(mu)[k] == doctest::Approx(1.0));
    CHECK(g.grad(ls)[k] == doctest::Approx(g.value(z)[k] - g.value(mu)[k]));
  }
}

TEST_CASE("latent modulation") {
  const ModelConfig mc = tiny();
  nn::ParameterStore ps;
  Rng rng(5);
  AtomDecoder dec(ps, mc, rng);
  Rng probe(6);
  for (int trial = 0; trial < 5; ++trial) {
    LatentVector z(121);
    probe.fill_normal(z);
    const auto m = dec.modulate_latent(ps, z);
    double mean = 0, var = 0;
    for (double x : m) mean += x / m.size();
    for (double x : m) var += (x - mean) * (x - mean) / m.size();
    CHECK(std::abs(mean) < 1e-9);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    LatentVector z2 = z;
    for (double& x : z2) x *= 2;
    CHECK(dec.modulate_latent(ps, z2) != m);
    CHECK(dec.modulate_latent(ps, z) == m);
  }
}

TEST_CASE("next-token distributions") {
  const ModelConfig mc = tiny();
  const Vocabulary v = mc.vocab;
  nn::ParameterStore ps;
  Rng rng(7);
  AtomDecoder dec(ps, mc, rng);
  randomize(ps, 8);
  LatentVector z(121);
  Rng(9).fill_normal(z);
  const auto zmod = dec.modulate_latent(ps, z);
  const std::vector<std::vector<std::size_t>> prefixes{{v.start()}, {v.start(), 2, 2, 5}, {v.start(), 0}};
  const auto lps = dec.next_token_logprobs(ps, zmod, prefixes);
  for (const auto& lp : lps) {
    double total = 0.0;
    for (double x : lp) total += std::exp(x);
    CHECK(std::abs(total - 1.0) < 1e-9);
    CHECK(lp[v.pad()] == kNegInf);
    CHECK(lp[v.start()] == kNegInf);
  }
  CHECK_THROWS_AS(dec.next_token_logprobs(ps, zmod, {{2, 3}}), InvariantError);
  CHECK_THROWS_AS(dec.next_token_logprobs(ps, zmod, {{v.start(), v.pad()}}), InvariantError);

  // Causality: rows up to k ignore tokens after k.
  nn::Graph g(false);
  nn::Context ctx{g, ps};
  nn::Var zm = g.input(nn::Tensor::row(zmod));
  nn::Var zz = nn::concat_rows(g, std::vector<nn::Var>{zm, zm});
  const std::size_t L = 6;
  std::vector<std::size_t> toks{v.start(), 1, 2, 3, 4, 5, v.start(), 1, 2, 0, 0, 0};
  const nn::Tensor& out = g.value(dec.logprobs(ctx, zz, toks, L, {L, L}));
  for (std::size_t pos = 0; pos < 3; ++pos)
    for (std::size_t t = 0; t < v.size(); ++t) CHECK(out(pos, t) == out(L + pos, t));
  bool later_differs = false;
  for (std::size_t t = 0; t < v.size(); ++t) later_differs = later_differs || out(4, t) != out(L + 4, t);
  CHECK(later_differs);

  // All-zero parameters: uniform over species and Stop.
  nn::ParameterStore zero = ps;
  zero.for_each([](nn::Parameter& p) { p.value.fill(0.0); });
  for (const auto& lp : dec.next_token_logprobs(zero, std::vector<double>(16, 0.0), prefixes))
    for (std::size_t t = 0; t <= v.stop(); ++t)
      if (t != v.start()) CHECK(lp[t] == doctest::Approx(-std::log(double(v.species + 1))));
}

TEST_CASE("atom NLL: uniform closed form and memorization") {
  const ModelConfig mc = tiny();
  nn::ParameterStore ps;
  Rng rng(10);
  AtomDecoder dec(ps, mc, rng);
  ps.for_each([](nn::Parameter& p) { p.value.fill(0.0); });
  std::vector<Material> ms{random_material(3, 1), random_material(7, 2)};
  const MaterialBatch batch = MaterialBatch::build(std::span<const Material>(ms), mc.vocab);
  {
    nn::Graph g(false);
    nn::Context ctx{g, ps};
    nn::Var zm = g.input(nn::Tensor::matrix(2, 16));
    const AtomNll nll = dec.nll(ctx, zm, batch);
    CHECK(nll.per_record[0] == doctest::Approx(4 * std::log(7.0)));
    CHECK(nll.per_record[1] == doctest::Approx(8 * std::log(7.0)));
    CHECK(g.value(nll.total).item() == doctest::Approx(12 * std::log(7.0)));
    CHECK(nll.tokens == 12);
  }

  nn::ParameterStore fresh;
  Rng r2(11);
  AtomDecoder fit(fresh, mc, r2);
  nn::Adam adam(nn::AdamHyper{1e-3});
  const std::vector<Material> one{ms[1]};
  const MaterialBatch b1 = MaterialBatch::build(std::span<const Material>(one), mc.vocab);
  LatentVector z(121, 0.3);
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 200; ++step) {
    nn::Graph g;
    nn::Context ctx{g, fresh};
    const AtomNll nll = fit.nll(ctx, fit.modulate(ctx, g.constant(nn::Tensor::row(z))), b1);
    if (step == 0) first = nll.per_record[0];
    last = nll.per_record[0];
    g.backward(nll.total);
    fresh.zero_grad();
    g.accumulate_param_grads(fresh);
    adam.step(fresh);
  }
  CHECK(last < 0.2 * first);
}

TEST_CASE("beam search: trivial models and greedy reduction") {
  Vocabulary v{3};
  NextTokenModel stop_now = [v](const std::vector<std::vector<std::size_t>>& ps) {
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      std::vector<double> lp(v.size(), kNegInf);
      lp[v.stop()] = 0.0;
      out.push_back(lp);
    }
    return out;
  };
  const auto hyps = beam_search(stop_now, v, BeamConfig{4, 5});
  REQUIRE(!hyps.empty());
  CHECK(hyps[0].species.empty());
  CHECK(hyps[0].stopped);

  // Width 1 follows the best species at each step; Stop completions along the way stay in the pool.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const NextTokenModel m = random_model(v, seed);
    std::vector<std::size_t> prefix{v.start()};
    Best want;
    double score = 0.0;
    while (true) {
      const auto lp = m({prefix}).at(0);
      if (score + lp[v.stop()] > want.score)
        want = {std::vector<std::uint32_t>(prefix.begin() + 1, prefix.end()), score + lp[v.stop()]};
      std::size_t arg = 0;
      for (std::size_t t = 1; t < v.species; ++t)
        if (lp[t] > lp[arg]) arg = t;
      score += lp[arg];
      prefix.push_back(arg);
      if (prefix.size() == 5) {
        if (score > want.score) want = {std::vector<std::uint32_t>(prefix.begin() + 1, prefix.end()), score};
        break;
      }
      if (score <= want.score) break;
    }
    const auto best = beam_search(m, v, BeamConfig{1, 4});
    CHECK(best[0].species == want.species);
    CHECK(best[0].score == doctest::Approx(want.score));
    for (std::size_t i = 1; i < best.size(); ++i) CHECK(best[i - 1].score >= best[i].score);
  }
}

TEST_CASE("beam search matches exhaustive enumeration on small vocabularies") {
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::size_t V = 1 + seed % 4, L = 1 + (seed / 4) % 4;
    Vocabulary v{V};
    const NextTokenModel m = random_model(v, 1000 + seed);
    std::size_t width = 1;
    for (std::size_t i = 0; i < L; ++i) width *= V;
    Best best;
    std::vector<std::size_t> prefix{v.start()};
    enumerate(m, v, L, prefix, 0.0, best);
    const auto hyps = beam_search(m, v, BeamConfig{width, L});
    REQUIRE(!hyps.empty());
    CHECK(hyps[0].species == best.species);
    CHECK(hyps[0].score == doctest::Approx(best.score).epsilon(1e-12));
    ++checked;
  }
  CHECK(checked == 100);
}
