#include <doctest.h>

#include "cliqueflow/error.hpp"
#include "cliqueflow/nn/layers.hpp"
#include "gradcheck.hpp"

using namespace cliqueflow;
using namespace cliqueflow::nn;
using testutil::random_tensor;

namespace {

TransformerConfig tiny() {
  TransformerConfig c;
  c.d_model = 8;
  c.n_blocks = 2;
  c.n_heads = 2;
  c.mlp_dim = 12;
  c.n_mlp = 1;
  c.dropout = 0.0;
  return c;
}

// Gives every parameter a random value so zero-initialised maps are exercised.
void randomize(ParameterStore& ps, std::uint64_t seed) {
  Rng rng(seed);
  ps.for_each([&](Parameter& p) {
    for (auto& v : p.value.values()) v = 0.3 * rng.normal();
  });
}

}  // namespace

TEST_CASE("adaptive layer norm starts as plain layer norm") {
  ParameterStore ps;
  Rng rng(1);
  AdaLayerNorm ada(ps, "ada", 6, 4, rng);
  Graph g(false);
  Context ctx{g, ps};
  auto h = random_tensor(3, 6, 2);
  auto cond = random_tensor(3, 4, 3);
  const Tensor& out = g.value(ada(ctx, g.input(h), g.input(cond)));
  const Tensor& ref = g.value(layer_norm(g, g.input(h)));
  CHECK(out == ref);
}

TEST_CASE("cross attention with zero value projection is the identity") {
  ParameterStore ps;
  Rng rng(4);
  CrossAttention cross(ps, "x", 8, 2, rng);
  randomize(ps, 5);
  ps.get(cross.attention().value_proj().weight_name()).value.fill(0.0);
  ps.get(cross.attention().value_proj().bias_name()).value.fill(0.0);
  Graph g(false);
  Context ctx{g, ps};
  auto h = random_tensor(2 * 3, 8, 6);
  auto mem = random_tensor(2 * 4, 8, 7);
  SequenceLayout s{2, 3, {}, false};
  CHECK(g.value(cross(ctx, g.input(h), s, g.input(mem), 4)) == h);
  CHECK_THROWS_AS(cross(ctx, g.input(h), s, g.input(Tensor::matrix(0, 8)), 0), DimensionError);
}

TEST_CASE("linear and mlp shapes") {
  ParameterStore ps;
  Rng rng(8);
  Mlp mlp(ps, "m", 3, 10, 2, 5, rng);
  CHECK(ps.contains("m.l0.w"));
  CHECK(ps.contains("m.l1.b"));
  CHECK(ps.contains("m.out.w"));
  Graph g(false);
  Context ctx{g, ps};
  const Tensor& y = g.value(mlp(ctx, g.input(random_tensor(7, 3, 9))));
  CHECK(y.rows() == 7);
  CHECK(y.cols() == 5);
}

TEST_CASE("transformer parameter gradients match finite differences") {
  for (bool cross : {false, true}) {
    ParameterStore ps;
    Rng rng(10);
    auto cfg = tiny();
    Transformer tf(ps, "tf", cfg, cross, rng);
    AttentionPool pool(ps, "pool", cfg.d_model, cfg.n_heads, rng);
    randomize(ps, 11);
    auto h = random_tensor(2 * 4, 8, 12);
    auto cond = random_tensor(2 * 4, 8, 13);
    auto mem = random_tensor(2 * 3, 8, 14);
    SequenceLayout s{2, 4, {1, 1, 1, 0, 1, 1, 1, 1}, false};
    auto f = [&](Graph& g) {
      Context ctx{g, ps};
      Var out = tf(ctx, g.input(h), g.input(cond), s, cross ? std::optional<Var>(g.input(mem)) : std::nullopt, 3);
      Var pooled = pool(ctx, out, s);
      return sum(g, mul(g, pooled, g.constant(random_tensor(2, 8, 15))));
    };
    CHECK(testutil::param_gradcheck(ps, f, 4) < 1e-5);
  }
}

TEST_CASE("masked positions never influence pooled output") {
  ParameterStore ps;
  Rng rng(16);
  auto cfg = tiny();
  Transformer tf(ps, "tf", cfg, false, rng);
  AttentionPool pool(ps, "pool", cfg.d_model, cfg.n_heads, rng);
  randomize(ps, 17);
  auto h = random_tensor(5, 8, 18);
  auto cond = random_tensor(5, 8, 19);
  SequenceLayout s{1, 5, {1, 1, 1, 0, 0}, false};
  auto run = [&](const Tensor& x) {
    Graph g(false);
    Context ctx{g, ps};
    return g.value(pool(ctx, tf(ctx, g.input(x), g.input(cond), s), s));
  };
  Tensor a = run(h);
  Tensor h2 = h;
  for (std::size_t c = 0; c < 8; ++c) h2(4, c) = 100.0;
  Tensor b = run(h2);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("config validation") {
  auto c = tiny();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
