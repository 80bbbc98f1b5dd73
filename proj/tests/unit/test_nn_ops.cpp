#include <cmath>

#include <doctest.h>

#include "cliqueflow/error.hpp"
#include "cliqueflow/nn/ops.hpp"
#include "gradcheck.hpp"

using namespace cliqueflow;
using namespace cliqueflow::nn;
using testutil::gradcheck;
using testutil::random_tensor;

namespace {

// Scalar probe: sum(x * w) with a fixed random w.
Var probe(Graph& g, Var x, std::uint64_t seed = 99) {
  const Tensor& v = g.value(x);
  Tensor w = random_tensor(v.rows(), v.cols(), seed);
  return sum(g, mul(g, x, g.constant(w.reshaped(v.shape()))));
}

constexpr double kTol = 1e-6;

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  auto a = random_tensor(3, 4, 1);
  auto b = random_tensor(3, 4, 2);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, add(g, v[0], v[1])); }, {a, b}) < kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, sub(g, v[0], v[1])); }, {a, b}) < kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, mul(g, v[0], v[1])); }, {a, b}) < kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, scale(g, v[0], -2.5)); }, {a}) < kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, gelu(g, v[0])); }, {a}) < kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, exp(g, v[0])); }, {a}) < kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, square(g, v[0])); }, {a}) < kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, log(g, exp(g, v[0]))); }, {a}) < kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, clamp(g, v[0], -0.5, 0.5)); }, {a}) <
        kTol);
}

TEST_CASE("gelu uses the tanh approximation") {
  Graph g(false);
  Var x = g.input(Tensor::row({-1.0, 0.0, 0.5, 2.0}));
  const Tensor& y = g.value(gelu(g, x));
  for (std::size_t i = 0; i < 4; ++i) {
    const double v = g.value(x)[i];
    const double ref = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
    CHECK(y[i] == doctest::Approx(ref).epsilon(1e-14));
  }
}

TEST_CASE("matrix ops match finite differences") {
  auto x = random_tensor(3, 4, 3);
  auto w = random_tensor(4, 5, 4);
  auto b = random_tensor(1, 5, 5);
  auto row = random_tensor(1, 4, 6);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, matmul(g, v[0], v[1])); }, {x, w}) <
        kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, linear(g, v[0], v[1], v[2])); },
                  {x, w, b}) < kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, add_row(g, v[0], v[1])); }, {x, row}) <
        kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, mul_row(g, v[0], v[1])); }, {x, row}) <
        kTol);
  CHECK(gradcheck(
            [](Graph& g, const std::vector<Var>& v) { return probe(g, scale_rows(g, v[0], {0.5, -1.0, 2.0})); },
            {x}) < kTol);
}

TEST_CASE("layout ops match finite differences") {
  auto x = random_tensor(4, 3, 7);
  auto y = random_tensor(2, 3, 8);
  auto z = random_tensor(4, 2, 9);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, repeat_rows(g, v[0], 3)); }, {x}) <
        kTol);
  CHECK(gradcheck(
            [](Graph& g, const std::vector<Var>& v) {
              std::vector<Var> parts{v[0], v[1], v[0]};
              return probe(g, concat_rows(g, parts));
            },
            {x, y}) < kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, concat_cols(g, v[0], v[1])); }, {x, z}) <
        kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, slice_cols(g, v[0], 1, 2)); }, {x}) <
        kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, gather_rows(g, v[0], {3, 0, 3, 1})); },
                  {x}) < kTol);
  CHECK(gradcheck(
            [](Graph& g, const std::vector<Var>& v) {
              return probe(g, gather(g, v[0], {0, 5, 5, 11, 2, 7}, Shape{3, 2}));
            },
            {x}) < kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, segment_sum(g, v[0], 2)); }, {x}) < kTol);
  CHECK(gradcheck(
            [](Graph& g, const std::vector<Var>& v) {
              return probe(g, weighted_segment_sum(g, v[0], {0.1, 0.2, 0.0, 3.0}, 2));
            },
            {x}) < kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return mean(g, square(g, v[0])); }, {x}) < kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, row_sum(g, v[0])); }, {x}) < kTol);
}

TEST_CASE("layer norm normalizes rows and matches finite differences") {
  auto x = random_tensor(3, 6, 10, 3.0);
  Graph g(false);
  const Tensor& y = g.value(layer_norm(g, g.input(x)));
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, s = 0;
    for (std::size_t c = 0; c < 6; ++c) m += y(r, c) / 6;
    for (std::size_t c = 0; c < 6; ++c) s += (y(r, c) - m) * (y(r, c) - m) / 6;
    CHECK(m == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
  }
  auto sc = random_tensor(1, 6, 11);
  auto sh = random_tensor(1, 6, 12);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, layer_norm(g, v[0])); }, {x}) < kTol);
  CHECK(gradcheck([](Graph& g, const std::vector<Var>& v) { return probe(g, layer_norm(g, v[0], v[1], v[2])); },
                  {x, sc, sh}) < kTol);
}

TEST_CASE("masked log softmax") {
  auto x = random_tensor(3, 5, 13);
  std::vector<bool> allowed{true, false, true, true, false};
  Graph g(false);
  const Tensor& y = g.value(log_softmax(g, g.input(x), allowed));
  for (std::size_t r = 0; r < 3; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      if (allowed[c]) total += std::exp(y(r, c));
      else CHECK(std::isinf(y(r, c)));
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(gradcheck(
            [allowed](Graph& g, const std::vector<Var>& v) {
              return pick(g, log_softmax(g, v[0], allowed), {0, 2, 3}, {1.0, 0.5, 2.0});
            },
            {x}) < kTol);
}

TEST_CASE("dropout is identity outside training and inverted inside") {
  auto x = random_tensor(50, 40, 14);
  Rng rng(3);
  Graph g(false);
  Var in = g.input(x);
  CHECK(g.value(dropout(g, in, 0.3, rng, false)) == x);
  const Tensor& y = g.value(dropout(g, in, 0.3, rng, true));
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (y[i] == 0.0) ++zeros;
    else CHECK(y[i] == doctest::Approx(x[i] / 0.7));
  }
  CHECK(static_cast<double>(zeros) / x.size() == doctest::Approx(0.3).epsilon(0.15));
}

TEST_CASE("backward rejects non-scalar losses and resets on repeat") {
  Graph g;
  Var x = g.input(Tensor::row({1.0, 2.0}));
  CHECK_THROWS_AS(g.backward(x), Error);
  Var l = sum(g, square(g, x));
  g.backward(l);
  const Tensor first = g.grad(x);
  g.backward(l);
  CHECK(g.grad(x) == first);
  CHECK(first[1] == doctest::Approx(4.0));
}

namespace {

AttentionLayout layout(std::size_t batch, std::size_t lq, std::size_t lk, std::size_t heads, bool causal = false,
                       std::vector<char> mask = {}) {
  AttentionLayout a;
  a.batch = batch;
  a.query_len = lq;
  a.key_len = lk;
  a.heads = heads;
  a.causal = causal;
  a.key_mask = std::move(mask);
  return a;
}

// Plain per-head softmax attention used as a reference.
Tensor reference_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionLayout& a) {
  const std::size_t d = q.cols(), dh = d / a.heads;
  Tensor out = Tensor::matrix(q.rows(), d);
  for (std::size_t b = 0; b < a.batch; ++b)
    for (std::size_t h = 0; h < a.heads; ++h)
      for (std::size_t i = 0; i < a.query_len; ++i) {
        std::vector<double> s(a.key_len, -INFINITY);
        double mx = -INFINITY;
        for (std::size_t j = 0; j < a.key_len; ++j) {
          if (a.causal && j > i) continue;
          if (!a.key_mask.empty() && !a.key_mask[b * a.key_len + j]) continue;
          double dot = 0;
          for (std::size_t c = 0; c < dh; ++c)
            dot += q(b * a.query_len + i, h * dh + c) * k(b * a.key_len + j, h * dh + c);
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& x : s) z += (x = std::exp(x - mx));
        for (std::size_t j = 0; j < a.key_len; ++j)
          for (std::size_t c = 0; c < dh; ++c)
            out(b * a.query_len + i, h * dh + c) += s[j] / z * v(b * a.key_len + j, h * dh + c);
      }
  return out;
}

}  // namespace

TEST_CASE("attention matches a direct reference") {
  auto q = random_tensor(2 * 3, 4, 20);
  auto k = random_tensor(2 * 5, 4, 21);
  auto v = random_tensor(2 * 5, 4, 22);
  for (auto a : {layout(2, 3, 5, 2), layout(2, 3, 5, 1, false, {1, 1, 0, 1, 0, 0, 1, 1, 1, 1})}) {
    Graph g(false);
    const Tensor& out = g.value(attention(g, g.input(q), g.input(k), g.input(v), a));
    Tensor ref = reference_attention(q, k, v, a);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(out[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("attention gradients match finite differences") {
  auto q = random_tensor(2 * 4, 4, 23);
  auto k = random_tensor(2 * 4, 4, 24);
  auto v = random_tensor(2 * 4, 4, 25);
  auto plain = layout(2, 4, 4, 2);
  auto causal = layout(2, 4, 4, 2, true);
  auto masked = layout(2, 4, 4, 2, false, {1, 0, 1, 1, 1, 1, 1, 0});
  for (const auto& a : {plain, causal, masked}) {
    CHECK(gradcheck([a](Graph& g, const std::vector<Var>& x) { return probe(g, attention(g, x[0], x[1], x[2], a)); },
                    {q, k, v}) < kTol);
  }
}

TEST_CASE("causal attention ignores later positions") {
  auto x = random_tensor(5, 4, 30);
  auto a = layout(1, 5, 5, 2, true);
  Graph g(false);
  Tensor before = g.value(attention(g, g.input(x), g.input(x), g.input(x), a));
  Tensor y = x;
  for (std::size_t c = 0; c < 4; ++c) y(4, c) += 10.0;
  Tensor after = g.value(attention(g, g.input(y), g.input(y), g.input(y), a));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(after(r, c) == before(r, c));
}

TEST_CASE("attention with every key masked throws") {
  auto x = random_tensor(2, 4, 31);
  Graph g(false);
  CHECK_THROWS_AS(attention(g, g.input(x), g.input(x), g.input(x), layout(1, 2, 2, 1, false, {0, 0})), Error);
}
