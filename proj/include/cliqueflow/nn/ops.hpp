#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cliqueflow/nn/graph.hpp"
#include "cliqueflow/rng.hpp"

namespace cliqueflow::nn {

// Elementwise arithmetic on equal shapes.
Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, double s);
Var add_scalar(Graph& g, Var a, double s);

// x (n x d) combined with a broadcast row (1 x d or d).
Var add_row(Graph& g, Var x, Var row);
Var mul_row(Graph& g, Var x, Var row);
// Scales row r of x by the constant weights[r].
Var scale_rows(Graph& g, Var x, std::vector<double> weights);

Var matmul(Graph& g, Var a, Var b);
// x W + b with W stored (in x out).
Var linear(Graph& g, Var x, Var w, Var b);

// x * (1 + mod[:, :d]) + mod[:, d:] for x of width d and mod of width 2d.
Var modulate(Graph& g, Var x, Var mod);

// tanh-approximated GELU.
Var gelu(Graph& g, Var x);
Var exp(Graph& g, Var x);
Var log(Graph& g, Var x);
Var square(Graph& g, Var x);
// Clamp with zero gradient outside [lo, hi].
Var clamp(Graph& g, Var x, double lo, double hi);

// Normalizes each row to zero mean and unit variance.
Var layer_norm(Graph& g, Var x, double eps = 1e-5);
Var layer_norm(Graph& g, Var x, Var scale, Var shift, double eps = 1e-5);

// Inverted dropout; identity when !training or rate == 0.
Var dropout(Graph& g, Var x, double rate, Rng& rng, bool training);

// Row layout helpers.
Var repeat_rows(Graph& g, Var x, std::size_t times);
Var concat_rows(Graph& g, std::span<const Var> parts);
Var concat_cols(Graph& g, Var a, Var b);
Var slice_cols(Graph& g, Var x, std::size_t begin, std::size_t count);
Var gather_rows(Graph& g, Var x, std::vector<std::size_t> index);
// out.flat[i] = x.flat[index[i]], reshaped to out_shape.
Var gather(Graph& g, Var x, std::vector<std::size_t> index, Shape out_shape);
// Sums consecutive groups of `segment` rows: (n*segment x d) -> (n x d).
Var segment_sum(Graph& g, Var x, std::size_t segment);
// out[s] = sum_i weights[s*segment + i] * x[s*segment + i].
Var weighted_segment_sum(Graph& g, Var x, std::vector<double> weights, std::size_t segment);

Var sum(Graph& g, Var x);
Var mean(Graph& g, Var x);
// (n x d) -> (n x 1)
Var row_sum(Graph& g, Var x);

// Row-wise log-softmax; columns with allowed[c] == false get -inf and no gradient.
Var log_softmax(Graph& g, Var logits, const std::vector<bool>& allowed);
// sum_r weights[r] * x(r, cols[r]); rows with zero weight are skipped.
Var pick(Graph& g, Var x, std::vector<std::size_t> cols, std::vector<double> weights);

// Multi-head scaled dot-product attention over a batch of sequences stored
// as stacked rows: q is (batch*query_len x d), k and v are (batch*key_len x d).
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t query_len = 1;
  std::size_t key_len = 1;
  std::size_t heads = 1;
  bool causal = false;
  // batch x key_len flags; empty means every key is attendable.
  std::vector<char> key_mask;
  double dropout = 0.0;
  Rng* rng = nullptr;
};
Var attention(Graph& g, Var q, Var k, Var v, const AttentionLayout& layout);

}  // namespace cliqueflow::nn
