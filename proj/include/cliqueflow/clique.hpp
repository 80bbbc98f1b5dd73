#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cliqueflow/nn/graph.hpp"

namespace cliqueflow {

using LatentVector = std::vector<double>;

// Chain of overlapping cliques: n_cliques rows of d_clique entries, adjacent
// rows sharing d_knot entries.
struct CliqueShape {
  std::size_t n_cliques = 8;
  std::size_t d_clique = 16;
  std::size_t d_knot = 1;

  std::size_t stride() const noexcept { return d_clique - d_knot; }
  std::size_t d_z() const noexcept { return n_cliques * stride() + d_knot; }
  // Latent coordinate stored at Z(row, col); rows and cols are 0-based.
  std::size_t latent_index(std::size_t row, std::size_t col) const noexcept { return row * stride() + col; }
  // n_cliques * d_clique latent indices in row-major Z order.
  std::vector<std::size_t> chain_index() const;
  void validate() const;

  // A single clique spanning the whole latent (no decomposition).
  static CliqueShape flat(std::size_t d_z) { return {1, d_z, 0}; }
  bool operator==(const CliqueShape&) const = default;
};

struct CliqueChain {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
};

CliqueChain chain(std::span<const double> z, const CliqueShape& shape);
// Inverse of chain(). Knot entries must agree within `tolerance`; the first
// disagreeing (row, offset) pair is reported through KnotMismatchError.
LatentVector flatten(const CliqueChain& Z, const CliqueShape& shape, double tolerance = 1e-9);

// KL(N(mu_c, sigma_c^2) || N(0, I)) over the coordinates of clique c (0-based).
double clique_kl(std::span<const double> mu, std::span<const double> log_sigma, const CliqueShape& shape,
                 std::size_t clique);

namespace nn {
class Graph;
}

// Differentiable chain() over a batch: z is (batch x d_z); result is (batch*n_cliques x d_clique).
nn::Var chain(nn::Graph& g, nn::Var z, const CliqueShape& shape);

}  // namespace cliqueflow
