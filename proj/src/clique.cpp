#include "cliqueflow/clique.hpp"

#include <cmath>
#include <string>

#include "cliqueflow/error.hpp"
#include "cliqueflow/nn/ops.hpp"

namespace cliqueflow {

void CliqueShape::validate() const {
  if (n_cliques == 0 || d_clique == 0) throw ConfigError("clique shape needs n_cliques > 0 and d_clique > 0");
  if (d_knot >= d_clique) throw ConfigError("d_knot must be smaller than d_clique");
}

std::vector<std::size_t> CliqueShape::chain_index() const {
  std::vector<std::size_t> idx;
  idx.reserve(n_cliques * d_clique);
  for (std::size_t r = 0; r < n_cliques; ++r)
    for (std::size_t c = 0; c < d_clique; ++c) idx.push_back(latent_index(r, c));
  return idx;
}

CliqueChain chain(std::span<const double> z, const CliqueShape& shape) {
  shape.validate();
  if (z.size() != shape.d_z())
    throw DimensionError("chain: latent has " + std::to_string(z.size()) + " entries, shape needs " +
                         std::to_string(shape.d_z()));
  CliqueChain Z{shape.n_cliques, shape.d_clique, {}};
  Z.values.reserve(shape.n_cliques * shape.d_clique);
  for (std::size_t k : shape.chain_index()) Z.values.push_back(z[k]);
  return Z;
}

LatentVector flatten(const CliqueChain& Z, const CliqueShape& shape, double tolerance) {
  shape.validate();
  if (Z.rows != shape.n_cliques || Z.cols != shape.d_clique || Z.values.size() != Z.rows * Z.cols)
    throw DimensionError("flatten: chain is not " + std::to_string(shape.n_cliques) + " x " +
                         std::to_string(shape.d_clique));
  for (std::size_t r = 0; r + 1 < Z.rows; ++r)
    for (std::size_t o = 0; o < shape.d_knot; ++o) {
      const double left = Z(r, shape.stride() + o);
      const double right = Z(r + 1, o);
      if (!(std::abs(left - right) <= tolerance))
        throw KnotMismatchError(r, o,
                                "knot mismatch between clique " + std::to_string(r) + " and " +
                                    std::to_string(r + 1) + " at knot offset " + std::to_string(o));
    }
  LatentVector z(shape.d_z());
  for (std::size_t r = Z.rows; r-- > 0;)
    for (std::size_t c = 0; c < Z.cols; ++c) z[shape.latent_index(r, c)] = Z(r, c);
  return z;
}

double clique_kl(std::span<const double> mu, std::span<const double> log_sigma, const CliqueShape& shape,
                 std::size_t clique) {
  if (clique >= shape.n_cliques) throw DimensionError("clique index out of range");
  if (mu.size() != shape.d_z() || log_sigma.size() != shape.d_z())
    throw DimensionError("clique_kl: parameter vectors must have d_z entries");
  double kl = 0.0;
  for (std::size_t j = 0; j < shape.d_clique; ++j) {
    const std::size_t k = shape.latent_index(clique, j);
    const double s2 = std::exp(2.0 * log_sigma[k]);
    kl += 0.5 * (s2 + mu[k] * mu[k] - 1.0) - log_sigma[k];
  }
  return kl;
}

nn::Var chain(nn::Graph& g, nn::Var z, const CliqueShape& shape) {
  shape.validate();
  const nn::Tensor& zv = g.value(z);
  if (zv.cols() != shape.d_z()) throw DimensionError("chain: latent width does not match the clique shape");
  const std::size_t batch = zv.rows();
  const auto base = shape.chain_index();
  std::vector<std::size_t> idx;
  idx.reserve(batch * base.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k : base) idx.push_back(b * shape.d_z() + k);
  return nn::gather(g, z, std::move(idx), nn::Shape{batch * shape.n_cliques, shape.d_clique});
}

}  // namespace cliqueflow
