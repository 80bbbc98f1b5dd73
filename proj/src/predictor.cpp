#include "cliqueflow/predictor.hpp"

#include "cliqueflow/error.hpp"

namespace cliqueflow {

Predictor::Predictor(nn::ParameterStore& ps, const std::string& name, const CliqueShape& shape,
                     const PredictorConfig& cfg, Rng& rng)
    : shape_(shape),
      embed_(ps, name + ".clique_embed", shape.n_cliques, cfg.embed_dim, rng),
      head_(ps, name + ".head", shape.d_clique + cfg.embed_dim, cfg.hidden, cfg.n_hidden, 1, rng) {
  shape.validate();
}

nn::Var Predictor::clique_terms(nn::Context& ctx, nn::Var Z) const {
  nn::Graph& g = ctx.graph;
  const nn::Tensor& zv = g.value(Z);
  if (zv.cols() != shape_.d_clique || zv.rows() % shape_.n_cliques != 0)
    throw DimensionError("predictor: chain rows do not match the clique shape");
  std::vector<std::size_t> ids(zv.rows());
  for (std::size_t r = 0; r < ids.size(); ++r) ids[r] = r % shape_.n_cliques;
  return head_(ctx, nn::concat_cols(g, Z, embed_(ctx, std::move(ids))));
}

nn::Var Predictor::operator()(nn::Context& ctx, nn::Var Z) const {
  return nn::segment_sum(ctx.graph, clique_terms(ctx, Z), shape_.n_cliques);
}

nn::Var Predictor::from_latent(nn::Context& ctx, nn::Var z) const {
  return (*this)(ctx, chain(ctx.graph, z, shape_));
}

double Predictor::predict(const nn::ParameterStore& ps, const CliqueChain& Z) const {
  nn::Graph g(false);
  nn::Context ctx{g, ps};
  return g.value((*this)(ctx, g.input(nn::Tensor({Z.rows, Z.cols}, Z.values)))).item();
}

std::vector<double> Predictor::predict_latents(const nn::ParameterStore& ps, std::span<const double> latents,
                                               std::size_t count) const {
  if (latents.size() != count * shape_.d_z()) throw DimensionError("predict_latents: buffer size mismatch");
  if (count == 0) return {};
  nn::Graph g(false);
  nn::Context ctx{g, ps};
  nn::Var z = g.input(nn::Tensor({count, shape_.d_z()}, std::vector<double>(latents.begin(), latents.end())));
  const nn::Tensor& out = g.value(from_latent(ctx, z));
  return {out.values().begin(), out.values().end()};
}

}  // namespace cliqueflow
