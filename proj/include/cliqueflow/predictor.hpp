#pragma once

#include <span>
#include <string>
#include <vector>

#include "cliqueflow/clique.hpp"
#include "cliqueflow/nn/layers.hpp"

namespace cliqueflow {

struct PredictorConfig {
  std::size_t hidden = 128;
  std::size_t n_hidden = 2;
  std::size_t embed_dim = 16;
};

// Sum over cliques of one shared MLP applied to [Z_c, embed(c)].
class Predictor {
 public:
  Predictor() = default;
  Predictor(nn::ParameterStore& ps, const std::string& name, const CliqueShape& shape, const PredictorConfig& cfg,
            Rng& rng);

  // Z rows: batch*n_cliques x d_clique, clique-major within each record. Returns batch x 1.
  nn::Var operator()(nn::Context& ctx, nn::Var Z) const;
  // Per-clique head outputs: batch*n_cliques x 1.
  nn::Var clique_terms(nn::Context& ctx, nn::Var Z) const;
  // z rows: batch x d_z.
  nn::Var from_latent(nn::Context& ctx, nn::Var z) const;

  double predict(const nn::ParameterStore& ps, const CliqueChain& Z) const;
  // Evaluates `count` flat latents stored back to back; no graph is recorded.
  std::vector<double> predict_latents(const nn::ParameterStore& ps, std::span<const double> latents,
                                      std::size_t count) const;

  const CliqueShape& shape() const { return shape_; }
  const nn::Mlp& head() const { return head_; }
  const std::string& embedding_name() const { return embed_.name(); }

 private:
  CliqueShape shape_;
  nn::Embedding embed_;
  nn::Mlp head_;
};

}  // namespace cliqueflow
