#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cliqueflow/batch.hpp"

namespace cliqueflow {

struct BeamConfig {
  std::size_t width = 10;
  std::size_t max_species = kDefaultMaxAtoms;
  void validate() const;
};

struct AtomNll {
  nn::Var total;                    // weight * sum of per-record NLL
  std::vector<double> per_record;   // unweighted
  std::size_t tokens = 0;
};

class AtomDecoder {
 public:
  AtomDecoder() = default;
  AtomDecoder(nn::ParameterStore& ps, const ModelConfig& cfg, Rng& rng);

  // LayerNorm(GELU(Lin(z))): batch x d.
  nn::Var modulate(nn::Context& ctx, nn::Var z) const;
  // tokens: batch x length ids, each row starting with Start and padded with Pad.
  // Returns (batch*length) x vocab log-probabilities; Start and Pad are masked.
  nn::Var logprobs(nn::Context& ctx, nn::Var zmod, const std::vector<std::size_t>& tokens, std::size_t length,
                   const std::vector<std::size_t>& valid) const;
  // Teacher-forced NLL of [a_1..a_N, Stop] given [Start, a_1..a_N].
  AtomNll nll(nn::Context& ctx, nn::Var zmod, const MaterialBatch& batch, double weight = 1.0) const;

  // Next-token distributions for several prefixes sharing one z_mod row.
  std::vector<std::vector<double>> next_token_logprobs(const nn::ParameterStore& ps, std::span<const double> zmod,
                                                       const std::vector<std::vector<std::size_t>>& prefixes) const;
  std::vector<double> modulate_latent(const nn::ParameterStore& ps, std::span<const double> z) const;

  const std::vector<bool>& allowed() const { return allowed_; }
  const Vocabulary& vocab() const { return cfg_.vocab; }
  std::size_t max_length() const { return cfg_.max_atoms + 2; }

 private:
  ModelConfig cfg_;
  nn::Linear zmod_;
  nn::Embedding tokens_, positions_;
  nn::Transformer transformer_;
  nn::Mlp head_;
  std::vector<bool> allowed_;
};

// Log-probabilities over the full vocabulary for each prefix.
using NextTokenModel =
    std::function<std::vector<std::vector<double>>(const std::vector<std::vector<std::size_t>>& prefixes)>;

struct Hypothesis {
  std::vector<std::uint32_t> species;
  double score = 0.0;
  bool stopped = false;  // false: truncated at max_species
};

// Completed hypotheses, best first. Scores are summed log-probabilities with
// no length normalization; ties go to the lower token id, then earlier hypotheses.
std::vector<Hypothesis> beam_search(const NextTokenModel& model, const Vocabulary& vocab, const BeamConfig& cfg);

NextTokenModel decoder_model(const AtomDecoder& dec, const nn::ParameterStore& ps, std::vector<double> zmod);

}  // namespace cliqueflow
