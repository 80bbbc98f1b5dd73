#pragma once

#include <span>
#include <vector>

#include "cliqueflow/batch.hpp"

namespace cliqueflow {

struct EncoderOutput {
  LatentVector mu;
  LatentVector log_sigma;
};

// Batched posterior parameters, each batch x d_z.
struct EncodedBatch {
  nn::Var mu;
  nn::Var log_sigma;
};

// Embedded continuous inputs and species of a batch.
struct EncoderInputs {
  nn::Var h_len;   // batch x d
  nn::Var h_ang;   // batch x d
  nn::Var h_pos;   // batch*width x d
  nn::Var h_atom;  // batch*width x d
};

inline constexpr double kLogSigmaMin = -8.0;
inline constexpr double kLogSigmaMax = 4.0;

class Encoder {
 public:
  Encoder() = default;
  Encoder(nn::ParameterStore& ps, const ModelConfig& cfg, Rng& rng);

  EncoderInputs embed_inputs(nn::Context& ctx, const MaterialBatch& batch) const;
  // Per record [h_len, h_ang, h_pos rows]: batch*(2+width) x d.
  nn::Var stack_inputs(nn::Context& ctx, const EncoderInputs& in, const MaterialBatch& batch) const;
  EncodedBatch operator()(nn::Context& ctx, const MaterialBatch& batch) const;

  EncoderOutput encode(const nn::ParameterStore& ps, const Material& m) const;
  // Posterior parameters for many materials; evaluated in padded chunks.
  std::vector<EncoderOutput> encode_all(const nn::ParameterStore& ps, std::span<const Material> materials,
                                        std::size_t chunk = 64) const;

 private:
  ModelConfig cfg_;
  nn::Mlp len_mlp_, ang_mlp_, pos_mlp_;
  nn::Embedding species_;
  std::string registers_;
  nn::Transformer transformer_;
  nn::AttentionPool pool_;
  nn::Linear out_;
};

// z = mu + exp(log_sigma) * eps.
LatentVector sample_latent(const EncoderOutput& out, Rng& rng);
nn::Var sample_latent(nn::Graph& g, const EncodedBatch& enc, const nn::Tensor& eps);

}  // namespace cliqueflow
