#include "cliqueflow/encoder.hpp"

#include <cmath>

#include "cliqueflow/error.hpp"

namespace cliqueflow {

Encoder::Encoder(nn::ParameterStore& ps, const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  const auto& t = cfg.transformer;
  const std::size_t d = t.d_model;
  len_mlp_ = nn::Mlp(ps, "encoder.len", 3, d, 1, d, rng);
  ang_mlp_ = nn::Mlp(ps, "encoder.ang", 3, d, 1, d, rng);
  pos_mlp_ = nn::Mlp(ps, "encoder.pos", kPositionFeatures, d, 1, d, rng);
  species_ = nn::Embedding(ps, "encoder.species", cfg.vocab.size(), d, rng);
  registers_ = "encoder.registers";
  nn::Tensor regs({t.n_registers, d});
  for (auto& v : regs.values()) v = rng.normal();
  ps.add(registers_, std::move(regs));
  transformer_ = nn::Transformer(ps, "encoder.tf", t, false, rng);
  pool_ = nn::AttentionPool(ps, "encoder.pool", d, t.n_heads, rng);
  out_ = nn::Linear(ps, "encoder.out", d, 2 * cfg.shape.d_z(), rng, nn::Init::kSmall);
}

EncoderInputs Encoder::embed_inputs(nn::Context& ctx, const MaterialBatch& batch) const {
  nn::Graph& g = ctx.graph;
  nn::Tensor log_len = batch.lengths;
  for (auto& v : log_len.values()) v = std::log(v);
  EncoderInputs in;
  in.h_len = len_mlp_(ctx, g.constant(std::move(log_len)));
  in.h_ang = ang_mlp_(ctx, g.constant(batch.angles));
  in.h_pos = pos_mlp_(ctx, g.constant(position_features(batch.positions)));
  in.h_atom = species_(ctx, batch.species);
  return in;
}

nn::Var Encoder::stack_inputs(nn::Context& ctx, const EncoderInputs& in, const MaterialBatch& batch) const {
  const std::size_t B = batch.batch, W = batch.width;
  std::vector<nn::Var> parts{in.h_len, in.h_ang, in.h_pos};
  nn::Var all = nn::concat_rows(ctx.graph, parts);
  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < B; ++b) {
    idx.push_back(b);
    idx.push_back(B + b);
    for (std::size_t i = 0; i < W; ++i) idx.push_back(2 * B + b * W + i);
  }
  return nn::gather_rows(ctx.graph, all, std::move(idx));
}

EncodedBatch Encoder::operator()(nn::Context& ctx, const MaterialBatch& batch) const {
  nn::Graph& g = ctx.graph;
  const std::size_t B = batch.batch, W = batch.width, R = cfg_.transformer.n_registers;
  const std::size_t L = R + 2 + W;
  EncoderInputs in = embed_inputs(ctx, batch);

  std::vector<nn::Var> parts{ctx.param(registers_), in.h_len, in.h_ang, in.h_pos};
  nn::Var all = nn::concat_rows(g, parts);
  std::vector<std::size_t> idx;
  std::vector<char> mask, pool_mask;
  idx.reserve(B * L);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t r = 0; r < R; ++r) idx.push_back(r);
    idx.push_back(R + b);
    idx.push_back(R + B + b);
    for (std::size_t i = 0; i < W; ++i) idx.push_back(R + 2 * B + b * W + i);
    for (std::size_t r = 0; r < R; ++r) {
      mask.push_back(1);
      pool_mask.push_back(0);
    }
    for (int k = 0; k < 2; ++k) {
      mask.push_back(1);
      pool_mask.push_back(1);
    }
    for (std::size_t i = 0; i < W; ++i) {
      mask.push_back(batch.atom_mask[b * W + i]);
      pool_mask.push_back(batch.atom_mask[b * W + i]);
    }
  }
  nn::Var seq = nn::gather_rows(g, all, std::move(idx));

  nn::Var cond = nn::weighted_segment_sum(g, in.h_atom, batch.mean_weights(), W);
  std::vector<std::size_t> cond_idx;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l) cond_idx.push_back(b);
  nn::Var cond_rows = nn::gather_rows(g, cond, std::move(cond_idx));

  nn::Var h = transformer_(ctx, seq, cond_rows, nn::SequenceLayout{B, L, std::move(mask), false});
  nn::Var pooled = pool_(ctx, h, nn::SequenceLayout{B, L, std::move(pool_mask), false});
  nn::Var post = nn::layer_norm(g, nn::gelu(g, pooled));
  nn::Var out = out_(ctx, post);
  const std::size_t dz = cfg_.shape.d_z();
  return {nn::slice_cols(g, out, 0, dz), nn::clamp(g, nn::slice_cols(g, out, dz, dz), kLogSigmaMin, kLogSigmaMax)};
}

EncoderOutput Encoder::encode(const nn::ParameterStore& ps, const Material& m) const {
  return encode_all(ps, std::span<const Material>(&m, 1)).front();
}

std::vector<EncoderOutput> Encoder::encode_all(const nn::ParameterStore& ps, std::span<const Material> materials,
                                               std::size_t chunk) const {
  std::vector<EncoderOutput> result;
  result.reserve(materials.size());
  const std::size_t dz = cfg_.shape.d_z();
  for (std::size_t begin = 0; begin < materials.size(); begin += chunk) {
    const std::size_t n = std::min(chunk, materials.size() - begin);
    auto batch = MaterialBatch::build(materials.subspan(begin, n), cfg_.vocab);
    nn::Graph g(false);
    nn::Context ctx{g, ps};
    EncodedBatch enc = (*this)(ctx, batch);
    const nn::Tensor& mu = g.value(enc.mu);
    const nn::Tensor& ls = g.value(enc.log_sigma);
    for (std::size_t b = 0; b < n; ++b) {
      EncoderOutput o;
      o.mu.assign(mu.data() + b * dz, mu.data() + (b + 1) * dz);
      o.log_sigma.assign(ls.data() + b * dz, ls.data() + (b + 1) * dz);
      result.push_back(std::move(o));
    }
  }
  return result;
}

LatentVector sample_latent(const EncoderOutput& out, Rng& rng) {
  if (out.mu.size() != out.log_sigma.size()) throw DimensionError("sample_latent: mu and log_sigma differ in size");
  LatentVector z(out.mu.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = out.mu[i] + std::exp(out.log_sigma[i]) * rng.normal();
  return z;
}

nn::Var sample_latent(nn::Graph& g, const EncodedBatch& enc, const nn::Tensor& eps) {
  return nn::add(g, enc.mu, nn::mul(g, nn::exp(g, enc.log_sigma), g.constant(eps)));
}

}  // namespace cliqueflow
