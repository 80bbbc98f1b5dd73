#include "cliqueflow/nn/layers.hpp"

#include <cmath>

#include "cliqueflow/error.hpp"

namespace cliqueflow::nn {

void TransformerConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
    throw ConfigError("d_model must be a positive multiple of n_heads");
  if (n_blocks == 0 || mlp_dim == 0 || n_mlp == 0) throw ConfigError("transformer sizes must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

Linear::Linear(ParameterStore& ps, std::string name, std::size_t in, std::size_t out, Rng& rng, Init init, bool bias)
    : name_(std::move(name)), in_(in), out_(out), bias_(bias) {
  Tensor w({in, out});
  if (init != Init::kZero) {
    const double sd = (init == Init::kSmall ? 0.1 : 1.0) / std::sqrt(static_cast<double>(in));
    for (auto& v : w.values()) v = sd * rng.normal();
  }
  ps.add(weight_name(), std::move(w));
  if (bias_) ps.add(bias_name(), Tensor({out}));
}

Var Linear::operator()(Context& ctx, Var x) const {
  if (bias_) return linear(ctx.graph, x, ctx.param(weight_name()), ctx.param(bias_name()));
  return matmul(ctx.graph, x, ctx.param(weight_name()));
}

Mlp::Mlp(ParameterStore& ps, const std::string& name, std::size_t in, std::size_t hidden, std::size_t n_hidden,
         std::size_t out, Rng& rng, Init out_init) {
  std::size_t width = in;
  for (std::size_t i = 0; i < n_hidden; ++i) {
    layers_.emplace_back(ps, name + ".l" + std::to_string(i), width, hidden, rng);
    width = hidden;
  }
  layers_.emplace_back(ps, name + ".out", width, out, rng, out_init);
}

Var Mlp::operator()(Context& ctx, Var x, double rate) const {
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    x = gelu(ctx.graph, layers_[i](ctx, x));
    if (rate > 0.0 && ctx.dropout_active()) x = dropout(ctx.graph, x, rate, *ctx.rng, true);
  }
  return layers_.back()(ctx, x);
}

Embedding::Embedding(ParameterStore& ps, std::string name, std::size_t count, std::size_t dim, Rng& rng)
    : name_(std::move(name)), count_(count), dim_(dim) {
  Tensor table({count, dim});
  for (auto& v : table.values()) v = rng.normal();
  ps.add(name_, std::move(table));
}

Var Embedding::operator()(Context& ctx, std::vector<std::size_t> ids) const {
  return gather_rows(ctx.graph, ctx.param(name_), std::move(ids));
}

AdaLayerNorm::AdaLayerNorm(ParameterStore& ps, const std::string& name, std::size_t d_model, std::size_t d_cond,
                           Rng& rng)
    : mod_(ps, name + ".mod", d_cond, 2 * d_model, rng, Init::kZero), d_(d_model) {}

Var AdaLayerNorm::operator()(Context& ctx, Var h, Var cond) const {
  Graph& g = ctx.graph;
  if (g.value(cond).rows() != g.value(h).rows()) throw DimensionError("adaln: cond must have one row per row of h");
  return modulate(g, layer_norm(g, h), mod_(ctx, cond));
}

MultiHeadAttention::MultiHeadAttention(ParameterStore& ps, const std::string& name, std::size_t d_model,
                                       std::size_t heads, Rng& rng)
    : wq_(ps, name + ".q", d_model, d_model, rng),
      wk_(ps, name + ".k", d_model, d_model, rng),
      wv_(ps, name + ".v", d_model, d_model, rng),
      wo_(ps, name + ".o", d_model, d_model, rng, Init::kLecun, false),
      heads_(heads) {}

Var MultiHeadAttention::run(Context& ctx, Var xq, Var xkv, AttentionLayout layout) const {
  Var q = wq_(ctx, xq);
  Var k = wk_(ctx, xkv);
  Var v = wv_(ctx, xkv);
  layout.heads = heads_;
  if (!ctx.dropout_active()) layout.dropout = 0.0;
  layout.rng = ctx.rng;
  return wo_(ctx, attention(ctx.graph, q, k, v, layout));
}

Var MultiHeadAttention::self(Context& ctx, Var x, const SequenceLayout& s, double rate) const {
  AttentionLayout a;
  a.batch = s.batch;
  a.query_len = s.length;
  a.key_len = s.length;
  a.causal = s.causal;
  a.key_mask = s.key_mask;
  a.dropout = rate;
  return run(ctx, x, x, std::move(a));
}

Var MultiHeadAttention::cross(Context& ctx, Var x, const SequenceLayout& s, Var memory, std::size_t memory_len,
                              const std::vector<char>& memory_mask, double rate) const {
  AttentionLayout a;
  a.batch = s.batch;
  a.query_len = s.length;
  a.key_len = memory_len;
  a.key_mask = memory_mask;
  a.dropout = rate;
  return run(ctx, x, memory, std::move(a));
}

AttentionPool::AttentionPool(ParameterStore& ps, const std::string& name, std::size_t d_model, std::size_t heads,
                             Rng& rng)
    : query_(name + ".query"),
      wk_(ps, name + ".k", d_model, d_model, rng),
      wv_(ps, name + ".v", d_model, d_model, rng),
      heads_(heads) {
  Tensor q({1, d_model});
  for (auto& v : q.values()) v = rng.normal();
  ps.add(query_, std::move(q));
}

Var AttentionPool::operator()(Context& ctx, Var h, const SequenceLayout& s) const {
  Graph& g = ctx.graph;
  if (s.length == 0 || g.value(h).rows() == 0) throw DimensionError("attention_pool: empty sequence");
  Var q = repeat_rows(g, ctx.param(query_), s.batch);
  AttentionLayout a;
  a.batch = s.batch;
  a.query_len = 1;
  a.key_len = s.length;
  a.heads = heads_;
  a.key_mask = s.key_mask;
  return attention(g, q, wk_(ctx, h), wv_(ctx, h), a);
}

CrossAttention::CrossAttention(ParameterStore& ps, const std::string& name, std::size_t d_model, std::size_t heads,
                               Rng& rng)
    : mha_(ps, name, d_model, heads, rng) {}

Var CrossAttention::operator()(Context& ctx, Var h, const SequenceLayout& layout, Var memory,
                               std::size_t memory_len, double rate) const {
  Graph& g = ctx.graph;
  if (memory_len == 0 || g.value(memory).rows() == 0) throw DimensionError("cross_attention: empty conditioning");
  Var att = mha_.cross(ctx, layer_norm(g, h), layout, memory, memory_len, {}, rate);
  return add(g, h, att);
}

TransformerBlock::TransformerBlock(ParameterStore& ps, const std::string& name, const TransformerConfig& cfg,
                                   bool cross, Rng& rng)
    : norm_attn_(ps, name + ".norm_attn", cfg.d_model, cfg.d_model, rng),
      norm_ffn_(ps, name + ".norm_ffn", cfg.d_model, cfg.d_model, rng),
      attn_(ps, name + ".attn", cfg.d_model, cfg.n_heads, rng),
      ffn_(ps, name + ".ffn", cfg.d_model, cfg.mlp_dim, cfg.n_mlp, cfg.d_model, rng),
      has_cross_(cross),
      dropout_(cfg.dropout) {
  if (cross) cross_ = CrossAttention(ps, name + ".cross", cfg.d_model, cfg.n_heads, rng);
}

Var TransformerBlock::operator()(Context& ctx, Var h, Var cond, const SequenceLayout& layout,
                                 std::optional<Var> memory, std::size_t memory_len) const {
  Graph& g = ctx.graph;
  h = add(g, h, attn_.self(ctx, norm_attn_(ctx, h, cond), layout, dropout_));
  if (has_cross_) {
    if (!memory) throw DimensionError("transformer block: cross-attention block needs conditioning memory");
    h = cross_(ctx, h, layout, *memory, memory_len, dropout_);
  }
  return add(g, h, ffn_(ctx, norm_ffn_(ctx, h, cond), dropout_));
}

Transformer::Transformer(ParameterStore& ps, const std::string& name, const TransformerConfig& cfg, bool cross,
                         Rng& rng)
    : final_norm_(ps, name + ".final_norm", cfg.d_model, cfg.d_model, rng) {
  cfg.validate();
  for (std::size_t i = 0; i < cfg.n_blocks; ++i)
    blocks_.emplace_back(ps, name + ".block" + std::to_string(i), cfg, cross, rng);
}

Var Transformer::operator()(Context& ctx, Var h, Var cond, const SequenceLayout& layout, std::optional<Var> memory,
                            std::size_t memory_len) const {
  for (const auto& b : blocks_) h = b(ctx, h, cond, layout, memory, memory_len);
  return final_norm_(ctx, h, cond);
}

}  // namespace cliqueflow::nn
