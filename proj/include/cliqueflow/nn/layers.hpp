#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cliqueflow/nn/graph.hpp"
#include "cliqueflow/nn/ops.hpp"
#include "cliqueflow/rng.hpp"

namespace cliqueflow::nn {

struct TransformerConfig {
  std::size_t d_model = 64;
  std::size_t n_blocks = 2;
  std::size_t n_heads = 2;
  std::size_t n_registers = 2;
  std::size_t mlp_dim = 128;
  std::size_t n_mlp = 2;
  double dropout = 0.1;

  void validate() const;
  static TransformerConfig desk() { return {}; }
  static TransformerConfig paper() { return {256, 4, 4, 2, 128, 2, 0.1}; }
};

// Per-forward state: the graph being built, the (read-shared) parameters,
// and whether dropout is active.
struct Context {
  Graph& graph;
  const ParameterStore& params;
  bool training = false;
  Rng* rng = nullptr;

  Var param(const std::string& name) { return graph.param(params.get(name)); }
  bool dropout_active() const { return training && rng != nullptr; }
};

enum class Init { kLecun, kZero, kSmall };

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& ps, std::string name, std::size_t in, std::size_t out, Rng& rng,
         Init init = Init::kLecun, bool bias = true);
  Var operator()(Context& ctx, Var x) const;

  const std::string& name() const { return name_; }
  std::string weight_name() const { return name_ + ".w"; }
  std::string bias_name() const { return name_ + ".b"; }
  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }
  bool has_bias() const { return bias_; }

 private:
  std::string name_;
  std::size_t in_ = 0, out_ = 0;
  bool bias_ = true;
};

// in -> n_hidden x (Linear, GELU) -> Linear -> out. Dropout applies to hidden activations.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore& ps, const std::string& name, std::size_t in, std::size_t hidden, std::size_t n_hidden,
      std::size_t out, Rng& rng, Init out_init = Init::kLecun);
  Var operator()(Context& ctx, Var x, double dropout = 0.0) const;
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  std::vector<Linear> layers_;
};

class Embedding {
 public:
  Embedding() = default;
  Embedding(ParameterStore& ps, std::string name, std::size_t count, std::size_t dim, Rng& rng);
  Var operator()(Context& ctx, std::vector<std::size_t> ids) const;
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  std::size_t count_ = 0, dim_ = 0;
};

// layer_norm(h) * (1 + gamma(cond)) + beta(cond); the modulation map starts at zero.
class AdaLayerNorm {
 public:
  AdaLayerNorm() = default;
  AdaLayerNorm(ParameterStore& ps, const std::string& name, std::size_t d_model, std::size_t d_cond, Rng& rng);
  // cond has one row per row of h.
  Var operator()(Context& ctx, Var h, Var cond) const;
  const Linear& modulation() const { return mod_; }

 private:
  Linear mod_;
  std::size_t d_ = 0;
};

// Rows of a batch of equal-length (padded) sequences: batch * length rows.
struct SequenceLayout {
  std::size_t batch = 1;
  std::size_t length = 1;
  std::vector<char> key_mask;  // batch x length, empty = all valid
  bool causal = false;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& ps, const std::string& name, std::size_t d_model, std::size_t heads, Rng& rng);
  Var self(Context& ctx, Var x, const SequenceLayout& layout, double dropout) const;
  // Queries from x (layout rows), keys/values from memory (batch x memory_len rows).
  Var cross(Context& ctx, Var x, const SequenceLayout& layout, Var memory, std::size_t memory_len,
            const std::vector<char>& memory_mask, double dropout) const;
  const Linear& value_proj() const { return wv_; }
  const Linear& key_proj() const { return wk_; }

 private:
  Var run(Context& ctx, Var xq, Var xkv, AttentionLayout layout) const;
  Linear wq_, wk_, wv_, wo_;
  std::size_t heads_ = 1;
};

// Single learnable query attending over key/value projections of each sequence.
class AttentionPool {
 public:
  AttentionPool() = default;
  AttentionPool(ParameterStore& ps, const std::string& name, std::size_t d_model, std::size_t heads, Rng& rng);
  // Returns batch x d_model. Masked rows never contribute.
  Var operator()(Context& ctx, Var h, const SequenceLayout& layout) const;
  const std::string& query_name() const { return query_; }

 private:
  std::string query_;
  Linear wk_, wv_;
  std::size_t heads_ = 1;
};

// h + CrossAtt(LayerNorm(h), memory).
class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(ParameterStore& ps, const std::string& name, std::size_t d_model, std::size_t heads, Rng& rng);
  Var operator()(Context& ctx, Var h, const SequenceLayout& layout, Var memory, std::size_t memory_len,
                 double dropout = 0.0) const;
  const MultiHeadAttention& attention() const { return mha_; }

 private:
  MultiHeadAttention mha_;
};

// Pre-norm block: self-attention, optional cross-attention, feed-forward;
// AdaLN conditioning on the attention and feed-forward branches.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParameterStore& ps, const std::string& name, const TransformerConfig& cfg, bool cross, Rng& rng);
  Var operator()(Context& ctx, Var h, Var cond, const SequenceLayout& layout, std::optional<Var> memory = {},
                 std::size_t memory_len = 0) const;
  const CrossAttention& cross() const { return cross_; }

 private:
  AdaLayerNorm norm_attn_, norm_ffn_;
  MultiHeadAttention attn_;
  CrossAttention cross_;
  Mlp ffn_;
  bool has_cross_ = false;
  double dropout_ = 0.0;
};

class Transformer {
 public:
  Transformer() = default;
  Transformer(ParameterStore& ps, const std::string& name, const TransformerConfig& cfg, bool cross, Rng& rng);
  // Runs all blocks and a final AdaLN.
  Var operator()(Context& ctx, Var h, Var cond, const SequenceLayout& layout, std::optional<Var> memory = {},
                 std::size_t memory_len = 0) const;
  const std::vector<TransformerBlock>& blocks() const { return blocks_; }

 private:
  std::vector<TransformerBlock> blocks_;
  AdaLayerNorm final_norm_;
};

}  // namespace cliqueflow::nn
