#include "cliqueflow/atom_decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cliqueflow/error.hpp"

namespace cliqueflow {

void BeamConfig::validate() const {
  if (width == 0) throw ConfigError("beam width must be at least 1");
  if (max_species == 0) throw ConfigError("max_species must be at least 1");
}

AtomDecoder::AtomDecoder(nn::ParameterStore& ps, const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  const auto& t = cfg.transformer;
  zmod_ = nn::Linear(ps, "atom.zmod", cfg.shape.d_z(), t.d_model, rng);
  tokens_ = nn::Embedding(ps, "atom.tokens", cfg.vocab.size(), t.d_model, rng);
  positions_ = nn::Embedding(ps, "atom.positions", cfg.max_atoms + 2, t.d_model, rng);
  transformer_ = nn::Transformer(ps, "atom.tf", t, false, rng);
  head_ = nn::Mlp(ps, "atom.head", t.d_model, t.mlp_dim, 1, cfg.vocab.size(), rng, nn::Init::kSmall);
  allowed_.assign(cfg.vocab.size(), false);
  for (std::size_t s = 0; s < cfg.vocab.species; ++s) allowed_[s] = true;
  allowed_[cfg.vocab.stop()] = true;
}

nn::Var AtomDecoder::modulate(nn::Context& ctx, nn::Var z) const {
  return nn::layer_norm(ctx.graph, nn::gelu(ctx.graph, zmod_(ctx, z)));
}

nn::Var AtomDecoder::logprobs(nn::Context& ctx, nn::Var zmod, const std::vector<std::size_t>& tokens,
                              std::size_t length, const std::vector<std::size_t>& valid) const {
  nn::Graph& g = ctx.graph;
  const std::size_t B = valid.size();
  if (tokens.size() != B * length || length > max_length() || g.value(zmod).rows() != B)
    throw DimensionError("atom decoder: token layout does not match the batch");
  std::vector<std::size_t> pos(B * length), cond_idx(B * length);
  std::vector<char> mask(B * length);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < length; ++i) {
      pos[b * length + i] = i;
      cond_idx[b * length + i] = b;
      mask[b * length + i] = i < valid[b] ? 1 : 0;
    }
  nn::Var h = nn::add(g, tokens_(ctx, tokens), positions_(ctx, std::move(pos)));
  nn::Var cond = nn::gather_rows(g, zmod, std::move(cond_idx));
  h = transformer_(ctx, h, cond, nn::SequenceLayout{B, length, std::move(mask), true});
  return nn::log_softmax(g, head_(ctx, h, cfg_.transformer.dropout), allowed_);
}

AtomNll AtomDecoder::nll(nn::Context& ctx, nn::Var zmod, const MaterialBatch& batch, double weight) const {
  const std::size_t B = batch.batch, L = batch.width + 1;
  std::vector<std::size_t> tokens(B * L, cfg_.vocab.pad()), valid(B), targets(B * L, 0);
  std::vector<double> w(B * L, 0.0);
  AtomNll out;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t n = batch.n_atoms[b];
    valid[b] = n + 1;
    tokens[b * L] = cfg_.vocab.start();
    for (std::size_t i = 0; i < n; ++i) {
      tokens[b * L + i + 1] = batch.species[b * batch.width + i];
      targets[b * L + i] = batch.species[b * batch.width + i];
      w[b * L + i] = -weight;
    }
    targets[b * L + n] = cfg_.vocab.stop();
    w[b * L + n] = -weight;
    out.tokens += n + 1;
  }
  nn::Var lp = logprobs(ctx, zmod, tokens, L, valid);
  const nn::Tensor& v = ctx.graph.value(lp);
  out.per_record.assign(B, 0.0);
  for (std::size_t r = 0; r < B * L; ++r)
    if (w[r] != 0.0) out.per_record[r / L] -= v(r, targets[r]);
  out.total = nn::pick(ctx.graph, lp, std::move(targets), std::move(w));
  return out;
}

std::vector<std::vector<double>> AtomDecoder::next_token_logprobs(
    const nn::ParameterStore& ps, std::span<const double> zmod,
    const std::vector<std::vector<std::size_t>>& prefixes) const {
  const std::size_t d = cfg_.transformer.d_model;
  if (zmod.size() != d) throw DimensionError("next_token_logprobs: z_mod has the wrong width");
  if (prefixes.empty()) return {};
  std::size_t L = 0;
  for (const auto& p : prefixes) {
    if (p.empty() || p.front() != cfg_.vocab.start()) throw InvariantError("malformed prefix: must begin with Start");
    if (p.size() > max_length() - 1) throw InvariantError("malformed prefix: longer than the maximum sequence");
    for (std::size_t i = 1; i < p.size(); ++i)
      if (!cfg_.vocab.is_species(p[i])) throw InvariantError("malformed prefix: non-species token after Start");
    L = std::max(L, p.size());
  }
  const std::size_t B = prefixes.size();
  std::vector<std::size_t> tokens(B * L, cfg_.vocab.pad()), valid(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::copy(prefixes[b].begin(), prefixes[b].end(), tokens.begin() + b * L);
    valid[b] = prefixes[b].size();
  }
  nn::Graph g(false);
  nn::Context ctx{g, ps};
  nn::Tensor zm({B, d});
  for (std::size_t b = 0; b < B; ++b) std::copy(zmod.begin(), zmod.end(), zm.data() + b * d);
  const nn::Tensor& lp = g.value(logprobs(ctx, g.input(std::move(zm)), tokens, L, valid));
  std::vector<std::vector<double>> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t row = b * L + valid[b] - 1;
    out[b].assign(lp.data() + row * lp.cols(), lp.data() + (row + 1) * lp.cols());
  }
  return out;
}

std::vector<double> AtomDecoder::modulate_latent(const nn::ParameterStore& ps, std::span<const double> z) const {
  nn::Graph g(false);
  nn::Context ctx{g, ps};
  const nn::Tensor& out = g.value(modulate(ctx, g.input(nn::Tensor::row({z.begin(), z.end()}))));
  return {out.values().begin(), out.values().end()};
}

NextTokenModel decoder_model(const AtomDecoder& dec, const nn::ParameterStore& ps, std::vector<double> zmod) {
  return [&dec, &ps, zmod = std::move(zmod)](const std::vector<std::vector<std::size_t>>& prefixes) {
    return dec.next_token_logprobs(ps, zmod, prefixes);
  };
}

std::vector<Hypothesis> beam_search(const NextTokenModel& model, const Vocabulary& vocab, const BeamConfig& cfg) {
  cfg.validate();
  struct Beam {
    std::vector<std::size_t> prefix;
    double score;
  };
  struct Candidate {
    double score;
    std::size_t token;
    std::size_t parent;
  };
  std::vector<Beam> alive{{{vocab.start()}, 0.0}};
  std::vector<Hypothesis> done;
  double best_nonempty = -std::numeric_limits<double>::infinity();
  auto to_species = [](const std::vector<std::size_t>& prefix) {
    return std::vector<std::uint32_t>(prefix.begin() + 1, prefix.end());
  };
  while (!alive.empty()) {
    std::vector<std::vector<std::size_t>> prefixes;
    for (const auto& b : alive) prefixes.push_back(b.prefix);
    const auto lps = model(prefixes);
    if (lps.size() != alive.size()) throw DimensionError("beam search: model returned the wrong batch size");
    std::vector<Candidate> cands;
    for (std::size_t p = 0; p < alive.size(); ++p) {
      if (lps[p].size() != vocab.size()) throw DimensionError("beam search: distribution has the wrong size");
      for (std::size_t t = 0; t < vocab.size(); ++t) {
        if (!(vocab.is_species(t) || t == vocab.stop())) continue;
        const double lp = lps[p][t];
        if (std::isnan(lp)) throw NonFiniteError("beam search: NaN log-probability");
        if (lp == -std::numeric_limits<double>::infinity()) continue;
        cands.push_back({alive[p].score + lp, t, p});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.token != b.token) return a.token < b.token;
      return a.parent < b.parent;
    });
    // Finished hypotheses are always kept; only continuing ones compete for the width.
    std::vector<Beam> next;
    for (const auto& c : cands) {
      const Beam& parent = alive[c.parent];
      if (c.token == vocab.stop()) {
        done.push_back({to_species(parent.prefix), c.score, true});
        best_nonempty = parent.prefix.size() > 1 ? std::max(best_nonempty, c.score) : best_nonempty;
        continue;
      }
      if (next.size() == cfg.width) continue;
      Beam b{parent.prefix, c.score};
      b.prefix.push_back(c.token);
      if (b.prefix.size() - 1 >= cfg.max_species) {
        done.push_back({to_species(b.prefix), b.score, false});
        best_nonempty = std::max(best_nonempty, b.score);
      } else {
        next.push_back(std::move(b));
      }
    }
    // Scores never increase with length, so nothing alive can overtake a finished non-empty hypothesis.
    if (!next.empty() && next.front().score <= best_nonempty) next.clear();
    alive = std::move(next);
  }
  std::stable_sort(done.begin(), done.end(), [](const Hypothesis& a, const Hypothesis& b) { return a.score > b.score; });
  return done;
}

}  // namespace cliqueflow
