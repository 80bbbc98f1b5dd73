#include <cmath>
#include <limits>
#include <memory>

#include "cliqueflow/error.hpp"
#include "cliqueflow/nn/ops.hpp"

namespace cliqueflow::nn {

Var attention(Graph& g, Var q, Var k, Var v, const AttentionLayout& layout) {
  const Tensor& qv = g.value(q);
  const Tensor& kv = g.value(k);
  const Tensor& vv = g.value(v);
  const std::size_t B = layout.batch, Tq = layout.query_len, Tk = layout.key_len, H = layout.heads;
  const std::size_t d = qv.cols();
  if (H == 0 || d % H != 0) throw DimensionError("attention: width " + std::to_string(d) + " not divisible by heads");
  if (qv.rows() != B * Tq || kv.rows() != B * Tk || vv.rows() != B * Tk || kv.cols() != d || vv.cols() != d)
    throw DimensionError("attention: q/k/v shapes do not match the layout");
  if (!layout.key_mask.empty() && layout.key_mask.size() != B * Tk)
    throw DimensionError("attention: key mask size mismatch");
  if (layout.causal && Tq != Tk) throw DimensionError("attention: causal masking needs query_len == key_len");
  const bool drop = layout.dropout > 0.0 && layout.rng != nullptr;

  const std::size_t dh = d / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto eTq = static_cast<Eigen::Index>(Tq), eTk = static_cast<Eigen::Index>(Tk),
             edh = static_cast<Eigen::Index>(dh);

  // Softmax weights (pre-dropout) and dropout masks, B*H blocks of Tq x Tk.
  auto probs = std::make_shared<std::vector<double>>(B * H * Tq * Tk);
  auto masks = drop ? std::make_shared<std::vector<double>>(B * H * Tq * Tk) : nullptr;
  Tensor out(Shape{B * Tq, d});
  RowMatrix scores(eTq, eTk);
  const double keep_scale = drop ? 1.0 / (1.0 - layout.dropout) : 1.0;

  for (std::size_t b = 0; b < B; ++b) {
    const char* kmask = layout.key_mask.empty() ? nullptr : layout.key_mask.data() + b * Tk;
    for (std::size_t h = 0; h < H; ++h) {
      auto Q = qv.matrix().block(static_cast<Eigen::Index>(b * Tq), static_cast<Eigen::Index>(h * dh), eTq, edh);
      auto K = kv.matrix().block(static_cast<Eigen::Index>(b * Tk), static_cast<Eigen::Index>(h * dh), eTk, edh);
      auto V = vv.matrix().block(static_cast<Eigen::Index>(b * Tk), static_cast<Eigen::Index>(h * dh), eTk, edh);
      scores.noalias() = (Q * K.transpose()) * inv_sqrt;
      double* P = probs->data() + (b * H + h) * Tq * Tk;
      double* M = drop ? masks->data() + (b * H + h) * Tq * Tk : nullptr;
      for (std::size_t i = 0; i < Tq; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < Tk; ++j) {
          const bool ok = (!kmask || kmask[j]) && (!layout.causal || j <= i);
          if (ok) mx = std::max(mx, scores(i, j));
        }
        if (mx == -std::numeric_limits<double>::infinity())
          throw Error("attention: query row " + std::to_string(i) + " of sequence " + std::to_string(b) +
                      " has every key masked");
        double s = 0.0;
        for (std::size_t j = 0; j < Tk; ++j) {
          const bool ok = (!kmask || kmask[j]) && (!layout.causal || j <= i);
          const double e = ok ? std::exp(scores(i, j) - mx) : 0.0;
          P[i * Tk + j] = e;
          s += e;
        }
        for (std::size_t j = 0; j < Tk; ++j) P[i * Tk + j] /= s;
        if (M)
          for (std::size_t j = 0; j < Tk; ++j)
            M[i * Tk + j] = layout.rng->uniform() < layout.dropout ? 0.0 : keep_scale;
      }
      Eigen::Map<RowMatrix> Pm(P, eTq, eTk);
      auto O = out.matrix().block(static_cast<Eigen::Index>(b * Tq), static_cast<Eigen::Index>(h * dh), eTq, edh);
      if (M) {
        Eigen::Map<RowMatrix> Mm(M, eTq, eTk);
        O.noalias() = Pm.cwiseProduct(Mm) * V;
      } else {
        O.noalias() = Pm * V;
      }
    }
  }

  return g.record(std::move(out), {q, k, v},
                  [q, k, v, B, Tq, Tk, H, dh, inv_sqrt, probs, masks](Graph& g, const Tensor&, const Tensor& go) {
                    const Tensor& qv = g.value(q);
                    const Tensor& kv = g.value(k);
                    const Tensor& vv = g.value(v);
                    const bool gq = g.requires_grad(q), gk = g.requires_grad(k), gv = g.requires_grad(v);
                    Tensor* dq = gq ? &g.grad_buffer(q) : nullptr;
                    Tensor* dk = gk ? &g.grad_buffer(k) : nullptr;
                    Tensor* dv = gv ? &g.grad_buffer(v) : nullptr;
                    const auto eTq = static_cast<Eigen::Index>(Tq), eTk = static_cast<Eigen::Index>(Tk),
                               edh = static_cast<Eigen::Index>(dh);
                    RowMatrix Pd(eTq, eTk), dP(eTq, eTk), dS(eTq, eTk);
                    for (std::size_t b = 0; b < B; ++b) {
                      for (std::size_t h = 0; h < H; ++h) {
                        const auto rq = static_cast<Eigen::Index>(b * Tq), rk = static_cast<Eigen::Index>(b * Tk),
                                   c0 = static_cast<Eigen::Index>(h * dh);
                        auto Q = qv.matrix().block(rq, c0, eTq, edh);
                        auto K = kv.matrix().block(rk, c0, eTk, edh);
                        auto V = vv.matrix().block(rk, c0, eTk, edh);
                        auto dO = go.matrix().block(rq, c0, eTq, edh);
                        Eigen::Map<const RowMatrix> P(probs->data() + (b * H + h) * Tq * Tk, eTq, eTk);
                        if (masks) {
                          Eigen::Map<const RowMatrix> M(masks->data() + (b * H + h) * Tq * Tk, eTq, eTk);
                          Pd = P.cwiseProduct(M);
                          dP.noalias() = dO * V.transpose();
                          dP = dP.cwiseProduct(M);
                        } else {
                          Pd = P;
                          dP.noalias() = dO * V.transpose();
                        }
                        if (dv) dv->matrix().block(rk, c0, eTk, edh).noalias() += Pd.transpose() * dO;
                        if (!dq && !dk) continue;
                        const Eigen::VectorXd rs = dP.cwiseProduct(P).rowwise().sum();
                        dS = P.cwiseProduct(dP.colwise() - rs) * inv_sqrt;
                        if (dq) dq->matrix().block(rq, c0, eTq, edh).noalias() += dS * K;
                        if (dk) dk->matrix().block(rk, c0, eTk, edh).noalias() += dS.transpose() * Q;
                      }
                    }
                  });
}

}  // namespace cliqueflow::nn
