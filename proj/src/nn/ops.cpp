#include "cliqueflow/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "cliqueflow/error.hpp"

namespace cliqueflow::nn {
namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.size() != b.size() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

void require_row(const Tensor& x, const Tensor& row, const char* op) {
  if (row.size() != x.cols())
    throw DimensionError(std::string(op) + ": row of size " + std::to_string(row.size()) +
                         " does not match width " + std::to_string(x.cols()));
}

void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

Shape matrix_shape(std::size_t r, std::size_t c) { return Shape{r, c}; }

}  // namespace

Var add(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  require_same(x, y, "add");
  Tensor out = x;
  add_into(out, y);
  return g.record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor&, const Tensor& go) {
    if (g.requires_grad(a)) add_into(g.grad_buffer(a), go);
    if (g.requires_grad(b)) add_into(g.grad_buffer(b), go);
  });
}

Var sub(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  require_same(x, y, "sub");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor&, const Tensor& go) {
    if (g.requires_grad(a)) add_into(g.grad_buffer(a), go);
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= go[i];
    }
  });
}

Var mul(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  require_same(x, y, "mul");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor&, const Tensor& go) {
    const Tensor& x = g.value(a);
    const Tensor& y = g.value(b);
    if (g.requires_grad(a)) {
      Tensor& ga = g.grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * y[i];
    }
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * x[i];
    }
  });
}

Var scale(Graph& g, Var a, double s) {
  Tensor out = g.value(a);
  for (auto& v : out.values()) v *= s;
  return g.record(std::move(out), {a}, [a, s](Graph& g, const Tensor&, const Tensor& go) {
    Tensor& ga = g.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * go[i];
  });
}

Var add_scalar(Graph& g, Var a, double s) {
  Tensor out = g.value(a);
  for (auto& v : out.values()) v += s;
  return g.record(std::move(out), {a}, [a](Graph& g, const Tensor&, const Tensor& go) {
    add_into(g.grad_buffer(a), go);
  });
}

Var add_row(Graph& g, Var x, Var row) {
  const Tensor& xv = g.value(x);
  const Tensor& rv = g.value(row);
  require_row(xv, rv, "add_row");
  Tensor out = xv;
  const std::size_t d = xv.cols();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) += rv[c];
  return g.record(std::move(out), {x, row}, [x, row](Graph& g, const Tensor&, const Tensor& go) {
    if (g.requires_grad(x)) add_into(g.grad_buffer(x), go);
    if (g.requires_grad(row)) {
      Tensor& gr = g.grad_buffer(row);
      MatrixMap(gr.data(), 1, static_cast<Eigen::Index>(gr.size())) += go.matrix().colwise().sum();
    }
  });
}

Var mul_row(Graph& g, Var x, Var row) {
  const Tensor& xv = g.value(x);
  const Tensor& rv = g.value(row);
  require_row(xv, rv, "mul_row");
  Tensor out = xv;
  const std::size_t d = xv.cols();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) *= rv[c];
  return g.record(std::move(out), {x, row}, [x, row](Graph& g, const Tensor&, const Tensor& go) {
    const Tensor& xv = g.value(x);
    const Tensor& rv = g.value(row);
    const std::size_t d = xv.cols();
    if (g.requires_grad(x)) {
      Tensor& gx = g.grad_buffer(x);
      for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) gx(r, c) += go(r, c) * rv[c];
    }
    if (g.requires_grad(row)) {
      Tensor& gr = g.grad_buffer(row);
      for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) gr[c] += go(r, c) * xv(r, c);
    }
  });
}

Var scale_rows(Graph& g, Var x, std::vector<double> weights) {
  const Tensor& xv = g.value(x);
  if (weights.size() != xv.rows()) throw DimensionError("scale_rows: weight count mismatch");
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= weights[r];
  return g.record(std::move(out), {x}, [x, w = std::move(weights)](Graph& g, const Tensor&, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t r = 0; r < gx.rows(); ++r)
      for (std::size_t c = 0; c < gx.cols(); ++c) gx(r, c) += go(r, c) * w[r];
  });
}

Var matmul(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  if (x.cols() != y.rows())
    throw DimensionError("matmul: " + shape_string(x.shape()) + " x " + shape_string(y.shape()));
  Tensor out(matrix_shape(x.rows(), y.cols()));
  out.matrix().noalias() = x.matrix() * y.matrix();
  return g.record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor&, const Tensor& go) {
    const Tensor& x = g.value(a);
    const Tensor& y = g.value(b);
    if (g.requires_grad(a)) g.grad_buffer(a).matrix().noalias() += go.matrix() * y.matrix().transpose();
    if (g.requires_grad(b)) g.grad_buffer(b).matrix().noalias() += x.matrix().transpose() * go.matrix();
  });
}

Var linear(Graph& g, Var x, Var w, Var b) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(w);
  const Tensor& bv = g.value(b);
  if (xv.cols() != wv.rows())
    throw DimensionError("linear: " + shape_string(xv.shape()) + " x " + shape_string(wv.shape()));
  require_row(Tensor::matrix(1, wv.cols()), bv, "linear");
  const auto n = static_cast<Eigen::Index>(wv.cols());
  Tensor out(matrix_shape(xv.rows(), wv.cols()));
  out.matrix().noalias() = xv.matrix() * wv.matrix();
  out.matrix().rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data(), n);
  return g.record(std::move(out), {x, w, b}, [x, w, b, n](Graph& g, const Tensor&, const Tensor& go) {
    if (g.requires_grad(x)) g.grad_buffer(x).matrix().noalias() += go.matrix() * g.value(w).matrix().transpose();
    if (g.requires_grad(w)) g.grad_buffer(w).matrix().noalias() += g.value(x).matrix().transpose() * go.matrix();
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_buffer(b);
      Eigen::Map<Eigen::RowVectorXd>(gb.data(), n) += go.matrix().colwise().sum();
    }
  });
}

Var modulate(Graph& g, Var x, Var mod) {
  const Tensor& xv = g.value(x);
  const Tensor& mv = g.value(mod);
  const std::size_t d = xv.cols();
  if (mv.rows() != xv.rows() || mv.cols() != 2 * d)
    throw DimensionError("modulate: expected " + std::to_string(xv.rows()) + " x " + std::to_string(2 * d) +
                         " modulation, got " + shape_string(mv.shape()));
  Tensor out = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const double* m = mv.data() + r * 2 * d;
    double* o = out.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) o[c] = o[c] * (1.0 + m[c]) + m[d + c];
  }
  return g.record(std::move(out), {x, mod}, [x, mod, d](Graph& g, const Tensor&, const Tensor& go) {
    const Tensor& xv = g.value(x);
    const Tensor& mv = g.value(mod);
    if (g.requires_grad(x)) {
      Tensor& gx = g.grad_buffer(x);
      for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) gx(r, c) += go(r, c) * (1.0 + mv(r, c));
    }
    if (g.requires_grad(mod)) {
      Tensor& gm = g.grad_buffer(mod);
      for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) {
          gm(r, c) += go(r, c) * xv(r, c);
          gm(r, d + c) += go(r, c);
        }
    }
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  const auto n = static_cast<Eigen::Index>(xv.size());
  Eigen::Map<const Eigen::ArrayXd> v(xv.data(), n);
  // tanh(u) = 1 - 2 / (1 + exp(2u)); the clamp keeps exp finite.
  const Eigen::ArrayXd u = (kGeluC * (v + kGeluA * v * v * v)).cwiseMax(-20.0).cwiseMin(20.0);
  auto th = std::make_shared<Eigen::ArrayXd>(1.0 - 2.0 / (1.0 + (2.0 * u).exp()));
  Tensor out(xv.shape());
  Eigen::Map<Eigen::ArrayXd>(out.data(), n) = 0.5 * v * (1.0 + *th);
  return g.record(std::move(out), {x}, [x, th, n](Graph& g, const Tensor&, const Tensor& go) {
    Eigen::Map<const Eigen::ArrayXd> v(g.value(x).data(), n);
    Eigen::Map<const Eigen::ArrayXd> gout(go.data(), n);
    Eigen::Map<Eigen::ArrayXd> gx(g.grad_buffer(x).data(), n);
    const Eigen::ArrayXd& t = *th;
    gx += gout * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v));
  });
}

Var exp(Graph& g, Var x) {
  Tensor out = g.value(x);
  for (auto& v : out.values()) v = std::exp(v);
  return g.record(std::move(out), {x}, [x](Graph& g, const Tensor& out, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * out[i];
  });
}

Var log(Graph& g, Var x) {
  Tensor out = g.value(x);
  for (auto& v : out.values()) v = std::log(v);
  return g.record(std::move(out), {x}, [x](Graph& g, const Tensor&, const Tensor& go) {
    const Tensor& xv = g.value(x);
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] / xv[i];
  });
}

Var square(Graph& g, Var x) {
  Tensor out = g.value(x);
  for (auto& v : out.values()) v = v * v;
  return g.record(std::move(out), {x}, [x](Graph& g, const Tensor&, const Tensor& go) {
    const Tensor& xv = g.value(x);
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * xv[i] * go[i];
  });
}

Var clamp(Graph& g, Var x, double lo, double hi) {
  Tensor out = g.value(x);
  for (auto& v : out.values()) v = std::clamp(v, lo, hi);
  return g.record(std::move(out), {x}, [x, lo, hi](Graph& g, const Tensor&, const Tensor& go) {
    const Tensor& xv = g.value(x);
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (xv[i] >= lo && xv[i] <= hi) gx[i] += go[i];
  });
}

Var layer_norm(Graph& g, Var x, double eps) {
  const Tensor& xv = g.value(x);
  const std::size_t n = xv.rows();
  const std::size_t d = xv.cols();
  Tensor out(xv.shape());
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) out(r, c) = (row[c] - mu) * inv_std[r];
  }
  return g.record(std::move(out), {x}, [x, inv = std::move(inv_std)](Graph& g, const Tensor& y, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    const std::size_t d = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double mg = 0.0, mgy = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        mg += go(r, c);
        mgy += go(r, c) * y(r, c);
      }
      mg /= static_cast<double>(d);
      mgy /= static_cast<double>(d);
      for (std::size_t c = 0; c < d; ++c) gx(r, c) += inv[r] * (go(r, c) - mg - y(r, c) * mgy);
    }
  });
}

Var layer_norm(Graph& g, Var x, Var scale_row, Var shift_row, double eps) {
  return add_row(g, mul_row(g, layer_norm(g, x, eps), scale_row), shift_row);
}

Var dropout(Graph& g, Var x, double rate, Rng& rng, bool training) {
  if (!training || rate <= 0.0) return x;
  const Tensor& xv = g.value(x);
  Tensor mask(xv.shape());
  const double keep = 1.0 / (1.0 - rate);
  for (auto& m : mask.values()) m = rng.uniform() < rate ? 0.0 : keep;
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return g.record(std::move(out), {x}, [x, m = std::move(mask)](Graph& g, const Tensor&, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * m[i];
  });
}

Var repeat_rows(Graph& g, Var x, std::size_t times) {
  const Tensor& xv = g.value(x);
  const std::size_t n = xv.rows(), d = xv.cols();
  Tensor out(matrix_shape(n * times, d));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < times; ++k)
      std::copy_n(xv.data() + r * d, d, out.data() + (r * times + k) * d);
  return g.record(std::move(out), {x}, [x, times](Graph& g, const Tensor&, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    const std::size_t d = gx.cols();
    for (std::size_t r = 0; r < gx.rows(); ++r)
      for (std::size_t k = 0; k < times; ++k)
        for (std::size_t c = 0; c < d; ++c) gx(r, c) += go(r * times + k, c);
  });
}

Var concat_rows(Graph& g, std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t d = g.value(parts[0]).cols();
  std::size_t n = 0;
  for (Var p : parts) {
    if (g.value(p).cols() != d) throw DimensionError("concat_rows: width mismatch");
    n += g.value(p).rows();
  }
  Tensor out(matrix_shape(n, d));
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& v = g.value(p);
    std::copy(v.values().begin(), v.values().end(), out.data() + offset);
    offset += v.size();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return g.record(std::move(out), parts, [ins](Graph& g, const Tensor&, const Tensor& go) {
    std::size_t offset = 0;
    for (Var p : ins) {
      const std::size_t sz = g.value(p).size();
      if (g.requires_grad(p)) {
        Tensor& gp = g.grad_buffer(p);
        for (std::size_t i = 0; i < sz; ++i) gp[i] += go[offset + i];
      }
      offset += sz;
    }
  });
}

Var concat_cols(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  if (x.rows() != y.rows()) throw DimensionError("concat_cols: row count mismatch");
  const std::size_t n = x.rows(), da = x.cols(), db = y.cols();
  Tensor out(matrix_shape(n, da + db));
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(x.data() + r * da, da, out.data() + r * (da + db));
    std::copy_n(y.data() + r * db, db, out.data() + r * (da + db) + da);
  }
  return g.record(std::move(out), {a, b}, [a, b, da, db](Graph& g, const Tensor&, const Tensor& go) {
    const std::size_t n = go.rows();
    if (g.requires_grad(a)) {
      Tensor& ga = g.grad_buffer(a);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < da; ++c) ga(r, c) += go(r, c);
    }
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_buffer(b);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < db; ++c) gb(r, c) += go(r, da + c);
    }
  });
}

Var slice_cols(Graph& g, Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = g.value(x);
  if (begin + count > xv.cols()) throw DimensionError("slice_cols: range out of bounds");
  const std::size_t n = xv.rows(), d = xv.cols();
  Tensor out(matrix_shape(n, count));
  for (std::size_t r = 0; r < n; ++r) std::copy_n(xv.data() + r * d + begin, count, out.data() + r * count);
  return g.record(std::move(out), {x}, [x, begin, count](Graph& g, const Tensor&, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t r = 0; r < go.rows(); ++r)
      for (std::size_t c = 0; c < count; ++c) gx(r, begin + c) += go(r, c);
  });
}

Var gather_rows(Graph& g, Var x, std::vector<std::size_t> index) {
  const Tensor& xv = g.value(x);
  const std::size_t d = xv.cols();
  Tensor out(matrix_shape(index.size(), d));
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= xv.rows()) throw DimensionError("gather_rows: index out of range");
    std::copy_n(xv.data() + index[r] * d, d, out.data() + r * d);
  }
  return g.record(std::move(out), {x}, [x, idx = std::move(index)](Graph& g, const Tensor&, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    const std::size_t d = gx.cols();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) gx(idx[r], c) += go(r, c);
  });
}

Var gather(Graph& g, Var x, std::vector<std::size_t> index, Shape out_shape) {
  const Tensor& xv = g.value(x);
  Tensor out(std::move(out_shape));
  if (out.size() != index.size()) throw DimensionError("gather: index count does not match output shape");
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xv.size()) throw DimensionError("gather: index out of range");
    out[i] = xv[index[i]];
  }
  return g.record(std::move(out), {x}, [x, idx = std::move(index)](Graph& g, const Tensor&, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += go[i];
  });
}

Var segment_sum(Graph& g, Var x, std::size_t segment) {
  const Tensor& xv = g.value(x);
  if (segment == 0 || xv.rows() % segment != 0) throw DimensionError("segment_sum: rows not divisible");
  const std::size_t n = xv.rows() / segment, d = xv.cols();
  Tensor out(matrix_shape(n, d));
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < segment; ++i)
      for (std::size_t c = 0; c < d; ++c) out(s, c) += xv(s * segment + i, c);
  return g.record(std::move(out), {x}, [x, segment](Graph& g, const Tensor&, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    const std::size_t d = gx.cols();
    for (std::size_t r = 0; r < gx.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c) gx(r, c) += go(r / segment, c);
  });
}

Var weighted_segment_sum(Graph& g, Var x, std::vector<double> weights, std::size_t segment) {
  const Tensor& xv = g.value(x);
  if (segment == 0 || xv.rows() % segment != 0 || weights.size() != xv.rows())
    throw DimensionError("weighted_segment_sum: layout mismatch");
  const std::size_t n = xv.rows() / segment, d = xv.cols();
  Tensor out(matrix_shape(n, d));
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    if (weights[r] == 0.0) continue;
    for (std::size_t c = 0; c < d; ++c) out(r / segment, c) += weights[r] * xv(r, c);
  }
  return g.record(std::move(out), {x}, [x, w = std::move(weights), segment](Graph& g, const Tensor&, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    const std::size_t d = gx.cols();
    for (std::size_t r = 0; r < gx.rows(); ++r) {
      if (w[r] == 0.0) continue;
      for (std::size_t c = 0; c < d; ++c) gx(r, c) += w[r] * go(r / segment, c);
    }
  });
}

Var sum(Graph& g, Var x) {
  double s = 0.0;
  for (double v : g.value(x).values()) s += v;
  return g.record(Tensor::scalar(s), {x}, [x](Graph& g, const Tensor&, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    const double d = go[0];
    for (auto& v : gx.values()) v += d;
  });
}

Var mean(Graph& g, Var x) {
  const double n = static_cast<double>(g.value(x).size());
  return scale(g, sum(g, x), 1.0 / n);
}

Var row_sum(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  Tensor out(matrix_shape(xv.rows(), 1));
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < xv.cols(); ++c) out[r] += xv(r, c);
  return g.record(std::move(out), {x}, [x](Graph& g, const Tensor&, const Tensor& go) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t r = 0; r < gx.rows(); ++r)
      for (std::size_t c = 0; c < gx.cols(); ++c) gx(r, c) += go[r];
  });
}

Var log_softmax(Graph& g, Var logits, const std::vector<bool>& allowed) {
  const Tensor& xv = g.value(logits);
  const std::size_t n = xv.rows(), d = xv.cols();
  if (allowed.size() != d) throw DimensionError("log_softmax: mask width mismatch");
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  Tensor out(xv.shape(), kNegInf);
  for (std::size_t r = 0; r < n; ++r) {
    double mx = kNegInf;
    for (std::size_t c = 0; c < d; ++c)
      if (allowed[c]) mx = std::max(mx, xv(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c)
      if (allowed[c]) s += std::exp(xv(r, c) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < d; ++c)
      if (allowed[c]) out(r, c) = xv(r, c) - lse;
  }
  return g.record(std::move(out), {logits}, [logits, allowed](Graph& g, const Tensor& y, const Tensor& go) {
    Tensor& gx = g.grad_buffer(logits);
    const std::size_t d = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c)
        if (allowed[c]) s += go(r, c);
      for (std::size_t c = 0; c < d; ++c)
        if (allowed[c]) gx(r, c) += go(r, c) - std::exp(y(r, c)) * s;
    }
  });
}

Var pick(Graph& g, Var x, std::vector<std::size_t> cols, std::vector<double> weights) {
  const Tensor& xv = g.value(x);
  if (cols.size() != xv.rows() || weights.size() != xv.rows()) throw DimensionError("pick: layout mismatch");
  double s = 0.0;
  for (std::size_t r = 0; r < cols.size(); ++r) {
    if (weights[r] == 0.0) continue;
    if (cols[r] >= xv.cols()) throw DimensionError("pick: column out of range");
    s += weights[r] * xv(r, cols[r]);
  }
  return g.record(Tensor::scalar(s), {x},
                  [x, c = std::move(cols), w = std::move(weights)](Graph& g, const Tensor&, const Tensor& go) {
                    Tensor& gx = g.grad_buffer(x);
                    for (std::size_t r = 0; r < c.size(); ++r)
                      if (w[r] != 0.0) gx(r, c[r]) += w[r] * go[0];
                  });
}

}  // namespace cliqueflow::nn
