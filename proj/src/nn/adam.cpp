#include "cliqueflow/nn/adam.hpp"

#include <cmath>

namespace cliqueflow::nn {

void adam_update(std::span<double> x, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::size_t step, const AdamHyper& h) {
  const double t = static_cast<double>(step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < x.size(); ++i) {
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * grad[i];
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
    x[i] -= h.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + h.eps);
  }
}

void Adam::step(ParameterStore& ps) {
  ++t_;
  ps.for_each([&](Parameter& p) {
    auto [mi, fresh_m] = m_.try_emplace(p.name, p.value.shape());
    auto [vi, fresh_v] = v_.try_emplace(p.name, p.value.shape());
    adam_update(p.value.values(), p.grad.values(), mi->second.values(), vi->second.values(), t_, hyper_);
  });
}

}  // namespace cliqueflow::nn
