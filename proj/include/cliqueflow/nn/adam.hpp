#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>

#include "cliqueflow/nn/graph.hpp"

namespace cliqueflow::nn {

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam descent step on x; `step` is the 1-based update count.
void adam_update(std::span<double> x, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::size_t step, const AdamHyper& h);

// Adam over every parameter of a store, moments keyed by parameter name.
class Adam {
 public:
  explicit Adam(AdamHyper h = {}) : hyper_(h) {}
  void step(ParameterStore& ps);

  std::size_t steps() const { return t_; }
  const AdamHyper& hyper() const { return hyper_; }
  void set_learning_rate(double lr) { hyper_.learning_rate = lr; }

  // Moment access for checkpointing.
  std::map<std::string, Tensor>& first() { return m_; }
  std::map<std::string, Tensor>& second() { return v_; }
  const std::map<std::string, Tensor>& first() const { return m_; }
  const std::map<std::string, Tensor>& second() const { return v_; }
  void set_steps(std::size_t t) { t_ = t; }

 private:
  AdamHyper hyper_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace cliqueflow::nn
