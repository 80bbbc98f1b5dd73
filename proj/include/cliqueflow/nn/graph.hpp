#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cliqueflow/nn/tensor.hpp"

namespace cliqueflow::nn {

// Process-wide allocator settings for graph-heavy workloads; idempotent.
void tune_allocator();

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

// Named parameter arrays with matching gradient buffers. Iteration order is
// lexicographic by name, which makes serialization and updates deterministic.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor init);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::vector<std::string> names() const;
  std::size_t count() const { return params_.size(); }
  std::size_t total_size() const;
  void zero_grad();

  template <typename F>
  void for_each(F&& f) {
    for (auto& [name, p] : params_) f(*p);
  }
  template <typename F>
  void for_each(F&& f) const {
    for (const auto& [name, p] : params_) f(static_cast<const Parameter&>(*p));
  }

  ParameterStore() = default;
  ParameterStore(const ParameterStore& other);
  ParameterStore& operator=(const ParameterStore& other);
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

 private:
  std::map<std::string, std::unique_ptr<Parameter>> params_;
};

// Handle to a node of a Graph.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const noexcept { return id != UINT32_MAX; }
};

// Eager tape for reverse-mode differentiation. Every op computes its value
// immediately; when recording is on and an input requires a gradient, the op
// also stores a closure that maps the output gradient to input gradients.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& out_value, const Tensor& out_grad)>;

  explicit Graph(bool record_gradients = true) : recording_(record_gradients) { tune_allocator(); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // Differentiable leaf whose gradient can be read back with grad().
  Var input(Tensor value);
  // Parameter leaf. The value is referenced, not copied; the parameter must
  // outlive the graph.
  Var param(const Parameter& p);

  const Tensor& value(Var v) const;
  // Gradient of the last backward() target with respect to v (zeros if none flowed).
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  void backward(Var scalar_loss);
  // Adds parameter gradients from the last backward() into store.grad.
  void accumulate_param_grads(ParameterStore& store) const;

  // Op-author interface.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }
  Tensor& grad_buffer(Var v);

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    const Parameter* param = nullptr;
    BackwardFn backward;
    const Tensor& value() const { return external ? *external : owned; }
  };

  bool recording_;
  bool has_backward_ = false;
  std::deque<Node> nodes_;  // stable addresses: value() references survive later records
};

}  // namespace cliqueflow::nn
