#include "cliqueflow/nn/graph.hpp"

#include <mutex>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "cliqueflow/error.hpp"

namespace cliqueflow::nn {

void tune_allocator() {
#if defined(__GLIBC__)
  // Graphs allocate and drop many large buffers per step; keeping them on the
  // heap instead of fresh mmaps avoids repeated page faults.
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
  });
#endif
}

Parameter& ParameterStore::add(const std::string& name, Tensor init) {
  if (params_.count(name)) throw Error("duplicate parameter name '" + name + "'");
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->grad = Tensor(init.shape(), 0.0);
  p->value = std::move(init);
  return *params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParameterStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
  return *it->second;
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
  return *it->second;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, p] : params_) out.push_back(name);
  return out;
}

std::size_t ParameterStore::total_size() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p->value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, p] : params_) p->grad.fill(0.0);
}

ParameterStore::ParameterStore(const ParameterStore& other) { *this = other; }

ParameterStore& ParameterStore::operator=(const ParameterStore& other) {
  if (this == &other) return *this;
  params_.clear();
  for (const auto& [name, p] : other.params_) params_.emplace(name, std::make_unique<Parameter>(*p));
  return *this;
}

Var Graph::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::input(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = recording_;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::param(const Parameter& p) {
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.requires_grad = recording_;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Graph::value(Var v) const { return nodes_.at(v.id).value(); }

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.empty()) return Tensor(n.value().shape(), 0.0);
  return n.grad;
}

Var Graph::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  if (recording_) {
    for (Var in : inputs)
      if (nodes_[in.id].requires_grad) {
        n.requires_grad = true;
        break;
      }
    if (n.requires_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor& Graph::grad_buffer(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty()) n.grad = Tensor(n.value().shape(), 0.0);
  return n.grad;
}

void Graph::backward(Var loss) {
  if (!loss.valid() || loss.id >= nodes_.size())
    throw Error("backward() called without a recorded forward pass");
  Node& root = nodes_[loss.id];
  if (!root.requires_grad)
    throw Error("backward() target does not depend on any differentiable input (no graph recorded)");
  if (root.value().size() != 1) throw DimensionError("backward() requires a scalar loss");
  if (has_backward_)
    for (auto& n : nodes_) n.grad = Tensor();
  grad_buffer(loss).fill(1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, n.value(), n.grad);
  }
  has_backward_ = true;
}

void Graph::accumulate_param_grads(ParameterStore& store) const {
  for (const Node& n : nodes_) {
    if (!n.param || n.grad.empty()) continue;
    Parameter& p = store.get(n.param->name);
    auto dst = p.grad.values();
    auto src = n.grad.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

}  // namespace cliqueflow::nn
