#pragma once

#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfr/core/tensor.hpp"

namespace dfr {

// Single-use op tape. Ops append nodes during the forward pass; backward()
// walks them in reverse append order, which is a reverse topological order by
// construction. A Graph is confined to one thread.
//
// Eval-mode graphs compute forwards only and never store nodes, so read-only
// model evaluation carries no autograd cost.
template <typename T>
class Graph {
 public:
  enum class Mode { kTrain, kEval };

  explicit Graph(Mode mode = Mode::kTrain, bool check_finite = true)
      : mode_(mode), check_finite_(check_finite) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return mode_ == Mode::kTrain; }
  bool checks_finite() const { return check_finite_; }
  size_t size() const { return nodes_.size(); }

  // Called by every op after computing `out`. Scans for non-finite values,
  // then records the node when any input can reach a gradient leaf.
  void finish(const char* op, std::initializer_list<Tensor<T>> inputs, Tensor<T>& out,
              std::function<void()> backward) {
    if (check_finite_ && kernels::has_nonfinite(out.data(), out.numel()))
      throw std::runtime_error(std::string("non-finite values in output of op '") + op + "'");
    if (!recording()) return;
    bool needs = false;
    for (const auto& in : inputs)
      if (in.defined() && (in.requires_grad() || in.needs_grad())) needs = true;
    if (!needs) return;
    out.mark_needs_grad();
    Node node;
    node.op = op;
    node.out = out.storage();
    for (const auto& in : inputs)
      if (in.defined()) node.ins.push_back(in.storage());
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
  }

  // Reverse-mode sweep from a scalar output. Gradients accumulate additively:
  // calling backward twice doubles leaf gradients; zeroing is the caller's
  // job between meta-tasks.
  void backward(const Tensor<T>& scalar_output) {
    if (!recording()) throw std::runtime_error("backward: graph is in eval mode");
    if (scalar_output.numel() != 1)
      throw std::runtime_error("backward: output has " + std::to_string(scalar_output.numel()) +
                               " elements, expected a scalar");
    auto out = scalar_output.storage();
    if (out->grad.empty()) out->grad.assign(out->values.size(), T(0));
    out->grad[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->out->grad.empty()) continue;  // branch not reached from the output
      if (check_finite_ &&
          kernels::has_nonfinite(it->out->grad.data(), static_cast<int64_t>(it->out->grad.size())))
        throw std::runtime_error(std::string("non-finite gradient at op '") + it->op + "'");
      it->backward();
    }
  }

 private:
  struct Node {
    const char* op;
    std::vector<std::shared_ptr<TensorStorage<T>>> ins;
    std::shared_ptr<TensorStorage<T>> out;
    std::function<void()> backward;
  };

  std::vector<Node> nodes_;
  Mode mode_;
  bool check_finite_;
};

// True when gradient work for `t` is needed inside a backward closure.
template <typename T>
bool wants_grad(const Tensor<T>& t) {
  return t.defined() && (t.requires_grad() || t.needs_grad());
}

}  // namespace dfr
