#pragma once

#include <functional>
#include <string_view>
#include <vector>

#include "cct/tensor.hpp"

namespace cct {

/// Tape of executed differentiable ops.
///
/// Ops append a backward closure when recording is on and at least one input
/// requires grad. Append order is execution order, so the tape is already
/// topologically sorted; backward() walks it once in reverse. A graph belongs
/// to one thread.
template <Scalar T>
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  bool recording() const noexcept { return recording_; }
  void set_recording(bool on) noexcept { recording_ = on; }

  /// True when an op over `inputs` must be recorded.
  bool wants(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording_) return false;
    for (const auto* t : inputs) {
      if (t && t->defined() && t->requires_grad()) return true;
    }
    return false;
  }

  void record(std::string_view name, std::function<void()> backward_fn) {
    nodes_.push_back({name, std::move(backward_fn)});
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::string_view op_name(std::size_t i) const { return nodes_.at(i).name; }

  /// Drops all closures (and the activations they keep alive).
  void clear() { nodes_.clear(); }

  /// Runs every recorded closure once, last to first.
  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
  }

 private:
  struct Node {
    std::string_view name;
    std::function<void()> fn;
  };
  bool recording_;
  std::vector<Node> nodes_;
};

/// Seeds d loss / d loss = 1 and propagates through the graph. Leaf grads
/// accumulate additively, so call zero_grad() on leaves between steps.
template <Scalar T>
void backward(Tensor<T> loss, Graph<T>& graph) {
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  loss.grad()[0] += T(1);
  graph.run_backward();
}

}  // namespace cct
