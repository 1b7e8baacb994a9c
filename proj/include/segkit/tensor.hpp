#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "segkit/error.hpp"

namespace segkit {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

template <typename T>
concept Scalar = std::same_as<T, float> || std::same_as<T, double>;

namespace detail {

template <Scalar T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
};

}  // namespace detail

/// Shared handle to a dense row-major N-D array with an optional gradient slot.
///
/// Copies of a Tensor alias the same storage, which is how parameters are shared
/// between the module that owns them, the tape that records their use, and the
/// optimizer that updates them.
template <Scalar T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorStorage<T>>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw ParameterError("tensor dimension must be positive, got shape " + segkit::to_string(shape));
    }
    impl_->data.assign(segkit::numel(shape), T{0});
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) : Tensor(std::move(shape), requires_grad) {
    if (values.size() != impl_->data.size()) {
      throw ParameterError("tensor of shape " + segkit::to_string(impl_->shape) + " needs " +
                           std::to_string(impl_->data.size()) + " values, got " + std::to_string(values.size()));
    }
    impl_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }
  T item() const {
    if (numel() != 1) throw ParameterError("item() on tensor of shape " + segkit::to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) const { impl_->requires_grad = on; }

  bool has_grad() const { return impl_->has_grad; }
  std::span<const T> grad() const {
    if (!impl_->has_grad) throw ParameterError("tensor has no gradient");
    return impl_->grad;
  }
  // The gradient slot is the one mutable part of a tensor, so these are const.
  // Allocates a zero gradient on first use.
  std::span<T> mutable_grad() const {
    if (!impl_->has_grad) {
      impl_->grad.assign(impl_->data.size(), T{0});
      impl_->has_grad = true;
    }
    return impl_->grad;
  }
  void zero_grad() const {
    if (impl_->has_grad) std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
  }
  void clear_grad() const {
    impl_->grad.clear();
    impl_->has_grad = false;
  }

  // Deep copy without gradient or graph history.
  Tensor clone() const { return Tensor(impl_->shape, impl_->data, false); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<detail::TensorStorage<T>> impl_;
};

enum class GraphMode { training, inference };

/// Tape of differentiable operations, recorded in execution order.
///
/// Operations append one node per call while the graph is in training mode and
/// at least one input requires a gradient. Inference mode records nothing.
template <Scalar T>
class Graph {
 public:
  using BackwardFn = std::function<void(std::span<const T> grad_output)>;

  struct Node {
    std::string_view op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    BackwardFn backward;
  };

  explicit Graph(GraphMode mode = GraphMode::training) : mode_(mode) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  GraphMode mode() const { return mode_; }
  bool recording() const { return mode_ == GraphMode::training; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  // True when an op over `inputs` must be taped.
  bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording()) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) { return t && t->defined() && t->requires_grad(); });
  }

  // Marks `output` as differentiable and appends its node. `backward` receives
  // d(loss)/d(output) and accumulates into the inputs' gradient slots.
  Tensor<T> record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T> output, BackwardFn backward) {
    output.set_requires_grad(true);
    nodes_.push_back(Node{op, std::move(inputs), output, std::move(backward)});
    return output;
  }

  /// Populates gradient slots of every requires-grad tensor reachable from
  /// `loss`. Leaf gradients accumulate across calls; intermediate gradients are
  /// recomputed from scratch on every call.
  void backward(const Tensor<T>& loss) {
    if (!recording()) throw ParameterError("backward on an inference-mode graph");
    if (!loss.defined() || loss.numel() != 1) {
      throw ParameterError("backward needs a scalar loss, got shape " +
                           (loss.defined() ? segkit::to_string(loss.shape()) : std::string("(undefined)")));
    }
    std::ptrdiff_t last = -1;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i].output.same_storage(loss)) {
        last = static_cast<std::ptrdiff_t>(i);
        break;
      }
    }
    if (last < 0) {
      // A leaf used directly as the loss.
      Tensor<T> leaf = loss;
      if (leaf.requires_grad()) leaf.mutable_grad()[0] += T{1};
      return;
    }
    for (std::ptrdiff_t i = 0; i <= last; ++i) nodes_[static_cast<std::size_t>(i)].output.clear_grad();
    Tensor<T> seed = loss;
    seed.mutable_grad()[0] = T{1};
    for (std::ptrdiff_t i = last; i >= 0; --i) {
      Node& node = nodes_[static_cast<std::size_t>(i)];
      if (!node.output.has_grad()) continue;
      node.backward(node.output.grad());
    }
  }

  void clear() { nodes_.clear(); }

 private:
  GraphMode mode_;
  std::vector<Node> nodes_;
};

// Adds `delta` into the gradient slot of `t` when it takes gradients.
template <typename T>
void accumulate_grad(const Tensor<T>& t, std::span<const T> delta) {
  if (!t.requires_grad()) return;
  auto g = t.mutable_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace segkit
