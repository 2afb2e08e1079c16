#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dosediff/errors.hpp"

namespace dosediff {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until backward touches this node
  bool requires_grad = false;
};

}  // namespace detail

// Dense row-major float32 tensor. Copies are shallow handles onto a shared
// buffer; values are treated as immutable once created, except parameter
// buffers which the optimizer updates in place.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor scalar(float value) { return full({1}, value); }
  static Tensor from_data(Shape shape, std::vector<float> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

  std::span<const float> data() const { return node_->data; }
  std::span<float> mutable_data() { return node_->data; }

  float item() const;
  float at(std::initializer_list<int> index) const;

  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }
  bool requires_grad() const { return node_->requires_grad; }

  bool grad_defined() const { return !node_->grad.empty(); }
  // Gradient view; materializes a zero buffer for untouched tensors.
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad() { node_->grad.clear(); }

  bool all_finite() const;

  const std::shared_ptr<detail::TensorNode>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::TensorNode> node);

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// Stacks k same-shape tensors into one tensor with a new leading dimension.
// Data-path helper: inputs must not be gradient-tracked.
Tensor stack(std::span<const Tensor> items);
// Inverse convenience for per-sample access: copies one slice of dim 0.
Tensor take_slice(const Tensor& batch, int index);

// Records every differentiable operation executed while it is the active
// tape (a thread-local stack; tapes nest). backward() replays the records in
// reverse and accumulates d(loss)/d(node) into each tracked node's grad.
class GradientTape {
 public:
  GradientTape();
  ~GradientTape();
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  static GradientTape* active();

  void record(std::vector<std::shared_ptr<detail::TensorNode>> inputs,
              std::shared_ptr<detail::TensorNode> output,
              std::function<void()> pull);

  // loss must be scalar. Clears grads of every node referenced by this tape,
  // seeds d(loss)/d(loss) = 1 and replays backward rules in reverse order, so
  // each tracked leaf ends up with its gradient populated exactly once.
  void backward(const Tensor& loss);

  std::size_t op_count() const { return records_.size(); }

 private:
  struct Record {
    std::vector<std::shared_ptr<detail::TensorNode>> inputs;
    std::shared_ptr<detail::TensorNode> output;
    std::function<void()> pull;
  };
  std::vector<Record> records_;
  GradientTape* prev_ = nullptr;
};

// Convenience: backward through the currently active tape.
void backward(const Tensor& loss);

namespace detail {
inline void ensure_grad(TensorNode& node) {
  if (node.grad.empty()) node.grad.assign(node.data.size(), 0.0f);
}
}  // namespace detail

}  // namespace dosediff
