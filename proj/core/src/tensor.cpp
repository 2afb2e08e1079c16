#include "dosediff/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace dosediff {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape shape) {
  DD_CHECK(!shape.empty(), "tensor shape must be non-empty");
  for (int d : shape) DD_CHECK(d > 0, "tensor dims must be positive, got " + shape_str(shape));
  auto node = std::make_shared<detail::TensorNode>();
  node->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0f);
  node->shape = std::move(shape);
  return wrap(std::move(node));
}

Tensor Tensor::full(Shape shape, float value) {
  Tensor t = zeros(std::move(shape));
  for (float& v : t.node_->data) v = value;
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> values) {
  DD_CHECK(!shape.empty(), "tensor shape must be non-empty");
  DD_CHECK(shape_numel(shape) == static_cast<std::int64_t>(values.size()),
           "data length " + std::to_string(values.size()) + " does not match shape " +
               shape_str(shape));
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  return wrap(std::move(node));
}

Tensor Tensor::wrap(std::shared_ptr<detail::TensorNode> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

float Tensor::item() const {
  DD_CHECK(numel() == 1, "item() requires a scalar tensor, got " + shape_str(shape()));
  return node_->data[0];
}

float Tensor::at(std::initializer_list<int> index) const {
  DD_CHECK(index.size() == node_->shape.size(), "index rank mismatch");
  std::int64_t flat = 0;
  std::size_t i = 0;
  for (int idx : index) {
    DD_CHECK(idx >= 0 && idx < node_->shape[i], "index out of range");
    flat = flat * node_->shape[i] + idx;
    ++i;
  }
  return node_->data[static_cast<std::size_t>(flat)];
}

std::span<const float> Tensor::grad() const {
  detail::ensure_grad(*node_);
  return node_->grad;
}

std::span<float> Tensor::mutable_grad() {
  detail::ensure_grad(*node_);
  return node_->grad;
}

bool Tensor::all_finite() const {
  for (float v : node_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor stack(std::span<const Tensor> items) {
  DD_CHECK(!items.empty(), "stack() needs at least one tensor");
  const Shape& base = items[0].shape();
  for (const Tensor& t : items) {
    DD_CHECK(t.shape() == base, "stack() requires identical shapes");
    DD_CHECK(!t.requires_grad(), "stack() is a data-path helper; inputs must not track gradients");
  }
  Shape out_shape;
  out_shape.push_back(static_cast<int>(items.size()));
  out_shape.insert(out_shape.end(), base.begin(), base.end());
  Tensor out = Tensor::zeros(std::move(out_shape));
  const std::size_t chunk = items[0].data().size();
  float* dst = out.mutable_data().data();
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::memcpy(dst + i * chunk, items[i].data().data(), chunk * sizeof(float));
  }
  return out;
}

Tensor take_slice(const Tensor& batch, int index) {
  DD_CHECK(batch.rank() >= 2, "take_slice() needs rank >= 2");
  DD_CHECK(index >= 0 && index < batch.dim(0), "slice index out of range");
  Shape inner(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t chunk = static_cast<std::size_t>(shape_numel(inner));
  std::vector<float> values(chunk);
  std::memcpy(values.data(), batch.data().data() + static_cast<std::size_t>(index) * chunk,
              chunk * sizeof(float));
  return Tensor::from_data(std::move(inner), std::move(values));
}

namespace {
thread_local GradientTape* g_active_tape = nullptr;
}  // namespace

GradientTape::GradientTape() : prev_(g_active_tape) { g_active_tape = this; }

GradientTape::~GradientTape() { g_active_tape = prev_; }

GradientTape* GradientTape::active() { return g_active_tape; }

void GradientTape::record(std::vector<std::shared_ptr<detail::TensorNode>> inputs,
                          std::shared_ptr<detail::TensorNode> output,
                          std::function<void()> pull) {
  records_.push_back(Record{std::move(inputs), std::move(output), std::move(pull)});
}

void GradientTape::backward(const Tensor& loss) {
  DD_CHECK(loss.defined() && loss.numel() == 1,
           "backward() requires a scalar loss tensor");

  std::unordered_set<detail::TensorNode*> seen;
  for (Record& r : records_) {
    for (auto& in : r.inputs) {
      if (seen.insert(in.get()).second) in->grad.clear();
    }
    if (seen.insert(r.output.get()).second) r.output->grad.clear();
  }
  loss.node()->grad.assign(1, 1.0f);

  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // branch does not reach the loss
    it->pull();
  }
}

void backward(const Tensor& loss) {
  GradientTape* tape = GradientTape::active();
  DD_CHECK(tape != nullptr, "backward() called with no active GradientTape");
  tape->backward(loss);
}

}  // namespace dosediff
