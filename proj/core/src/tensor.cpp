#include "emkd/tensor.hpp"

#include <sstream>

namespace emkd {

namespace {

thread_local Tape* g_tape = nullptr;
thread_local bool g_grad_enabled = true;

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor make_tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor of shape " + shape_to_string(shape) + " cannot hold " +
                     std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape) {
  auto n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(n, 0.0), false);
}

Tensor Tensor::full(Shape shape, double value) {
  auto n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(n, value), false);
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  return make_tensor(std::move(shape), std::move(values), false);
}

Tensor Tensor::scalar(double value) { return make_tensor({}, {value}, false); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  return make_tensor(std::move(shape), std::move(values), true);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_to_string(shape()));
  }
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  return impl_->data[row * impl_->shape.back() + col];
}

void Tensor::set_requires_grad(bool on) { impl_->requires_grad = on; }

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const { return make_tensor(shape(), impl_->data, false); }

Tensor Tensor::clone() const { return make_tensor(shape(), impl_->data, impl_->requires_grad); }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1 || loss.rank() > 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_to_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    entries_.clear();
    return;
  }
  loss.impl()->accumulate_grad(0, 1.0);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
}

Tape* active_tape() { return g_grad_enabled ? g_tape : nullptr; }

TapeScope::TapeScope(Tape& tape) : previous_(g_tape), previous_enabled_(g_grad_enabled) {
  g_tape = &tape;
  g_grad_enabled = true;
}

TapeScope::~TapeScope() {
  g_tape = previous_;
  g_grad_enabled = previous_enabled_;
}

NoGradGuard::NoGradGuard() : previous_enabled_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_enabled_; }

void backward(const Tensor& loss) {
  Tape* tape = g_tape;
  if (tape == nullptr) throw std::logic_error("backward() called with no active tape");
  tape->backward(loss);
}

}  // namespace emkd
