#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace emkd {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation on finite inputs produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;

  void accumulate_grad(std::size_t i, double g) {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    grad[i] += g;
  }
  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

/// Shared handle to a dense row-major array of doubles.
///
/// Copies alias the same storage, which is what lets parameters collect
/// gradients from every expression that reads them. Use clone() for an
/// independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  /// Leaf that participates in autodiff.
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> values() const { return impl_->data; }
  /// Mutable access for leaves (initialization, optimizer updates, probes).
  std::span<double> mutable_values() { return impl_->data; }
  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);
  /// Gradient accumulated so far; all zeros when nothing reached this tensor.
  std::vector<double> grad() const;
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_tensor(Shape shape, std::vector<double> values, bool requires_grad);

  std::shared_ptr<TensorImpl> impl_;
};

Tensor make_tensor(Shape shape, std::vector<double> values, bool requires_grad);

/// Ordered record of executed differentiable operations.
///
/// Entries are appended in execution order, so walking them backwards is a
/// valid reverse topological sweep. The tape is single-use: backward()
/// consumes it.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn) { entries_.push_back(std::move(fn)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded rule once, newest
  /// first. Throws ShapeError if loss is not a scalar.
  void backward(const Tensor& loss);

 private:
  std::vector<BackwardFn> entries_;
};

/// Tape receiving new operations on this thread, or nullptr when recording
/// is off (no scope active, or inside a NoGradGuard).
Tape* active_tape();

/// Makes `tape` the recording target on this thread for the guard's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
  bool previous_enabled_;
};

/// Suspends recording on this thread. Results computed inside are plain
/// values with no history.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_enabled_;
};

/// Runs the active tape backwards from `loss`. Throws std::logic_error when no
/// tape is active.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Operations. All results are fresh tensors; when any input requires grad and
// a tape is active the result records a backward rule.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor relu(const Tensor& a);
/// tanh approximation.
Tensor gelu(const Tensor& a);
Tensor exp(const Tensor& a);

/// Adds `bias` [D] to every row of `x` [..., D].
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

/// Max-shifted log-softmax over the last axis.
Tensor log_softmax(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x, std::size_t axis);

inline constexpr double kCosineEps = 1e-12;
inline constexpr double kLayerNormEps = 1e-5;

/// Pairwise cosine similarity of the rows of a [P x D] and b [Q x D].
Tensor cosine_rows(const Tensor& a, const Tensor& b, double eps = kCosineEps);

/// Mean Huber-style loss. `target` never receives gradient.
Tensor smooth_l1(const Tensor& pred, const Tensor& target, double delta);

/// Half-open window [floor(i*L/O), ceil((i+1)*L/O)) used by adaptive pooling.
struct PoolWindow {
  std::size_t begin;
  std::size_t end;
};
PoolWindow adaptive_pool_window(std::size_t index, std::size_t in_size, std::size_t out_size);

/// x: [L x D] pooled along the first axis to [out x D].
Tensor adaptive_avg_pool1d(const Tensor& x, std::size_t out);
/// x: [H x W x D] pooled over the grid to [out_h x out_w x D].
Tensor adaptive_avg_pool2d(const Tensor& x, std::size_t out_h, std::size_t out_w);

Tensor embedding_lookup(const Tensor& table, std::span<const std::int64_t> ids);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);
/// out[i] = x[i, cols[i]] for a [N x V] input.
Tensor pick(const Tensor& x, std::span<const std::size_t> cols);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = kLayerNormEps);

/// Multi-head causal self-attention core: softmax(q k^T / sqrt(d_head)) v per
/// head, position i attending to positions <= i. q, k, v: [T x D].
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t num_heads);

}  // namespace emkd
