#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "emkd/tensor.hpp"

namespace emkd {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

Tensor finish(const char* op, Shape shape, std::vector<double> values, bool record) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
  return make_tensor(std::move(shape), std::move(values), record);
}

void record(Tape::BackwardFn fn) { active_tape()->record(std::move(fn)); }

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_to_string(t.shape()));
  }
}

// Elementwise unary op with derivative computed from the input value.
template <typename F, typename DF>
Tensor unary(const char* op, const Tensor& a, F f, DF df) {
  std::vector<double> out(a.numel());
  auto x = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  bool rec = should_record({&a});
  Tensor result = finish(op, a.shape(), std::move(out), rec);
  if (rec) {
    record([ai = a.impl_ptr(), oi = result.impl_ptr(), df] {
      if (oi->grad.empty()) return;
      auto& ga = ai->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i] * df(ai->data[i], oi->data[i]);
    });
  }
  return result;
}

// c[m x n] += a[m x k] * b[k x n], row-major.
void gemm_accumulate(const double* __restrict a, const double* __restrict b, double* __restrict c,
                     std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict row = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a[i * k + p];
      const double* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
}

void transpose_into(const double* __restrict src, double* __restrict dst, std::size_t rows,
                    std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  bool rec = should_record({&a, &b});
  Tensor result = finish("add", a.shape(), std::move(out), rec);
  if (rec) {
    record([ai = a.impl_ptr(), bi = b.impl_ptr(), oi = result.impl_ptr()] {
      if (oi->grad.empty()) return;
      for (auto* in : {ai.get(), bi.get()}) {
        if (!in->requires_grad) continue;
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
    });
  }
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  bool rec = should_record({&a, &b});
  Tensor result = finish("sub", a.shape(), std::move(out), rec);
  if (rec) {
    record([ai = a.impl_ptr(), bi = b.impl_ptr(), oi = result.impl_ptr()] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        auto& g = ai->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        auto& g = bi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= oi->grad[i];
      }
    });
  }
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  bool rec = should_record({&a, &b});
  Tensor result = finish("mul", a.shape(), std::move(out), rec);
  if (rec) {
    record([ai = a.impl_ptr(), bi = b.impl_ptr(), oi = result.impl_ptr()] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        auto& g = ai->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto& g = bi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * ai->data[i];
      }
    });
  }
  return result;
}

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary("add_scalar", a, [value](double x) { return x + value; },
               [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  return unary(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluK * x * x * x))); },
      [](double x, double) {
        double t = std::tanh(kGeluC * (x + kGeluK * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluK * x * x);
      });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", bias, 1);
  if (x.rank() == 0 || x.shape().back() != bias.dim(0)) {
    throw ShapeError("add_bias: shape mismatch " + shape_to_string(x.shape()) + " vs " +
                     shape_to_string(bias.shape()));
  }
  const std::size_t d = bias.dim(0);
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[i % d];
  bool rec = should_record({&x, &bias});
  Tensor result = finish("add_bias", x.shape(), std::move(out), rec);
  if (rec) {
    record([xi = x.impl_ptr(), bi = bias.impl_ptr(), oi = result.impl_ptr(), d] {
      if (oi->grad.empty()) return;
      if (xi->requires_grad) {
        auto& g = xi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        auto& g = bi->grad_buffer();
        for (std::size_t i = 0; i < oi->grad.size(); ++i) g[i % d] += oi->grad[i];
      }
    });
  }
  return result;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_accumulate(a.values().data(), b.values().data(), out.data(), m, k, n);
  bool rec = should_record({&a, &b});
  Tensor result = finish("matmul", {m, n}, std::move(out), rec);
  if (rec) {
    record([ai = a.impl_ptr(), bi = b.impl_ptr(), oi = result.impl_ptr(), m, k, n] {
      if (oi->grad.empty()) return;
      const double* dc = oi->grad.data();
      if (ai->requires_grad) {
        // dA += dC * B^T
        std::vector<double> bt(n * k);
        transpose_into(bi->data.data(), bt.data(), k, n);
        gemm_accumulate(dc, bt.data(), ai->grad_buffer().data(), m, n, k);
      }
      if (bi->requires_grad) {
        // dB += A^T * dC
        std::vector<double> at(k * m);
        transpose_into(ai->data.data(), at.data(), m, k);
        gemm_accumulate(at.data(), dc, bi->grad_buffer().data(), k, m, n);
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  bool rec = should_record({&a});
  Tensor result = finish("transpose", {c, r}, std::move(out), rec);
  if (rec) {
    record([ai = a.impl_ptr(), oi = result.impl_ptr(), r, c] {
      if (oi->grad.empty()) return;
      auto& g = ai->grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += oi->grad[j * r + i];
    });
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                     shape_to_string(shape));
  }
  bool rec = should_record({&a});
  Tensor result = make_tensor(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()), rec);
  if (rec) {
    record([ai = a.impl_ptr(), oi = result.impl_ptr()] {
      if (oi->grad.empty()) return;
      auto& g = ai->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
    });
  }
  return result;
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("log_softmax: needs rank >= 1");
  const std::size_t v = x.shape().back();
  const std::size_t rows = v == 0 ? 0 : x.numel() / v;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * v;
    double mx = *std::max_element(in, in + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(in[j] - mx);
    double lse = mx + std::log(s);
    for (std::size_t j = 0; j < v; ++j) out[r * v + j] = in[j] - lse;
  }
  bool rec = should_record({&x});
  Tensor result = finish("log_softmax", x.shape(), std::move(out), rec);
  if (rec) {
    record([xi = x.impl_ptr(), oi = result.impl_ptr(), rows, v] {
      if (oi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* dy = oi->grad.data() + r * v;
        const double* y = oi->data.data() + r * v;
        double s = 0.0;
        for (std::size_t j = 0; j < v; ++j) s += dy[j];
        for (std::size_t j = 0; j < v; ++j) g[r * v + j] += dy[j] - std::exp(y[j]) * s;
      }
    });
  }
  return result;
}

namespace {

Tensor reduce_all(const Tensor& x, double factor, const char* op) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  bool rec = should_record({&x});
  Tensor result = finish(op, {}, {s * factor}, rec);
  if (rec) {
    record([xi = x.impl_ptr(), oi = result.impl_ptr(), factor] {
      if (oi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      const double d = oi->grad[0] * factor;
      for (auto& gi : g) gi += d;
    });
  }
  return result;
}

Tensor reduce_axis(const Tensor& x, std::size_t axis, bool average, const char* op) {
  if (axis >= x.rank()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_to_string(x.shape()));
  }
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const double factor = average ? (len == 0 ? 0.0 : 1.0 / static_cast<double>(len)) : 1.0;
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * len + l) * inner + i];
  for (auto& v : out) v *= factor;
  bool rec = should_record({&x});
  Tensor result = finish(op, std::move(out_shape), std::move(out), rec);
  if (rec) {
    record([xi = x.impl_ptr(), oi = result.impl_ptr(), outer, len, inner, factor] {
      if (oi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < len; ++l)
          for (std::size_t i = 0; i < inner; ++i)
            g[(o * len + l) * inner + i] += oi->grad[o * inner + i] * factor;
    });
  }
  return result;
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_all(x, 1.0, "sum"); }

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
  return reduce_all(x, 1.0 / static_cast<double>(x.numel()), "mean");
}

Tensor sum(const Tensor& x, std::size_t axis) { return reduce_axis(x, axis, false, "sum"); }
Tensor mean(const Tensor& x, std::size_t axis) { return reduce_axis(x, axis, true, "mean"); }

Tensor cosine_rows(const Tensor& a, const Tensor& b, double eps) {
  require_rank("cosine_rows", a, 2);
  require_rank("cosine_rows", b, 2);
  const std::size_t p = a.dim(0), q = b.dim(0), d = a.dim(1);
  if (b.dim(1) != d || d == 0) {
    throw ShapeError("cosine_rows: feature dims differ, " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  auto norms = [d](const Tensor& t) {
    std::vector<double> n(t.dim(0));
    for (std::size_t i = 0; i < n.size(); ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += t[i * d + k] * t[i * d + k];
      n[i] = std::sqrt(s);
    }
    return n;
  };
  std::vector<double> na = norms(a), nb = norms(b);
  std::vector<double> dots(p * q), out(p * q);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += a[i * d + k] * b[j * d + k];
      dots[i * q + j] = s;
      out[i * q + j] = s / (na[i] * nb[j] + eps);
    }
  bool rec = should_record({&a, &b});
  Tensor result = finish("cosine_rows", {p, q}, std::move(out), rec);
  if (rec) {
    record([ai = a.impl_ptr(), bi = b.impl_ptr(), oi = result.impl_ptr(), na = std::move(na),
            nb = std::move(nb), dots = std::move(dots), p, q, d, eps] {
      if (oi->grad.empty()) return;
      const auto& dc = oi->grad;
      const auto& av = ai->data;
      const auto& bv = bi->data;
      // c = dot / den, den = |a||b| + eps
      // dc/da = b / den - dot * |b| * (a / |a|) / den^2
      if (ai->requires_grad) {
        auto& ga = ai->grad_buffer();
        for (std::size_t i = 0; i < p; ++i) {
          double radial = 0.0;
          for (std::size_t j = 0; j < q; ++j) {
            const double den = na[i] * nb[j] + eps;
            const double w = dc[i * q + j] / den;
            for (std::size_t k = 0; k < d; ++k) ga[i * d + k] += w * bv[j * d + k];
            radial += dc[i * q + j] * dots[i * q + j] * nb[j] / (den * den);
          }
          if (na[i] > 0.0)
            for (std::size_t k = 0; k < d; ++k) ga[i * d + k] -= radial * av[i * d + k] / na[i];
        }
      }
      if (bi->requires_grad) {
        auto& gb = bi->grad_buffer();
        for (std::size_t j = 0; j < q; ++j) {
          double radial = 0.0;
          for (std::size_t i = 0; i < p; ++i) {
            const double den = na[i] * nb[j] + eps;
            const double w = dc[i * q + j] / den;
            for (std::size_t k = 0; k < d; ++k) gb[j * d + k] += w * av[i * d + k];
            radial += dc[i * q + j] * dots[i * q + j] * na[i] / (den * den);
          }
          if (nb[j] > 0.0)
            for (std::size_t k = 0; k < d; ++k) gb[j * d + k] -= radial * bv[j * d + k] / nb[j];
        }
      }
    });
  }
  return result;
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target, double delta) {
  require_same_shape("smooth_l1", pred, target);
  if (!(delta > 0.0)) throw std::invalid_argument("smooth_l1: delta must be positive");
  const std::size_t n = pred.numel();
  if (n == 0) throw ShapeError("smooth_l1 of empty tensors");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pred[i] - target[i];
    const double ad = std::abs(d);
    total += ad < delta ? 0.5 * d * d / delta : ad - 0.5 * delta;
  }
  total /= static_cast<double>(n);
  bool rec = should_record({&pred});
  Tensor result = finish("smooth_l1", {}, {total}, rec);
  if (rec) {
    record([pi = pred.impl_ptr(), ti = target.impl_ptr(), oi = result.impl_ptr(), delta, n] {
      if (oi->grad.empty()) return;
      auto& g = pi->grad_buffer();
      const double s = oi->grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = pi->data[i] - ti->data[i];
        const double dd = std::abs(d) < delta ? d / delta : (d > 0.0 ? 1.0 : -1.0);
        g[i] += s * dd;
      }
    });
  }
  return result;
}

PoolWindow adaptive_pool_window(std::size_t index, std::size_t in_size, std::size_t out_size) {
  return {index * in_size / out_size, ((index + 1) * in_size + out_size - 1) / out_size};
}

namespace {

void check_pool_size(const char* op, std::size_t in, std::size_t out) {
  if (out == 0 || out > in) {
    throw ShapeError(std::string(op) + ": output size " + std::to_string(out) +
                     " must be in [1, " + std::to_string(in) + "]");
  }
}

}  // namespace

Tensor adaptive_avg_pool1d(const Tensor& x, std::size_t out) {
  require_rank("adaptive_avg_pool1d", x, 2);
  const std::size_t len = x.dim(0), d = x.dim(1);
  check_pool_size("adaptive_avg_pool1d", len, out);
  std::vector<double> y(out * d, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    auto w = adaptive_pool_window(o, len, out);
    const double inv = 1.0 / static_cast<double>(w.end - w.begin);
    for (std::size_t l = w.begin; l < w.end; ++l)
      for (std::size_t k = 0; k < d; ++k) y[o * d + k] += x[l * d + k];
    for (std::size_t k = 0; k < d; ++k) y[o * d + k] *= inv;
  }
  bool rec = should_record({&x});
  Tensor result = finish("adaptive_avg_pool1d", {out, d}, std::move(y), rec);
  if (rec) {
    record([xi = x.impl_ptr(), oi = result.impl_ptr(), len, out, d] {
      if (oi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t o = 0; o < out; ++o) {
        auto w = adaptive_pool_window(o, len, out);
        const double inv = 1.0 / static_cast<double>(w.end - w.begin);
        for (std::size_t l = w.begin; l < w.end; ++l)
          for (std::size_t k = 0; k < d; ++k) g[l * d + k] += oi->grad[o * d + k] * inv;
      }
    });
  }
  return result;
}

Tensor adaptive_avg_pool2d(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank("adaptive_avg_pool2d", x, 3);
  const std::size_t h = x.dim(0), w = x.dim(1), d = x.dim(2);
  check_pool_size("adaptive_avg_pool2d", h, out_h);
  check_pool_size("adaptive_avg_pool2d", w, out_w);
  std::vector<double> y(out_h * out_w * d, 0.0);
  for (std::size_t oh = 0; oh < out_h; ++oh) {
    auto wh = adaptive_pool_window(oh, h, out_h);
    for (std::size_t ow = 0; ow < out_w; ++ow) {
      auto ww = adaptive_pool_window(ow, w, out_w);
      double* dst = y.data() + (oh * out_w + ow) * d;
      for (std::size_t r = wh.begin; r < wh.end; ++r)
        for (std::size_t c = ww.begin; c < ww.end; ++c)
          for (std::size_t k = 0; k < d; ++k) dst[k] += x[(r * w + c) * d + k];
      const double inv = 1.0 / static_cast<double>((wh.end - wh.begin) * (ww.end - ww.begin));
      for (std::size_t k = 0; k < d; ++k) dst[k] *= inv;
    }
  }
  bool rec = should_record({&x});
  Tensor result = finish("adaptive_avg_pool2d", {out_h, out_w, d}, std::move(y), rec);
  if (rec) {
    record([xi = x.impl_ptr(), oi = result.impl_ptr(), h, w, d, out_h, out_w] {
      if (oi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t oh = 0; oh < out_h; ++oh) {
        auto wh = adaptive_pool_window(oh, h, out_h);
        for (std::size_t ow = 0; ow < out_w; ++ow) {
          auto ww = adaptive_pool_window(ow, w, out_w);
          const double inv = 1.0 / static_cast<double>((wh.end - wh.begin) * (ww.end - ww.begin));
          const double* src = oi->grad.data() + (oh * out_w + ow) * d;
          for (std::size_t r = wh.begin; r < wh.end; ++r)
            for (std::size_t c = ww.begin; c < ww.end; ++c)
              for (std::size_t k = 0; k < d; ++k) g[(r * w + c) * d + k] += src[k] * inv;
        }
      }
    });
  }
  return result;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank("gather_rows", x, 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                              shape_to_string(x.shape()));
    }
    std::copy_n(x.values().data() + rows[i] * d, d, out.data() + i * d);
  }
  bool rec = should_record({&x});
  Tensor result = make_tensor({rows.size(), d}, std::move(out), rec);
  if (rec) {
    record([xi = x.impl_ptr(), oi = result.impl_ptr(),
            idx = std::vector<std::size_t>(rows.begin(), rows.end()), d] {
      if (oi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t k = 0; k < d; ++k) g[idx[i] * d + k] += oi->grad[i * d + k];
    });
  }
  return result;
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::int64_t> ids) {
  require_rank("embedding_lookup", table, 2);
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.dim(0)) {
      throw std::out_of_range("embedding_lookup: token id " + std::to_string(ids[i]) +
                              " outside vocabulary of " + std::to_string(table.dim(0)));
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  return gather_rows(table, rows);
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank("slice_rows", x, 2);
  if (begin > end || end > x.dim(0)) {
    throw std::out_of_range("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                            ") outside " + shape_to_string(x.shape()));
  }
  const std::size_t d = x.dim(1);
  std::vector<double> out(x.values().begin() + begin * d, x.values().begin() + end * d);
  bool rec = should_record({&x});
  Tensor result = make_tensor({end - begin, d}, std::move(out), rec);
  if (rec) {
    record([xi = x.impl_ptr(), oi = result.impl_ptr(), offset = begin * d] {
      if (oi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) g[offset + i] += oi->grad[i];
    });
  }
  return result;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const std::size_t d = parts.front().dim(1);
  std::size_t rows = 0;
  bool rec = false;
  for (const auto& p : parts) {
    require_rank("concat_rows", p, 2);
    if (p.dim(1) != d) {
      throw ShapeError("concat_rows: column mismatch " + shape_to_string(parts.front().shape()) +
                       " vs " + shape_to_string(p.shape()));
    }
    rows += p.dim(0);
    rec = rec || should_record({&p});
  }
  std::vector<double> out;
  out.reserve(rows * d);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  Tensor result = make_tensor({rows, d}, std::move(out), rec);
  if (rec) {
    std::vector<std::shared_ptr<TensorImpl>> ins;
    for (const auto& p : parts) ins.push_back(p.impl_ptr());
    record([ins = std::move(ins), oi = result.impl_ptr()] {
      if (oi->grad.empty()) return;
      std::size_t offset = 0;
      for (const auto& in : ins) {
        if (in->requires_grad) {
          auto& g = in->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[offset + i];
        }
        offset += in->data.size();
      }
    });
  }
  return result;
}

Tensor pick(const Tensor& x, std::span<const std::size_t> cols) {
  require_rank("pick", x, 2);
  const std::size_t n = x.dim(0), v = x.dim(1);
  if (cols.size() != n) {
    throw ShapeError("pick: " + std::to_string(cols.size()) + " indices for " +
                     shape_to_string(x.shape()));
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (cols[i] >= v) throw std::out_of_range("pick: column " + std::to_string(cols[i]) + " >= " + std::to_string(v));
    out[i] = x[i * v + cols[i]];
  }
  bool rec = should_record({&x});
  Tensor result = make_tensor({n}, std::move(out), rec);
  if (rec) {
    record([xi = x.impl_ptr(), oi = result.impl_ptr(),
            idx = std::vector<std::size_t>(cols.begin(), cols.end()), v] {
      if (oi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i) g[i * v + idx[i]] += oi->grad[i];
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: needs rank >= 1");
  const std::size_t d = x.shape().back();
  if (d < 2) throw ShapeError("layer_norm: feature dim must be >= 2, got " + shape_to_string(x.shape()));
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: affine params must be [" + std::to_string(d) + "], got " +
                     shape_to_string(gain.shape()) + " and " + shape_to_string(bias.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> xhat(x.numel()), inv_std(rows), out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * d;
    double mu = 0.0;
    for (std::size_t k = 0; k < d; ++k) mu += in[k];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t k = 0; k < d; ++k) var += (in[k] - mu) * (in[k] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t k = 0; k < d; ++k) {
      xhat[r * d + k] = (in[k] - mu) * inv_std[r];
      out[r * d + k] = gain[k] * xhat[r * d + k] + bias[k];
    }
  }
  bool rec = should_record({&x, &gain, &bias});
  Tensor result = finish("layer_norm", x.shape(), std::move(out), rec);
  if (rec) {
    record([xi = x.impl_ptr(), gi = gain.impl_ptr(), bi = bias.impl_ptr(), oi = result.impl_ptr(),
            xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d] {
      if (oi->grad.empty()) return;
      const auto& dy = oi->grad;
      if (gi->requires_grad) {
        auto& gg = gi->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t k = 0; k < d; ++k) gg[k] += dy[r * d + k] * xhat[r * d + k];
      }
      if (bi->requires_grad) {
        auto& gb = bi->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t k = 0; k < d; ++k) gb[k] += dy[r * d + k];
      }
      if (xi->requires_grad) {
        auto& gx = xi->grad_buffer();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t k = 0; k < d; ++k) {
            const double dxh = dy[r * d + k] * gi->data[k];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[r * d + k];
          }
          mean_dxhat *= inv_d;
          mean_dxhat_xhat *= inv_d;
          for (std::size_t k = 0; k < d; ++k) {
            const double dxh = dy[r * d + k] * gi->data[k];
            gx[r * d + k] += inv_std[r] * (dxh - mean_dxhat - xhat[r * d + k] * mean_dxhat_xhat);
          }
        }
      }
    });
  }
  return result;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t num_heads) {
  require_rank("causal_attention", q, 2);
  require_same_shape("causal_attention", q, k);
  require_same_shape("causal_attention", q, v);
  const std::size_t t = q.dim(0), d = q.dim(1);
  if (num_heads == 0 || d % num_heads != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(num_heads) + " heads");
  }
  const std::size_t hd = d / num_heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  // probs[h][i][j] for j <= i, stored densely as [H x T x T].
  std::vector<double> probs(num_heads * t * t, 0.0);
  std::vector<double> out(t * d, 0.0);
  const double* pq = q.values().data();
  const double* pk = k.values().data();
  const double* pv = v.values().data();
  for (std::size_t h = 0; h < num_heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t i = 0; i < t; ++i) {
      double* p = probs.data() + (h * t + i) * t;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) s += pq[i * d + off + c] * pk[j * d + off + c];
        p[j] = s * inv_scale;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      double* o = out.data() + i * d + off;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] /= z;
        for (std::size_t c = 0; c < hd; ++c) o[c] += p[j] * pv[j * d + off + c];
      }
    }
  }
  bool rec = should_record({&q, &k, &v});
  Tensor result = finish("causal_attention", {t, d}, std::move(out), rec);
  if (rec) {
    record([qi = q.impl_ptr(), ki = k.impl_ptr(), vi = v.impl_ptr(), oi = result.impl_ptr(),
            probs = std::move(probs), t, d, hd, num_heads, inv_scale] {
      if (oi->grad.empty()) return;
      // Inputs that do not require grad get a scratch buffer instead.
      std::vector<double> scratch;
      auto buffer = [&scratch](TensorImpl& impl) -> std::vector<double>& {
        if (impl.requires_grad) return impl.grad_buffer();
        if (scratch.empty()) scratch.assign(impl.data.size(), 0.0);
        return scratch;
      };
      auto& gq = buffer(*qi);
      auto& gk = buffer(*ki);
      auto& gv = buffer(*vi);
      const double* dout = oi->grad.data();
      const double* pq = qi->data.data();
      const double* pk = ki->data.data();
      const double* pv = vi->data.data();
      std::vector<double> dp(t);
      for (std::size_t h = 0; h < num_heads; ++h) {
        const std::size_t off = h * hd;
        for (std::size_t i = 0; i < t; ++i) {
          const double* p = probs.data() + (h * t + i) * t;
          const double* go = dout + i * d + off;
          double dot = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < hd; ++c) {
              s += go[c] * pv[j * d + off + c];
              gv[j * d + off + c] += p[j] * go[c];
            }
            dp[j] = s;
            dot += p[j] * s;
          }
          for (std::size_t j = 0; j <= i; ++j) {
            const double ds = p[j] * (dp[j] - dot) * inv_scale;
            for (std::size_t c = 0; c < hd; ++c) {
              gq[i * d + off + c] += ds * pk[j * d + off + c];
              gk[j * d + off + c] += ds * pq[i * d + off + c];
            }
          }
        }
      }
    });
  }
  return result;
}

}  // namespace emkd
