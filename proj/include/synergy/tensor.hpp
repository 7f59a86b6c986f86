#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "synergy/common.hpp"

namespace synergy {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out + "]";
}

// Dense row-major array of doubles with an optional gradient buffer. Copies
// of a Tensor share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() : d_(std::make_shared<Data>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.d_->values.assign(shape_size(shape), 0.0);
    t.d_->shape = std::move(shape);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_size(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_string(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
    Tensor t;
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  // Parameter initialized from N(0, stddev^2).
  static Tensor normal(Shape shape, double stddev, Rng& rng) {
    Tensor t = zeros(std::move(shape), true);
    for (auto& v : t.d_->values) v = rng.normal(0.0, stddev);
    return t;
  }

  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.d_->values.begin(), t.d_->values.end(), value);
    return t;
  }

  const Shape& shape() const { return d_->shape; }
  std::size_t size() const { return d_->values.size(); }
  std::size_t rows() const { return d_->shape.empty() ? 1 : d_->shape.front(); }
  std::size_t cols() const { return d_->shape.empty() ? 1 : size() / rows(); }

  std::span<double> values() { return d_->values; }
  std::span<const double> values() const { return d_->values; }
  double* data() { return d_->values.data(); }
  const double* data() const { return d_->values.data(); }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return d_->values[0];
  }
  double operator[](std::size_t i) const { return d_->values[i]; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool v) { d_->requires_grad = v; }

  bool has_grad() const { return !d_->grad.empty(); }
  std::span<double> grad() {
    ensure_grad();
    return d_->grad;
  }
  std::span<const double> grad() const { return d_->grad; }
  double* grad_data() {
    ensure_grad();
    return d_->grad.data();
  }
  void zero_grad() { d_->grad.clear(); }

  Tensor clone() const {
    Tensor t = from(shape(), d_->values, requires_grad());
    return t;
  }

  bool same(const Tensor& o) const { return d_ == o.d_; }

 private:
  struct Data {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
  };

  void ensure_grad() {
    if (d_->grad.size() != d_->values.size()) d_->grad.assign(d_->values.size(), 0.0);
  }

  std::shared_ptr<Data> d_;
};

// Records differentiable operations in execution order. A disabled tape
// records nothing, which is how inference runs.
class Tape {
 public:
  explicit Tape(bool enabled = true) : enabled_(enabled) {}

  bool enabled() const { return enabled_; }

  bool wants(std::initializer_list<const Tensor*> inputs) const {
    if (!enabled_) return false;
    for (const Tensor* t : inputs) {
      if (t->requires_grad()) return true;
    }
    return false;
  }

  void record(std::string op, std::function<void()> backward) {
    if (used_) throw Error("tape: cannot record after backward");
    entries_.push_back({std::move(op), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays the recorded backward rules in
  // reverse order. A tape is replayable exactly once.
  void backward(Tensor& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_string(loss.shape()));
    if (used_) throw Error("backward: tape already replayed");
    used_ = true;
    loss.grad()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
    entries_.clear();
  }

 private:
  struct Entry {
    std::string op;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
  bool enabled_;
  bool used_ = false;
};

inline void backward(Tensor& loss, Tape& tape) { tape.backward(loss); }

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NumericalError(op);
  }
}

inline void require_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

inline Tensor result(Shape shape, Tape& tape, std::initializer_list<const Tensor*> inputs) {
  return Tensor::zeros(std::move(shape), tape.wants(inputs));
}

}  // namespace detail

// C[m x n] = A[m x k] * B[k x n]
inline Tensor matmul(Tape& tape, Tensor a, Tensor b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor c = detail::result({m, n}, tape, {&a, &b});
  const double* A = a.data();
  const double* B = b.data();
  double* C = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* bp = B + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  detail::check_finite(c, "matmul");
  if (c.requires_grad()) {
    tape.record("matmul", [a, b, c, m, k, n]() mutable {
      if (!c.has_grad()) return;
      const double* dC = c.grad().data();
      if (a.requires_grad()) {
        double* dA = a.grad_data();
        const double* B = b.data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double* bp = B + p * n;
            const double* dci = dC + i * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += dci[j] * bp[j];
            dA[i * k + p] += s;
          }
        }
      }
      if (b.requires_grad()) {
        double* dB = b.grad_data();
        const double* A = a.data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* dci = dC + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            double* dbp = dB + p * n;
            for (std::size_t j = 0; j < n; ++j) dbp[j] += aip * dci[j];
          }
        }
      }
    });
  }
  return c;
}

inline Tensor add(Tape& tape, Tensor a, Tensor b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor c = detail::result(a.shape(), tape, {&a, &b});
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a[i] + b[i];
  detail::check_finite(c, "add");
  if (c.requires_grad()) {
    tape.record("add", [a, b, c]() mutable {
      if (!c.has_grad()) return;
      for (Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        double* g = t->grad_data();
        for (std::size_t i = 0; i < c.size(); ++i) g[i] += c.grad()[i];
      }
    });
  }
  return c;
}

// x[N x C] + bias[C] broadcast over rows.
inline Tensor add_bias(Tape& tape, Tensor x, Tensor bias) {
  detail::require_2d(x, "add_bias");
  const std::size_t n = x.shape()[0], cdim = x.shape()[1];
  if (bias.size() != cdim) throw ShapeError("add_bias: bias size mismatch");
  Tensor y = detail::result(x.shape(), tape, {&x, &bias});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < cdim; ++j) y.data()[i * cdim + j] = x[i * cdim + j] + bias[j];
  }
  detail::check_finite(y, "add_bias");
  if (y.requires_grad()) {
    tape.record("add_bias", [x, bias, y, n, cdim]() mutable {
      if (!y.has_grad()) return;
      const double* g = y.grad().data();
      if (x.requires_grad()) {
        double* gx = x.grad_data();
        for (std::size_t i = 0; i < n * cdim; ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        double* gb = bias.grad_data();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < cdim; ++j) gb[j] += g[i * cdim + j];
        }
      }
    });
  }
  return y;
}

inline Tensor linear(Tape& tape, Tensor x, Tensor weight, Tensor bias) {
  return add_bias(tape, matmul(tape, std::move(x), std::move(weight)), std::move(bias));
}

inline Tensor mul(Tape& tape, Tensor a, Tensor b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor c = detail::result(a.shape(), tape, {&a, &b});
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a[i] * b[i];
  detail::check_finite(c, "mul");
  if (c.requires_grad()) {
    tape.record("mul", [a, b, c]() mutable {
      if (!c.has_grad()) return;
      const double* g = c.grad().data();
      if (a.requires_grad()) {
        double* ga = a.grad_data();
        for (std::size_t i = 0; i < c.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        double* gb = b.grad_data();
        for (std::size_t i = 0; i < c.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return c;
}

inline Tensor scale(Tape& tape, Tensor a, double s) {
  Tensor c = detail::result(a.shape(), tape, {&a});
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a[i] * s;
  detail::check_finite(c, "scale");
  if (c.requires_grad()) {
    tape.record("scale", [a, c, s]() mutable {
      if (!c.has_grad()) return;
      double* ga = a.grad_data();
      for (std::size_t i = 0; i < c.size(); ++i) ga[i] += c.grad()[i] * s;
    });
  }
  return c;
}

// GELU, tanh approximation.
inline Tensor gelu(Tape& tape, Tensor x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  Tensor y = detail::result(x.shape(), tape, {&x});
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    y.data()[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + 0.044715 * v * v * v)));
  }
  detail::check_finite(y, "gelu");
  if (y.requires_grad()) {
    tape.record("gelu", [x, y]() mutable {
      if (!y.has_grad()) return;
      double* gx = x.grad_data();
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        const double u = kC * (v + 0.044715 * v * v * v);
        const double t = std::tanh(u);
        const double du = kC * (1.0 + 3.0 * 0.044715 * v * v);
        gx[i] += y.grad()[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
      }
    });
  }
  return y;
}

inline Tensor relu(Tape& tape, Tensor x) {
  Tensor y = detail::result(x.shape(), tape, {&x});
  for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (y.requires_grad()) {
    tape.record("relu", [x, y]() mutable {
      if (!y.has_grad()) return;
      double* gx = x.grad_data();
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > 0.0) gx[i] += y.grad()[i];
      }
    });
  }
  return y;
}

// Row-wise normalization over the last axis followed by gain * xhat + bias.
inline Tensor layer_norm(Tape& tape, Tensor x, Tensor gain, Tensor bias, double eps = 1e-5) {
  const std::size_t cdim = x.shape().empty() ? 0 : x.shape().back();
  if (cdim == 0) throw ShapeError("layer_norm: empty last axis");
  if (gain.size() != cdim || bias.size() != cdim) throw ShapeError("layer_norm: affine size mismatch");
  const std::size_t n = x.size() / cdim;
  Tensor y = detail::result(x.shape(), tape, {&x, &gain, &bias});
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x.data() + r * cdim;
    double mean = 0.0;
    for (std::size_t j = 0; j < cdim; ++j) mean += xr[j];
    mean /= static_cast<double>(cdim);
    double var = 0.0;
    for (std::size_t j = 0; j < cdim; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(cdim);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cdim; ++j) {
      const double h = (xr[j] - mean) * inv_std[r];
      xhat[r * cdim + j] = h;
      y.data()[r * cdim + j] = gain[j] * h + bias[j];
    }
  }
  detail::check_finite(y, "layer_norm");
  if (y.requires_grad()) {
    tape.record("layer_norm", [x, gain, bias, y, xhat = std::move(xhat), inv_std = std::move(inv_std), n,
                               cdim]() mutable {
      if (!y.has_grad()) return;
      const double* g = y.grad().data();
      if (gain.requires_grad() || bias.requires_grad()) {
        double* gg = gain.requires_grad() ? gain.grad_data() : nullptr;
        double* gb = bias.requires_grad() ? bias.grad_data() : nullptr;
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < cdim; ++j) {
            if (gg) gg[j] += g[r * cdim + j] * xhat[r * cdim + j];
            if (gb) gb[j] += g[r * cdim + j];
          }
        }
      }
      if (x.requires_grad()) {
        double* gx = x.grad_data();
        const double inv_c = 1.0 / static_cast<double>(cdim);
        for (std::size_t r = 0; r < n; ++r) {
          double sum_dh = 0.0, sum_dh_h = 0.0;
          for (std::size_t j = 0; j < cdim; ++j) {
            const double dh = g[r * cdim + j] * gain[j];
            sum_dh += dh;
            sum_dh_h += dh * xhat[r * cdim + j];
          }
          for (std::size_t j = 0; j < cdim; ++j) {
            const double dh = g[r * cdim + j] * gain[j];
            gx[r * cdim + j] +=
                inv_std[r] * (dh - inv_c * sum_dh - xhat[r * cdim + j] * inv_c * sum_dh_h);
          }
        }
      }
    });
  }
  return y;
}

// Softmax along `axis`, with max subtraction.
inline Tensor softmax(Tape& tape, Tensor x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ShapeError("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Tensor y = detail::result(s, tape, {&x});
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = x[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(x[base + j * inner] - mx);
        y.data()[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) y.data()[base + j * inner] /= z;
    }
  }
  detail::check_finite(y, "softmax");
  if (y.requires_grad()) {
    tape.record("softmax", [x, y, outer, inner, len]() mutable {
      if (!y.has_grad()) return;
      double* gx = x.grad_data();
      const double* g = y.grad().data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t at = base + j * inner;
            gx[at] += y[at] * (g[at] - dot);
          }
        }
      }
    });
  }
  return y;
}

inline Tensor sum(Tape& tape, Tensor x) {
  Tensor y = detail::result({1}, tape, {&x});
  double s = 0.0;
  for (double v : x.values()) s += v;
  y.data()[0] = s;
  detail::check_finite(y, "sum");
  if (y.requires_grad()) {
    tape.record("sum", [x, y]() mutable {
      if (!y.has_grad()) return;
      double* gx = x.grad_data();
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += y.grad()[0];
    });
  }
  return y;
}

// Mean over rows of -log softmax(logits)[label].
inline Tensor cross_entropy(Tape& tape, Tensor logits, const std::vector<int>& labels) {
  detail::require_2d(logits, "cross_entropy");
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != n) throw ShapeError("cross_entropy: label count mismatch");
  if (n == 0) throw ShapeError("cross_entropy: empty batch");
  std::vector<double> probs(n * c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) throw ShapeError("cross_entropy: label out of range");
    const double* li = logits.data() + i * c;
    double mx = li[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, li[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(li[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(li[j] - lse);
    total += lse - li[static_cast<std::size_t>(y)];
  }
  Tensor loss = detail::result({1}, tape, {&logits});
  loss.data()[0] = total / static_cast<double>(n);
  detail::check_finite(loss, "cross_entropy");
  if (loss.requires_grad()) {
    tape.record("cross_entropy", [logits, loss, labels, probs = std::move(probs), n, c]() mutable {
      if (!loss.has_grad()) return;
      const double g = loss.grad()[0] / static_cast<double>(n);
      double* gl = logits.grad_data();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const double target = static_cast<std::size_t>(labels[i]) == j ? 1.0 : 0.0;
          gl[i * c + j] += g * (probs[i * c + j] - target);
        }
      }
    });
  }
  return loss;
}

// Gather rows of table[V x d] by id.
inline Tensor embedding(Tape& tape, Tensor table, const std::vector<int>& ids) {
  detail::require_2d(table, "embedding");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  Tensor y = detail::result({ids.size(), d}, tape, {&table});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) throw ShapeError("embedding: id out of range");
    std::memcpy(y.data() + i * d, table.data() + static_cast<std::size_t>(ids[i]) * d, d * sizeof(double));
  }
  if (y.requires_grad()) {
    tape.record("embedding", [table, y, ids, d]() mutable {
      if (!y.has_grad()) return;
      double* gt = table.grad_data();
      const double* g = y.grad().data();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        double* row = gt + static_cast<std::size_t>(ids[i]) * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
      }
    });
  }
  return y;
}

// Select rows of x[N x C].
inline Tensor gather_rows(Tape& tape, Tensor x, const std::vector<std::size_t>& rows) {
  detail::require_2d(x, "gather_rows");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  Tensor y = detail::result({rows.size(), c}, tape, {&x});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw ShapeError("gather_rows: row out of range");
    std::memcpy(y.data() + i * c, x.data() + rows[i] * c, c * sizeof(double));
  }
  if (y.requires_grad()) {
    tape.record("gather_rows", [x, y, rows, c]() mutable {
      if (!y.has_grad()) return;
      double* gx = x.grad_data();
      const double* g = y.grad().data();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < c; ++j) gx[rows[i] * c + j] += g[i * c + j];
      }
    });
  }
  return y;
}

inline Tensor reshape(Tape& tape, Tensor x, Shape shape) {
  if (shape_size(shape) != x.size()) throw ShapeError("reshape: size mismatch");
  Tensor y = detail::result(std::move(shape), tape, {&x});
  std::memcpy(y.data(), x.data(), x.size() * sizeof(double));
  if (y.requires_grad()) {
    tape.record("reshape", [x, y]() mutable {
      if (!y.has_grad()) return;
      double* gx = x.grad_data();
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += y.grad()[i];
    });
  }
  return y;
}

// [N x p] ++ [N x q] -> [N x (p + q)]
inline Tensor concat_cols(Tape& tape, Tensor a, Tensor b) {
  detail::require_2d(a, "concat_cols");
  detail::require_2d(b, "concat_cols");
  const std::size_t n = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
  if (b.shape()[0] != n) throw ShapeError("concat_cols: row mismatch");
  Tensor y = detail::result({n, p + q}, tape, {&a, &b});
  for (std::size_t i = 0; i < n; ++i) {
    std::memcpy(y.data() + i * (p + q), a.data() + i * p, p * sizeof(double));
    std::memcpy(y.data() + i * (p + q) + p, b.data() + i * q, q * sizeof(double));
  }
  if (y.requires_grad()) {
    tape.record("concat_cols", [a, b, y, n, p, q]() mutable {
      if (!y.has_grad()) return;
      const double* g = y.grad().data();
      if (a.requires_grad()) {
        double* ga = a.grad_data();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < p; ++j) ga[i * p + j] += g[i * (p + q) + j];
        }
      }
      if (b.requires_grad()) {
        double* gb = b.grad_data();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < q; ++j) gb[i * q + j] += g[i * (p + q) + p + j];
        }
      }
    });
  }
  return y;
}

// Multi-head scaled dot-product attention over packed projections.
// qkv is [batch*seq x 3*d] holding Q | K | V; key_mask has batch*seq entries
// (0 = padding, never attended to). A query with no admissible key (a pad
// query under the causal mask) produces a zero row.
inline Tensor attention(Tape& tape, Tensor qkv, const std::vector<int>& key_mask, std::size_t batch,
                        std::size_t seq, std::size_t heads, bool causal) {
  detail::require_2d(qkv, "attention");
  const std::size_t d3 = qkv.shape()[1];
  if (qkv.shape()[0] != batch * seq || d3 % 3 != 0) throw ShapeError("attention: qkv shape");
  const std::size_t d = d3 / 3;
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: d_model not divisible by heads");
  if (key_mask.size() != batch * seq) throw ShapeError("attention: mask size");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out = detail::result({batch * seq, d}, tape, {&qkv});
  // Attention weights, [batch][heads][seq][seq]; zero where not admissible.
  std::vector<double> probs(batch * heads * seq * seq, 0.0);
  const double* X = qkv.data();
  double* O = out.data();
  std::vector<double> scores(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < seq; ++i) {
        const double* q = X + (b * seq + i) * d3 + h * dh;
        const std::size_t last = causal ? i + 1 : seq;
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < last; ++j) {
          if (!key_mask[b * seq + j]) continue;
          const double* kj = X + (b * seq + j) * d3 + d + h * dh;
          double s = 0.0;
          for (std::size_t t = 0; t < dh; ++t) s += q[t] * kj[t];
          s *= inv_sqrt;
          scores[j] = s;
          mx = any ? std::max(mx, s) : s;
          any = true;
        }
        if (!any) continue;
        double* p = probs.data() + ((b * heads + h) * seq + i) * seq;
        double z = 0.0;
        for (std::size_t j = 0; j < last; ++j) {
          if (!key_mask[b * seq + j]) continue;
          p[j] = std::exp(scores[j] - mx);
          z += p[j];
        }
        double* o = O + (b * seq + i) * d + h * dh;
        for (std::size_t j = 0; j < last; ++j) {
          if (!key_mask[b * seq + j]) continue;
          p[j] /= z;
          const double* vj = X + (b * seq + j) * d3 + 2 * d + h * dh;
          for (std::size_t t = 0; t < dh; ++t) o[t] += p[j] * vj[t];
        }
      }
    }
  }
  detail::check_finite(out, "attention");
  if (out.requires_grad()) {
    tape.record("attention", [qkv, out, key_mask, probs = std::move(probs), batch, seq, heads, causal, d,
                              d3, dh, inv_sqrt]() mutable {
      if (!out.has_grad()) return;
      const double* X = qkv.data();
      double* G = qkv.grad_data();
      const double* dO = out.grad().data();
      std::vector<double> dp(seq);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < seq; ++i) {
            const double* p = probs.data() + ((b * heads + h) * seq + i) * seq;
            const double* doi = dO + (b * seq + i) * d + h * dh;
            const std::size_t last = causal ? i + 1 : seq;
            double dot = 0.0;
            for (std::size_t j = 0; j < last; ++j) {
              if (!key_mask[b * seq + j]) continue;
              const double* vj = X + (b * seq + j) * d3 + 2 * d + h * dh;
              double* gvj = G + (b * seq + j) * d3 + 2 * d + h * dh;
              double s = 0.0;
              for (std::size_t t = 0; t < dh; ++t) {
                s += doi[t] * vj[t];
                gvj[t] += p[j] * doi[t];
              }
              dp[j] = s;
              dot += p[j] * s;
            }
            const double* q = X + (b * seq + i) * d3 + h * dh;
            double* gq = G + (b * seq + i) * d3 + h * dh;
            for (std::size_t j = 0; j < last; ++j) {
              if (!key_mask[b * seq + j]) continue;
              const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
              const double* kj = X + (b * seq + j) * d3 + d + h * dh;
              double* gk = G + (b * seq + j) * d3 + d + h * dh;
              for (std::size_t t = 0; t < dh; ++t) {
                gq[t] += ds * kj[t];
                gk[t] += ds * q[t];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// Named parameter list shared by the models, the optimizer and checkpoints.
using ParameterList = std::vector<std::pair<std::string, Tensor>>;

inline void zero_grads(ParameterList& params) {
  for (auto& [name, t] : params) t.zero_grad();
}

inline std::size_t parameter_count(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

struct OptimizerState {
  double learning_rate = 5e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// Adam with decoupled weight decay: p <- p * (1 - lr * wd), then the
// bias-corrected adaptive step. Gradients are left in place.
inline void adamw_step(ParameterList& params, OptimizerState& state) {
  if (!(state.beta1 > 0 && state.beta1 < 1 && state.beta2 > 0 && state.beta2 < 1)) {
    throw std::invalid_argument("adamw: betas must lie in (0, 1)");
  }
  if (state.first_moment.empty()) {
    for (const auto& [name, t] : params) {
      state.first_moment.emplace_back(t.size(), 0.0);
      state.second_moment.emplace_back(t.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeError("adamw: parameter list changed");
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) throw Error("adamw: missing gradient for " + name);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - state.learning_rate * state.weight_decay;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = params[p].second;
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    if (m.size() != t.size()) throw ShapeError("adamw: moment shape mismatch for " + params[p].first);
    double* w = t.data();
    const double* g = t.grad().data();
    for (std::size_t i = 0; i < t.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      if (state.weight_decay != 0.0) w[i] *= decay;
      w[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

// Checkpoint container, little-endian host layout:
//   "SYNCKPT\0" | u32 version | u32 count |
//   count x (u32 name_len | name | u32 ndim | u64 dims[ndim] | f64 values[])
inline constexpr char kCheckpointMagic[8] = {'S', 'Y', 'N', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("checkpoint: truncated");
  return v;
}
}  // namespace detail

inline std::uint64_t tensor_checksum(const Tensor& t) {
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double)));
}

inline void save_checkpoint(std::ostream& os, const ParameterList& params) {
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put(os, kCheckpointVersion);
  detail::put(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail::put(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put(os, static_cast<std::uint32_t>(t.shape().size()));
    for (auto dim : t.shape()) detail::put(os, static_cast<std::uint64_t>(dim));
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
}

// Plain-text companion: one "name<TAB>shape<TAB>checksum" line per array.
inline void write_checkpoint_manifest(std::ostream& os, const ParameterList& params) {
  for (const auto& [name, t] : params) {
    os << name << '\t' << shape_string(t.shape()) << '\t' << hex64(tensor_checksum(t)) << '\n';
  }
}

inline ParameterList read_checkpoint(std::istream& is) {
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw DataError("checkpoint: bad magic");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = detail::get<std::uint32_t>(is);
  ParameterList out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(detail::get<std::uint32_t>(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    Shape shape(detail::get<std::uint32_t>(is));
    for (auto& dim : shape) dim = static_cast<std::size_t>(detail::get<std::uint64_t>(is));
    std::vector<double> values(shape_size(shape));
    is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw DataError("checkpoint: truncated values for " + name);
    out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values), true));
  }
  return out;
}

// Copy stored values into an existing parameter list, matching by name and shape.
inline void load_checkpoint(std::istream& is, ParameterList& params) {
  auto stored = read_checkpoint(is);
  std::map<std::string, Tensor*> by_name;
  for (auto& [name, t] : stored) by_name[name] = &t;
  for (auto& [name, t] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint: missing parameter " + name);
    if (it->second->shape() != t.shape()) {
      throw DataError("checkpoint: shape mismatch for " + name + ": " + shape_string(it->second->shape()) +
                      " vs " + shape_string(t.shape()));
    }
    std::memcpy(t.data(), it->second->data(), t.size() * sizeof(double));
  }
}

inline std::uint64_t checkpoint_checksum(const ParameterList& params) {
  std::ostringstream os;
  save_checkpoint(os, params);
  return fnv1a64(os.str());
}

}  // namespace synergy
