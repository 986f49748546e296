// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "protonmt/rng.hpp"

namespace protonmt {

// ---------------------------------------------------------------------------
// Dense tensors (rank 0..3, row-major) with reverse-mode autodiff.
//
// Activations are Real (float in training, double in the gradient-check
// suite). Every operation takes an optional Tape*; with a tape, a backward
// closure is recorded whenever an input carries a gradient, and
// Tape::backward(loss) replays the closures in reverse. Without a tape the
// same functions run as plain inference kernels.
// ---------------------------------------------------------------------------

template <typename Real>
struct TensorData {
  std::vector<int> shape;   // empty = scalar
  std::vector<Real> value;
  std::vector<Real> grad;   // allocated iff requires_grad
  bool requires_grad = false;
};

template <typename Real>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<Real>>();
    t.d_->shape = std::move(shape);
    t.d_->value.assign(numel_of(t.d_->shape), Real(0));
    return t;
  }

  static Tensor scalar(Real v) {
    Tensor t = zeros({});
    t.d_->value[0] = v;
    return t;
  }

  static Tensor from(std::vector<Real> values, std::vector<int> shape) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<Real>>();
    if (values.size() != numel_of(shape))
      throw std::invalid_argument("tensor data length " +
                                  std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    t.d_->shape = std::move(shape);
    t.d_->value = std::move(values);
    return t;
  }

  /// Marks this tensor as a trainable leaf and allocates zero gradients.
  Tensor& set_requires_grad(bool on = true) {
    d_->requires_grad = on;
    if (on)
      d_->grad.assign(d_->value.size(), Real(0));
    else
      d_->grad.clear();
    return *this;
  }

  bool defined() const { return static_cast<bool>(d_); }
  const std::vector<int>& shape() const { return d_->shape; }
  size_t numel() const { return d_->value.size(); }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int rows() const { return d_->shape.at(0); }
  int cols() const { return d_->shape.at(1); }
  bool requires_grad() const { return d_->requires_grad; }

  std::vector<Real>& value() { return d_->value; }
  const std::vector<Real>& value() const { return d_->value; }
  std::vector<Real>& grad() { return d_->grad; }
  const std::vector<Real>& grad() const { return d_->grad; }

  Real& at(int i) { return d_->value.at(static_cast<size_t>(i)); }
  Real at(int i) const { return d_->value.at(static_cast<size_t>(i)); }
  Real& at(int i, int j) {
    return d_->value.at(static_cast<size_t>(i) * cols() + j);
  }
  Real at(int i, int j) const {
    return d_->value.at(static_cast<size_t>(i) * cols() + j);
  }

  void zero_grad() {
    if (d_->requires_grad) d_->grad.assign(d_->value.size(), Real(0));
  }

  std::shared_ptr<TensorData<Real>> data_ptr() const { return d_; }

  static size_t numel_of(const std::vector<int>& shape) {
    size_t n = 1;
    for (int s : shape) n *= static_cast<size_t>(s);
    return n;  // empty shape -> 1 (scalar)
  }

  static std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }
  std::string shape_str() const { return shape_str(d_->shape); }

 private:
  std::shared_ptr<TensorData<Real>> d_;
};

/// Ordered record of the operations of one forward pass. Backward replays the
/// record in reverse; a graph can be consumed exactly once.
template <typename Real>
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
  }

  size_t size() const { return ops_.size(); }
  bool consumed() const { return consumed_; }

  void backward(Tensor<Real> loss) {
    if (consumed_)
      throw std::logic_error("backward: graph already consumed; rebuild the "
                             "forward pass before differentiating again");
    if (loss.numel() != 1)
      throw std::invalid_argument("backward: loss must be a scalar, got " +
                                  loss.shape_str());
    consumed_ = true;
    if (loss.requires_grad()) loss.grad()[0] = Real(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

 private:
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Raw matrix kernels, shared by forward, backward and the incremental
// decoder. c is [m x p]; accumulate selects = vs +=.
// ---------------------------------------------------------------------------

template <typename Real>
void mm_nn(const Real* a, const Real* b, Real* c, int m, int n, int p,
           bool accumulate) {
  for (int i = 0; i < m; ++i) {
    Real* ci = c + static_cast<size_t>(i) * p;
    if (!accumulate)
      for (int j = 0; j < p; ++j) ci[j] = Real(0);
    const Real* ai = a + static_cast<size_t>(i) * n;
    for (int k = 0; k < n; ++k) {
      Real aik = ai[k];
      const Real* bk = b + static_cast<size_t>(k) * p;
      for (int j = 0; j < p; ++j) ci[j] += aik * bk[j];
    }
  }
}

// c[m x p] = a[m x n] * b^T where b is [p x n]. Transposes b into a
// thread-local scratch so the inner loops run in the vector-friendly
// broadcast form; the naive dot-product form is several times slower here.
template <typename Real>
void mm_nt(const Real* a, const Real* b, Real* c, int m, int n, int p,
           bool accumulate) {
  thread_local std::vector<Real> scratch;
  scratch.resize(static_cast<size_t>(n) * p);
  for (int j = 0; j < p; ++j) {
    const Real* bj = b + static_cast<size_t>(j) * n;
    for (int k = 0; k < n; ++k) scratch[static_cast<size_t>(k) * p + j] = bj[k];
  }
  mm_nn(a, scratch.data(), c, m, n, p, accumulate);
}

// c[m x p] = a^T * b where a is [n x m], b is [n x p].
template <typename Real>
void mm_tn(const Real* a, const Real* b, Real* c, int m, int n, int p,
           bool accumulate) {
  if (!accumulate)
    for (size_t i = 0; i < static_cast<size_t>(m) * p; ++i) c[i] = Real(0);
  for (int k = 0; k < n; ++k) {
    const Real* ak = a + static_cast<size_t>(k) * m;
    const Real* bk = b + static_cast<size_t>(k) * p;
    for (int i = 0; i < m; ++i) {
      Real aki = ak[i];
      Real* ci = c + static_cast<size_t>(i) * p;
      for (int j = 0; j < p; ++j) ci[j] += aki * bk[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Attention masks. allow[q * cols + j] != 0 means query q may attend key j.
// ---------------------------------------------------------------------------

struct AttentionMask {
  int rows = 0, cols = 0;
  std::vector<uint8_t> allow;

  static AttentionMask all(int rows, int cols) {
    AttentionMask m;
    m.rows = rows;
    m.cols = cols;
    m.allow.assign(static_cast<size_t>(rows) * cols, 1);
    return m;
  }

  static AttentionMask none(int rows, int cols) {
    AttentionMask m;
    m.rows = rows;
    m.cols = cols;
    m.allow.assign(static_cast<size_t>(rows) * cols, 0);
    return m;
  }

  /// Strictly causal square mask: query t sees keys 0..t.
  static AttentionMask causal(int n) {
    AttentionMask m = none(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) m.allow[static_cast<size_t>(i) * n + j] = 1;
    return m;
  }

  bool at(int r, int c) const {
    return allow[static_cast<size_t>(r) * cols + c] != 0;
  }
  void set(int r, int c, bool v) {
    allow[static_cast<size_t>(r) * cols + c] = v ? 1 : 0;
  }
  size_t count_allowed_in_row(int r) const {
    size_t n = 0;
    for (int c = 0; c < cols; ++c) n += at(r, c) ? 1 : 0;
    return n;
  }
};

// ---------------------------------------------------------------------------
// Operations.
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real>
Tensor<Real> make_output(std::vector<int> shape, Tape<Real>* tape,
                         bool any_input_grad) {
  Tensor<Real> out = Tensor<Real>::zeros(std::move(shape));
  if (tape != nullptr && any_input_grad) out.set_requires_grad(true);
  return out;
}

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace detail

/// Standard matrix product a[m x n] * b[n x p].
template <typename Real>
Tensor<Real> matmul(Tape<Real>* tape, const Tensor<Real>& a,
                    const Tensor<Real>& b) {
  detail::check(a.rank() == 2 && b.rank() == 2,
                "matmul: expects rank-2 inputs, got " + a.shape_str() + " and " +
                    b.shape_str());
  detail::check(a.cols() == b.rows(),
                "matmul: inner dimensions differ: " + a.shape_str() + " vs " +
                    b.shape_str());
  int m = a.rows(), n = a.cols(), p = b.cols();
  auto out = detail::make_output<Real>({m, p}, tape,
                                       a.requires_grad() || b.requires_grad());
  mm_nn(a.value().data(), b.value().data(), out.value().data(), m, n, p, false);
  if (out.requires_grad()) {
    tape->record([a, b, out, m, n, p]() {
      if (a.requires_grad())  // dA += dC * B^T
        mm_nt(out.grad().data(), b.value().data(),
              const_cast<Real*>(a.grad().data()), m, p, n, true);
      if (b.requires_grad())  // dB += A^T * dC
        mm_tn(a.value().data(), out.grad().data(),
              const_cast<Real*>(b.grad().data()), n, m, p, true);
    });
  }
  return out;
}

/// a[m x n] * b^T with b stored [p x n]; the attention-score product.
template <typename Real>
Tensor<Real> matmul_nt(Tape<Real>* tape, const Tensor<Real>& a,
                       const Tensor<Real>& b) {
  detail::check(a.rank() == 2 && b.rank() == 2 && a.cols() == b.cols(),
                "matmul_nt: shapes " + a.shape_str() + " and " + b.shape_str() +
                    " do not share the inner dimension");
  int m = a.rows(), n = a.cols(), p = b.rows();
  auto out = detail::make_output<Real>({m, p}, tape,
                                       a.requires_grad() || b.requires_grad());
  mm_nt(a.value().data(), b.value().data(), out.value().data(), m, n, p, false);
  if (out.requires_grad()) {
    tape->record([a, b, out, m, n, p]() {
      if (a.requires_grad())  // dA += dC * B
        mm_nn(out.grad().data(), b.value().data(),
              const_cast<Real*>(a.grad().data()), m, p, n, true);
      if (b.requires_grad())  // dB += dC^T * A
        mm_tn(out.grad().data(), a.value().data(),
              const_cast<Real*>(b.grad().data()), p, m, n, true);
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> add(Tape<Real>* tape, const Tensor<Real>& a,
                 const Tensor<Real>& b) {
  detail::check(a.shape() == b.shape(), "add: shape mismatch " + a.shape_str() +
                                            " vs " + b.shape_str());
  auto out = detail::make_output<Real>(a.shape(), tape,
                                       a.requires_grad() || b.requires_grad());
  for (size_t i = 0; i < a.numel(); ++i)
    out.value()[i] = a.value()[i] + b.value()[i];
  if (out.requires_grad()) {
    tape->record([a, b, out]() {
      if (a.requires_grad())
        for (size_t i = 0; i < out.numel(); ++i)
          const_cast<Real&>(a.grad()[i]) += out.grad()[i];
      if (b.requires_grad())
        for (size_t i = 0; i < out.numel(); ++i)
          const_cast<Real&>(b.grad()[i]) += out.grad()[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> mul(Tape<Real>* tape, const Tensor<Real>& a,
                 const Tensor<Real>& b) {
  detail::check(a.shape() == b.shape(), "mul: shape mismatch " + a.shape_str() +
                                            " vs " + b.shape_str());
  auto out = detail::make_output<Real>(a.shape(), tape,
                                       a.requires_grad() || b.requires_grad());
  for (size_t i = 0; i < a.numel(); ++i)
    out.value()[i] = a.value()[i] * b.value()[i];
  if (out.requires_grad()) {
    tape->record([a, b, out]() {
      if (a.requires_grad())
        for (size_t i = 0; i < out.numel(); ++i)
          const_cast<Real&>(a.grad()[i]) += out.grad()[i] * b.value()[i];
      if (b.requires_grad())
        for (size_t i = 0; i < out.numel(); ++i)
          const_cast<Real&>(b.grad()[i]) += out.grad()[i] * a.value()[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> scale(Tape<Real>* tape, const Tensor<Real>& x, Real c) {
  auto out = detail::make_output<Real>(x.shape(), tape, x.requires_grad());
  for (size_t i = 0; i < x.numel(); ++i) out.value()[i] = x.value()[i] * c;
  if (out.requires_grad()) {
    tape->record([x, out, c]() {
      for (size_t i = 0; i < out.numel(); ++i)
        const_cast<Real&>(x.grad()[i]) += out.grad()[i] * c;
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> relu(Tape<Real>* tape, const Tensor<Real>& x) {
  auto out = detail::make_output<Real>(x.shape(), tape, x.requires_grad());
  for (size_t i = 0; i < x.numel(); ++i)
    out.value()[i] = x.value()[i] > Real(0) ? x.value()[i] : Real(0);
  if (out.requires_grad()) {
    tape->record([x, out]() {
      for (size_t i = 0; i < out.numel(); ++i)
        if (x.value()[i] > Real(0))
          const_cast<Real&>(x.grad()[i]) += out.grad()[i];
    });
  }
  return out;
}

/// Adds a length-d bias vector to every row of x [T x d]. When row_enabled is
/// non-null, rows with row_enabled[i] == 0 are passed through unchanged.
template <typename Real>
Tensor<Real> add_row_bias(Tape<Real>* tape, const Tensor<Real>& x,
                          const Tensor<Real>& b,
                          const std::vector<uint8_t>* row_enabled = nullptr) {
  detail::check(x.rank() == 2 && b.rank() == 1 && b.rows() == x.cols(),
                "add_row_bias: x " + x.shape_str() + " bias " + b.shape_str());
  int rows = x.rows(), d = x.cols();
  auto out = detail::make_output<Real>(x.shape(), tape,
                                       x.requires_grad() || b.requires_grad());
  std::vector<uint8_t> enabled =
      row_enabled ? *row_enabled : std::vector<uint8_t>(rows, 1);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < d; ++j)
      out.at(i, j) = x.at(i, j) + (enabled[i] ? b.at(j) : Real(0));
  if (out.requires_grad()) {
    tape->record([x, b, out, rows, d, enabled]() {
      if (x.requires_grad())
        for (size_t i = 0; i < out.numel(); ++i)
          const_cast<Real&>(x.grad()[i]) += out.grad()[i];
      if (b.requires_grad())
        for (int i = 0; i < rows; ++i)
          if (enabled[i])
            for (int j = 0; j < d; ++j)
              const_cast<Real&>(b.grad()[j]) += out.grad()[static_cast<size_t>(i) * d + j];
    });
  }
  return out;
}

/// Numerically stabilized softmax over each row; optionally masked. Rows with
/// no allowed entries come out all-zero rather than NaN.
template <typename Real>
Tensor<Real> softmax_rows(Tape<Real>* tape, const Tensor<Real>& x,
                          const AttentionMask* mask = nullptr) {
  detail::check(x.rank() == 2, "softmax_rows: expects rank-2, got " + x.shape_str());
  int rows = x.rows(), cols = x.cols();
  if (mask)
    detail::check(mask->rows == rows && mask->cols == cols,
                  "softmax_rows: mask " + std::to_string(mask->rows) + "x" +
                      std::to_string(mask->cols) + " does not match " +
                      x.shape_str());
  auto out = detail::make_output<Real>(x.shape(), tape, x.requires_grad());
  for (int i = 0; i < rows; ++i) {
    const Real* xi = x.value().data() + static_cast<size_t>(i) * cols;
    Real* oi = out.value().data() + static_cast<size_t>(i) * cols;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (int j = 0; j < cols; ++j)
      if (!mask || mask->at(i, j)) mx = std::max(mx, xi[j]);
    if (mx == -std::numeric_limits<Real>::infinity()) continue;  // empty row
    Real denom = Real(0);
    for (int j = 0; j < cols; ++j) {
      if (!mask || mask->at(i, j)) {
        oi[j] = std::exp(xi[j] - mx);
        denom += oi[j];
      }
    }
    for (int j = 0; j < cols; ++j) oi[j] /= denom;
  }
  if (out.requires_grad()) {
    tape->record([x, out, rows, cols]() {
      for (int i = 0; i < rows; ++i) {
        const Real* oi = out.value().data() + static_cast<size_t>(i) * cols;
        const Real* goi = out.grad().data() + static_cast<size_t>(i) * cols;
        Real dot = Real(0);
        for (int j = 0; j < cols; ++j) dot += oi[j] * goi[j];
        Real* gxi = const_cast<Real*>(x.grad().data()) + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) gxi[j] += oi[j] * (goi[j] - dot);
      }
    });
  }
  return out;
}

/// Per-row layer normalization with affine transform; epsilon sits inside the
/// square root.
template <typename Real>
Tensor<Real> layer_norm(Tape<Real>* tape, const Tensor<Real>& x,
                        const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps = Real(1e-5)) {
  detail::check(x.rank() == 2 && gain.rank() == 1 && bias.rank() == 1 &&
                    gain.rows() == x.cols() && bias.rows() == x.cols(),
                "layer_norm: x " + x.shape_str() + " gain " + gain.shape_str() +
                    " bias " + bias.shape_str());
  int rows = x.rows(), d = x.cols();
  bool needs_grad =
      x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  auto out = detail::make_output<Real>(x.shape(), tape, needs_grad);
  auto xhat = std::make_shared<std::vector<Real>>(x.numel());
  auto inv_std = std::make_shared<std::vector<Real>>(rows);
  for (int i = 0; i < rows; ++i) {
    const Real* xi = x.value().data() + static_cast<size_t>(i) * d;
    Real mean = Real(0);
    for (int j = 0; j < d; ++j) mean += xi[j];
    mean /= Real(d);
    Real var = Real(0);
    for (int j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= Real(d);
    Real is = Real(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    Real* hi = xhat->data() + static_cast<size_t>(i) * d;
    Real* oi = out.value().data() + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j) {
      hi[j] = (xi[j] - mean) * is;
      oi[j] = gain.at(j) * hi[j] + bias.at(j);
    }
  }
  if (out.requires_grad()) {
    tape->record([x, gain, bias, out, xhat, inv_std, rows, d]() {
      for (int i = 0; i < rows; ++i) {
        const Real* go = out.grad().data() + static_cast<size_t>(i) * d;
        const Real* hi = xhat->data() + static_cast<size_t>(i) * d;
        if (gain.requires_grad() || bias.requires_grad()) {
          for (int j = 0; j < d; ++j) {
            if (gain.requires_grad())
              const_cast<Real&>(gain.grad()[j]) += go[j] * hi[j];
            if (bias.requires_grad())
              const_cast<Real&>(bias.grad()[j]) += go[j];
          }
        }
        if (x.requires_grad()) {
          // dxhat = go * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
          Real sum_dh = Real(0), sum_dh_h = Real(0);
          Real is = (*inv_std)[i];
          for (int j = 0; j < d; ++j) {
            Real dh = go[j] * gain.at(j);
            sum_dh += dh;
            sum_dh_h += dh * hi[j];
          }
          Real* gx = const_cast<Real*>(x.grad().data()) + static_cast<size_t>(i) * d;
          for (int j = 0; j < d; ++j) {
            Real dh = go[j] * gain.at(j);
            gx[j] += (dh - sum_dh / Real(d) - hi[j] * sum_dh_h / Real(d)) * is;
          }
        }
      }
    });
  }
  return out;
}

/// Gathers rows of an embedding table: out[t] = table[ids[t]].
template <typename Real>
Tensor<Real> embedding_rows(Tape<Real>* tape, const Tensor<Real>& table,
                            const std::vector<int>& ids) {
  detail::check(table.rank() == 2, "embedding_rows: table must be rank-2");
  int d = table.cols(), vocab = table.rows();
  for (int id : ids)
    if (id < 0 || id >= vocab)
      throw std::out_of_range("embedding_rows: token id " + std::to_string(id) +
                              " outside vocabulary of size " +
                              std::to_string(vocab));
  int t_len = static_cast<int>(ids.size());
  auto out = detail::make_output<Real>({t_len, d}, tape, table.requires_grad());
  for (int t = 0; t < t_len; ++t)
    for (int j = 0; j < d; ++j) out.at(t, j) = table.at(ids[t], j);
  if (out.requires_grad()) {
    tape->record([table, out, ids, d]() {
      for (size_t t = 0; t < ids.size(); ++t) {
        Real* g = const_cast<Real*>(table.grad().data()) +
                  static_cast<size_t>(ids[t]) * d;
        const Real* go = out.grad().data() + t * d;
        for (int j = 0; j < d; ++j) g[j] += go[j];
      }
    });
  }
  return out;
}

/// Vertical concatenation of rank-2 blocks sharing a column count.
template <typename Real>
Tensor<Real> concat_rows(Tape<Real>* tape, const std::vector<Tensor<Real>>& parts) {
  detail::check(!parts.empty(), "concat_rows: no inputs");
  int d = parts[0].cols();
  int total = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    detail::check(p.rank() == 2 && p.cols() == d,
                  "concat_rows: inconsistent shapes");
    total += p.rows();
    any_grad = any_grad || p.requires_grad();
  }
  auto out = detail::make_output<Real>({total, d}, tape, any_grad);
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().begin(), p.value().end(), out.value().begin() + off);
    off += p.numel();
  }
  if (out.requires_grad()) {
    tape->record([parts, out]() {
      size_t off = 0;
      for (const auto& p : parts) {
        if (p.requires_grad())
          for (size_t i = 0; i < p.numel(); ++i)
            const_cast<Real&>(p.grad()[i]) += out.grad()[off + i];
        off += p.numel();
      }
    });
  }
  return out;
}

/// Splits x [T x d] into n equal column chunks (the per-head views).
template <typename Real>
std::vector<Tensor<Real>> split_cols(Tape<Real>* tape, const Tensor<Real>& x,
                                     int n_chunks) {
  detail::check(x.rank() == 2 && x.cols() % n_chunks == 0,
                "split_cols: " + x.shape_str() + " not divisible into " +
                    std::to_string(n_chunks) + " chunks");
  int rows = x.rows(), d = x.cols(), w = d / n_chunks;
  std::vector<Tensor<Real>> outs;
  for (int c = 0; c < n_chunks; ++c) {
    auto out = detail::make_output<Real>({rows, w}, tape, x.requires_grad());
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < w; ++j) out.at(i, j) = x.at(i, c * w + j);
    if (out.requires_grad()) {
      tape->record([x, out, rows, w, c, d]() {
        for (int i = 0; i < rows; ++i) {
          Real* gx = const_cast<Real*>(x.grad().data()) + static_cast<size_t>(i) * d + c * w;
          const Real* go = out.grad().data() + static_cast<size_t>(i) * w;
          for (int j = 0; j < w; ++j) gx[j] += go[j];
        }
      });
    }
    outs.push_back(std::move(out));
  }
  return outs;
}

/// Horizontal concatenation (inverse of split_cols).
template <typename Real>
Tensor<Real> concat_cols(Tape<Real>* tape, const std::vector<Tensor<Real>>& parts) {
  detail::check(!parts.empty(), "concat_cols: no inputs");
  int rows = parts[0].rows();
  int total = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    detail::check(p.rank() == 2 && p.rows() == rows,
                  "concat_cols: inconsistent shapes");
    total += p.cols();
    any_grad = any_grad || p.requires_grad();
  }
  auto out = detail::make_output<Real>({rows, total}, tape, any_grad);
  int off = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < p.cols(); ++j) out.at(i, off + j) = p.at(i, j);
    off += p.cols();
  }
  if (out.requires_grad()) {
    tape->record([parts, out, rows, total]() {
      int off = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) {
          int w = p.cols();
          for (int i = 0; i < rows; ++i) {
            Real* gp = const_cast<Real*>(p.grad().data()) + static_cast<size_t>(i) * w;
            const Real* go = out.grad().data() + static_cast<size_t>(i) * total + off;
            for (int j = 0; j < w; ++j) gp[j] += go[j];
          }
        }
        off += p.cols();
      }
    });
  }
  return out;
}

/// Inverted dropout: kept entries scaled by 1/(1-rate). rate <= 0 is a no-op.
template <typename Real>
Tensor<Real> dropout(Tape<Real>* tape, const Tensor<Real>& x, double rate,
                     Rng& rng) {
  if (rate <= 0.0) return x;
  detail::check(rate < 1.0, "dropout: rate must be < 1");
  auto keep = std::make_shared<std::vector<uint8_t>>(x.numel());
  Real inv_keep = Real(1.0 / (1.0 - rate));
  auto out = detail::make_output<Real>(x.shape(), tape, x.requires_grad());
  for (size_t i = 0; i < x.numel(); ++i) {
    (*keep)[i] = rng.uniform() >= rate ? 1 : 0;
    out.value()[i] = (*keep)[i] ? x.value()[i] * inv_keep : Real(0);
  }
  if (out.requires_grad()) {
    tape->record([x, out, keep, inv_keep]() {
      for (size_t i = 0; i < out.numel(); ++i)
        if ((*keep)[i])
          const_cast<Real&>(x.grad()[i]) += out.grad()[i] * inv_keep;
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> sum_all(Tape<Real>* tape, const Tensor<Real>& x) {
  auto out = detail::make_output<Real>({}, tape, x.requires_grad());
  Real s = Real(0);
  for (Real v : x.value()) s += v;
  out.value()[0] = s;
  if (out.requires_grad()) {
    tape->record([x, out]() {
      Real g = out.grad()[0];
      for (size_t i = 0; i < x.numel(); ++i)
        const_cast<Real&>(x.grad()[i]) += g;
    });
  }
  return out;
}

/// Label-smoothed cross entropy summed over positions. The smoothed target
/// distribution puts 1-eps on the gold token and eps/V on every class.
template <typename Real>
Tensor<Real> cross_entropy_label_smoothed(Tape<Real>* tape,
                                          const Tensor<Real>& logits,
                                          const std::vector<int>& targets,
                                          double eps_smooth) {
  detail::check(logits.rank() == 2, "cross_entropy: logits must be rank-2");
  int t_len = logits.rows(), vocab = logits.cols();
  detail::check(static_cast<int>(targets.size()) == t_len,
                "cross_entropy: " + std::to_string(targets.size()) +
                    " targets for " + std::to_string(t_len) + " positions");
  for (int id : targets)
    detail::check(id >= 0 && id < vocab, "cross_entropy: target id out of range");
  auto probs = std::make_shared<std::vector<Real>>(logits.numel());
  auto out = detail::make_output<Real>({}, tape, logits.requires_grad());
  Real one_minus = Real(1.0 - eps_smooth);
  Real uni = Real(eps_smooth / vocab);
  double loss = 0.0;
  for (int t = 0; t < t_len; ++t) {
    const Real* lt = logits.value().data() + static_cast<size_t>(t) * vocab;
    Real* pt = probs->data() + static_cast<size_t>(t) * vocab;
    Real mx = lt[0];
    for (int v = 1; v < vocab; ++v) mx = std::max(mx, lt[v]);
    Real denom = Real(0);
    for (int v = 0; v < vocab; ++v) {
      pt[v] = std::exp(lt[v] - mx);
      denom += pt[v];
    }
    Real log_denom = std::log(denom);
    double sum_logp = 0.0;
    for (int v = 0; v < vocab; ++v) {
      sum_logp += static_cast<double>(lt[v] - mx) - static_cast<double>(log_denom);
      pt[v] /= denom;
    }
    double logp_gold =
        static_cast<double>(lt[targets[t]] - mx) - static_cast<double>(log_denom);
    loss += -(1.0 - eps_smooth) * logp_gold - (eps_smooth / vocab) * sum_logp;
  }
  out.value()[0] = static_cast<Real>(loss);
  if (out.requires_grad()) {
    tape->record([logits, out, probs, targets, t_len, vocab, one_minus, uni]() {
      Real g = out.grad()[0];
      Real* gl = const_cast<Real*>(logits.grad().data());
      for (int t = 0; t < t_len; ++t) {
        const Real* pt = probs->data() + static_cast<size_t>(t) * vocab;
        Real* glt = gl + static_cast<size_t>(t) * vocab;
        for (int v = 0; v < vocab; ++v) glt[v] += g * (pt[v] - uni);
        glt[targets[t]] -= g * one_minus;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Block-local attention primitives. Keys/values come k rows per query
// position (kv row t*k+j belongs to query t), so score and mixing work is
// O(T*k) rather than O(T * T*k). Queries with enabled[t] == 0 produce zero
// rows.
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> block_scores(Tape<Real>* tape, const Tensor<Real>& q,
                          const Tensor<Real>& kv, int group,
                          const std::vector<uint8_t>& enabled, Real scale_by) {
  detail::check(q.rank() == 2 && kv.rank() == 2 && q.cols() == kv.cols(),
                "block_scores: q " + q.shape_str() + " kv " + kv.shape_str());
  int t_len = q.rows(), dh = q.cols();
  detail::check(kv.rows() == t_len * group,
                "block_scores: kv must have rows = queries * group");
  auto out = detail::make_output<Real>({t_len, group}, tape,
                                       q.requires_grad() || kv.requires_grad());
  for (int t = 0; t < t_len; ++t) {
    if (!enabled[t]) continue;
    const Real* qt = q.value().data() + static_cast<size_t>(t) * dh;
    for (int j = 0; j < group; ++j) {
      const Real* kj = kv.value().data() + (static_cast<size_t>(t) * group + j) * dh;
      Real acc = Real(0);
      for (int c = 0; c < dh; ++c) acc += qt[c] * kj[c];
      out.at(t, j) = acc * scale_by;
    }
  }
  if (out.requires_grad()) {
    tape->record([q, kv, out, group, enabled, scale_by, t_len, dh]() {
      for (int t = 0; t < t_len; ++t) {
        if (!enabled[t]) continue;
        const Real* qt = q.value().data() + static_cast<size_t>(t) * dh;
        Real* gq = q.requires_grad()
                       ? const_cast<Real*>(q.grad().data()) + static_cast<size_t>(t) * dh
                       : nullptr;
        for (int j = 0; j < group; ++j) {
          Real go = out.grad()[static_cast<size_t>(t) * group + j] * scale_by;
          const Real* kj = kv.value().data() + (static_cast<size_t>(t) * group + j) * dh;
          if (gq)
            for (int c = 0; c < dh; ++c) gq[c] += go * kj[c];
          if (kv.requires_grad()) {
            Real* gk = const_cast<Real*>(kv.grad().data()) +
                       (static_cast<size_t>(t) * group + j) * dh;
            for (int c = 0; c < dh; ++c) gk[c] += go * qt[c];
          }
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> block_mix(Tape<Real>* tape, const Tensor<Real>& probs,
                       const Tensor<Real>& kv) {
  detail::check(probs.rank() == 2 && kv.rank() == 2, "block_mix: rank-2 inputs");
  int t_len = probs.rows(), group = probs.cols(), dh = kv.cols();
  detail::check(kv.rows() == t_len * group,
                "block_mix: kv rows must equal queries * group");
  auto out = detail::make_output<Real>({t_len, dh}, tape,
                                       probs.requires_grad() || kv.requires_grad());
  for (int t = 0; t < t_len; ++t) {
    Real* ot = out.value().data() + static_cast<size_t>(t) * dh;
    for (int j = 0; j < group; ++j) {
      Real p = probs.at(t, j);
      if (p == Real(0)) continue;
      const Real* vj = kv.value().data() + (static_cast<size_t>(t) * group + j) * dh;
      for (int c = 0; c < dh; ++c) ot[c] += p * vj[c];
    }
  }
  if (out.requires_grad()) {
    tape->record([probs, kv, out, t_len, group, dh]() {
      for (int t = 0; t < t_len; ++t) {
        const Real* got = out.grad().data() + static_cast<size_t>(t) * dh;
        for (int j = 0; j < group; ++j) {
          const Real* vj = kv.value().data() + (static_cast<size_t>(t) * group + j) * dh;
          if (probs.requires_grad()) {
            Real acc = Real(0);
            for (int c = 0; c < dh; ++c) acc += got[c] * vj[c];
            const_cast<Real&>(probs.grad()[static_cast<size_t>(t) * group + j]) += acc;
          }
          if (kv.requires_grad()) {
            Real p = probs.at(t, j);
            Real* gv = const_cast<Real*>(kv.grad().data()) +
                       (static_cast<size_t>(t) * group + j) * dh;
            for (int c = 0; c < dh; ++c) gv[c] += p * got[c];
          }
        }
      }
    });
  }
  return out;
}

/// Fused linear layer out = x * w + b (bias broadcast over rows).
template <typename Real>
Tensor<Real> affine(Tape<Real>* tape, const Tensor<Real>& x,
                    const Tensor<Real>& w, const Tensor<Real>& b) {
  detail::check(x.rank() == 2 && w.rank() == 2 && b.rank() == 1 &&
                    x.cols() == w.rows() && b.rows() == w.cols(),
                "affine: x " + x.shape_str() + " w " + w.shape_str() + " b " +
                    b.shape_str());
  int m = x.rows(), n = x.cols(), p = w.cols();
  bool any = x.requires_grad() || w.requires_grad() || b.requires_grad();
  auto out = detail::make_output<Real>({m, p}, tape, any);
  mm_nn(x.value().data(), w.value().data(), out.value().data(), m, n, p, false);
  for (int i = 0; i < m; ++i) {
    Real* oi = out.value().data() + static_cast<size_t>(i) * p;
    const Real* bp = b.value().data();
    for (int j = 0; j < p; ++j) oi[j] += bp[j];
  }
  if (out.requires_grad()) {
    tape->record([x, w, b, out, m, n, p]() {
      if (x.requires_grad())  // dX += dOut * W^T
        mm_nt(out.grad().data(), w.value().data(),
              const_cast<Real*>(x.grad().data()), m, p, n, true);
      if (w.requires_grad())  // dW += X^T * dOut
        mm_tn(x.value().data(), out.grad().data(),
              const_cast<Real*>(w.grad().data()), n, m, p, true);
      if (b.requires_grad()) {
        Real* gb = const_cast<Real*>(b.grad().data());
        for (int i = 0; i < m; ++i) {
          const Real* go = out.grad().data() + static_cast<size_t>(i) * p;
          for (int j = 0; j < p; ++j) gb[j] += go[j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fused multi-head attention cores. These compute all heads of
// Softmax(Q K^T / sqrt(dh)) V in one tape operation over packed [T x d]
// projections, with the attention-weight dropout applied inside. The
// fine-grained ops above express the same math; the fused forms exist for
// the training hot path.
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> mha_core(Tape<Real>* tape, const Tensor<Real>& q,
                      const Tensor<Real>& k, const Tensor<Real>& v, int n_heads,
                      const AttentionMask* mask, double attn_dropout = 0.0,
                      Rng* rng = nullptr) {
  detail::check(q.rank() == 2 && k.rank() == 2 && v.rank() == 2 &&
                    q.cols() == k.cols() && k.cols() == v.cols() &&
                    k.rows() == v.rows() && q.cols() % n_heads == 0,
                "mha_core: bad shapes q " + q.shape_str() + " k " +
                    k.shape_str() + " v " + v.shape_str());
  int tq = q.rows(), tk = k.rows(), d = q.cols(), dh = d / n_heads;
  if (mask)
    detail::check(mask->rows == tq && mask->cols == tk,
                  "mha_core: mask shape mismatch");
  Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(dh));
  bool any = q.requires_grad() || k.requires_grad() || v.requires_grad();
  auto out = detail::make_output<Real>({tq, d}, tape, any);
  bool use_drop = attn_dropout > 0.0 && rng != nullptr;
  Real inv_keep = use_drop ? Real(1.0 / (1.0 - attn_dropout)) : Real(1);

  auto probs = std::make_shared<std::vector<Real>>(
      static_cast<size_t>(n_heads) * tq * tk);
  auto keep = use_drop ? std::make_shared<std::vector<uint8_t>>(
                             static_cast<size_t>(n_heads) * tq * tk, 1)
                       : nullptr;

  std::vector<Real> scores(tk);
  for (int h = 0; h < n_heads; ++h) {
    int off = h * dh;
    for (int t = 0; t < tq; ++t) {
      const Real* qt = q.value().data() + static_cast<size_t>(t) * d + off;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (int u = 0; u < tk; ++u) {
        if (mask && !mask->at(t, u)) continue;
        const Real* ku = k.value().data() + static_cast<size_t>(u) * d + off;
        Real acc = Real(0);
        for (int c = 0; c < dh; ++c) acc += qt[c] * ku[c];
        scores[u] = acc * inv_sqrt;
        mx = std::max(mx, scores[u]);
      }
      Real* pt = probs->data() + (static_cast<size_t>(h) * tq + t) * tk;
      Real* ot = out.value().data() + static_cast<size_t>(t) * d + off;
      for (int c = 0; c < dh; ++c) ot[c] = Real(0);
      if (mx == -std::numeric_limits<Real>::infinity()) {
        for (int u = 0; u < tk; ++u) pt[u] = Real(0);
        continue;  // fully masked row stays zero
      }
      Real denom = Real(0);
      for (int u = 0; u < tk; ++u) {
        if (mask && !mask->at(t, u)) {
          pt[u] = Real(0);
          continue;
        }
        pt[u] = std::exp(scores[u] - mx);
        denom += pt[u];
      }
      for (int u = 0; u < tk; ++u) pt[u] /= denom;
      for (int u = 0; u < tk; ++u) {
        Real p = pt[u];
        if (p == Real(0)) continue;
        if (use_drop) {
          uint8_t keep_it = rng->uniform() >= attn_dropout ? 1 : 0;
          (*keep)[(static_cast<size_t>(h) * tq + t) * tk + u] = keep_it;
          if (!keep_it) continue;
          p *= inv_keep;
        }
        const Real* vu = v.value().data() + static_cast<size_t>(u) * d + off;
        for (int c = 0; c < dh; ++c) ot[c] += p * vu[c];
      }
    }
  }
  if (out.requires_grad()) {
    tape->record([q, k, v, out, probs, keep, n_heads, tq, tk, d, dh, inv_sqrt,
                  inv_keep]() {
      std::vector<Real> d_probs(tk), d_scores(tk);
      for (int h = 0; h < n_heads; ++h) {
        int off = h * dh;
        for (int t = 0; t < tq; ++t) {
          const Real* got = out.grad().data() + static_cast<size_t>(t) * d + off;
          const Real* pt = probs->data() + (static_cast<size_t>(h) * tq + t) * tk;
          // dPd and dV
          for (int u = 0; u < tk; ++u) {
            Real p = pt[u];
            Real pd = p;
            if (keep) pd = (*keep)[(static_cast<size_t>(h) * tq + t) * tk + u]
                               ? p * inv_keep
                               : Real(0);
            const Real* vu = v.value().data() + static_cast<size_t>(u) * d + off;
            Real acc = Real(0);
            for (int c = 0; c < dh; ++c) acc += got[c] * vu[c];
            // through dropout: dP = dPd * mask * inv_keep
            Real dpd = acc;
            if (keep)
              dpd = (*keep)[(static_cast<size_t>(h) * tq + t) * tk + u]
                        ? dpd * inv_keep
                        : Real(0);
            d_probs[u] = dpd;
            if (v.requires_grad() && pd != Real(0)) {
              Real* gv = const_cast<Real*>(v.grad().data()) +
                         static_cast<size_t>(u) * d + off;
              for (int c = 0; c < dh; ++c) gv[c] += pd * got[c];
            }
          }
          // softmax backward: dS = P * (dP - sum(dP * P))
          Real dot = Real(0);
          for (int u = 0; u < tk; ++u) dot += d_probs[u] * pt[u];
          for (int u = 0; u < tk; ++u) d_scores[u] = pt[u] * (d_probs[u] - dot);
          // dQ and dK
          const Real* qt = q.value().data() + static_cast<size_t>(t) * d + off;
          Real* gq = q.requires_grad()
                         ? const_cast<Real*>(q.grad().data()) +
                               static_cast<size_t>(t) * d + off
                         : nullptr;
          for (int u = 0; u < tk; ++u) {
            Real ds = d_scores[u] * inv_sqrt;
            if (ds == Real(0)) continue;
            const Real* ku = k.value().data() + static_cast<size_t>(u) * d + off;
            if (gq)
              for (int c = 0; c < dh; ++c) gq[c] += ds * ku[c];
            if (k.requires_grad()) {
              Real* gk = const_cast<Real*>(k.grad().data()) +
                         static_cast<size_t>(u) * d + off;
              for (int c = 0; c < dh; ++c) gk[c] += ds * qt[c];
            }
          }
        }
      }
    });
  }
  return out;
}

/// Fused block-local attention: kv row t*group+j belongs to query t, so each
/// position attends over its own group of keys only (O(T*group) score work).
/// Queries with enabled[t] == 0 produce zero rows.
template <typename Real>
Tensor<Real> proto_mha_core(Tape<Real>* tape, const Tensor<Real>& q,
                            const Tensor<Real>& k, const Tensor<Real>& v,
                            int n_heads, int group,
                            const std::vector<uint8_t>& enabled,
                            double attn_dropout = 0.0, Rng* rng = nullptr) {
  detail::check(q.rank() == 2 && k.rank() == 2 && v.rank() == 2 &&
                    q.cols() == k.cols() && k.cols() == v.cols() &&
                    k.rows() == v.rows() && q.cols() % n_heads == 0 &&
                    k.rows() == q.rows() * group,
                "proto_mha_core: bad shapes");
  int t_len = q.rows(), d = q.cols(), dh = d / n_heads;
  Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(dh));
  bool any = q.requires_grad() || k.requires_grad() || v.requires_grad();
  auto out = detail::make_output<Real>({t_len, d}, tape, any);
  bool use_drop = attn_dropout > 0.0 && rng != nullptr;
  Real inv_keep = use_drop ? Real(1.0 / (1.0 - attn_dropout)) : Real(1);

  auto probs = std::make_shared<std::vector<Real>>(
      static_cast<size_t>(n_heads) * t_len * group, Real(0));
  auto keep = use_drop ? std::make_shared<std::vector<uint8_t>>(
                             static_cast<size_t>(n_heads) * t_len * group, 1)
                       : nullptr;

  std::vector<Real> scores(group);
  for (int h = 0; h < n_heads; ++h) {
    int off = h * dh;
    for (int t = 0; t < t_len; ++t) {
      Real* ot = out.value().data() + static_cast<size_t>(t) * d + off;
      for (int c = 0; c < dh; ++c) ot[c] = Real(0);
      if (!enabled[t]) continue;
      const Real* qt = q.value().data() + static_cast<size_t>(t) * d + off;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (int j = 0; j < group; ++j) {
        const Real* kj = k.value().data() +
                         (static_cast<size_t>(t) * group + j) * d + off;
        Real acc = Real(0);
        for (int c = 0; c < dh; ++c) acc += qt[c] * kj[c];
        scores[j] = acc * inv_sqrt;
        mx = std::max(mx, scores[j]);
      }
      Real* pt = probs->data() + (static_cast<size_t>(h) * t_len + t) * group;
      Real denom = Real(0);
      for (int j = 0; j < group; ++j) {
        pt[j] = std::exp(scores[j] - mx);
        denom += pt[j];
      }
      for (int j = 0; j < group; ++j) pt[j] /= denom;
      for (int j = 0; j < group; ++j) {
        Real p = pt[j];
        if (use_drop) {
          uint8_t keep_it = rng->uniform() >= attn_dropout ? 1 : 0;
          (*keep)[(static_cast<size_t>(h) * t_len + t) * group + j] = keep_it;
          if (!keep_it) continue;
          p *= inv_keep;
        }
        const Real* vj = v.value().data() +
                         (static_cast<size_t>(t) * group + j) * d + off;
        for (int c = 0; c < dh; ++c) ot[c] += p * vj[c];
      }
    }
  }
  if (out.requires_grad()) {
    tape->record([q, k, v, out, probs, keep, enabled, n_heads, t_len, group, d,
                  dh, inv_sqrt, inv_keep]() {
      std::vector<Real> d_probs(group), d_scores(group);
      for (int h = 0; h < n_heads; ++h) {
        int off = h * dh;
        for (int t = 0; t < t_len; ++t) {
          if (!enabled[t]) continue;
          const Real* got = out.grad().data() + static_cast<size_t>(t) * d + off;
          const Real* pt =
              probs->data() + (static_cast<size_t>(h) * t_len + t) * group;
          for (int j = 0; j < group; ++j) {
            size_t kv_row = static_cast<size_t>(t) * group + j;
            Real p = pt[j];
            Real pd = p;
            if (keep)
              pd = (*keep)[(static_cast<size_t>(h) * t_len + t) * group + j]
                       ? p * inv_keep
                       : Real(0);
            const Real* vj = v.value().data() + kv_row * d + off;
            Real acc = Real(0);
            for (int c = 0; c < dh; ++c) acc += got[c] * vj[c];
            Real dpd = acc;
            if (keep)
              dpd = (*keep)[(static_cast<size_t>(h) * t_len + t) * group + j]
                        ? dpd * inv_keep
                        : Real(0);
            d_probs[j] = dpd;
            if (v.requires_grad() && pd != Real(0)) {
              Real* gv = const_cast<Real*>(v.grad().data()) + kv_row * d + off;
              for (int c = 0; c < dh; ++c) gv[c] += pd * got[c];
            }
          }
          Real dot = Real(0);
          for (int j = 0; j < group; ++j) dot += d_probs[j] * pt[j];
          for (int j = 0; j < group; ++j) d_scores[j] = pt[j] * (d_probs[j] - dot);
          const Real* qt = q.value().data() + static_cast<size_t>(t) * d + off;
          Real* gq = q.requires_grad()
                         ? const_cast<Real*>(q.grad().data()) +
                               static_cast<size_t>(t) * d + off
                         : nullptr;
          for (int j = 0; j < group; ++j) {
            Real ds = d_scores[j] * inv_sqrt;
            size_t kv_row = static_cast<size_t>(t) * group + j;
            const Real* kj = k.value().data() + kv_row * d + off;
            if (gq)
              for (int c = 0; c < dh; ++c) gq[c] += ds * kj[c];
            if (k.requires_grad()) {
              Real* gk = const_cast<Real*>(k.grad().data()) + kv_row * d + off;
              for (int c = 0; c < dh; ++c) gk[c] += ds * qt[c];
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename Real>
bool all_finite(const Tensor<Real>& t) {
  for (Real v : t.value())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

}  // namespace protonmt
