#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "pargo/attention_mask.hpp"
#include "pargo/tensor.hpp"

namespace pargo {

namespace detail {

template <Real T>
void require_rank2(const Tensor<T>& t, std::string_view op, std::string_view arg) {
  if (!t.defined() || t.rank() != 2) {
    throw ShapeError(std::string(op) + ": " + std::string(arg) + " must be a matrix, got " +
                     (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
  }
}

template <Real T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <Real T>
void require_vector(const Tensor<T>& v, std::size_t n, std::string_view op, std::string_view arg) {
  if (!v.defined() || v.rank() != 1 || v.numel() != n) {
    throw ShapeError(std::string(op) + ": " + std::string(arg) + " must have shape [" + std::to_string(n) + "], got " +
                     (v.defined() ? shape_str(v.shape()) : std::string("undefined")));
  }
}

// C[m x n] += A[m x k] * B[k x n]
template <Real T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <Real T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
template <Real T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T api = a[p * m + i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

template <Real T>
void accumulate(std::vector<T>& dst, std::span<const T> src, T factor = T(1)) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += factor * src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops

template <Real T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::record<T>("add", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    for (auto& p : self.parents) {
      if (detail::wants_grad(p)) detail::accumulate<T>(p->grad_buffer(), self.grad);
    }
  });
}

template <Real T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::record<T>("sub", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    if (detail::wants_grad(self.parents[0])) detail::accumulate<T>(self.parents[0]->grad_buffer(), self.grad);
    if (detail::wants_grad(self.parents[1])) detail::accumulate<T>(self.parents[1]->grad_buffer(), self.grad, T(-1));
  });
}

template <Real T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::record<T>("mul", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (detail::wants_grad(pa)) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->data[i];
    }
    if (detail::wants_grad(pb)) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->data[i];
    }
  });
}

template <Real T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return detail::record<T>("scale", a.shape(), std::move(out), {a}, [factor](detail::Node<T>& self) {
    if (detail::wants_grad(self.parents[0])) detail::accumulate<T>(self.parents[0]->grad_buffer(), self.grad, factor);
  });
}

/// Sum of all elements as a rank-0 tensor.
template <Real T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T x : a.data()) total += x;
  return detail::record<T>("sum", Shape{}, {total}, {a}, [](detail::Node<T>& self) {
    if (!detail::wants_grad(self.parents[0])) return;
    for (auto& g : self.parents[0]->grad_buffer()) g += self.grad[0];
  });
}

template <Real T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Same elements, new extents.
template <Real T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return detail::record<T>("reshape", std::move(shape), std::move(out), {a}, [](detail::Node<T>& self) {
    if (detail::wants_grad(self.parents[0])) detail::accumulate<T>(self.parents[0]->grad_buffer(), self.grad);
  });
}

template <Real T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank2(a, "transpose", "a");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a(i, j);
  return detail::record<T>("transpose", Shape{n, m}, std::move(out), {a}, [m, n](detail::Node<T>& self) {
    if (!detail::wants_grad(self.parents[0])) return;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

/// Rows [begin, begin + count) of a matrix.
template <Real T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t count) {
  detail::require_rank2(a, "slice_rows", "a");
  if (count == 0 || begin + count > a.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_str(a.shape()));
  }
  const std::size_t n = a.cols();
  std::vector<T> out(a.data().begin() + begin * n, a.data().begin() + (begin + count) * n);
  return detail::record<T>("slice_rows", Shape{count, n}, std::move(out), {a}, [begin, n](detail::Node<T>& self) {
    if (!detail::wants_grad(self.parents[0])) return;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
  });
}

/// Columns [begin, begin + count) of a matrix.
template <Real T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t count) {
  detail::require_rank2(a, "slice_cols", "a");
  if (count == 0 || begin + count > a.cols()) {
    throw ShapeError("slice_cols: cols [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_str(a.shape()));
  }
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a(i, begin + j);
  return detail::record<T>("slice_cols", Shape{m, count}, std::move(out), {a},
                           [m, n, begin, count](detail::Node<T>& self) {
                             if (!detail::wants_grad(self.parents[0])) return;
                             auto& g = self.parents[0]->grad_buffer();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < count; ++j) g[i * n + begin + j] += self.grad[i * count + j];
                           });
}

/// [a; b] stacked along rows.
template <Real T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a, "concat_rows", "a");
  detail::require_rank2(b, "concat_rows", "b");
  if (a.cols() != b.cols()) {
    throw ShapeError("concat_rows: column mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  const std::size_t split = a.numel();
  return detail::record<T>("concat_rows", Shape{a.rows() + b.rows(), a.cols()}, std::move(out), {a, b},
                           [split](detail::Node<T>& self) {
                             std::span<const T> g(self.grad);
                             if (detail::wants_grad(self.parents[0]))
                               detail::accumulate<T>(self.parents[0]->grad_buffer(), g.subspan(0, split));
                             if (detail::wants_grad(self.parents[1]))
                               detail::accumulate<T>(self.parents[1]->grad_buffer(), g.subspan(split));
                           });
}

/// [a, b] side by side.
template <Real T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a, "concat_cols", "a");
  detail::require_rank2(b, "concat_cols", "b");
  if (a.rows() != b.rows()) {
    throw ShapeError("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), na = a.cols(), nb = b.cols(), n = na + nb;
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.data().begin() + i * na, na, out.begin() + i * n);
    std::copy_n(b.data().begin() + i * nb, nb, out.begin() + i * n + na);
  }
  return detail::record<T>("concat_cols", Shape{m, n}, std::move(out), {a, b}, [m, na, nb, n](detail::Node<T>& self) {
    if (detail::wants_grad(self.parents[0])) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < na; ++j) g[i * na + j] += self.grad[i * n + j];
    }
    if (detail::wants_grad(self.parents[1])) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < nb; ++j) g[i * nb + j] += self.grad[i * n + na + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Dense layers

template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a, "matmul", "a");
  detail::require_rank2(b, "matmul", "b");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  return detail::record<T>("matmul", Shape{m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (detail::wants_grad(pa)) detail::gemm_nt(m, n, k, self.grad.data(), pb->data.data(), pa->grad_buffer().data());
    if (detail::wants_grad(pb)) detail::gemm_tn(k, m, n, pa->data.data(), self.grad.data(), pb->grad_buffer().data());
  });
}

/// x[m x n] + bias[n] broadcast over rows.
template <Real T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_rank2(x, "add_bias", "x");
  const std::size_t m = x.rows(), n = x.cols();
  detail::require_vector(bias, n, "add_bias", "bias");
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.data()[j];
  return detail::record<T>("add_bias", x.shape(), std::move(out), {x, bias}, [m, n](detail::Node<T>& self) {
    if (detail::wants_grad(self.parents[0])) detail::accumulate<T>(self.parents[0]->grad_buffer(), self.grad);
    if (detail::wants_grad(self.parents[1])) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

/// x[m x in] * w[in x out] (+ b[out]). Pass an undefined tensor to skip the bias.
template <Real T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  detail::require_rank2(x, "linear", "x");
  detail::require_rank2(w, "linear", "w");
  if (x.cols() != w.rows()) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  if (b.defined()) detail::require_vector(b, n, "linear", "bias");
  std::vector<T> out(m * n, T(0));
  if (b.defined()) {
    for (std::size_t i = 0; i < m; ++i) std::copy_n(b.data().begin(), n, out.begin() + i * n);
  }
  detail::gemm_nn(m, k, n, x.data().data(), w.data().data(), out.data());
  return detail::record<T>("linear", Shape{m, n}, std::move(out), {x, w, b}, [m, k, n](detail::Node<T>& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    auto& pb = self.parents[2];
    if (detail::wants_grad(px)) detail::gemm_nt(m, n, k, self.grad.data(), pw->data.data(), px->grad_buffer().data());
    if (detail::wants_grad(pw)) detail::gemm_tn(k, m, n, px->data.data(), self.grad.data(), pw->grad_buffer().data());
    if (detail::wants_grad(pb)) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each row to zero mean / unit variance, then applies gain and bias.
template <Real T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  detail::require_rank2(x, "layer_norm", "x");
  const std::size_t m = x.rows(), n = x.cols();
  detail::require_vector(gain, n, "layer_norm", "gain");
  detail::require_vector(bias, n, "layer_norm", "bias");
  std::vector<T> out(m * n);
  auto xhat = std::make_shared<std::vector<T>>(m * n);
  auto rstd = std::make_shared<std::vector<T>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.data().data() + i * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    const T r = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    (*rstd)[i] = r;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (row[j] - mu) * r;
      (*xhat)[i * n + j] = h;
      out[i * n + j] = h * gain.data()[j] + bias.data()[j];
    }
  }
  return detail::record<T>(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias}, [m, n, xhat, rstd](detail::Node<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        const T* dy = self.grad.data();
        if (detail::wants_grad(pg)) {
          auto& g = pg->grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += dy[i * n + j] * (*xhat)[i * n + j];
        }
        if (detail::wants_grad(pb)) {
          auto& g = pb->grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += dy[i * n + j];
        }
        if (detail::wants_grad(px)) {
          auto& g = px->grad_buffer();
          const T* gamma = pg->data.data();
          for (std::size_t i = 0; i < m; ++i) {
            T mean_d = 0, mean_dh = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const T d = dy[i * n + j] * gamma[j];
              mean_d += d;
              mean_dh += d * (*xhat)[i * n + j];
            }
            mean_d /= static_cast<T>(n);
            mean_dh /= static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T d = dy[i * n + j] * gamma[j];
              g[i * n + j] += (*rstd)[i] * (d - mean_d - (*xhat)[i * n + j] * mean_dh);
            }
          }
        }
      });
}

/// Exact GELU, x * Phi(x).
template <Real T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    out[i] = T(0.5) * v * (T(1) + std::erf(v * static_cast<T>(std::numbers::sqrt2 / 2)));
  }
  return detail::record<T>("gelu", x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
    auto& px = self.parents[0];
    if (!detail::wants_grad(px)) return;
    auto& g = px->grad_buffer();
    const T inv_sqrt_2pi = static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = px->data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * static_cast<T>(std::numbers::sqrt2 / 2)));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Attention

namespace detail {

// Softmax over the visible entries of one row; masked entries are written as
// exact zeros and never read.
template <Real T>
void softmax_visible(const T* scores, std::span<const std::size_t> visible, T* probs) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j : visible) mx = std::max(mx, scores[j]);
  T denom = 0;
  for (std::size_t j : visible) {
    probs[j] = std::exp(scores[j] - mx);
    denom += probs[j];
  }
  for (std::size_t j : visible) probs[j] /= denom;
}

template <Real T>
std::vector<std::vector<std::size_t>> visible_lists(const AttentionMask& mask) {
  std::vector<std::vector<std::size_t>> lists(mask.rows());
  for (std::size_t r = 0; r < mask.rows(); ++r) {
    lists[r] = mask.visible(r);
    if (lists[r].empty()) {
      throw MaskError("attention mask row " + std::to_string(r) + " has no visible key (softmax over empty set)");
    }
  }
  return lists;
}

}  // namespace detail

/// Row-wise softmax restricted to mask-visible positions. Masked positions
/// come out as exact zeros and their scores are never read.
template <Real T>
Tensor<T> masked_softmax(const Tensor<T>& scores, const AttentionMask& mask) {
  detail::require_rank2(scores, "masked_softmax", "scores");
  mask.require_dims(scores.rows(), scores.cols());
  auto visible = std::make_shared<std::vector<std::vector<std::size_t>>>(detail::visible_lists<T>(mask));
  const std::size_t q = scores.rows(), k = scores.cols();
  std::vector<T> out(q * k, T(0));
  for (std::size_t i = 0; i < q; ++i) detail::softmax_visible(scores.data().data() + i * k, (*visible)[i], out.data() + i * k);
  return detail::record<T>("masked_softmax", scores.shape(), std::move(out), {scores},
                           [q, k, visible](detail::Node<T>& self) {
                             auto& ps = self.parents[0];
                             if (!detail::wants_grad(ps)) return;
                             auto& g = ps->grad_buffer();
                             for (std::size_t i = 0; i < q; ++i) {
                               const T* y = self.data.data() + i * k;
                               const T* dy = self.grad.data() + i * k;
                               T dot = 0;
                               for (std::size_t j : (*visible)[i]) dot += y[j] * dy[j];
                               for (std::size_t j : (*visible)[i]) g[i * k + j] += y[j] * (dy[j] - dot);
                             }
                           });
}

/// Multi-head scaled dot-product attention on already-projected Q, K, V.
/// Head h uses columns [h*c/heads, (h+1)*c/heads); scale is 1/sqrt(c/heads).
/// Only mask-visible keys are touched, so masked key/value rows cannot affect
/// the result.
template <Real T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionMask& mask,
                    std::size_t heads) {
  detail::require_rank2(q, "attention", "q");
  detail::require_rank2(k, "attention", "k");
  detail::require_rank2(v, "attention", "v");
  const std::size_t nq = q.rows(), nk = k.rows(), c = q.cols();
  if (k.cols() != c || v.cols() != c || v.rows() != nk) {
    throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                     shape_str(v.shape()) + " are inconsistent");
  }
  if (heads == 0 || c % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(c) + " is not divisible by " + std::to_string(heads) +
                     " heads");
  }
  mask.require_dims(nq, nk);
  auto visible = std::make_shared<std::vector<std::vector<std::size_t>>>(detail::visible_lists<T>(mask));
  const std::size_t dh = c / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));

  // probs[h][i][j], kept for the backward pass.
  auto probs = std::make_shared<std::vector<T>>(heads * nq * nk, T(0));
  std::vector<T> scores(nk);
  std::vector<T> out(nq * c, T(0));
  const T* Q = q.data().data();
  const T* K = k.data().data();
  const T* V = v.data().data();
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < nq; ++i) {
      const auto& vis = (*visible)[i];
      const T* qi = Q + i * c + off;
      for (std::size_t j : vis) {
        const T* kj = K + j * c + off;
        T acc = 0;
        for (std::size_t d = 0; d < dh; ++d) acc += qi[d] * kj[d];
        scores[j] = acc * sc;
      }
      T* p = probs->data() + (h * nq + i) * nk;
      detail::softmax_visible(scores.data(), vis, p);
      T* oi = out.data() + i * c + off;
      for (std::size_t j : vis) {
        const T* vj = V + j * c + off;
        for (std::size_t d = 0; d < dh; ++d) oi[d] += p[j] * vj[d];
      }
    }
  }
  return detail::record<T>(
      "attention", Shape{nq, c}, std::move(out), {q, k, v},
      [nq, nk, c, heads, dh, sc, visible, probs](detail::Node<T>& self) {
        auto& pq = self.parents[0];
        auto& pk = self.parents[1];
        auto& pv = self.parents[2];
        T* dq = detail::wants_grad(pq) ? pq->grad_buffer().data() : nullptr;
        T* dk = detail::wants_grad(pk) ? pk->grad_buffer().data() : nullptr;
        T* dv = detail::wants_grad(pv) ? pv->grad_buffer().data() : nullptr;
        const T* Q = pq->data.data();
        const T* K = pk->data.data();
        const T* V = pv->data.data();
        std::vector<T> dp(nk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < nq; ++i) {
            const auto& vis = (*visible)[i];
            const T* p = probs->data() + (h * nq + i) * nk;
            const T* doi = self.grad.data() + i * c + off;
            T dot = 0;
            for (std::size_t j : vis) {
              const T* vj = V + j * c + off;
              T acc = 0;
              for (std::size_t d = 0; d < dh; ++d) acc += doi[d] * vj[d];
              dp[j] = acc;
              dot += p[j] * acc;
              if (dv) {
                T* dvj = dv + j * c + off;
                for (std::size_t d = 0; d < dh; ++d) dvj[d] += p[j] * doi[d];
              }
            }
            for (std::size_t j : vis) {
              const T ds = p[j] * (dp[j] - dot) * sc;
              if (dq) {
                const T* kj = K + j * c + off;
                T* dqi = dq + i * c + off;
                for (std::size_t d = 0; d < dh; ++d) dqi[d] += ds * kj[d];
              }
              if (dk) {
                const T* qi = Q + i * c + off;
                T* dkj = dk + j * c + off;
                for (std::size_t d = 0; d < dh; ++d) dkj[d] += ds * qi[d];
              }
            }
          }
        }
      });
}

/// Projection weights of one attention sublayer. The key projection has no
/// bias: a key bias only shifts every score in a row by the same amount.
template <Real T>
struct AttentionWeights {
  Tensor<T> wq, bq, wk, wv, bv, wo, bo;
  std::size_t heads = 1;
};

/// Projects q/k/v inputs, runs masked multi-head attention, concatenates the
/// heads and applies the output projection.
template <Real T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionMask& mask,
                               const AttentionWeights<T>& w) {
  if (w.heads == 0 || q.cols() % w.heads != 0) {
    throw ShapeError("multi_head_attention: width " + std::to_string(q.cols()) + " is not divisible by " +
                     std::to_string(w.heads) + " heads");
  }
  const auto Q = linear(q, w.wq, w.bq);
  const auto K = linear(k, w.wk);
  const auto V = linear(v, w.wv, w.bv);
  return linear(attention(Q, K, V, mask, w.heads), w.wo, w.bo);
}

/// Mean cross-entropy of logits[n x classes] against integer labels.
template <Real T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  detail::require_rank2(logits, "cross_entropy", "logits");
  const std::size_t n = logits.rows(), k = logits.cols();
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(n) + " rows but " + std::to_string(labels.size()) + " labels");
  }
  auto probs = std::make_shared<std::vector<T>>(n * k);
  auto lab = std::make_shared<std::vector<std::size_t>>(labels.begin(), labels.end());
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) throw ShapeError("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
    const T* row = logits.data().data() + i * k;
    const T mx = *std::max_element(row, row + k);
    T denom = 0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - mx) / denom;
    loss += std::log(denom) + mx - row[labels[i]];
  }
  loss /= static_cast<T>(n);
  return detail::record<T>("cross_entropy", Shape{}, {loss}, {logits}, [n, k, probs, lab](detail::Node<T>& self) {
    auto& pl = self.parents[0];
    if (!detail::wants_grad(pl)) return;
    auto& g = pl->grad_buffer();
    const T f = self.grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        g[i * k + j] += f * ((*probs)[i * k + j] - (j == (*lab)[i] ? T(1) : T(0)));
      }
    }
  });
}

}  // namespace pargo
