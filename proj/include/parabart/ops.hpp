#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "parabart/parallel.hpp"
#include "parabart/tensor.hpp"

namespace parabart {

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// C[m x n] += A[m x k] * B[k x n]. Rows of A are taken four at a time so each
// row of B is loaded once per block.
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  const std::size_t blocks = (m + 3) / 4;
  parallel_for(blocks, 4 * k * n, [=](std::size_t blk) {
    const std::size_t i0 = blk * 4;
    if (i0 + 4 <= m) {
      T* __restrict c0 = c + i0 * n;
      T* __restrict c1 = c0 + n;
      T* __restrict c2 = c1 + n;
      T* __restrict c3 = c2 + n;
      for (std::size_t p = 0; p < k; ++p) {
        const T a0 = a[i0 * k + p], a1 = a[(i0 + 1) * k + p];
        const T a2 = a[(i0 + 2) * k + p], a3 = a[(i0 + 3) * k + p];
        const T* __restrict brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) {
          const T bv = brow[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
      return;
    }
    for (std::size_t i = i0; i < m; ++i) {
      T* __restrict crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i * k + p];
        const T* __restrict brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

template <typename T>
std::vector<T> transposed(std::size_t rows, std::size_t cols, const T* x) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = x[r * cols + c];
  return out;
}

// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  const auto bt = transposed(n, k, b);
  gemm_nn(m, k, n, a, bt.data(), c);
}

// C[m x n] += A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  const auto at = transposed(k, m, a);
  gemm_nn(m, k, n, at.data(), b, c);
}

template <typename T, typename F, typename G>
BasicTensor<T> unary(const BasicTensor<T>& x, const char* op, F&& f, G&& df) {
  std::vector<T> out(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xs[i]);
  return record<T>(x.shape(), std::move(out), op, {x}, [df](Node<T>& self) {
    auto& in = *self.inputs[0];
    auto g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(in.data[i]);
  });
}

}  // namespace detail

/// Row segment of a packed [rows x width] matrix.
struct Segment {
  std::size_t begin = 0;
  std::size_t length = 0;
};

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank(a.shape(), 2, "matmul");
  detail::require_rank(b.shape(), 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T{0});
  detail::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  return detail::record<T>({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    if (A.requires_grad) detail::gemm_nt(m, n, k, self.grad.data(), B.data.data(), A.ensure_grad().data());
    if (B.requires_grad) detail::gemm_tn(k, m, n, A.data.data(), self.grad.data(), B.ensure_grad().data());
  });
}

/// x[m x k] * w[n x k]^T, used for tied output projections.
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank(a.shape(), 2, "matmul_nt");
  detail::require_rank(b.shape(), 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  std::vector<T> out(m * n, T{0});
  detail::gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data());
  return detail::record<T>({m, n}, std::move(out), "matmul_nt", {a, b}, [m, k, n](Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    // dA = dC * B, dB = dC^T * A
    if (A.requires_grad) detail::gemm_nn(m, n, k, self.grad.data(), B.data.data(), A.ensure_grad().data());
    if (B.requires_grad) detail::gemm_tn(n, m, k, self.grad.data(), A.data.data(), B.ensure_grad().data());
  });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  detail::require_rank(x.shape(), 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(r * c);
  auto xs = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xs[i * c + j];
  return detail::record<T>({c, r}, std::move(out), "transpose", {x}, [r, c](Node<T>& self) {
    auto g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::record<T>(std::move(shape), std::move(out), "reshape", {x}, [](Node<T>& self) {
    auto g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::record<T>(a.shape(), std::move(out), "add", {a, b}, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::record<T>(a.shape(), std::move(out), "sub", {a, b}, [](Node<T>& self) {
    if (self.inputs[0]->requires_grad) {
      auto g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto g = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::record<T>(a.shape(), std::move(out), "mul", {a, b}, [](Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    if (A.requires_grad) {
      auto g = A.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B.data[i];
    }
    if (B.requires_grad) {
      auto g = B.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A.data[i];
    }
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  return detail::record<T>(x.shape(), std::move(out), "scale", {x}, [factor](Node<T>& self) {
    auto g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

/// x[..., n] + b[n]; the only broadcast the engine supports.
template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  detail::require_rank(bias.shape(), 1, "add_bias");
  if (x.rank() == 0 || x.shape().back() != bias.dim(0)) {
    throw ShapeError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  }
  const std::size_t n = bias.dim(0);
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  const T* xs = x.data().data();
  const T* bs = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xs[r * n + j] + bs[j];
  return detail::record<T>(x.shape(), std::move(out), "add_bias", {x, bias}, [n, rows](Node<T>& self) {
    if (self.inputs[0]->requires_grad) {
      auto g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto g = self.inputs[1]->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
    }
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T acc{0};
  for (T v : x.data()) acc += v;
  return detail::record<T>({}, {acc}, "sum", {x}, [](Node<T>& self) {
    auto g = self.inputs[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return detail::unary(x, "relu", [](T v) { return v > T{0} ? v : T{0}; },
                       [](T v) { return v > T{0} ? T{1} : T{0}; });
}

/// Exact (erf) GELU.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  return detail::unary(
      x, "gelu",
      [](T v) { return T(0.5) * v * (T{1} + std::erf(v / std::numbers::sqrt2_v<T>)); },
      [](T v) {
        const T cdf = T(0.5) * (T{1} + std::erf(v / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * v * v) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        return cdf + v * pdf;
      });
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& x) {
  for (T v : x.data()) {
    if (!(v > T{0})) throw NumericError("log: non-positive input");
  }
  return detail::unary(x, "log", [](T v) { return std::log(v); }, [](T v) { return T{1} / v; });
}

/// Softmax along `axis` (negative counts from the end), max-subtracted.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis = -1) {
  const int rank = static_cast<int>(x.rank());
  if (rank == 0) throw ShapeError("softmax: scalar input");
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("softmax: bad axis for " + shape_str(x.shape()));
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < rank; ++i) inner *= s[i];
  const std::size_t n = s[axis];
  if (n == 0) throw ShapeError("softmax: empty axis");
  auto xs = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      T mx = xs[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xs[base + j * inner]);
      T total{0};
      for (std::size_t j = 0; j < n; ++j) {
        T e = std::exp(xs[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  return detail::record<T>(x.shape(), std::move(out), "softmax", {x},
                           [outer, inner, n](Node<T>& self) {
    auto g = self.inputs[0]->ensure_grad();
    const auto& y = self.data;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        T dot{0};
        for (std::size_t j = 0; j < n; ++j) dot += self.grad[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t k = base + j * inner;
          g[k] += y[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

/// Layer normalization over the last axis: (x - mean) / sqrt(var + eps) * gain + bias.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, T eps = T(1e-5)) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t n = x.shape().back();
  if (gain.numel() != n || bias.numel() != n) {
    throw ShapeError("layer_norm: last dim " + std::to_string(n) + " vs gain " +
                     shape_str(gain.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / n;
  auto xs = x.data();
  auto gs = gain.data();
  auto bs = bias.data();
  std::vector<T> out(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xs.data() + r * n;
    T mean{0};
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(n);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (row[j] - mean) * inv_std[r];
      xhat[r * n + j] = h;
      out[r * n + j] = h * gs[j] + bs[j];
    }
  }
  return detail::record<T>(
      x.shape(), std::move(out), "layer_norm", {x, gain, bias},
      [rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& X = *self.inputs[0];
        auto& G = *self.inputs[1];
        auto& B = *self.inputs[2];
        if (G.requires_grad) {
          auto gg = G.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gg[j] += self.grad[r * n + j] * xhat[r * n + j];
        }
        if (B.requires_grad) {
          auto gb = B.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[r * n + j];
        }
        if (X.requires_grad) {
          auto gx = X.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_d{0}, mean_dx{0};
            for (std::size_t j = 0; j < n; ++j) {
              const T d = self.grad[r * n + j] * G.data[j];
              mean_d += d;
              mean_dx += d * xhat[r * n + j];
            }
            mean_d /= static_cast<T>(n);
            mean_dx /= static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T d = self.grad[r * n + j] * G.data[j];
              gx[r * n + j] += inv_std[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
            }
          }
        }
      });
}

/// Summed token negative log-likelihood over rows whose mask entry is set.
/// An empty mask means every row counts.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> targets,
                             std::span<const std::uint8_t> mask = {}) {
  detail::require_rank(logits.shape(), 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  if (targets.size() != rows || (!mask.empty() && mask.size() != rows)) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     shape_str(logits.shape()) + " logits");
  }
  std::vector<std::uint8_t> active(rows, 1);
  if (!mask.empty()) std::copy(mask.begin(), mask.end(), active.begin());
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  for (std::size_t r = 0; r < rows; ++r) {
    if (active[r] && (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= classes)) {
      throw IndexError("cross_entropy: target id " + std::to_string(tgt[r]) + " out of range [0, " +
                       std::to_string(classes) + ") at row " + std::to_string(r));
    }
  }
  auto xs = logits.data();
  std::vector<T> probs(rows * classes, T{0});
  T total{0};
  for (std::size_t r = 0; r < rows; ++r) {
    if (!active[r]) continue;
    const T* row = xs.data() + r * classes;
    T mx = *std::max_element(row, row + classes);
    T z{0};
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const T lse = mx + std::log(z);
    total += lse - row[tgt[r]];
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] = std::exp(row[c] - lse);
  }
  return detail::record<T>(
      {}, {total}, "cross_entropy", {logits},
      [rows, classes, probs = std::move(probs), tgt = std::move(tgt),
       active = std::move(active)](Node<T>& self) {
        auto g = self.inputs[0]->ensure_grad();
        const T up = self.grad[0];
        for (std::size_t r = 0; r < rows; ++r) {
          if (!active[r]) continue;
          for (std::size_t c = 0; c < classes; ++c) g[r * classes + c] += up * probs[r * classes + c];
          g[r * classes + tgt[r]] -= up;
        }
      });
}

/// cross_entropy divided by the number of counted rows.
template <typename T>
BasicTensor<T> cross_entropy_mean(const BasicTensor<T>& logits, std::span<const std::int32_t> targets,
                                  std::span<const std::uint8_t> mask = {}) {
  std::size_t count = mask.empty() ? targets.size()
                                   : static_cast<std::size_t>(std::count_if(
                                         mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
  if (count == 0) throw ShapeError("cross_entropy_mean: no unmasked positions");
  return scale(cross_entropy(logits, targets, mask), T{1} / static_cast<T>(count));
}

/// -sum_rows sum_c target[r,c] * log_softmax(logits)[r,c], targets held constant.
template <typename T>
BasicTensor<T> soft_cross_entropy(const BasicTensor<T>& logits, const BasicTensor<T>& targets) {
  if (logits.rank() == 1) return soft_cross_entropy(reshape(logits, {1, logits.dim(0)}),
                                                    reshape(targets, {1, targets.numel()}));
  detail::require_rank(logits.shape(), 2, "soft_cross_entropy");
  detail::require_same_shape(logits.shape(), targets.shape(), "soft_cross_entropy");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  auto xs = logits.data();
  auto ts = targets.data();
  std::vector<T> probs(rows * classes);
  std::vector<T> mass(rows, T{0});
  T total{0};
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xs.data() + r * classes;
    T mx = *std::max_element(row, row + classes);
    T z{0};
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t c = 0; c < classes; ++c) {
      const T t = ts[r * classes + c];
      total -= t * (row[c] - lse);
      mass[r] += t;
      probs[r * classes + c] = std::exp(row[c] - lse);
    }
  }
  return detail::record<T>({}, {total}, "soft_cross_entropy", {logits, targets},
                           [rows, classes, probs = std::move(probs), mass = std::move(mass)](Node<T>& self) {
    auto& L = *self.inputs[0];
    auto& Tg = *self.inputs[1];
    const T up = self.grad[0];
    if (L.requires_grad) {
      auto g = L.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < classes; ++c)
          g[r * classes + c] += up * (mass[r] * probs[r * classes + c] - Tg.data[r * classes + c]);
    }
    if (Tg.requires_grad) {
      auto g = Tg.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < classes; ++c)
          g[r * classes + c] -= up * std::log(probs[r * classes + c]);
    }
  });
}

/// Row gather: out[i] = x[index[i]]. Backward scatter-adds.
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const std::int32_t> index) {
  detail::require_rank(x.shape(), 2, "gather_rows");
  const std::size_t rows = x.dim(0), width = x.dim(1);
  std::vector<std::int32_t> idx(index.begin(), index.end());
  std::vector<T> out(idx.size() * width);
  auto xs = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= rows) {
      throw IndexError("gather_rows: index " + std::to_string(idx[i]) + " out of range [0, " +
                       std::to_string(rows) + ")");
    }
    std::copy_n(xs.data() + idx[i] * width, width, out.data() + i * width);
  }
  const std::size_t n = idx.size();
  return detail::record<T>({n, width}, std::move(out), "gather_rows", {x},
                           [width, idx = std::move(idx)](Node<T>& self) {
    auto g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      T* dst = g.data() + idx[i] * width;
      const T* src = self.grad.data() + i * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t width = parts.front().dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::require_rank(p.shape(), 2, "concat_rows");
    if (p.dim(1) != width) throw ShapeError("concat_rows: width mismatch");
    rows += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(rows * width);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::record_many<T>({rows, width}, std::move(out), "concat_rows", parts, [](Node<T>& self) {
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      const std::size_t n = in->data.size();
      if (in->requires_grad) {
        auto g = in->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

/// Per-segment mean over rows whose `valid` flag is set (empty = all valid).
/// Returns [segments x width].
template <typename T>
BasicTensor<T> segment_mean(const BasicTensor<T>& x, std::span<const Segment> segments,
                            std::span<const std::uint8_t> valid = {}) {
  detail::require_rank(x.shape(), 2, "segment_mean");
  const std::size_t rows = x.dim(0), width = x.dim(1);
  if (!valid.empty() && valid.size() != rows) throw ShapeError("segment_mean: mask length mismatch");
  std::vector<std::uint8_t> keep(rows, 1);
  if (!valid.empty()) std::copy(valid.begin(), valid.end(), keep.begin());
  std::vector<Segment> segs(segments.begin(), segments.end());
  std::vector<T> counts(segs.size(), T{0});
  std::vector<T> out(segs.size() * width, T{0});
  auto xs = x.data();
  for (std::size_t s = 0; s < segs.size(); ++s) {
    if (segs[s].begin + segs[s].length > rows) throw IndexError("segment_mean: segment out of range");
    for (std::size_t r = segs[s].begin; r < segs[s].begin + segs[s].length; ++r) {
      if (!keep[r]) continue;
      counts[s] += T{1};
      for (std::size_t j = 0; j < width; ++j) out[s * width + j] += xs[r * width + j];
    }
    if (counts[s] == T{0}) throw ShapeError("segment_mean: segment " + std::to_string(s) + " has no valid rows");
    for (std::size_t j = 0; j < width; ++j) out[s * width + j] /= counts[s];
  }
  const std::size_t n_segs = segs.size();
  return detail::record<T>({n_segs, width}, std::move(out), "segment_mean", {x},
                           [width, segs = std::move(segs), keep = std::move(keep),
                            counts = std::move(counts)](Node<T>& self) {
    auto g = self.inputs[0]->ensure_grad();
    for (std::size_t s = 0; s < segs.size(); ++s) {
      for (std::size_t r = segs[s].begin; r < segs[s].begin + segs[s].length; ++r) {
        if (!keep[r]) continue;
        for (std::size_t j = 0; j < width; ++j) g[r * width + j] += self.grad[s * width + j] / counts[s];
      }
    }
  });
}

/// Inverted dropout. Identity when p == 0.
template <typename T, typename Rng>
BasicTensor<T> dropout(const BasicTensor<T>& x, T p, Rng& rng) {
  if (p <= T{0}) return x;
  if (p >= T{1}) throw ConfigError("dropout: p must be < 1");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = keep(rng) ? T{1} / (T{1} - p) : T{0};
  return mul(x, BasicTensor<T>::from_data(x.shape(), std::move(mask)));
}

/// Layout for packed multi-head attention. Query segment i attends to key
/// segment i. Keys with key_valid == 0 are never attended; a causal layout
/// additionally restricts query j of a segment to keys 0..j of that segment.
struct AttentionLayout {
  std::vector<Segment> queries;
  std::vector<Segment> keys;
  std::vector<std::uint8_t> key_valid;  // empty = all valid
  bool causal = false;
};

/// Scaled dot-product attention over packed rows. q: [Nq x d], k, v: [Nk x d].
/// Heads split d evenly.
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         std::size_t heads, const AttentionLayout& layout) {
  detail::require_rank(q.shape(), 2, "attention");
  detail::require_rank(k.shape(), 2, "attention");
  detail::require_same_shape(k.shape(), v.shape(), "attention");
  const std::size_t d = q.dim(1);
  if (k.dim(1) != d) throw ShapeError("attention: query/key width mismatch");
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (layout.queries.size() != layout.keys.size()) throw ShapeError("attention: segment count mismatch");
  const std::size_t nk = k.dim(0);
  if (!layout.key_valid.empty() && layout.key_valid.size() != nk) {
    throw ShapeError("attention: key mask length mismatch");
  }
  const std::size_t dh = d / heads;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
  auto qs = q.data();
  auto ks = k.data();
  auto vs = v.data();
  auto valid = [&](std::size_t key) { return layout.key_valid.empty() || layout.key_valid[key] != 0; };

  // Probability blocks per (segment, head), laid out contiguously.
  std::vector<std::size_t> offsets(layout.queries.size() + 1, 0);
  for (std::size_t s = 0; s < layout.queries.size(); ++s) {
    const auto& qs_ = layout.queries[s];
    const auto& ks_ = layout.keys[s];
    if (qs_.begin + qs_.length > q.dim(0) || ks_.begin + ks_.length > nk) {
      throw IndexError("attention: segment out of range");
    }
    if (layout.causal && qs_.length > ks_.length) throw ShapeError("attention: causal segment too long");
    offsets[s + 1] = offsets[s] + heads * qs_.length * ks_.length;
  }
  std::vector<T> probs(offsets.back(), T{0});
  std::vector<T> out(q.numel(), T{0});
  const T neg_inf = -std::numeric_limits<T>::infinity();

  parallel_for(layout.queries.size(), 1, [&](std::size_t s) {
    const auto [q0, lq] = layout.queries[s];
    const auto [k0, lk] = layout.keys[s];
    std::vector<T> scores(lk);
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = probs.data() + offsets[s] + h * lq * lk;
      for (std::size_t i = 0; i < lq; ++i) {
        const T* qrow = qs.data() + (q0 + i) * d + h * dh;
        T mx = neg_inf;
        for (std::size_t j = 0; j < lk; ++j) {
          if (!valid(k0 + j) || (layout.causal && j > i)) {
            scores[j] = neg_inf;
            continue;
          }
          const T* krow = ks.data() + (k0 + j) * d + h * dh;
          T acc{0};
          for (std::size_t c = 0; c < dh; ++c) acc += qrow[c] * krow[c];
          scores[j] = acc * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        if (mx == neg_inf) continue;  // nothing to attend: output stays zero
        T z{0};
        for (std::size_t j = 0; j < lk; ++j) {
          const T e = scores[j] == neg_inf ? T{0} : std::exp(scores[j] - mx);
          P[i * lk + j] = e;
          z += e;
        }
        T* orow = out.data() + (q0 + i) * d + h * dh;
        for (std::size_t j = 0; j < lk; ++j) {
          P[i * lk + j] /= z;
          const T p = P[i * lk + j];
          if (p == T{0}) continue;
          const T* vrow = vs.data() + (k0 + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) orow[c] += p * vrow[c];
        }
      }
    }
  });

  return detail::record<T>(
      q.shape(), std::move(out), "attention", {q, k, v},
      [heads, d, dh, inv_sqrt, layout, offsets = std::move(offsets), probs = std::move(probs)](Node<T>& self) {
        auto& Q = *self.inputs[0];
        auto& K = *self.inputs[1];
        auto& V = *self.inputs[2];
        auto gq = Q.requires_grad ? Q.ensure_grad() : std::span<T>{};
        auto gk = K.requires_grad ? K.ensure_grad() : std::span<T>{};
        auto gv = V.requires_grad ? V.ensure_grad() : std::span<T>{};
        // Segments may share key rows only if the caller packs them that way;
        // the model never does, so per-segment work writes disjoint rows.
        for (std::size_t s = 0; s < layout.queries.size(); ++s) {
          const auto [q0, lq] = layout.queries[s];
          const auto [k0, lk] = layout.keys[s];
          std::vector<T> dp(lk);
          for (std::size_t h = 0; h < heads; ++h) {
            const T* P = probs.data() + offsets[s] + h * lq * lk;
            for (std::size_t i = 0; i < lq; ++i) {
              const T* go = self.grad.data() + (q0 + i) * d + h * dh;
              T dot{0};
              for (std::size_t j = 0; j < lk; ++j) {
                const T p = P[i * lk + j];
                if (p == T{0}) {
                  dp[j] = T{0};
                  continue;
                }
                const T* vrow = V.data.data() + (k0 + j) * d + h * dh;
                T acc{0};
                for (std::size_t c = 0; c < dh; ++c) acc += go[c] * vrow[c];
                dp[j] = acc;
                dot += acc * p;
                if (!gv.empty()) {
                  T* gvrow = gv.data() + (k0 + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvrow[c] += p * go[c];
                }
              }
              const T* qrow = Q.data.data() + (q0 + i) * d + h * dh;
              for (std::size_t j = 0; j < lk; ++j) {
                const T p = P[i * lk + j];
                if (p == T{0}) continue;
                const T ds = p * (dp[j] - dot) * inv_sqrt;
                const T* krow = K.data.data() + (k0 + j) * d + h * dh;
                if (!gq.empty()) {
                  T* gqrow = gq.data() + (q0 + i) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gqrow[c] += ds * krow[c];
                }
                if (!gk.empty()) {
                  T* gkrow = gk.data() + (k0 + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkrow[c] += ds * qrow[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace parabart
