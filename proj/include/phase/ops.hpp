#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "phase/tensor.hpp"

namespace phase::ad {

namespace detail {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;
template <class T>
using StridedMapR = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <class T>
using CStridedMapR = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

/// Overflow-safe ln(1+e^x); never returns 0, even where e^x underflows.
template <class T>
T softplus_scalar(T x) {
  if (x > T(30)) return x;
  const double y = std::log1p(std::exp(static_cast<double>(x)));
  return std::max(static_cast<T>(y), std::numeric_limits<T>::min());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail;
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer<T> out(m * n);
  MapR<T>(out.data(), m, n).noalias() =
      CMapR<T>(a.data().data(), m, k) * CMapR<T>(b.data().data(), k, n);
  return detail::make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode<T>& self) {
    const CMapR<T> g(self.grad.data(), m, n);
    if (T* ga = parent_grad(self, 0)) {
      MapR<T>(ga, m, k).noalias() += g * CMapR<T>(self.parents[1]->value.data(), k, n).transpose();
    }
    if (T* gb = parent_grad(self, 1)) {
      MapR<T>(gb, k, n).noalias() += CMapR<T>(self.parents[0]->value.data(), m, k).transpose() * g;
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

enum class Elementwise { add, sub, mul, square, neg };

template <class T>
Tensor<T> elementwise(Elementwise op, const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail;
  if (op == Elementwise::square || op == Elementwise::neg) {
    throw ContractError("elementwise: unary op given two operands");
  }
  const bool b_scalar = b.size() == 1 && a.size() != 1;
  const bool a_scalar = a.size() == 1 && b.size() != 1;
  require(a.shape() == b.shape() || a_scalar || b_scalar ||
              (a.size() == 1 && b.size() == 1),
          "elementwise: incompatible shapes " + to_string(a.shape()) + " and " +
              to_string(b.shape()));
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  const auto av = a.data();
  const auto bv = b.data();
  auto at = [&](std::span<const T> v, bool sc, std::size_t i) { return sc ? v[0] : v[i]; };
  Buffer<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = at(av, a_scalar, i), y = at(bv, b_scalar, i);
    switch (op) {
      case Elementwise::add: out[i] = x + y; break;
      case Elementwise::sub: out[i] = x - y; break;
      default: out[i] = x * y; break;
    }
  }
  return detail::make_result<T>(shape, std::move(out), {a, b},
                        [op, n, a_scalar, b_scalar](TensorNode<T>& self) {
    const T* g = self.grad.data();
    const auto& A = self.parents[0]->value;
    const auto& B = self.parents[1]->value;
    T* ga = parent_grad(self, 0);
    T* gb = parent_grad(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t ia = a_scalar ? 0 : i, ib = b_scalar ? 0 : i;
      switch (op) {
        case Elementwise::add:
          if (ga) ga[ia] += g[i];
          if (gb) gb[ib] += g[i];
          break;
        case Elementwise::sub:
          if (ga) ga[ia] += g[i];
          if (gb) gb[ib] -= g[i];
          break;
        default:
          if (ga) ga[ia] += g[i] * B[ib];
          if (gb) gb[ib] += g[i] * A[ia];
          break;
      }
    }
  });
}

template <class T>
Tensor<T> elementwise(Elementwise op, const Tensor<T>& a) {
  if (op != Elementwise::square && op != Elementwise::neg) {
    throw ContractError("elementwise: binary op given one operand");
  }
  const std::size_t n = a.size();
  Buffer<T> out(n);
  const auto av = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = op == Elementwise::square ? av[i] * av[i] : -av[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [op, n](TensorNode<T>& self) {
    T* ga = detail::parent_grad(self, 0);
    if (!ga) return;
    const auto& A = self.parents[0]->value;
    for (std::size_t i = 0; i < n; ++i) {
      ga[i] += op == Elementwise::square ? T(2) * A[i] * self.grad[i] : -self.grad[i];
    }
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(Elementwise::add, a, b);
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(Elementwise::sub, a, b);
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(Elementwise::mul, a, b);
}
template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return elementwise(Elementwise::square, a);
}

/// Multiplication by a constant (not a graph node).
template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Buffer<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  const std::size_t n = a.size();
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [s, n](TensorNode<T>& self) {
    if (T* ga = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) ga[i] += s * self.grad[i];
    }
  });
}

/// x + b where b's shape equals the trailing dimensions of x (bias, embeddings).
template <class T>
Tensor<T> add_trailing(const Tensor<T>& x, const Tensor<T>& b) {
  using namespace detail;
  require(b.rank() <= x.rank() &&
              std::equal(b.shape().begin(), b.shape().end(), x.shape().end() - b.rank()),
          "add_trailing: " + to_string(b.shape()) + " is not a suffix of " +
              to_string(x.shape()));
  const std::size_t inner = b.size(), outer = x.size() / std::max<std::size_t>(inner, 1);
  Buffer<T> out(x.data().begin(), x.data().end());
  const auto bv = b.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += bv[i];
  return detail::make_result<T>(x.shape(), std::move(out), {x, b}, [inner, outer](TensorNode<T>& self) {
    const T* g = self.grad.data();
    if (T* gx = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < inner * outer; ++i) gx[i] += g[i];
    }
    if (T* gb = parent_grad(self, 1)) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) gb[i] += g[o * inner + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { softplus, sigmoid, tanh, relu };

template <class T>
Tensor<T> activation(Activation kind, const Tensor<T>& x) {
  const std::size_t n = x.size();
  Buffer<T> out(n);
  const auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    switch (kind) {
      case Activation::softplus: out[i] = detail::softplus_scalar(xv[i]); break;
      case Activation::sigmoid: out[i] = detail::sigmoid_scalar(xv[i]); break;
      case Activation::tanh: out[i] = std::tanh(xv[i]); break;
      case Activation::relu: out[i] = xv[i] > T(0) ? xv[i] : T(0); break;
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [kind, n](TensorNode<T>& self) {
    T* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    const auto& X = self.parents[0]->value;
    const auto& Y = self.value;
    for (std::size_t i = 0; i < n; ++i) {
      T d;
      switch (kind) {
        case Activation::softplus: d = X[i] > T(30) ? T(1) : detail::sigmoid_scalar(X[i]); break;
        case Activation::sigmoid: d = Y[i] * (T(1) - Y[i]); break;
        case Activation::tanh: d = T(1) - Y[i] * Y[i]; break;
        default: d = X[i] > T(0) ? T(1) : T(0); break;
      }
      gx[i] += d * self.grad[i];
    }
  });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return activation(Activation::softplus, x);
}
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return activation(Activation::sigmoid, x);
}
template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return activation(Activation::tanh, x);
}
template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return activation(Activation::relu, x);
}

// ---------------------------------------------------------------------------
// Softmax

namespace detail {

/// Row-wise stable softmax over `n` contiguous-by-stride entries.
template <class T>
void softmax_lines(const T* x, T* y, std::size_t outer, std::size_t n, std::size_t inner) {
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = x[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      T s = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(x[base + j * inner] - mx);
        y[base + j * inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] /= s;
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  detail::require(axis < x.rank(), "softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  Buffer<T> out(x.size());
  detail::softmax_lines(x.data().data(), out.data(), outer, n, inner);
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [outer, n, inner](TensorNode<T>& self) {
    T* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    const T* y = self.value.data();
    const T* g = self.grad.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution over the middle (length) axis

/// x: [L, Cin] or [B, L, Cin]; kernels: [K, Cin, Cout]. Output [.., L', Cout].
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& kernels, std::size_t stride,
                 std::size_t padding) {
  using namespace detail;
  require(x.rank() == 2 || x.rank() == 3, "conv1d: input must be [L,Cin] or [B,L,Cin]");
  require(kernels.rank() == 3, "conv1d: kernels must be [K,Cin,Cout]");
  require(stride >= 1, "conv1d: stride must be >= 1");
  const bool batched = x.rank() == 3;
  const std::size_t B = batched ? x.dim(0) : 1;
  const std::size_t L = x.dim(batched ? 1 : 0), Cin = x.dim(batched ? 2 : 1);
  const std::size_t K = kernels.dim(0), Cout = kernels.dim(2);
  require(kernels.dim(1) == Cin, "conv1d: kernel Cin " + std::to_string(kernels.dim(1)) +
                                     " does not match input Cin " + std::to_string(Cin));
  require(L + 2 * padding >= K, "conv1d: kernel of size " + std::to_string(K) +
                                    " exceeds padded input length " +
                                    std::to_string(L + 2 * padding));
  const std::size_t Lo = (L + 2 * padding - K) / stride + 1;
  const std::size_t KC = K * Cin;
  auto cols = std::make_shared<Buffer<T>>(B * Lo * KC, T(0));
  const T* xv = x.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t lo = 0; lo < Lo; ++lo)
      for (std::size_t k = 0; k < K; ++k) {
        const long li = static_cast<long>(lo * stride + k) - static_cast<long>(padding);
        if (li < 0 || li >= static_cast<long>(L)) continue;
        std::copy_n(xv + (b * L + li) * Cin, Cin, cols->data() + (b * Lo + lo) * KC + k * Cin);
      }
  Buffer<T> out(B * Lo * Cout);
  MapR<T>(out.data(), B * Lo, Cout).noalias() =
      CMapR<T>(cols->data(), B * Lo, KC) * CMapR<T>(kernels.data().data(), KC, Cout);
  Shape shape = batched ? Shape{B, Lo, Cout} : Shape{Lo, Cout};
  return detail::make_result<T>(shape, std::move(out), {x, kernels},
                        [=](TensorNode<T>& self) {
    const CMapR<T> g(self.grad.data(), B * Lo, Cout);
    if (T* gk = parent_grad(self, 1)) {
      MapR<T>(gk, KC, Cout).noalias() += CMapR<T>(cols->data(), B * Lo, KC).transpose() * g;
    }
    if (T* gx = parent_grad(self, 0)) {
      MatR<T> gcols = g * CMapR<T>(self.parents[1]->value.data(), KC, Cout).transpose();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t lo = 0; lo < Lo; ++lo)
          for (std::size_t k = 0; k < K; ++k) {
            const long li = static_cast<long>(lo * stride + k) - static_cast<long>(padding);
            if (li < 0 || li >= static_cast<long>(L)) continue;
            const T* src = gcols.data() + (b * Lo + lo) * KC + k * Cin;
            T* dst = gx + (b * L + li) * Cin;
            for (std::size_t c = 0; c < Cin; ++c) dst[c] += src[c];
          }
    }
  });
}

// ---------------------------------------------------------------------------
// Layer normalisation over the last axis

namespace detail {

template <class T>
Tensor<T> layer_norm_impl(const Tensor<T>& x, const Tensor<T>* gain, const Tensor<T>* bias,
                          T eps) {
  require(x.rank() >= 1 && x.shape().back() >= 1, "layer_norm: empty last axis");
  const std::size_t n = x.shape().back(), rows = x.size() / n;
  if (gain) require(gain->size() == n && bias && bias->size() == n, "layer_norm: affine size");
  auto xhat = std::make_shared<Buffer<T>>(x.size());
  auto inv_std = std::make_shared<Buffer<T>>(rows);
  Buffer<T> out(x.size());
  const T* xv = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(n);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (row[j] - mean) * is;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = gain ? h * gain->data()[j] + bias->data()[j] : h;
    }
  }
  auto backward = [=, affine = gain != nullptr](TensorNode<T>& self) {
    const T* g = self.grad.data();
    const T* gv = affine ? self.parents[1]->value.data() : nullptr;
    if (affine) {
      T* gg = parent_grad(self, 1);
      T* gb = parent_grad(self, 2);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) {
          if (gg) gg[j] += g[r * n + j] * (*xhat)[r * n + j];
          if (gb) gb[j] += g[r * n + j];
        }
    }
    T* gx = parent_grad(self, 0);
    if (!gx) return;
    Buffer<T> dh(n);
    for (std::size_t r = 0; r < rows; ++r) {
      T m1 = 0, m2 = 0;
      for (std::size_t j = 0; j < n; ++j) {
        dh[j] = g[r * n + j] * (gv ? gv[j] : T(1));
        m1 += dh[j];
        m2 += dh[j] * (*xhat)[r * n + j];
      }
      m1 /= T(n);
      m2 /= T(n);
      for (std::size_t j = 0; j < n; ++j) {
        gx[r * n + j] += (*inv_std)[r] * (dh[j] - m1 - (*xhat)[r * n + j] * m2);
      }
    }
  };
  if (gain) return detail::make_result<T>(x.shape(), std::move(out), {x, *gain, *bias}, backward);
  return detail::make_result<T>(x.shape(), std::move(out), {x}, backward);
}

}  // namespace detail

/// Normalisation without the affine step.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps) {
  return detail::layer_norm_impl<T>(x, nullptr, nullptr, eps);
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  return detail::layer_norm_impl<T>(x, &gain, &bias, eps);
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(numel(shape) == x.size(), "reshape: " + to_string(x.shape()) + " -> " +
                                                to_string(shape) + " changes element count");
  Buffer<T> out(x.data().begin(), x.data().end());
  const std::size_t n = x.size();
  return detail::make_result<T>(std::move(shape), std::move(out), {x}, [n](TensorNode<T>& self) {
    if (T* gx = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[i];
    }
  });
}

/// Concatenates [B, d_i] matrices along columns.
template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& xs) {
  detail::require(!xs.empty(), "concat_cols: no inputs");
  const std::size_t B = xs[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& x : xs) {
    detail::require(x.rank() == 2 && x.dim(0) == B, "concat_cols: inputs must be [B, d]");
    widths.push_back(x.dim(1));
    total += x.dim(1);
  }
  Buffer<T> out(B * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const T* src = xs[k].data().data();
    for (std::size_t b = 0; b < B; ++b)
      std::copy_n(src + b * widths[k], widths[k], out.data() + b * total + off);
    off += widths[k];
  }
  return detail::make_result_n<T>({B, total}, std::move(out), xs,
                                  [B, total, widths](TensorNode<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (T* gx = detail::parent_grad(self, k)) {
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t j = 0; j < widths[k]; ++j)
            gx[b * widths[k] + j] += self.grad[b * total + off + j];
      }
      off += widths[k];
    }
  });
}

/// Stacks N tensors of shape [B, d] into [B, N, d].
template <class T>
Tensor<T> stack_tokens(const std::vector<Tensor<T>>& xs) {
  detail::require(!xs.empty(), "stack_tokens: no inputs");
  const std::size_t B = xs[0].dim(0), d = xs[0].dim(1), N = xs.size();
  for (const auto& x : xs) {
    detail::require(x.rank() == 2 && x.dim(0) == B && x.dim(1) == d,
                    "stack_tokens: width mismatch, expected [" + std::to_string(B) + "x" +
                        std::to_string(d) + "], got " + to_string(x.shape()));
  }
  Buffer<T> out(B * N * d);
  for (std::size_t k = 0; k < N; ++k) {
    const T* src = xs[k].data().data();
    for (std::size_t b = 0; b < B; ++b) std::copy_n(src + b * d, d, out.data() + (b * N + k) * d);
  }
  return detail::make_result_n<T>({B, N, d}, std::move(out), xs, [B, N, d](TensorNode<T>& self) {
    for (std::size_t k = 0; k < N; ++k) {
      if (T* gx = detail::parent_grad(self, k)) {
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t j = 0; j < d; ++j) gx[b * d + j] += self.grad[(b * N + k) * d + j];
      }
    }
  });
}

/// Mean over axis 1 of a [B, N, d] tensor.
template <class T>
Tensor<T> mean_tokens(const Tensor<T>& x) {
  detail::require(x.rank() == 3, "mean_tokens: expected [B, N, d]");
  const std::size_t B = x.dim(0), N = x.dim(1), d = x.dim(2);
  Buffer<T> out(B * d, T(0));
  const T* xv = x.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < N; ++k)
      for (std::size_t j = 0; j < d; ++j) out[b * d + j] += xv[(b * N + k) * d + j] / T(N);
  return detail::make_result<T>({B, d}, std::move(out), {x}, [B, N, d](TensorNode<T>& self) {
    if (T* gx = detail::parent_grad(self, 0)) {
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < N; ++k)
          for (std::size_t j = 0; j < d; ++j) gx[(b * N + k) * d + j] += self.grad[b * d + j] / T(N);
    }
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (const T v : x.data()) s += v;
  const std::size_t n = x.size();
  return detail::make_result<T>({}, {s}, {x}, [n](TensorNode<T>& self) {
    if (T* gx = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
    }
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  detail::require(x.size() > 0, "mean: empty tensor");
  return scale(sum(x), T(1) / T(x.size()));
}

/// Mean squared error against a constant target.
template <class T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require(pred.shape() == target.shape(), "mse: shape mismatch " +
                                                      to_string(pred.shape()) + " vs " +
                                                      to_string(target.shape()));
  detail::require(pred.size() > 0, "mse: empty tensors");
  const std::size_t n = pred.size();
  auto diff = std::make_shared<Buffer<T>>(n);
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*diff)[i] = pred[i] - target[i];
    s += (*diff)[i] * (*diff)[i];
  }
  return detail::make_result<T>({}, {s / T(n)}, {pred, target}, [n, diff](TensorNode<T>& self) {
    const T c = T(2) * self.grad[0] / T(n);
    if (T* gp = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) gp[i] += c * (*diff)[i];
    if (T* gt = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < n; ++i) gt[i] -= c * (*diff)[i];
  });
}

// ---------------------------------------------------------------------------
// Fused recurrent cell

/// Single-layer LSTM over x: [B, T, F] with gate order (input, forget, cell,
/// output). w_in: [F, 4H], w_rec: [H, 4H], bias: [4H]. Returns the final
/// hidden state [B, H]; the initial hidden and cell states are zero.
template <class T>
Tensor<T> lstm(const Tensor<T>& x, const Tensor<T>& w_in, const Tensor<T>& w_rec,
               const Tensor<T>& bias) {
  using namespace detail;
  using Arr = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  require(x.rank() == 3, "lstm: input must be [B, T, F]");
  const std::size_t B = x.dim(0), Tn = x.dim(1), F = x.dim(2);
  if (Tn == 0) throw ContractError("lstm: sequence length must be positive");
  require(w_in.rank() == 2 && w_in.dim(0) == F && w_in.dim(1) % 4 == 0, "lstm: w_in shape");
  const std::size_t H = w_in.dim(1) / 4, G = 4 * H;
  require(w_rec.rank() == 2 && w_rec.dim(0) == H && w_rec.dim(1) == G, "lstm: w_rec shape");
  require(bias.size() == G, "lstm: bias shape");

  // Everything below is time-major so that one step is a contiguous [B, .] block.
  auto xt = std::make_shared<Buffer<T>>(Tn * B * F);
  const T* xv = x.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < Tn; ++t)
      std::copy_n(xv + (b * Tn + t) * F, F, xt->data() + (t * B + b) * F);
  // Gate activations [T, B, 4H]; cell states, tanh(cell) and hidden states [T+1, B, H].
  auto gates = std::make_shared<Buffer<T>>(Tn * B * G);
  auto cells = std::make_shared<Buffer<T>>((Tn + 1) * B * H, T(0));
  auto tcells = std::make_shared<Buffer<T>>((Tn + 1) * B * H, T(0));
  auto hidden = std::make_shared<Buffer<T>>((Tn + 1) * B * H, T(0));
  MapR<T>(gates->data(), Tn * B, G).noalias() =
      CMapR<T>(xt->data(), Tn * B, F) * CMapR<T>(w_in.data().data(), F, G);
  const CMapR<T> wr(w_rec.data().data(), H, G);
  const Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.data().data(), G);
  for (std::size_t t = 0; t < Tn; ++t) {
    MapR<T> z(gates->data() + t * B * G, B, G);
    z.noalias() += CMapR<T>(hidden->data() + t * B * H, B, H) * wr;
    z.rowwise() += bv;
    auto za = z.array();
    za.leftCols(2 * H) = za.leftCols(2 * H).logistic();
    za.middleCols(2 * H, H) = za.middleCols(2 * H, H).tanh();
    za.rightCols(H) = za.rightCols(H).logistic();
    auto cp = Eigen::Map<const Arr>(cells->data() + t * B * H, B, H);
    Eigen::Map<Arr> cn(cells->data() + (t + 1) * B * H, B, H);
    Eigen::Map<Arr> tc(tcells->data() + (t + 1) * B * H, B, H);
    Eigen::Map<Arr> hn(hidden->data() + (t + 1) * B * H, B, H);
    cn = za.middleCols(H, H) * cp + za.leftCols(H) * za.middleCols(2 * H, H);
    tc = cn.tanh();
    hn = za.rightCols(H) * tc;
  }
  Buffer<T> out(hidden->begin() + Tn * B * H, hidden->end());

  return make_result<T>({B, H}, std::move(out), {x, w_in, w_rec, bias},
                        [=](TensorNode<T>& self) {
    const CMapR<T> wr(self.parents[2]->value.data(), H, G);
    Arr dh = Eigen::Map<const Arr>(self.grad.data(), B, H);
    Arr dc = Arr::Zero(B, H);
    Buffer<T> dpre(Tn * B * G);  // gradient wrt pre-activations, [T, B, 4H]
    MatR<T> dwr = MatR<T>::Zero(H, G);
    for (std::size_t t = Tn; t-- > 0;) {
      const auto ga = Eigen::Map<const Arr>(gates->data() + t * B * G, B, G);
      const auto i = ga.leftCols(H), f = ga.middleCols(H, H), g = ga.middleCols(2 * H, H),
                 o = ga.rightCols(H);
      const auto cp = Eigen::Map<const Arr>(cells->data() + t * B * H, B, H);
      const auto tc = Eigen::Map<const Arr>(tcells->data() + (t + 1) * B * H, B, H);
      Eigen::Map<Arr> dG(dpre.data() + t * B * G, B, G);
      const Arr dct = dc + dh * o * (T(1) - tc * tc);
      dG.leftCols(H) = dct * g * i * (T(1) - i);
      dG.middleCols(H, H) = dct * cp * f * (T(1) - f);
      dG.middleCols(2 * H, H) = dct * i * (T(1) - g * g);
      dG.rightCols(H) = dh * tc * o * (T(1) - o);
      dc = dct * f;
      const CMapR<T> dGm(dpre.data() + t * B * G, B, G);
      dwr.noalias() += CMapR<T>(hidden->data() + t * B * H, B, H).transpose() * dGm;
      dh.matrix().noalias() = dGm * wr.transpose();
    }
    const CMapR<T> dP(dpre.data(), Tn * B, G);
    if (T* gx = parent_grad(self, 0)) {
      MatR<T> dxt(Tn * B, F);
      dxt.noalias() = dP * CMapR<T>(self.parents[1]->value.data(), F, G).transpose();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < Tn; ++t) {
          const T* src = dxt.data() + (t * B + b) * F;
          T* dst = gx + (b * Tn + t) * F;
          for (std::size_t k = 0; k < F; ++k) dst[k] += src[k];
        }
    }
    if (T* gwi = parent_grad(self, 1)) {
      MapR<T>(gwi, F, G).noalias() += CMapR<T>(xt->data(), Tn * B, F).transpose() * dP;
    }
    if (T* gwr = parent_grad(self, 2)) MapR<T>(gwr, H, G) += dwr;
    if (T* gb = parent_grad(self, 3)) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gbv(gb, G);
      for (std::size_t r = 0; r < Tn * B; ++r) gbv += dP.row(r);
    }
  });
}

// ---------------------------------------------------------------------------
// Fused multi-head scaled dot-product self-attention

/// q, k, v: [B, N, D] with D split into `heads` contiguous slices. Returns
/// softmax(q kᵀ / sqrt(D/heads)) v per head, re-concatenated to [B, N, D].
/// If `probs_out` is given it receives the attention matrices [B, heads, N, N].
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::size_t heads, std::vector<T>* probs_out = nullptr) {
  using namespace detail;
  require(q.rank() == 3 && q.shape() == k.shape() && q.shape() == v.shape(),
          "attention: q, k, v must share shape [B, N, D]");
  const std::size_t B = q.dim(0), N = q.dim(1), D = q.dim(2);
  require(heads >= 1 && D % heads == 0, "attention: width " + std::to_string(D) +
                                            " not divisible by " + std::to_string(heads) +
                                            " heads");
  const std::size_t dh = D / heads;
  const T sc = T(1) / std::sqrt(T(dh));
  auto probs = std::make_shared<Buffer<T>>(B * heads * N * N);
  Buffer<T> out(B * N * D, T(0));
  const T* Q = q.data().data();
  const T* K = k.data().data();
  const T* V = v.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = probs->data() + (b * heads + h) * N * N;
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
          T s = 0;
          for (std::size_t c = 0; c < dh; ++c)
            s += Q[(b * N + i) * D + h * dh + c] * K[(b * N + j) * D + h * dh + c];
          P[i * N + j] = s * sc;
        }
      softmax_lines(P, P, N, N, 1);
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
          const T p = P[i * N + j];
          for (std::size_t c = 0; c < dh; ++c)
            out[(b * N + i) * D + h * dh + c] += p * V[(b * N + j) * D + h * dh + c];
        }
    }
  if (probs_out) probs_out->assign(probs->begin(), probs->end());
  return detail::make_result<T>({B, N, D}, std::move(out), {q, k, v}, [=](TensorNode<T>& self) {
    const T* Q = self.parents[0]->value.data();
    const T* K = self.parents[1]->value.data();
    const T* V = self.parents[2]->value.data();
    T* gq = parent_grad(self, 0);
    T* gk = parent_grad(self, 1);
    T* gv = parent_grad(self, 2);
    const T* g = self.grad.data();
    Buffer<T> dP(N * N);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const T* P = probs->data() + (b * heads + h) * N * N;
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t j = 0; j < N; ++j) {
            T s = 0;
            for (std::size_t c = 0; c < dh; ++c)
              s += g[(b * N + i) * D + h * dh + c] * V[(b * N + j) * D + h * dh + c];
            dP[i * N + j] = s;
            if (gv) {
              for (std::size_t c = 0; c < dh; ++c)
                gv[(b * N + j) * D + h * dh + c] += P[i * N + j] * g[(b * N + i) * D + h * dh + c];
            }
          }
        for (std::size_t i = 0; i < N; ++i) {
          T dot = 0;
          for (std::size_t j = 0; j < N; ++j) dot += dP[i * N + j] * P[i * N + j];
          for (std::size_t j = 0; j < N; ++j) {
            const T ds = P[i * N + j] * (dP[i * N + j] - dot) * sc;
            for (std::size_t c = 0; c < dh; ++c) {
              if (gq) gq[(b * N + i) * D + h * dh + c] += ds * K[(b * N + j) * D + h * dh + c];
              if (gk) gk[(b * N + j) * D + h * dh + c] += ds * Q[(b * N + i) * D + h * dh + c];
            }
          }
        }
      }
  });
}

}  // namespace phase::ad
