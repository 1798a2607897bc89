#pragma once

// Differentiable tensor operations. Every op computes its forward result,
// and, when a tape is active and an input requires gradients, records a
// backward closure that accumulates into the inputs' grad buffers.
//
// Convolution is cross-correlation (no kernel flip). All reductions run in a
// fixed order; parallel kernels partition work so each output element is
// produced by exactly one serial loop, keeping results bitwise reproducible.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <optional>
#include <type_traits>
#include <vector>

#include "voxfuse/common.hpp"
#include "voxfuse/tensor.hpp"

namespace voxfuse {

enum class Mode { train, eval };

// Optional bias argument in a non-deduced context, so std::nullopt converts.
template <Scalar T>
using OptTensor = std::type_identity_t<std::optional<Tensor<T>>>;

// --------------------------------------------------------------------------
// Output-extent formulas shared by kernels, layer specs, and shape tests.

inline int conv_out_extent(int in, int k, int s, int p) {
  const int out = (in + 2 * p - k) / s + 1;
  if (in < 1 || k < 1 || s < 1 || p < 0 || in + 2 * p < k || out < 1) {
    throw ShapeError("conv: non-positive output extent (in=" +
                     std::to_string(in) + " k=" + std::to_string(k) +
                     " s=" + std::to_string(s) + " p=" + std::to_string(p) +
                     ")");
  }
  return out;
}

inline int conv_transpose_out_extent(int in, int k, int s, int p) {
  const int out = (in - 1) * s - 2 * p + k;
  if (in < 1 || k < 1 || s < 1 || p < 0 || out < 1) {
    throw ShapeError("conv_transpose: non-positive output extent (in=" +
                     std::to_string(in) + " k=" + std::to_string(k) +
                     " s=" + std::to_string(s) + " p=" + std::to_string(p) +
                     ")");
  }
  return out;
}

inline int pool_out_extent(int in, int k, int s) {
  if (k > in) {
    throw ShapeError("maxpool: window " + std::to_string(k) +
                     " larger than input extent " + std::to_string(in));
  }
  return (in - k) / s + 1;
}

// --------------------------------------------------------------------------
// Recording helpers.

template <Scalar T>
inline bool tracing() {
  return Tape<T>::recording();
}

template <Scalar T, typename F>
void record_node(Tensor<T>& out, F&& backward_fn) {
  out.set_requires_grad(true);
  Tape<T>::current()->attach_output(out);
  Tape<T>::current()->record(std::forward<F>(backward_fn));
}

// --------------------------------------------------------------------------
// Elementwise arithmetic.

template <Scalar T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                      const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <Scalar T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
  if (tracing<T>() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    record_node(out, [a, b, out]() mutable {
      const std::int64_t n = out.size();
      if (a.requires_grad())
        for (std::int64_t i = 0; i < n; ++i) a.grad()[i] += out.grad()[i];
      if (b.requires_grad())
        for (std::int64_t i = 0; i < n; ++i) b.grad()[i] += out.grad()[i];
    });
  }
  return out;
}

template <Scalar T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] - b.ptr()[i];
  if (tracing<T>() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    record_node(out, [a, b, out]() mutable {
      const std::int64_t n = out.size();
      if (a.requires_grad())
        for (std::int64_t i = 0; i < n; ++i) a.grad()[i] += out.grad()[i];
      if (b.requires_grad())
        for (std::int64_t i = 0; i < n; ++i) b.grad()[i] -= out.grad()[i];
    });
  }
  return out;
}

template <Scalar T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
  if (tracing<T>() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    record_node(out, [a, b, out]() mutable {
      const std::int64_t n = out.size();
      if (a.requires_grad())
        for (std::int64_t i = 0; i < n; ++i)
          a.grad()[i] += b.ptr()[i] * out.grad()[i];
      if (b.requires_grad())
        for (std::int64_t i = 0; i < n; ++i)
          b.grad()[i] += a.ptr()[i] * out.grad()[i];
    });
  }
  return out;
}

template <Scalar T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) out.ptr()[i] = x.ptr()[i] * c;
  if (tracing<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    record_node(out, [x, out, c]() mutable {
      const std::int64_t n = out.size();
      for (std::int64_t i = 0; i < n; ++i) x.grad()[i] += c * out.grad()[i];
    });
  }
  return out;
}

template <Scalar T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) out.ptr()[i] = x.ptr()[i] + c;
  if (tracing<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    record_node(out, [x, out]() mutable {
      const std::int64_t n = out.size();
      for (std::int64_t i = 0; i < n; ++i) x.grad()[i] += out.grad()[i];
    });
  }
  return out;
}

// --------------------------------------------------------------------------
// Activations. At the ReLU-family kink (x == 0) the negative-side slope is
// used: 0 for relu, alpha for leaky_relu; elu's derivative is continuous.

template <Scalar T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i)
    out.ptr()[i] = x.ptr()[i] > T(0) ? x.ptr()[i] : T(0);
  if (tracing<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    record_node(out, [x, out]() mutable {
      const std::int64_t n = out.size();
      for (std::int64_t i = 0; i < n; ++i)
        if (x.ptr()[i] > T(0)) x.grad()[i] += out.grad()[i];
    });
  }
  return out;
}

template <Scalar T>
Tensor<T> leaky_relu(const Tensor<T>& x, T alpha) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i)
    out.ptr()[i] = x.ptr()[i] > T(0) ? x.ptr()[i] : alpha * x.ptr()[i];
  if (tracing<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    record_node(out, [x, out, alpha]() mutable {
      const std::int64_t n = out.size();
      for (std::int64_t i = 0; i < n; ++i)
        x.grad()[i] += (x.ptr()[i] > T(0) ? T(1) : alpha) * out.grad()[i];
    });
  }
  return out;
}

template <Scalar T>
Tensor<T> elu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i)
    out.ptr()[i] =
        x.ptr()[i] > T(0) ? x.ptr()[i] : static_cast<T>(std::expm1(x.ptr()[i]));
  if (tracing<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    record_node(out, [x, out]() mutable {
      const std::int64_t n = out.size();
      for (std::int64_t i = 0; i < n; ++i)
        x.grad()[i] +=
            (x.ptr()[i] > T(0) ? T(1) : out.ptr()[i] + T(1)) * out.grad()[i];
    });
  }
  return out;
}

// Output is kept strictly inside (0, 1): saturated values are nudged to the
// nearest representable interior value.
template <Scalar T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  constexpr T hi = T(1) - std::numeric_limits<T>::epsilon();
  constexpr T lo = std::numeric_limits<T>::min();
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) {
    const T s = T(1) / (T(1) + static_cast<T>(std::exp(-x.ptr()[i])));
    out.ptr()[i] = std::min(hi, std::max(lo, s));
  }
  if (tracing<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    record_node(out, [x, out]() mutable {
      const std::int64_t n = out.size();
      for (std::int64_t i = 0; i < n; ++i) {
        const T s = out.ptr()[i];
        x.grad()[i] += s * (T(1) - s) * out.grad()[i];
      }
    });
  }
  return out;
}

// --------------------------------------------------------------------------
// Reductions.

template <Scalar T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) acc += static_cast<double>(x.ptr()[i]);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (tracing<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    record_node(out, [x, out]() mutable {
      const T g = out.grad()[0];
      const std::int64_t n = x.size();
      for (std::int64_t i = 0; i < n; ++i) x.grad()[i] += g;
    });
  }
  return out;
}

template <Scalar T>
Tensor<T> mean(const Tensor<T>& x) {
  double acc = 0.0;
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) acc += static_cast<double>(x.ptr()[i]);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (tracing<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    record_node(out, [x, out, n]() mutable {
      const T g = out.grad()[0] / static_cast<T>(n);
      for (std::int64_t i = 0; i < n; ++i) x.grad()[i] += g;
    });
  }
  return out;
}

// --------------------------------------------------------------------------
// Matrix product and fully connected layer.

template <Scalar T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expects rank-2 tensors");
  }
  const int M = a.extent(0), K = a.extent(1), K2 = b.extent(0), N = b.extent(1);
  if (K != K2) {
    throw ShapeError("matmul: inner dimensions disagree " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros({M, N});
  parallel_for(M, 8, [&](std::int64_t m0, std::int64_t m1) {
    for (std::int64_t m = m0; m < m1; ++m) {
      T* orow = out.ptr() + m * N;
      for (int k = 0; k < K; ++k) {
        const T av = a.ptr()[m * K + k];
        const T* brow = b.ptr() + static_cast<std::int64_t>(k) * N;
        for (int j = 0; j < N; ++j) orow[j] += av * brow[j];
      }
    }
  });
  if (tracing<T>() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    record_node(out, [a, b, out, M, K, N]() mutable {
      if (a.requires_grad()) {
        parallel_for(M, 8, [&](std::int64_t m0, std::int64_t m1) {
          for (std::int64_t m = m0; m < m1; ++m) {
            const T* grow = out.grad().data() + m * N;
            for (int k = 0; k < K; ++k) {
              const T* brow = b.ptr() + static_cast<std::int64_t>(k) * N;
              T acc = 0;
              for (int j = 0; j < N; ++j) acc += grow[j] * brow[j];
              a.grad()[m * K + k] += acc;
            }
          }
        });
      }
      if (b.requires_grad()) {
        parallel_for(K, 8, [&](std::int64_t k0, std::int64_t k1) {
          for (std::int64_t k = k0; k < k1; ++k) {
            T* brow = b.grad().data() + k * N;
            for (int m = 0; m < M; ++m) {
              const T av = a.ptr()[static_cast<std::int64_t>(m) * K + k];
              const T* grow = out.grad().data() + static_cast<std::int64_t>(m) * N;
              for (int j = 0; j < N; ++j) brow[j] += av * grow[j];
            }
          }
        });
      }
    });
  }
  return out;
}

// y[n, o] = sum_i x[n, i] * w[o, i] + b[o]
template <Scalar T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w,
                 const OptTensor<T>& bias) {
  if (x.rank() != 2 || w.rank() != 2) {
    throw ShapeError("linear: expects rank-2 input and weight");
  }
  const int N = x.extent(0), I = x.extent(1), O = w.extent(0);
  if (w.extent(1) != I) {
    throw ShapeError("linear: weight " + shape_str(w.shape()) +
                     " incompatible with input " + shape_str(x.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->extent(0) != O)) {
    throw ShapeError("linear: bias shape mismatch");
  }
  Tensor<T> out = Tensor<T>::zeros({N, O});
  parallel_for(static_cast<std::int64_t>(N) * O, 64,
               [&](std::int64_t t0, std::int64_t t1) {
    for (std::int64_t t = t0; t < t1; ++t) {
      const std::int64_t n = t / O;
      const std::int64_t o = t % O;
      const T* xrow = x.ptr() + n * I;
      const T* wrow = w.ptr() + o * I;
      T acc = bias ? bias->ptr()[o] : T(0);
      for (int i = 0; i < I; ++i) acc += xrow[i] * wrow[i];
      out.ptr()[t] = acc;
    }
  });
  const bool need = x.requires_grad() || w.requires_grad() ||
                    (bias && bias->requires_grad());
  if (tracing<T>() && need) {
    out.set_requires_grad(true);
    record_node(out, [x, w, bias, out, N, I, O]() mutable {
      if (x.requires_grad()) {
        parallel_for(N, 1, [&](std::int64_t n0, std::int64_t n1) {
          for (std::int64_t n = n0; n < n1; ++n) {
            T* gx = x.grad().data() + n * I;
            const T* grow = out.grad().data() + n * O;
            for (int o = 0; o < O; ++o) {
              const T gv = grow[o];
              const T* wrow = w.ptr() + static_cast<std::int64_t>(o) * I;
              for (int i = 0; i < I; ++i) gx[i] += gv * wrow[i];
            }
          }
        });
      }
      if (w.requires_grad()) {
        parallel_for(O, 4, [&](std::int64_t o0, std::int64_t o1) {
          for (std::int64_t o = o0; o < o1; ++o) {
            T* gw = w.grad().data() + o * I;
            for (int n = 0; n < N; ++n) {
              const T gv = out.grad()[static_cast<std::int64_t>(n) * O + o];
              const T* xrow = x.ptr() + static_cast<std::int64_t>(n) * I;
              for (int i = 0; i < I; ++i) gw[i] += gv * xrow[i];
            }
          }
        });
      }
      if (bias && bias->requires_grad()) {
        for (int o = 0; o < O; ++o) {
          T acc = 0;
          for (int n = 0; n < N; ++n)
            acc += out.grad()[static_cast<std::int64_t>(n) * O + o];
          bias->grad()[o] += acc;
        }
      }
    });
  }
  return out;
}

// --------------------------------------------------------------------------
// Shape manipulation.

template <Scalar T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> shape) {
  Tensor<T> out = x.aliased_view(std::move(shape));
  if (tracing<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    record_node(out, [x, out]() mutable {
      const std::int64_t n = x.size();
      for (std::int64_t i = 0; i < n; ++i) x.grad()[i] += out.grad()[i];
    });
  }
  return out;
}

// Flattens all axes after the first: [N, ...] -> [N, rest]
template <Scalar T>
Tensor<T> flatten2(const Tensor<T>& x) {
  const int n = x.extent(0);
  return reshape(x, {n, static_cast<int>(x.size() / n)});
}

template <Scalar T>
Tensor<T> concat_axis(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ContractError("concat: empty input list");
  const int rank = xs[0].rank();
  if (axis < 0 || axis >= rank) throw ShapeError("concat: bad axis");
  int total = 0;
  for (const auto& x : xs) {
    if (x.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis && x.shape()[d] != xs[0].shape()[d]) {
        throw ShapeError("concat: non-concat axis mismatch " +
                         shape_str(x.shape()) + " vs " +
                         shape_str(xs[0].shape()));
      }
    }
    total += x.extent(axis);
  }
  std::vector<int> oshape = xs[0].shape();
  oshape[axis] = total;
  Tensor<T> out = Tensor<T>::zeros(oshape);

  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= oshape[d];
  for (int d = axis + 1; d < rank; ++d) inner *= oshape[d];

  std::int64_t off = 0;
  for (const auto& x : xs) {
    const std::int64_t block = static_cast<std::int64_t>(x.extent(axis)) * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
      std::memcpy(out.ptr() + (o * total * inner + off),
                  x.ptr() + o * block, block * sizeof(T));
    }
    off += block;
  }

  bool need = false;
  for (const auto& x : xs) need = need || x.requires_grad();
  if (tracing<T>() && need) {
    out.set_requires_grad(true);
    record_node(out, [xs, out, outer, inner, total]() mutable {
      std::int64_t off = 0;
      for (auto& x : xs) {
        const std::int64_t block =
            static_cast<std::int64_t>(x.size()) / outer;
        if (x.requires_grad()) {
          for (std::int64_t o = 0; o < outer; ++o) {
            const T* g = out.grad().data() + (o * total * inner + off);
            T* gx = x.grad().data() + o * block;
            for (std::int64_t i = 0; i < block; ++i) gx[i] += g[i];
          }
        }
        off += block;
      }
    });
  }
  return out;
}

// Channel concatenation for [N, C, spatial...] tensors.
template <Scalar T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ContractError("concat_channels: empty input list");
  if (xs[0].rank() < 2) throw ShapeError("concat_channels: rank must be >= 2");
  return concat_axis(xs, 1);
}

// Splits [n, ...] into n tensors of shape [1, ...].
template <Scalar T>
std::vector<Tensor<T>> split_axis0(const Tensor<T>& x) {
  const int n = x.extent(0);
  std::vector<int> oshape = x.shape();
  oshape[0] = 1;
  const std::int64_t block = x.size() / n;
  std::vector<Tensor<T>> outs;
  outs.reserve(n);
  for (int r = 0; r < n; ++r) {
    Tensor<T> o = Tensor<T>::zeros(oshape);
    std::memcpy(o.ptr(), x.ptr() + r * block, block * sizeof(T));
    outs.push_back(std::move(o));
  }
  if (tracing<T>() && x.requires_grad()) {
    for (int r = 0; r < n; ++r) {
      Tensor<T>& o = outs[r];
      o.set_requires_grad(true);
      Tape<T>::current()->attach_output(o);
      Tape<T>::current()->record([x, o, r, block]() mutable {
        T* gx = x.grad().data() + r * block;
        const T* g = o.grad().data();
        for (std::int64_t i = 0; i < block; ++i) gx[i] += g[i];
      });
    }
  }
  return outs;
}

// --------------------------------------------------------------------------
// Per-position softmax across axis 0 (views), with max subtraction for
// stability. x: [n, rest...] -> same shape; per position j the n outputs
// sum to 1.

template <Scalar T>
Tensor<T> softmax_axis0(const Tensor<T>& x) {
  const int n = x.extent(0);
  const std::int64_t rest = x.size() / n;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  parallel_for(rest, 8192, [&](std::int64_t j0, std::int64_t j1) {
    const std::int64_t len = j1 - j0;
    std::vector<T> mx(len), acc(len, T(0));
    for (std::int64_t i = 0; i < len; ++i) mx[i] = x.ptr()[j0 + i];
    for (int r = 1; r < n; ++r) {
      const T* row = x.ptr() + r * rest + j0;
      for (std::int64_t i = 0; i < len; ++i) mx[i] = std::max(mx[i], row[i]);
    }
    for (int r = 0; r < n; ++r) {
      const T* row = x.ptr() + r * rest + j0;
      T* orow = out.ptr() + r * rest + j0;
      for (std::int64_t i = 0; i < len; ++i) {
        const T e = static_cast<T>(std::exp(row[i] - mx[i]));
        orow[i] = e;
        acc[i] += e;
      }
    }
    for (int r = 0; r < n; ++r) {
      T* orow = out.ptr() + r * rest + j0;
      for (std::int64_t i = 0; i < len; ++i) orow[i] /= acc[i];
    }
  });
  if (tracing<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    record_node(out, [x, out, n, rest]() mutable {
      parallel_for(rest, 8192, [&](std::int64_t j0, std::int64_t j1) {
        const std::int64_t len = j1 - j0;
        std::vector<T> dot(len, T(0));
        for (int r = 0; r < n; ++r) {
          const T* s = out.ptr() + r * rest + j0;
          const T* g = out.grad().data() + r * rest + j0;
          for (std::int64_t i = 0; i < len; ++i) dot[i] += s[i] * g[i];
        }
        for (int r = 0; r < n; ++r) {
          const T* s = out.ptr() + r * rest + j0;
          const T* g = out.grad().data() + r * rest + j0;
          T* gx = x.grad().data() + r * rest + j0;
          for (std::int64_t i = 0; i < len; ++i)
            gx[i] += s[i] * (g[i] - dot[i]);
        }
      });
    });
  }
  return out;
}

// out[j] = sum_r scores[r, j] * values[r, j], reduced in ascending view
// order. values, scores: [n, rest...] -> out: [1, rest...].
template <Scalar T>
Tensor<T> weighted_sum_axis0(const Tensor<T>& values, const Tensor<T>& scores) {
  check_same_shape(values, scores, "weighted_sum_axis0");
  const int n = values.extent(0);
  const std::int64_t rest = values.size() / n;
  std::vector<int> oshape = values.shape();
  oshape[0] = 1;
  Tensor<T> out = Tensor<T>::zeros(oshape);
  parallel_for(rest, 8192, [&](std::int64_t j0, std::int64_t j1) {
    for (int r = 0; r < n; ++r) {
      const T* v = values.ptr() + r * rest;
      const T* s = scores.ptr() + r * rest;
      T* o = out.ptr();
      for (std::int64_t j = j0; j < j1; ++j) o[j] += s[j] * v[j];
    }
  });
  if (tracing<T>() && (values.requires_grad() || scores.requires_grad())) {
    out.set_requires_grad(true);
    record_node(out, [values, scores, out, n, rest]() mutable {
      const T* g = out.grad().data();
      for (int r = 0; r < n; ++r) {
        if (values.requires_grad()) {
          T* gv = values.grad().data() + r * rest;
          const T* s = scores.ptr() + r * rest;
          for (std::int64_t j = 0; j < rest; ++j) gv[j] += s[j] * g[j];
        }
        if (scores.requires_grad()) {
          T* gs = scores.grad().data() + r * rest;
          const T* v = values.ptr() + r * rest;
          for (std::int64_t j = 0; j < rest; ++j) gs[j] += v[j] * g[j];
        }
      }
    });
  }
  return out;
}
// --------------------------------------------------------------------------
// Convolution core. 2D convs run through the same kernels with a leading
// unit depth axis. Weight layout [OC, IC, KD, KH, KW]; cross-correlation.
//
// Kernels accumulate into an L1-resident row buffer across all taps of a
// given output row, then store once. Each (n, channel) plane is produced by
// exactly one task with fixed-order loops, so results are reproducible.

struct ConvDims {
  int N, C, D, H, W;        // input
  int OC, KD, KH, KW;       // filter bank
  int OD, OH, OW;           // output
  int sd, sh, sw;           // strides
  int pd, ph, pw;           // pads
};
// Fused 2D stencil row pass for unit-stride convolutions: all KxK taps of a
// row are applied in one sweep so short rows are not overhead-bound. K is a
// compile-time constant (the configs only use 1, 3, 4), letting the tap
// loops unroll and the i-loop vectorize.
template <Scalar T, int K>
inline void stencil_row_full(T* __restrict dst, int lo, int hi,
                             const T* const* srows, int pad,
                             const T* __restrict w) {
  for (int i = lo; i < hi; ++i) {
    T s = 0;
    for (int ky = 0; ky < K; ++ky) {
      const T* sr = srows[ky] + i - pad;
      for (int kx = 0; kx < K; ++kx) s += w[ky * K + kx] * sr[kx];
    }
    dst[i] += s;
  }
}

// Guarded variant for rows and columns near the boundary.
template <Scalar T, int K>
inline void stencil_row_guarded(T* dst, int i0, int i1, const T* const* srows,
                                int ky0, int ky1, int pad, int srcW,
                                const T* w) {
  for (int i = i0; i < i1; ++i) {
    T s = 0;
    for (int ky = ky0; ky < ky1; ++ky) {
      const T* sr = srows[ky];
      for (int kx = 0; kx < K; ++kx) {
        const int sx = i - pad + kx;
        if (sx >= 0 && sx < srcW) s += w[ky * K + kx] * sr[sx];
      }
    }
    dst[i] += s;
  }
}

// One (dst plane, src plane) pair: dst[oy, ox] += stencil(src), where
// src rows are iy = oy - pad + ky. Widths may differ (used both for the
// forward pass and, with flipped weights, for the input gradient).
template <Scalar T, int K>
void stencil_plane_rows(T* dst, int dstH, int dstW, const T* src, int srcH,
                        int srcW, int pad, const T* w) {
  const int lo = std::clamp(pad, 0, dstW);
  const int hi = std::clamp(srcW + pad - (K - 1), lo, dstW);
  const T* srows[K];
  for (int oy = 0; oy < dstH; ++oy) {
    T* drow = dst + static_cast<std::int64_t>(oy) * dstW;
    const int ky0 = std::max(0, pad - oy);
    const int ky1 = std::min(K, srcH + pad - oy);
    if (ky1 <= ky0) continue;
    for (int ky = ky0; ky < ky1; ++ky)
      srows[ky] = src + static_cast<std::int64_t>(oy - pad + ky) * srcW;
    if (ky0 == 0 && ky1 == K) {
      stencil_row_guarded<T, K>(drow, 0, lo, srows, 0, K, pad, srcW, w);
      stencil_row_full<T, K>(drow, lo, hi, srows, pad, w);
      stencil_row_guarded<T, K>(drow, hi, dstW, srows, 0, K, pad, srcW, w);
    } else {
      stencil_row_guarded<T, K>(drow, 0, dstW, srows, ky0, ky1, pad, srcW, w);
    }
  }
}

// Same-size K=3 / pad=1 planes: one fused sweep over the flattened interior
// rows (taps read across row boundaries), then scalar fixups at the two
// columns per row where the wrap borrowed a neighbor row's pixel.
template <Scalar T>
void stencil_plane_flat3(T* dst, int H, int W, const T* src, const T* w) {
  // top and bottom rows take the guarded path
  const T* srows[3];
  {
    srows[1] = src;
    srows[2] = src + W;
    stencil_row_guarded<T, 3>(dst, 0, W, srows, 1, 3, 1, W, w);
    const std::int64_t last = static_cast<std::int64_t>(H - 1) * W;
    srows[0] = src + last - W;
    srows[1] = src + last;
    stencil_row_guarded<T, 3>(dst + last, 0, W, srows, 0, 2, 1, W, w);
  }
  const std::int64_t i0 = W, i1 = static_cast<std::int64_t>(H - 1) * W;
  const T w00 = w[0], w01 = w[1], w02 = w[2];
  const T w10 = w[3], w11 = w[4], w12 = w[5];
  const T w20 = w[6], w21 = w[7], w22 = w[8];
  const T* sm = src - W;
  const T* sp = src + W;
  for (std::int64_t i = i0; i < i1; ++i) {
    dst[i] += w00 * sm[i - 1] + w01 * sm[i] + w02 * sm[i + 1] +
              w10 * src[i - 1] + w11 * src[i] + w12 * src[i + 1] +
              w20 * sp[i - 1] + w21 * sp[i] + w22 * sp[i + 1];
  }
  // column fixups: x == 0 wrongly borrowed the previous row's last pixel
  // through the kx=0 taps; x == W-1 borrowed the next row's first pixel
  for (int y = 1; y < H - 1; ++y) {
    const std::int64_t i = static_cast<std::int64_t>(y) * W;
    dst[i] -= w00 * sm[i - 1] + w10 * src[i - 1] + w20 * sp[i - 1];
    const std::int64_t j = i + W - 1;
    dst[j] -= w02 * sm[j + 1] + w12 * src[j + 1] + w22 * sp[j + 1];
  }
}

template <Scalar T, int K>
void stencil_plane(T* dst, int dstH, int dstW, const T* src, int srcH,
                   int srcW, int pad, const T* w) {
  if constexpr (K == 3) {
    if (pad == 1 && dstH == srcH && dstW == srcW && dstH >= 3 && dstW >= 3) {
      stencil_plane_flat3(dst, dstH, dstW, src, w);
      return;
    }
  }
  stencil_plane_rows<T, K>(dst, dstH, dstW, src, srcH, srcW, pad, w);
}

template <Scalar T, int K>
void conv_forward_s1(const T* x, const T* w, const T* bias, T* y,
                     const ConvDims& d, bool accumulate) {
  const std::int64_t yvol = static_cast<std::int64_t>(d.OD) * d.OH * d.OW;
  const std::int64_t xvol = static_cast<std::int64_t>(d.D) * d.H * d.W;
  const std::int64_t wvol = static_cast<std::int64_t>(d.KD) * K * K;
  parallel_for(static_cast<std::int64_t>(d.N) * d.OC, 1,
               [&](std::int64_t t0, std::int64_t t1) {
    for (std::int64_t t = t0; t < t1; ++t) {
      const int n = static_cast<int>(t / d.OC);
      const int oc = static_cast<int>(t % d.OC);
      T* yp = y + t * yvol;
      if (!accumulate) std::fill(yp, yp + yvol, bias ? bias[oc] : T(0));
      for (int ic = 0; ic < d.C; ++ic) {
        const T* xp = x + (static_cast<std::int64_t>(n) * d.C + ic) * xvol;
        const T* wp = w + (static_cast<std::int64_t>(oc) * d.C + ic) * wvol;
        for (int kz = 0; kz < d.KD; ++kz) {
          const int oz0 = std::max(0, d.pd - kz);
          const int oz1 = std::min(d.OD, d.D + d.pd - kz);
          const T* wslice = wp + static_cast<std::int64_t>(kz) * K * K;
          for (int oz = oz0; oz < oz1; ++oz) {
            const int iz = oz - d.pd + kz;
            stencil_plane<T, K>(yp + static_cast<std::int64_t>(oz) * d.OH * d.OW,
                                d.OH, d.OW,
                                xp + static_cast<std::int64_t>(iz) * d.H * d.W,
                                d.H, d.W, d.ph, wslice);
          }
        }
      }
    }
  });
}

// Generic (any stride / kernel) reference path.
template <Scalar T>
void conv_forward_generic(const T* x, const T* w, const T* bias, T* y,
                          const ConvDims& d, bool accumulate) {
  const std::int64_t yplane = static_cast<std::int64_t>(d.OD) * d.OH * d.OW;
  const std::int64_t xplane = static_cast<std::int64_t>(d.D) * d.H * d.W;
  const std::int64_t wplane = static_cast<std::int64_t>(d.KD) * d.KH * d.KW;
  parallel_for(static_cast<std::int64_t>(d.N) * d.OC, 1,
               [&](std::int64_t t0, std::int64_t t1) {
    for (std::int64_t t = t0; t < t1; ++t) {
      const int n = static_cast<int>(t / d.OC);
      const int oc = static_cast<int>(t % d.OC);
      T* yp = y + t * yplane;
      if (!accumulate) std::fill(yp, yp + yplane, bias ? bias[oc] : T(0));
      for (int ic = 0; ic < d.C; ++ic) {
        const T* xp = x + (static_cast<std::int64_t>(n) * d.C + ic) * xplane;
        const T* wp = w + (static_cast<std::int64_t>(oc) * d.C + ic) * wplane;
        for (int oz = 0; oz < d.OD; ++oz) {
          for (int oy = 0; oy < d.OH; ++oy) {
            T* yrow = yp + (static_cast<std::int64_t>(oz) * d.OH + oy) * d.OW;
            for (int kz = 0; kz < d.KD; ++kz) {
              const int iz = oz * d.sd - d.pd + kz;
              if (iz < 0 || iz >= d.D) continue;
              for (int ky = 0; ky < d.KH; ++ky) {
                const int iy = oy * d.sh - d.ph + ky;
                if (iy < 0 || iy >= d.H) continue;
                const T* xrow = xp + (static_cast<std::int64_t>(iz) * d.H + iy) * d.W;
                const T* wrow = wp + (static_cast<std::int64_t>(kz) * d.KH + ky) * d.KW;
                for (int ox = 0; ox < d.OW; ++ox) {
                  T s = 0;
                  for (int kx = 0; kx < d.KW; ++kx) {
                    const int ix = ox * d.sw - d.pw + kx;
                    if (ix >= 0 && ix < d.W) s += wrow[kx] * xrow[ix];
                  }
                  yrow[ox] += s;
                }
              }
            }
          }
        }
      }
    }
  });
}

template <Scalar T>
void conv_forward_kernel(const T* x, const T* w, const T* bias, T* y,
                         const ConvDims& d, bool accumulate = false) {
  const bool unit = d.sd == 1 && d.sh == 1 && d.sw == 1;
  if (unit && d.KH == d.KW) {
    switch (d.KH) {
      case 1: conv_forward_s1<T, 1>(x, w, bias, y, d, accumulate); return;
      case 3: conv_forward_s1<T, 3>(x, w, bias, y, d, accumulate); return;
      case 4: conv_forward_s1<T, 4>(x, w, bias, y, d, accumulate); return;
      case 5: conv_forward_s1<T, 5>(x, w, bias, y, d, accumulate); return;
      default: break;
    }
  }
  conv_forward_generic(x, w, bias, y, d, accumulate);
}

// d(x): full correlation of the output gradient with the flipped kernel,
// computed with the same fused stencil (s == 1), or the generic scatter.
template <Scalar T, int K>
void conv_backward_x_s1(const T* gy, const T* w, T* gx, const ConvDims& d) {
  const std::int64_t yvol = static_cast<std::int64_t>(d.OD) * d.OH * d.OW;
  const std::int64_t xvol = static_cast<std::int64_t>(d.D) * d.H * d.W;
  const std::int64_t wvol = static_cast<std::int64_t>(d.KD) * K * K;
  const int flip_pad = K - 1 - d.ph;
  parallel_for(static_cast<std::int64_t>(d.N) * d.C, 1,
               [&](std::int64_t t0, std::int64_t t1) {
    T wflip[K * K];
    for (std::int64_t t = t0; t < t1; ++t) {
      const int n = static_cast<int>(t / d.C);
      const int ic = static_cast<int>(t % d.C);
      T* gxp = gx + t * xvol;
      for (int oc = 0; oc < d.OC; ++oc) {
        const T* gyp = gy + (static_cast<std::int64_t>(n) * d.OC + oc) * yvol;
        const T* wp = w + (static_cast<std::int64_t>(oc) * d.C + ic) * wvol;
        for (int kz = 0; kz < d.KD; ++kz) {
          // iz = oz - pd + kz  =>  per input plane iz, oz = iz + pd - kz
          const int iz0 = std::max(0, kz - d.pd);
          const int iz1 = std::min(d.D, d.OD + kz - d.pd);
          const T* wslice = wp + static_cast<std::int64_t>(kz) * K * K;
          for (int i = 0; i < K * K; ++i) wflip[i] = wslice[K * K - 1 - i];
          for (int iz = iz0; iz < iz1; ++iz) {
            const int oz = iz + d.pd - kz;
            stencil_plane<T, K>(gxp + static_cast<std::int64_t>(iz) * d.H * d.W,
                                d.H, d.W,
                                gyp + static_cast<std::int64_t>(oz) * d.OH * d.OW,
                                d.OH, d.OW, flip_pad, wflip);
          }
        }
      }
    }
  });
}

template <Scalar T>
void conv_backward_x_generic(const T* gy, const T* w, T* gx,
                             const ConvDims& d) {
  const std::int64_t yplane = static_cast<std::int64_t>(d.OD) * d.OH * d.OW;
  const std::int64_t xplane = static_cast<std::int64_t>(d.D) * d.H * d.W;
  const std::int64_t wplane = static_cast<std::int64_t>(d.KD) * d.KH * d.KW;
  parallel_for(static_cast<std::int64_t>(d.N) * d.C, 1,
               [&](std::int64_t t0, std::int64_t t1) {
    for (std::int64_t t = t0; t < t1; ++t) {
      const int n = static_cast<int>(t / d.C);
      const int ic = static_cast<int>(t % d.C);
      T* gxp = gx + t * xplane;
      for (int oc = 0; oc < d.OC; ++oc) {
        const T* gyp = gy + (static_cast<std::int64_t>(n) * d.OC + oc) * yplane;
        const T* wp = w + (static_cast<std::int64_t>(oc) * d.C + ic) * wplane;
        for (int kz = 0; kz < d.KD; ++kz) {
          for (int ky = 0; ky < d.KH; ++ky) {
            for (int kx = 0; kx < d.KW; ++kx) {
              const T wv = wp[(static_cast<std::int64_t>(kz) * d.KH + ky) * d.KW + kx];
              for (int oz = 0; oz < d.OD; ++oz) {
                const int iz = oz * d.sd - d.pd + kz;
                if (iz < 0 || iz >= d.D) continue;
                for (int oy = 0; oy < d.OH; ++oy) {
                  const int iy = oy * d.sh - d.ph + ky;
                  if (iy < 0 || iy >= d.H) continue;
                  const T* gyrow = gyp + (static_cast<std::int64_t>(oz) * d.OH + oy) * d.OW;
                  T* gxrow = gxp + (static_cast<std::int64_t>(iz) * d.H + iy) * d.W;
                  for (int ox = 0; ox < d.OW; ++ox) {
                    const int ix = ox * d.sw - d.pw + kx;
                    if (ix < 0 || ix >= d.W) continue;
                    gxrow[ix] += wv * gyrow[ox];
                  }
                }
              }
            }
          }
        }
      }
    }
  });
}

template <Scalar T>
void conv_backward_x_kernel(const T* gy, const T* w, T* gx, const ConvDims& d) {
  const bool unit = d.sd == 1 && d.sh == 1 && d.sw == 1;
  if (unit && d.KH == d.KW) {
    switch (d.KH) {
      case 1: conv_backward_x_s1<T, 1>(gy, w, gx, d); return;
      case 3: conv_backward_x_s1<T, 3>(gy, w, gx, d); return;
      case 4: conv_backward_x_s1<T, 4>(gy, w, gx, d); return;
      case 5: conv_backward_x_s1<T, 5>(gy, w, gx, d); return;
      default: break;
    }
  }
  conv_backward_x_generic(gy, w, gx, d);
}

// Same-size K=3 / pad=1 plane pair: all nine tap dots in one flattened
// sweep, with the row-wrap terms subtracted afterwards.
template <Scalar T>
void conv_backward_w_flat3(const T* x, const T* gy, int H, int W, T acc[9]) {
  const std::int64_t i0 = W, i1 = static_cast<std::int64_t>(H - 1) * W;
  const T* xm = x - W;
  const T* xp = x + W;
  T a00 = 0, a01 = 0, a02 = 0, a10 = 0, a11 = 0, a12 = 0, a20 = 0, a21 = 0,
    a22 = 0;
  for (std::int64_t i = i0; i < i1; ++i) {
    const T g = gy[i];
    a00 += g * xm[i - 1];
    a01 += g * xm[i];
    a02 += g * xm[i + 1];
    a10 += g * x[i - 1];
    a11 += g * x[i];
    a12 += g * x[i + 1];
    a20 += g * xp[i - 1];
    a21 += g * xp[i];
    a22 += g * xp[i + 1];
  }
  // subtract wrapped contributions and add the top/bottom rows properly
  for (int y = 1; y < H - 1; ++y) {
    const std::int64_t i = static_cast<std::int64_t>(y) * W;
    a00 -= gy[i] * xm[i - 1];
    a10 -= gy[i] * x[i - 1];
    a20 -= gy[i] * xp[i - 1];
    const std::int64_t j = i + W - 1;
    a02 -= gy[j] * xm[j + 1];
    a12 -= gy[j] * x[j + 1];
    a22 -= gy[j] * xp[j + 1];
  }
  for (int oy : {0, H - 1}) {
    const std::int64_t base = static_cast<std::int64_t>(oy) * W;
    for (int ox = 0; ox < W; ++ox) {
      const T g = gy[base + ox];
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy - 1 + ky;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox - 1 + kx;
          if (ix < 0 || ix >= W) continue;
          const T xv = x[static_cast<std::int64_t>(iy) * W + ix];
          T* slot = ky == 0 ? (kx == 0 ? &a00 : kx == 1 ? &a01 : &a02)
                  : ky == 1 ? (kx == 0 ? &a10 : kx == 1 ? &a11 : &a12)
                            : (kx == 0 ? &a20 : kx == 1 ? &a21 : &a22);
          *slot += g * xv;
        }
      }
    }
  }
  acc[0] += a00; acc[1] += a01; acc[2] += a02;
  acc[3] += a10; acc[4] += a11; acc[5] += a12;
  acc[6] += a20; acc[7] += a21; acc[8] += a22;
}

// d(w): per (oc, ic, kz), all KxK tap sums are accumulated in one sweep of
// each (gy row, x row) pair.
template <Scalar T, int K>
void conv_backward_w_s1(const T* x, const T* gy, T* gw, const ConvDims& d) {
  const std::int64_t yvol = static_cast<std::int64_t>(d.OD) * d.OH * d.OW;
  const std::int64_t xvol = static_cast<std::int64_t>(d.D) * d.H * d.W;
  const std::int64_t wvol = static_cast<std::int64_t>(d.KD) * K * K;
  const bool flat3 = K == 3 && d.ph == 1 && d.pw == 1 && d.OH == d.H &&
                     d.OW == d.W && d.H >= 3 && d.W >= 3;
  parallel_for(d.OC, 1, [&](std::int64_t o0, std::int64_t o1) {
    for (std::int64_t oc = o0; oc < o1; ++oc) {
      for (int ic = 0; ic < d.C; ++ic) {
        T* gwp = gw + (oc * d.C + ic) * wvol;
        for (int kz = 0; kz < d.KD; ++kz) {
          T acc[K * K] = {};
          const int oz0 = std::max(0, d.pd - kz);
          const int oz1 = std::min(d.OD, d.D + d.pd - kz);
          for (int n = 0; n < d.N; ++n) {
            const T* gyp = gy + (static_cast<std::int64_t>(n) * d.OC + oc) * yvol;
            const T* xp = x + (static_cast<std::int64_t>(n) * d.C + ic) * xvol;
            for (int oz = oz0; oz < oz1; ++oz) {
              const int iz = oz - d.pd + kz;
              const T* gplane = gyp + static_cast<std::int64_t>(oz) * d.OH * d.OW;
              const T* xplane = xp + static_cast<std::int64_t>(iz) * d.H * d.W;
              if (flat3) {
                if constexpr (K == 3) {
                  conv_backward_w_flat3(xplane, gplane, d.H, d.W, acc);
                }
                continue;
              }
              for (int oy = 0; oy < d.OH; ++oy) {
                const T* grow = gplane + static_cast<std::int64_t>(oy) * d.OW;
                for (int ky = 0; ky < K; ++ky) {
                  const int iy = oy - d.ph + ky;
                  if (iy < 0 || iy >= d.H) continue;
                  const T* xrow = xplane + static_cast<std::int64_t>(iy) * d.W;
                  for (int kx = 0; kx < K; ++kx) {
                    const int ox0 = std::max(0, d.pw - kx);
                    const int ox1 = std::min(d.OW, d.W + d.pw - kx);
                    const T* xr = xrow - d.pw + kx;
                    T s = 0;
                    for (int i = ox0; i < ox1; ++i) s += grow[i] * xr[i];
                    acc[ky * K + kx] += s;
                  }
                }
              }
            }
          }
          for (int i = 0; i < K * K; ++i)
            gwp[static_cast<std::int64_t>(kz) * K * K + i] += acc[i];
        }
      }
    }
  });
}

template <Scalar T>
void conv_backward_w_generic(const T* x, const T* gy, T* gw,
                             const ConvDims& d) {
  const std::int64_t yplane = static_cast<std::int64_t>(d.OD) * d.OH * d.OW;
  const std::int64_t xplane = static_cast<std::int64_t>(d.D) * d.H * d.W;
  const std::int64_t wplane = static_cast<std::int64_t>(d.KD) * d.KH * d.KW;
  parallel_for(d.OC, 1, [&](std::int64_t o0, std::int64_t o1) {
    for (std::int64_t oc = o0; oc < o1; ++oc) {
      for (int ic = 0; ic < d.C; ++ic) {
        T* gwp = gw + (oc * d.C + ic) * wplane;
        for (int kz = 0; kz < d.KD; ++kz) {
          for (int ky = 0; ky < d.KH; ++ky) {
            for (int kx = 0; kx < d.KW; ++kx) {
              T acc = 0;
              for (int n = 0; n < d.N; ++n) {
                const T* gyp = gy + (static_cast<std::int64_t>(n) * d.OC + oc) * yplane;
                const T* xp = x + (static_cast<std::int64_t>(n) * d.C + ic) * xplane;
                for (int oz = 0; oz < d.OD; ++oz) {
                  const int iz = oz * d.sd - d.pd + kz;
                  if (iz < 0 || iz >= d.D) continue;
                  for (int oy = 0; oy < d.OH; ++oy) {
                    const int iy = oy * d.sh - d.ph + ky;
                    if (iy < 0 || iy >= d.H) continue;
                    const T* gyrow = gyp + (static_cast<std::int64_t>(oz) * d.OH + oy) * d.OW;
                    const T* xrow = xp + (static_cast<std::int64_t>(iz) * d.H + iy) * d.W;
                    for (int ox = 0; ox < d.OW; ++ox) {
                      const int ix = ox * d.sw - d.pw + kx;
                      if (ix < 0 || ix >= d.W) continue;
                      acc += gyrow[ox] * xrow[ix];
                    }
                  }
                }
              }
              gwp[(static_cast<std::int64_t>(kz) * d.KH + ky) * d.KW + kx] += acc;
            }
          }
        }
      }
    }
  });
}

template <Scalar T>
void conv_backward_w_kernel(const T* x, const T* gy, T* gw, const ConvDims& d) {
  const bool unit = d.sd == 1 && d.sh == 1 && d.sw == 1;
  if (unit && d.KH == d.KW) {
    switch (d.KH) {
      case 1: conv_backward_w_s1<T, 1>(x, gy, gw, d); return;
      case 3: conv_backward_w_s1<T, 3>(x, gy, gw, d); return;
      case 4: conv_backward_w_s1<T, 4>(x, gy, gw, d); return;
      case 5: conv_backward_w_s1<T, 5>(x, gy, gw, d); return;
      default: break;
    }
  }
  conv_backward_w_generic(x, gy, gw, d);
}

template <Scalar T>
void conv_backward_bias_kernel(const T* gy, T* gb, int N, int OC,
                               std::int64_t plane) {
  for (int oc = 0; oc < OC; ++oc) {
    T acc = 0;
    for (int n = 0; n < N; ++n) {
      const T* p = gy + (static_cast<std::int64_t>(n) * OC + oc) * plane;
      for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
    }
    gb[oc] += acc;
  }
}

template <Scalar T>
Tensor<T> conv_nd(const Tensor<T>& x, const Tensor<T>& w,
                  const OptTensor<T>& bias, int stride, int pad, int dims) {
  if (dims != 2 && dims != 3) throw ContractError("conv: dims must be 2 or 3");
  if (x.rank() != dims + 2) {
    throw ShapeError("conv" + std::to_string(dims) + "d: input rank must be " +
                     std::to_string(dims + 2) + ", got " + shape_str(x.shape()));
  }
  if (w.rank() != dims + 2) {
    throw ShapeError("conv: weight rank mismatch " + shape_str(w.shape()));
  }
  if (x.extent(1) != w.extent(1)) {
    throw ShapeError("conv: channel mismatch, input " + shape_str(x.shape()) +
                     " vs weight " + shape_str(w.shape()));
  }
  ConvDims d{};
  d.N = x.extent(0);
  d.C = x.extent(1);
  d.OC = w.extent(0);
  if (dims == 3) {
    d.D = x.extent(2); d.H = x.extent(3); d.W = x.extent(4);
    d.KD = w.extent(2); d.KH = w.extent(3); d.KW = w.extent(4);
    d.sd = d.sh = d.sw = stride;
    d.pd = d.ph = d.pw = pad;
    d.OD = conv_out_extent(d.D, d.KD, stride, pad);
    d.OH = conv_out_extent(d.H, d.KH, stride, pad);
    d.OW = conv_out_extent(d.W, d.KW, stride, pad);
  } else {
    d.D = 1; d.H = x.extent(2); d.W = x.extent(3);
    d.KD = 1; d.KH = w.extent(2); d.KW = w.extent(3);
    d.sd = 1; d.sh = d.sw = stride;
    d.pd = 0; d.ph = d.pw = pad;
    d.OD = 1;
    d.OH = conv_out_extent(d.H, d.KH, stride, pad);
    d.OW = conv_out_extent(d.W, d.KW, stride, pad);
  }
  if (bias && (bias->rank() != 1 || bias->extent(0) != d.OC)) {
    throw ShapeError("conv: bias shape mismatch");
  }
  std::vector<int> oshape = dims == 3
      ? std::vector<int>{d.N, d.OC, d.OD, d.OH, d.OW}
      : std::vector<int>{d.N, d.OC, d.OH, d.OW};
  Tensor<T> out = Tensor<T>::zeros(oshape);
  conv_forward_kernel(x.ptr(), w.ptr(), bias ? bias->ptr() : nullptr,
                      out.ptr(), d);
  const bool need = x.requires_grad() || w.requires_grad() ||
                    (bias && bias->requires_grad());
  if (tracing<T>() && need) {
    out.set_requires_grad(true);
    record_node(out, [x, w, bias, out, d]() mutable {
      if (x.requires_grad())
        conv_backward_x_kernel(out.grad().data(), w.ptr(), x.grad().data(), d);
      if (w.requires_grad())
        conv_backward_w_kernel(x.ptr(), out.grad().data(), w.grad().data(), d);
      if (bias && bias->requires_grad()) {
        conv_backward_bias_kernel(out.grad().data(), bias->grad().data(), d.N,
                                  d.OC,
                                  static_cast<std::int64_t>(d.OD) * d.OH * d.OW);
      }
    });
  }
  return out;
}

template <Scalar T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w,
                 const OptTensor<T>& bias, int stride, int pad) {
  return conv_nd(x, w, bias, stride, pad, 2);
}

template <Scalar T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w,
                 const OptTensor<T>& bias, int stride, int pad) {
  return conv_nd(x, w, bias, stride, pad, 3);
}

// --------------------------------------------------------------------------
// Transposed 3D convolution: the adjoint of conv3d with the same (k, s, p).
// Weight layout [C_in, C_out, K, K, K]; output extent (in-1)*s - 2p + k.
//
// The stride-2 forward is computed gather-style per output row, decomposed
// by output parity so both reads and writes stay unit-stride. Backward
// w.r.t. the input is exactly a strided convolution of the incoming
// gradient, so it reuses conv_forward_kernel.

struct ConvTDims {
  int N, C, D, H, W;  // input
  int OC, K;          // filter bank (cubic)
  int OD, OH, OW;
  int s, p;
};

// k=2, s=2, p=0: every input voxel owns a disjoint 2x2x2 output block, so
// the transposed conv is eight independent 1x1x1 channel mixes, one per
// output parity class, followed by an interleave.
template <Scalar T>
void convt_k2_forward(const T* x, const T* w, const T* bias, T* y,
                      const ConvTDims& d) {
  const std::int64_t yplane = static_cast<std::int64_t>(d.OD) * d.OH * d.OW;
  const std::int64_t xplane = static_cast<std::int64_t>(d.D) * d.H * d.W;
  parallel_for(static_cast<std::int64_t>(d.N) * d.OC, 1,
               [&](std::int64_t t0, std::int64_t t1) {
    std::vector<T> sub(xplane);
    for (std::int64_t t = t0; t < t1; ++t) {
      const int n = static_cast<int>(t / d.OC);
      const int oc = static_cast<int>(t % d.OC);
      T* yp = y + t * yplane;
      const T init = bias ? bias[oc] : T(0);
      for (int q = 0; q < 8; ++q) {
        const int qz = q >> 2, qy = (q >> 1) & 1, qx = q & 1;
        std::fill(sub.begin(), sub.end(), init);
        for (int ic = 0; ic < d.C; ++ic) {
          const T wv = w[(static_cast<std::int64_t>(ic) * d.OC + oc) * 8 + q];
          const T* xp = x + (static_cast<std::int64_t>(n) * d.C + ic) * xplane;
          for (std::int64_t i = 0; i < xplane; ++i) sub[i] += wv * xp[i];
        }
        for (int a = 0; a < d.D; ++a) {
          for (int b = 0; b < d.H; ++b) {
            const T* srow = sub.data() + (static_cast<std::int64_t>(a) * d.H + b) * d.W;
            T* yrow = yp + ((static_cast<std::int64_t>(2 * a + qz) * d.OH) +
                            (2 * b + qy)) * d.OW + qx;
            for (int c = 0; c < d.W; ++c) yrow[2 * c] = srow[c];
          }
        }
      }
    }
  });
}

// Deinterleaves gy into its eight parity sub-volumes: out[(n*OC+oc)*8 + q].
template <Scalar T>
std::vector<T> convt_k2_gather_subs(const T* gy, const ConvTDims& d) {
  const std::int64_t yplane = static_cast<std::int64_t>(d.OD) * d.OH * d.OW;
  const std::int64_t xplane = static_cast<std::int64_t>(d.D) * d.H * d.W;
  std::vector<T> subs(static_cast<std::size_t>(d.N) * d.OC * 8 * xplane);
  parallel_for(static_cast<std::int64_t>(d.N) * d.OC, 1,
               [&](std::int64_t t0, std::int64_t t1) {
    for (std::int64_t t = t0; t < t1; ++t) {
      const T* gp = gy + t * yplane;
      for (int q = 0; q < 8; ++q) {
        const int qz = q >> 2, qy = (q >> 1) & 1, qx = q & 1;
        T* sp = subs.data() + (t * 8 + q) * xplane;
        for (int a = 0; a < d.D; ++a) {
          for (int b = 0; b < d.H; ++b) {
            const T* grow = gp + ((static_cast<std::int64_t>(2 * a + qz) * d.OH) +
                                  (2 * b + qy)) * d.OW + qx;
            T* srow = sp + (static_cast<std::int64_t>(a) * d.H + b) * d.W;
            for (int c = 0; c < d.W; ++c) srow[c] = grow[2 * c];
          }
        }
      }
    }
  });
  return subs;
}

template <Scalar T>
void convt_k2_backward_x(const std::vector<T>& gy_subs, const T* w, T* gx,
                         const ConvTDims& d) {
  const std::int64_t xplane = static_cast<std::int64_t>(d.D) * d.H * d.W;
  parallel_for(static_cast<std::int64_t>(d.N) * d.C, 1,
               [&](std::int64_t t0, std::int64_t t1) {
    for (std::int64_t t = t0; t < t1; ++t) {
      const int n = static_cast<int>(t / d.C);
      const int ic = static_cast<int>(t % d.C);
      T* gxp = gx + t * xplane;
      for (int oc = 0; oc < d.OC; ++oc) {
        const T* wrow = w + (static_cast<std::int64_t>(ic) * d.OC + oc) * 8;
        const T* base = gy_subs.data() +
                        (static_cast<std::int64_t>(n) * d.OC + oc) * 8 * xplane;
        for (int q = 0; q < 8; ++q) {
          const T wv = wrow[q];
          const T* sp = base + static_cast<std::int64_t>(q) * xplane;
          for (std::int64_t i = 0; i < xplane; ++i) gxp[i] += wv * sp[i];
        }
      }
    }
  });
}

template <Scalar T>
void convt_k2_backward_w(const T* x, const std::vector<T>& gy_subs, T* gw,
                         const ConvTDims& d) {
  const std::int64_t xplane = static_cast<std::int64_t>(d.D) * d.H * d.W;
  parallel_for(d.C, 1, [&](std::int64_t c0, std::int64_t c1) {
    for (std::int64_t ic = c0; ic < c1; ++ic) {
      for (int oc = 0; oc < d.OC; ++oc) {
        T* gwrow = gw + (ic * d.OC + oc) * 8;
        for (int q = 0; q < 8; ++q) {
          T acc = 0;
          for (int n = 0; n < d.N; ++n) {
            const T* xp = x + (static_cast<std::int64_t>(n) * d.C + ic) * xplane;
            const T* sp = gy_subs.data() +
                          ((static_cast<std::int64_t>(n) * d.OC + oc) * 8 + q) * xplane;
            for (std::int64_t i = 0; i < xplane; ++i) acc += xp[i] * sp[i];
          }
          gwrow[q] += acc;
        }
      }
    }
  });
}

template <Scalar T>
void convt_forward_kernel(const T* x, const T* w, const T* bias, T* y,
                          const ConvTDims& d) {
  const std::int64_t yplane = static_cast<std::int64_t>(d.OD) * d.OH * d.OW;
  const std::int64_t xplane = static_cast<std::int64_t>(d.D) * d.H * d.W;
  const std::int64_t wplane = static_cast<std::int64_t>(d.K) * d.K * d.K;

  if (d.K == 2 && d.s == 2 && d.p == 0) {
    convt_k2_forward(x, w, bias, y, d);
    return;
  }
  if (d.s == 2) {
    parallel_for(static_cast<std::int64_t>(d.N) * d.OC, 1,
                 [&](std::int64_t t0, std::int64_t t1) {
      const int half = d.OW / 2 + 2;
      std::vector<T> acc_even(half), acc_odd(half);
      for (std::int64_t t = t0; t < t1; ++t) {
        const int n = static_cast<int>(t / d.OC);
        const int oc = static_cast<int>(t % d.OC);
        T* yp = y + t * yplane;
        const T init = bias ? bias[oc] : T(0);
        for (int oz = 0; oz < d.OD; ++oz) {
          for (int oy = 0; oy < d.OH; ++oy) {
            const int n_even = (d.OW + 1) / 2;  // ox = 0, 2, ...
            const int n_odd = d.OW / 2;         // ox = 1, 3, ...
            std::fill(acc_even.begin(), acc_even.begin() + n_even, init);
            std::fill(acc_odd.begin(), acc_odd.begin() + n_odd, init);
            for (int ic = 0; ic < d.C; ++ic) {
              const T* xp = x + (static_cast<std::int64_t>(n) * d.C + ic) * xplane;
              const T* wp = w + (static_cast<std::int64_t>(ic) * d.OC + oc) * wplane;
              for (int kz = 0; kz < d.K; ++kz) {
                const int num_z = oz + d.p - kz;
                if (num_z < 0 || (num_z & 1) || num_z / 2 >= d.D) continue;
                const int iz = num_z / 2;
                for (int ky = 0; ky < d.K; ++ky) {
                  const int num_y = oy + d.p - ky;
                  if (num_y < 0 || (num_y & 1) || num_y / 2 >= d.H) continue;
                  const int iy = num_y / 2;
                  const T* xrow = xp + (static_cast<std::int64_t>(iz) * d.H + iy) * d.W;
                  const T* wrow = wp + (static_cast<std::int64_t>(kz) * d.K + ky) * d.K;
                  for (int kx = 0; kx < d.K; ++kx) {
                    const T wv = wrow[kx];
                    // ox = 2t + q needs (q + p - kx) even; ix = t + delta
                    const int q = (kx + d.p) & 1 ? 1 : 0;  // parity of ox
                    const int delta = (q + d.p - kx) / 2;  // may be negative
                    const int nq = q == 0 ? n_even : n_odd;
                    T* acc = q == 0 ? acc_even.data() : acc_odd.data();
                    const int lo = std::max(0, -delta);
                    const int hi = std::min(nq, d.W - delta);
                    const T* xr = xrow + delta;
                    for (int i = lo; i < hi; ++i) acc[i] += wv * xr[i];
                  }
                }
              }
            }
            T* yrow = yp + (static_cast<std::int64_t>(oz) * d.OH + oy) * d.OW;
            for (int i = 0; i < n_even; ++i) yrow[2 * i] = acc_even[i];
            for (int i = 0; i < n_odd; ++i) yrow[2 * i + 1] = acc_odd[i];
          }
        }
      }
    });
    return;
  }

  // generic stride: scatter form, one (n, oc) plane per task
  parallel_for(static_cast<std::int64_t>(d.N) * d.OC, 1,
               [&](std::int64_t t0, std::int64_t t1) {
    for (std::int64_t t = t0; t < t1; ++t) {
      const int n = static_cast<int>(t / d.OC);
      const int oc = static_cast<int>(t % d.OC);
      T* yp = y + t * yplane;
      std::fill(yp, yp + yplane, bias ? bias[oc] : T(0));
      for (int ic = 0; ic < d.C; ++ic) {
        const T* xp = x + (static_cast<std::int64_t>(n) * d.C + ic) * xplane;
        const T* wp = w + (static_cast<std::int64_t>(ic) * d.OC + oc) * wplane;
        for (int kz = 0; kz < d.K; ++kz) {
          for (int ky = 0; ky < d.K; ++ky) {
            for (int kx = 0; kx < d.K; ++kx) {
              const T wv = wp[(static_cast<std::int64_t>(kz) * d.K + ky) * d.K + kx];
              for (int iz = 0; iz < d.D; ++iz) {
                const int oz = iz * d.s - d.p + kz;
                if (oz < 0 || oz >= d.OD) continue;
                for (int iy = 0; iy < d.H; ++iy) {
                  const int oy = iy * d.s - d.p + ky;
                  if (oy < 0 || oy >= d.OH) continue;
                  const T* xrow = xp + (static_cast<std::int64_t>(iz) * d.H + iy) * d.W;
                  T* yrow = yp + (static_cast<std::int64_t>(oz) * d.OH + oy) * d.OW;
                  for (int ix = 0; ix < d.W; ++ix) {
                    const int ox = ix * d.s - d.p + kx;
                    if (ox < 0 || ox >= d.OW) continue;
                    yrow[ox] += wv * xrow[ix];
                  }
                }
              }
            }
          }
        }
      }
    }
  });
}

template <Scalar T>
void convt_backward_w_kernel(const T* x, const T* gy, T* gw,
                             const ConvTDims& d) {
  const std::int64_t yplane = static_cast<std::int64_t>(d.OD) * d.OH * d.OW;
  const std::int64_t xplane = static_cast<std::int64_t>(d.D) * d.H * d.W;
  const std::int64_t wplane = static_cast<std::int64_t>(d.K) * d.K * d.K;
  parallel_for(d.C, 1, [&](std::int64_t c0, std::int64_t c1) {
    for (std::int64_t ic = c0; ic < c1; ++ic) {
      for (int oc = 0; oc < d.OC; ++oc) {
        T* gwp = gw + (ic * d.OC + oc) * wplane;
        for (int kz = 0; kz < d.K; ++kz) {
          for (int ky = 0; ky < d.K; ++ky) {
            for (int kx = 0; kx < d.K; ++kx) {
              T acc = 0;
              for (int n = 0; n < d.N; ++n) {
                const T* xp = x + (static_cast<std::int64_t>(n) * d.C + ic) * xplane;
                const T* gyp = gy + (static_cast<std::int64_t>(n) * d.OC + oc) * yplane;
                for (int iz = 0; iz < d.D; ++iz) {
                  const int oz = iz * d.s - d.p + kz;
                  if (oz < 0 || oz >= d.OD) continue;
                  for (int iy = 0; iy < d.H; ++iy) {
                    const int oy = iy * d.s - d.p + ky;
                    if (oy < 0 || oy >= d.OH) continue;
                    const T* xrow = xp + (static_cast<std::int64_t>(iz) * d.H + iy) * d.W;
                    const T* gyrow = gyp + (static_cast<std::int64_t>(oz) * d.OH + oy) * d.OW;
                    for (int ix = 0; ix < d.W; ++ix) {
                      const int ox = ix * d.s - d.p + kx;
                      if (ox < 0 || ox >= d.OW) continue;
                      acc += xrow[ix] * gyrow[ox];
                    }
                  }
                }
              }
              gwp[(static_cast<std::int64_t>(kz) * d.K + ky) * d.K + kx] += acc;
            }
          }
        }
      }
    }
  });
}

template <Scalar T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& w,
                           const OptTensor<T>& bias, int stride, int pad) {
  if (x.rank() != 5) {
    throw ShapeError("conv_transpose3d: input rank must be 5, got " +
                     shape_str(x.shape()));
  }
  if (w.rank() != 5 || w.extent(2) != w.extent(3) || w.extent(3) != w.extent(4)) {
    throw ShapeError("conv_transpose3d: weight must be [Cin, Cout, K, K, K]");
  }
  if (x.extent(1) != w.extent(0)) {
    throw ShapeError("conv_transpose3d: channel mismatch, input " +
                     shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  }
  ConvTDims d{};
  d.N = x.extent(0);
  d.C = x.extent(1);
  d.D = x.extent(2);
  d.H = x.extent(3);
  d.W = x.extent(4);
  d.OC = w.extent(1);
  d.K = w.extent(2);
  d.s = stride;
  d.p = pad;
  d.OD = conv_transpose_out_extent(d.D, d.K, stride, pad);
  d.OH = conv_transpose_out_extent(d.H, d.K, stride, pad);
  d.OW = conv_transpose_out_extent(d.W, d.K, stride, pad);
  if (bias && (bias->rank() != 1 || bias->extent(0) != d.OC)) {
    throw ShapeError("conv_transpose3d: bias shape mismatch");
  }
  Tensor<T> out = Tensor<T>::zeros({d.N, d.OC, d.OD, d.OH, d.OW});
  convt_forward_kernel(x.ptr(), w.ptr(), bias ? bias->ptr() : nullptr,
                       out.ptr(), d);
  const bool need = x.requires_grad() || w.requires_grad() ||
                    (bias && bias->requires_grad());
  if (tracing<T>() && need) {
    out.set_requires_grad(true);
    record_node(out, [x, w, bias, out, d]() mutable {
      if (d.K == 2 && d.s == 2 && d.p == 0 &&
          (x.requires_grad() || w.requires_grad())) {
        auto subs = convt_k2_gather_subs(out.grad().data(), d);
        if (x.requires_grad())
          convt_k2_backward_x(subs, w.ptr(), x.grad().data(), d);
        if (w.requires_grad())
          convt_k2_backward_w(x.ptr(), subs, w.grad().data(), d);
      } else {
        if (x.requires_grad()) {
          // d(x) is the strided convolution of the output gradient with the
          // same weights ([C_in, C_out, ...] read as conv's [OC, IC, ...]).
          ConvDims cd{};
          cd.N = d.N; cd.C = d.OC;
          cd.D = d.OD; cd.H = d.OH; cd.W = d.OW;
          cd.OC = d.C;
          cd.KD = cd.KH = cd.KW = d.K;
          cd.OD = d.D; cd.OH = d.H; cd.OW = d.W;
          cd.sd = cd.sh = cd.sw = d.s;
          cd.pd = cd.ph = cd.pw = d.p;
          conv_forward_kernel<T>(out.grad().data(), w.ptr(), nullptr,
                                 x.grad().data(), cd, /*accumulate=*/true);
        }
        if (w.requires_grad())
          convt_backward_w_kernel(x.ptr(), out.grad().data(), w.grad().data(), d);
      }
      if (bias && bias->requires_grad()) {
        conv_backward_bias_kernel(out.grad().data(), bias->grad().data(), d.N,
                                  d.OC,
                                  static_cast<std::int64_t>(d.OD) * d.OH * d.OW);
      }
    });
  }
  return out;
}

// --------------------------------------------------------------------------
// Max pooling. Backward routes each output's gradient to its argmax input;
// ties break to the first element in scan order.

template <Scalar T>
Tensor<T> maxpool_nd(const Tensor<T>& x, int k, int stride, int dims) {
  if (dims != 2 && dims != 3) throw ContractError("maxpool: dims must be 2 or 3");
  if (x.rank() != dims + 2) {
    throw ShapeError("maxpool" + std::to_string(dims) + "d: input rank must be " +
                     std::to_string(dims + 2));
  }
  const int s = stride > 0 ? stride : k;
  const int N = x.extent(0), C = x.extent(1);
  const int D = dims == 3 ? x.extent(2) : 1;
  const int H = x.extent(dims == 3 ? 3 : 2);
  const int W = x.extent(dims == 3 ? 4 : 3);
  const int KD = dims == 3 ? k : 1;
  const int SD = dims == 3 ? s : 1;
  const int OD = dims == 3 ? pool_out_extent(D, k, s) : 1;
  const int OH = pool_out_extent(H, k, s);
  const int OW = pool_out_extent(W, k, s);
  std::vector<int> oshape = dims == 3 ? std::vector<int>{N, C, OD, OH, OW}
                                      : std::vector<int>{N, C, OH, OW};
  Tensor<T> out = Tensor<T>::zeros(oshape);
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
  const std::int64_t xplane = static_cast<std::int64_t>(D) * H * W;
  const std::int64_t yplane = static_cast<std::int64_t>(OD) * OH * OW;
  parallel_for(static_cast<std::int64_t>(N) * C, 1,
               [&](std::int64_t t0, std::int64_t t1) {
    for (std::int64_t t = t0; t < t1; ++t) {
      const T* xp = x.ptr() + t * xplane;
      T* yp = out.ptr() + t * yplane;
      std::int64_t* ap = argmax->data() + t * yplane;
      for (int oz = 0; oz < OD; ++oz) {
        for (int oy = 0; oy < OH; ++oy) {
          for (int ox = 0; ox < OW; ++ox) {
            T best{};
            std::int64_t bi = -1;
            for (int dz = 0; dz < KD; ++dz) {
              const int iz = oz * SD + dz;
              for (int dy = 0; dy < k; ++dy) {
                const int iy = oy * s + dy;
                for (int dx = 0; dx < k; ++dx) {
                  const int ix = ox * s + dx;
                  const std::int64_t xi = (static_cast<std::int64_t>(iz) * H + iy) * W + ix;
                  if (bi < 0 || xp[xi] > best) {
                    best = xp[xi];
                    bi = xi;
                  }
                }
              }
            }
            const std::int64_t yi = (static_cast<std::int64_t>(oz) * OH + oy) * OW + ox;
            yp[yi] = best;
            ap[yi] = bi;
          }
        }
      }
    }
  });
  if (tracing<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    record_node(out, [x, out, argmax, xplane, yplane, N, C]() mutable {
      parallel_for(static_cast<std::int64_t>(N) * C, 1,
                   [&](std::int64_t t0, std::int64_t t1) {
        for (std::int64_t t = t0; t < t1; ++t) {
          T* gxp = x.grad().data() + t * xplane;
          const T* gyp = out.grad().data() + t * yplane;
          const std::int64_t* ap = argmax->data() + t * yplane;
          for (std::int64_t i = 0; i < yplane; ++i) gxp[ap[i]] += gyp[i];
        }
      });
    });
  }
  return out;
}

template <Scalar T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride = -1) {
  return maxpool_nd(x, k, stride, 2);
}

template <Scalar T>
Tensor<T> maxpool3d(const Tensor<T>& x, int k, int stride = -1) {
  return maxpool_nd(x, k, stride, 3);
}

// --------------------------------------------------------------------------
// Batch normalization over all non-channel axes of [N, C, spatial...].
// Train mode normalizes with biased batch statistics and updates running
// stats in place: r <- (1 - momentum) * r + momentum * batch_stat.

template <Scalar T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, Tensor<T>& running_mean,
                    Tensor<T>& running_var, Mode mode, T eps = T(1e-5),
                    T momentum = T(0.1)) {
  if (x.rank() < 2) throw ShapeError("batchnorm: input rank must be >= 2");
  const int N = x.extent(0), C = x.extent(1);
  const std::int64_t S = x.size() / (static_cast<std::int64_t>(N) * C);
  auto check_param = [&](const Tensor<T>& p, const char* what) {
    if (p.rank() != 1 || p.extent(0) != C) {
      throw ShapeError(std::string("batchnorm: ") + what +
                       " length must equal channel extent " + std::to_string(C));
    }
  };
  check_param(gamma, "gamma");
  check_param(beta, "beta");
  check_param(running_mean, "running_mean");
  check_param(running_var, "running_var");

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto mean_c = std::make_shared<std::vector<T>>(C);
  auto istd_c = std::make_shared<std::vector<T>>(C);
  const std::int64_t M = static_cast<std::int64_t>(N) * S;

  if (mode == Mode::train) {
    parallel_for(C, 1, [&](std::int64_t c0, std::int64_t c1) {
      for (std::int64_t c = c0; c < c1; ++c) {
        double acc = 0.0;
        for (int n = 0; n < N; ++n) {
          const T* row = x.ptr() + (static_cast<std::int64_t>(n) * C + c) * S;
          for (std::int64_t i = 0; i < S; ++i) acc += static_cast<double>(row[i]);
        }
        const double mu = acc / static_cast<double>(M);
        double vacc = 0.0;
        for (int n = 0; n < N; ++n) {
          const T* row = x.ptr() + (static_cast<std::int64_t>(n) * C + c) * S;
          for (std::int64_t i = 0; i < S; ++i) {
            const double dv = static_cast<double>(row[i]) - mu;
            vacc += dv * dv;
          }
        }
        const double var = vacc / static_cast<double>(M);
        (*mean_c)[c] = static_cast<T>(mu);
        (*istd_c)[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        running_mean.values()[c] =
            (T(1) - momentum) * running_mean.values()[c] + momentum * static_cast<T>(mu);
        running_var.values()[c] =
            (T(1) - momentum) * running_var.values()[c] + momentum * static_cast<T>(var);
      }
    });
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean_c)[c] = running_mean.values()[c];
      (*istd_c)[c] = T(1) / static_cast<T>(
          std::sqrt(static_cast<double>(running_var.values()[c]) + static_cast<double>(eps)));
    }
  }

  parallel_for(static_cast<std::int64_t>(N) * C, 1,
               [&](std::int64_t t0, std::int64_t t1) {
    for (std::int64_t t = t0; t < t1; ++t) {
      const int c = static_cast<int>(t % C);
      const T mu = (*mean_c)[c], is = (*istd_c)[c];
      const T g = gamma.ptr()[c], b = beta.ptr()[c];
      const T* xrow = x.ptr() + t * S;
      T* yrow = out.ptr() + t * S;
      for (std::int64_t i = 0; i < S; ++i) yrow[i] = g * (xrow[i] - mu) * is + b;
    }
  });

  const bool need = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  if (tracing<T>() && need) {
    const bool train = mode == Mode::train;
    out.set_requires_grad(true);
    record_node(out, [x, gamma, beta, out, mean_c, istd_c, N, C, S, M, train]() mutable {
      parallel_for(C, 1, [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t c = c0; c < c1; ++c) {
          const T mu = (*mean_c)[c], is = (*istd_c)[c];
          const T gm = gamma.ptr()[c];
          double sum_g = 0.0, sum_gx = 0.0;
          for (int n = 0; n < N; ++n) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * S;
            const T* grow = out.grad().data() + base;
            const T* xrow = x.ptr() + base;
            for (std::int64_t i = 0; i < S; ++i) {
              sum_g += static_cast<double>(grow[i]);
              sum_gx += static_cast<double>(grow[i]) *
                        static_cast<double>((xrow[i] - mu) * is);
            }
          }
          if (gamma.requires_grad()) gamma.grad()[c] += static_cast<T>(sum_gx);
          if (beta.requires_grad()) beta.grad()[c] += static_cast<T>(sum_g);
          if (x.requires_grad()) {
            const T mg = static_cast<T>(sum_g / static_cast<double>(M));
            const T mgx = static_cast<T>(sum_gx / static_cast<double>(M));
            for (int n = 0; n < N; ++n) {
              const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * S;
              const T* grow = out.grad().data() + base;
              const T* xrow = x.ptr() + base;
              T* gx = x.grad().data() + base;
              if (train) {
                for (std::int64_t i = 0; i < S; ++i) {
                  const T xh = (xrow[i] - mu) * is;
                  gx[i] += gm * is * (grow[i] - mg - xh * mgx);
                }
              } else {
                for (std::int64_t i = 0; i < S; ++i) gx[i] += gm * is * grow[i];
              }
            }
          }
        }
      });
    });
  }
  return out;
}

// --------------------------------------------------------------------------
// Mean binary cross entropy with probability clamping at eps = 1e-7.
// gt must be exactly binary.

template <Scalar T>
Tensor<T> bce_mean(const Tensor<T>& p, const Tensor<T>& gt) {
  check_same_shape(p, gt, "bce");
  const std::int64_t n = p.size();
  for (std::int64_t i = 0; i < n; ++i) {
    if (gt.ptr()[i] != T(0) && gt.ptr()[i] != T(1)) {
      throw ContractError("bce: ground truth must be binary");
    }
  }
  constexpr double kEps = 1e-7;
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double ph = std::clamp(static_cast<double>(p.ptr()[i]), kEps, 1.0 - kEps);
    const double g = static_cast<double>(gt.ptr()[i]);
    acc += g * std::log(ph) + (1.0 - g) * std::log(1.0 - ph);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(-acc / static_cast<double>(n)));
  if (tracing<T>() && p.requires_grad()) {
    out.set_requires_grad(true);
    record_node(out, [p, gt, out, n]() mutable {
      const T g0 = out.grad()[0];
      const T scale = g0 / static_cast<T>(n);
      for (std::int64_t i = 0; i < n; ++i) {
        const T pv = p.ptr()[i];
        if (pv <= T(kEps) || pv >= T(1.0 - kEps)) continue;  // clamped: zero slope
        const T gv = gt.ptr()[i];
        p.grad()[i] += scale * ((T(1) - gv) / (T(1) - pv) - gv / pv);
      }
    });
  }
  return out;
}

}  // namespace voxfuse
