#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "accvit/tensor.hpp"

// Differentiable primitives. Every op is a pure function of immutable inputs
// returning a fresh tensor; when a tape is recording and any input requires
// gradients, the op appends a backward closure. All reductions run in fixed
// ascending-index order, so results are bit-identical across runs and thread
// counts.

namespace accvit {

namespace detail {

template <typename T>
std::vector<T>& grad_of(TensorImpl<T>* impl) {
  if (impl->grad.empty()) impl->grad.assign(impl->value.size(), T{0});
  return impl->grad;
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shapes " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out(a.shape());
  const auto av = a.data(), bv = b.data();
  auto ov = out.data_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (detail::taping<T>({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [ai, bi, oi] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) detail::accumulate(ai.get(), std::span<const T>(oi->grad));
      if (bi->requires_grad) detail::accumulate(bi.get(), std::span<const T>(oi->grad));
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "sub: shapes " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out(a.shape());
  const auto av = a.data(), bv = b.data();
  auto ov = out.data_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (detail::taping<T>({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [ai, bi, oi] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) detail::accumulate(ai.get(), std::span<const T>(oi->grad));
      if (bi->requires_grad) {
        auto& gb = detail::grad_of(bi.get());
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= oi->grad[i];
      }
    });
  }
  return out;
}

// Hadamard product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shapes " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out(a.shape());
  const auto av = a.data(), bv = b.data();
  auto ov = out.data_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (detail::taping<T>({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [ai, bi, oi] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        auto& ga = detail::grad_of(ai.get());
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i] * bi->value[i];
      }
      if (bi->requires_grad) {
        auto& gb = detail::grad_of(bi.get());
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += oi->grad[i] * ai->value[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double factor) {
  const T f = static_cast<T>(factor);
  Tensor<T> out(a.shape());
  const auto av = a.data();
  auto ov = out.data_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * f;
  if (detail::taping<T>({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [ai, oi, f] {
      if (oi->grad.empty()) return;
      auto& ga = detail::grad_of(ai.get());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i] * f;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T acc{0};
  for (const T v : a.data()) acc += v;
  Tensor<T> out(Shape{1}, std::vector<T>{acc});
  if (detail::taping<T>({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [ai, oi] {
      if (oi->grad.empty()) return;
      const T g = oi->grad[0];
      auto& ga = detail::grad_of(ai.get());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

namespace detail {

// GELU, tanh approximation, used verbatim everywhere in this repo:
//   gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
constexpr double kGeluAlpha = 0.79788456080286535588;
constexpr double kGeluCubic = 0.044715;

inline double gelu_fwd(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluAlpha * (x + kGeluCubic * x * x * x)));
}

inline double gelu_bwd(double x) {
  const double t = std::tanh(kGeluAlpha * (x + kGeluCubic * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluAlpha * (1.0 + 3.0 * kGeluCubic * x * x);
}

inline double sigmoid_fwd(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const auto av = a.data();
  auto ov = out.data_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = static_cast<T>(detail::gelu_fwd(static_cast<double>(av[i])));
  if (detail::taping<T>({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [ai, oi] {
      if (oi->grad.empty()) return;
      auto& ga = detail::grad_of(ai.get());
      for (std::size_t i = 0; i < ga.size(); ++i)
        ga[i] += oi->grad[i] * static_cast<T>(detail::gelu_bwd(static_cast<double>(ai->value[i])));
    });
  }
  return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const auto av = a.data();
  auto ov = out.data_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const double x = static_cast<double>(av[i]);
    ov[i] = static_cast<T>(x * detail::sigmoid_fwd(x));
  }
  if (detail::taping<T>({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [ai, oi] {
      if (oi->grad.empty()) return;
      auto& ga = detail::grad_of(ai.get());
      for (std::size_t i = 0; i < ga.size(); ++i) {
        const double x = static_cast<double>(ai->value[i]);
        const double s = detail::sigmoid_fwd(x);
        ga[i] += oi->grad[i] * static_cast<T>(s * (1.0 + x * (1.0 - s)));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const auto av = a.data();
  auto ov = out.data_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = static_cast<T>(detail::sigmoid_fwd(static_cast<double>(av[i])));
  if (detail::taping<T>({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [ai, oi] {
      if (oi->grad.empty()) return;
      auto& ga = detail::grad_of(ai.get());
      for (std::size_t i = 0; i < ga.size(); ++i) {
        const T s = oi->value[i];
        ga[i] += oi->grad[i] * s * (T{1} - s);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] * B[k,n], accumulating over p ascending for every element.
template <typename T>
void matmul_accumulate(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  threading::parallel_for(m, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      T* crow = c + i * n;
      for (std::int64_t p = 0; p < k; ++p) {
        const T aip = a[i * k + p];
        const T* brow = b + p * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  });
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul: expects rank-2 operands, got " + a.shape().str() + " and " + b.shape().str());
  detail::require(a.dim(1) == b.dim(0), "matmul: inner dims disagree: " + a.shape().str() + " x " + b.shape().str());
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out(Shape{m, n});
  detail::matmul_accumulate(a.data().data(), b.data().data(), out.data_mut().data(), m, k, n);
  if (detail::taping<T>({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [ai, bi, oi, m, k, n] {
      if (oi->grad.empty()) return;
      const T* dy = oi->grad.data();
      if (ai->requires_grad) {  // dA = dY * B^T
        auto& ga = detail::grad_of(ai.get());
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t p = 0; p < k; ++p) {
            T acc{0};
            for (std::int64_t j = 0; j < n; ++j) acc += dy[i * n + j] * bi->value[static_cast<std::size_t>(p * n + j)];
            ga[static_cast<std::size_t>(i * k + p)] += acc;
          }
      }
      if (bi->requires_grad) {  // dB = A^T * dY
        auto& gb = detail::grad_of(bi.get());
        for (std::int64_t p = 0; p < k; ++p)
          for (std::int64_t j = 0; j < n; ++j) {
            T acc{0};
            for (std::int64_t i = 0; i < m; ++i) acc += ai->value[static_cast<std::size_t>(i * k + p)] * dy[i * n + j];
            gb[static_cast<std::size_t>(p * n + j)] += acc;
          }
      }
    });
  }
  return out;
}

// y = x * W^T + b with x:[R,In], W:[Out,In], b:[Out] (undefined bias = none).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  detail::require(x.rank() == 2 && w.rank() == 2, "linear: expects rank-2 input and weight");
  detail::require(x.dim(1) == w.dim(1), "linear: input features " + x.shape().str() + " vs weight " + w.shape().str());
  const std::int64_t rows = x.dim(0), in = x.dim(1), outf = w.dim(0);
  if (b.defined()) detail::require(b.rank() == 1 && b.dim(0) == outf, "linear: bias shape " + b.shape().str() + " vs out features " + std::to_string(outf));
  Tensor<T> out(Shape{rows, outf});
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  T* ov = out.data_mut().data();
  threading::parallel_for(rows, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t r = lo; r < hi; ++r)
      for (std::int64_t o = 0; o < outf; ++o) {
        T acc = b.defined() ? b.data()[static_cast<std::size_t>(o)] : T{0};
        const T* xrow = xv + r * in;
        const T* wrow = wv + o * in;
        for (std::int64_t i = 0; i < in; ++i) acc += xrow[i] * wrow[i];
        ov[r * outf + o] = acc;
      }
  });
  if (detail::taping<T>({&x, &w, &b})) {
    auto xi = x.impl_ptr(), wi = w.impl_ptr(), oi = out.impl_ptr();
    auto bimpl = b.defined() ? b.impl_ptr() : nullptr;
    Tape<T>::current()->record(out.impl(), [xi, wi, bimpl, oi, rows, in, outf] {
      if (oi->grad.empty()) return;
      const T* dy = oi->grad.data();
      if (xi->requires_grad) {  // dx = dy * W
        auto& gx = detail::grad_of(xi.get());
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t o = 0; o < outf; ++o) {
            const T g = dy[r * outf + o];
            const T* wrow = wi->value.data() + o * in;
            T* gxrow = gx.data() + r * in;
            for (std::int64_t i = 0; i < in; ++i) gxrow[i] += g * wrow[i];
          }
      }
      if (wi->requires_grad) {  // dW[o,i] = sum_r dy[r,o] x[r,i]
        auto& gw = detail::grad_of(wi.get());
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t o = 0; o < outf; ++o) {
            const T g = dy[r * outf + o];
            const T* xrow = xi->value.data() + r * in;
            T* gwrow = gw.data() + o * in;
            for (std::int64_t i = 0; i < in; ++i) gwrow[i] += g * xrow[i];
          }
      }
      if (bimpl && bimpl->requires_grad) {
        auto& gb = detail::grad_of(bimpl.get());
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t o = 0; o < outf; ++o) gb[static_cast<std::size_t>(o)] += dy[r * outf + o];
      }
    });
  }
  return out;
}

// Batched A[B,m,k] * B[B,k,n].
template <typename T>
Tensor<T> bmm_nn(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
                  "bmm_nn: incompatible shapes " + a.shape().str() + " x " + b.shape().str());
  const std::int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<T> out(Shape{batch, m, n});
  const T* av = a.data().data();
  const T* bv = b.data().data();
  T* ov = out.data_mut().data();
  threading::parallel_for(batch, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t t = lo; t < hi; ++t)
      detail::matmul_accumulate(av + t * m * k, bv + t * k * n, ov + t * m * n, m, k, n);
  });
  if (detail::taping<T>({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [ai, bi, oi, batch, m, k, n] {
      if (oi->grad.empty()) return;
      for (std::int64_t t = 0; t < batch; ++t) {
        const T* dy = oi->grad.data() + t * m * n;
        if (ai->requires_grad) {
          T* ga = detail::grad_of(ai.get()).data() + t * m * k;
          const T* bv = bi->value.data() + t * k * n;
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t p = 0; p < k; ++p) {
              T acc{0};
              for (std::int64_t j = 0; j < n; ++j) acc += dy[i * n + j] * bv[p * n + j];
              ga[i * k + p] += acc;
            }
        }
        if (bi->requires_grad) {
          T* gb = detail::grad_of(bi.get()).data() + t * k * n;
          const T* av = ai->value.data() + t * m * k;
          for (std::int64_t p = 0; p < k; ++p)
            for (std::int64_t j = 0; j < n; ++j) {
              T acc{0};
              for (std::int64_t i = 0; i < m; ++i) acc += av[i * k + p] * dy[i * n + j];
              gb[p * n + j] += acc;
            }
        }
      }
    });
  }
  return out;
}

// Batched A[B,m,k] * B[B,n,k]^T; both operands are read along contiguous rows.
template <typename T>
Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
                  "bmm_nt: incompatible shapes " + a.shape().str() + " x " + b.shape().str());
  const std::int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  Tensor<T> out(Shape{batch, m, n});
  const T* av = a.data().data();
  const T* bv = b.data().data();
  T* ov = out.data_mut().data();
  threading::parallel_for(batch, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t t = lo; t < hi; ++t)
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
          const T* arow = av + (t * m + i) * k;
          const T* brow = bv + (t * n + j) * k;
          T acc{0};
          for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
          ov[(t * m + i) * n + j] = acc;
        }
  });
  if (detail::taping<T>({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [ai, bi, oi, batch, m, k, n] {
      if (oi->grad.empty()) return;
      for (std::int64_t t = 0; t < batch; ++t) {
        const T* dy = oi->grad.data() + t * m * n;
        if (ai->requires_grad) {  // da[i,p] = sum_j dy[i,j] b[j,p]
          T* ga = detail::grad_of(ai.get()).data() + t * m * k;
          const T* bv = bi->value.data() + t * n * k;
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) {
              const T g = dy[i * n + j];
              const T* brow = bv + j * k;
              T* garow = ga + i * k;
              for (std::int64_t p = 0; p < k; ++p) garow[p] += g * brow[p];
            }
        }
        if (bi->requires_grad) {  // db[j,p] = sum_i dy[i,j] a[i,p]
          T* gb = detail::grad_of(bi.get()).data() + t * n * k;
          const T* av = ai->value.data() + t * m * k;
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) {
              const T g = dy[i * n + j];
              const T* arow = av + i * k;
              T* gbrow = gb + j * k;
              for (std::int64_t p = 0; p < k; ++p) gbrow[p] += g * arow[p];
            }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  detail::require(shape.numel() == a.numel(), "reshape: cannot view " + a.shape().str() + " as " + shape.str());
  Tensor<T> out(shape, std::vector<T>(a.data().begin(), a.data().end()));
  if (detail::taping<T>({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [ai, oi] {
      if (oi->grad.empty()) return;
      detail::accumulate(ai.get(), std::span<const T>(oi->grad));
    });
  }
  return out;
}

namespace detail {

inline std::array<std::int64_t, 4> row_major_strides(const Shape& s) {
  std::array<std::int64_t, 4> st{};
  std::int64_t acc = 1;
  for (int i = s.rank() - 1; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = acc;
    acc *= s.dim(i);
  }
  return st;
}

}  // namespace detail

// out dim i = input dim perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
  const int r = a.rank();
  detail::require(static_cast<int>(perm.size()) == r, "permute: perm size must match rank " + std::to_string(r));
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  std::vector<std::int64_t> odims(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int p = perm[static_cast<std::size_t>(i)];
    detail::require(p >= 0 && p < r && !seen[static_cast<std::size_t>(p)], "permute: invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
    odims[static_cast<std::size_t>(i)] = a.dim(p);
  }
  const Shape oshape{odims};
  const auto istr = detail::row_major_strides(a.shape());
  Tensor<T> out(oshape);
  // pad to a fixed 4-deep loop nest (leading unit axes); src stride per
  // output axis, sequential writes, no divisions
  std::array<std::int64_t, 4> d{1, 1, 1, 1}, s{0, 0, 0, 0};
  for (int i = 0; i < r; ++i) {
    d[static_cast<std::size_t>(4 - r + i)] = oshape.dim(i);
    s[static_cast<std::size_t>(4 - r + i)] = istr[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  const auto gather = [d, s](const T* src_data, auto&& emit) {
    std::int64_t dst = 0;
    for (std::int64_t i0 = 0; i0 < d[0]; ++i0)
      for (std::int64_t i1 = 0; i1 < d[1]; ++i1)
        for (std::int64_t i2 = 0; i2 < d[2]; ++i2) {
          std::int64_t src = i0 * s[0] + i1 * s[1] + i2 * s[2];
          for (std::int64_t i3 = 0; i3 < d[3]; ++i3, src += s[3]) emit(dst++, src_data[src]);
        }
  };
  T* ov = out.data_mut().data();
  gather(a.data().data(), [ov](std::int64_t dst, T v) { ov[dst] = v; });
  if (detail::taping<T>({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [ai, oi, d, s] {
      if (oi->grad.empty()) return;
      T* ga = detail::grad_of(ai.get()).data();
      const T* gy = oi->grad.data();
      std::int64_t dst = 0;
      for (std::int64_t i0 = 0; i0 < d[0]; ++i0)
        for (std::int64_t i1 = 0; i1 < d[1]; ++i1)
          for (std::int64_t i2 = 0; i2 < d[2]; ++i2) {
            std::int64_t src = i0 * s[0] + i1 * s[1] + i2 * s[2];
            for (std::int64_t i3 = 0; i3 < d[3]; ++i3, src += s[3]) ga[src] += gy[dst++];
          }
    });
  }
  return out;
}

// Contiguous slice [start, start+len) along one axis.
template <typename T>
Tensor<T> slice_dim(const Tensor<T>& a, int dim, std::int64_t start, std::int64_t len) {
  const int r = a.rank();
  detail::require(dim >= 0 && dim < r, "slice_dim: axis out of range");
  detail::require(start >= 0 && len >= 1 && start + len <= a.dim(dim),
                  "slice_dim: range [" + std::to_string(start) + ", " + std::to_string(start + len) + ") exceeds dim " + std::to_string(a.dim(dim)));
  std::vector<std::int64_t> odims;
  for (int i = 0; i < r; ++i) odims.push_back(i == dim ? len : a.dim(i));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= a.dim(i);
  for (int i = dim + 1; i < r; ++i) inner *= a.dim(i);
  const std::int64_t d = a.dim(dim);
  Tensor<T> out(Shape{odims});
  const auto av = a.data();
  auto ov = out.data_mut();
  for (std::int64_t u = 0; u < outer; ++u)
    for (std::int64_t s = 0; s < len; ++s) {
      const T* src = av.data() + (u * d + start + s) * inner;
      T* dst = ov.data() + (u * len + s) * inner;
      std::copy(src, src + inner, dst);
    }
  if (detail::taping<T>({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [ai, oi, outer, inner, d, start, len] {
      if (oi->grad.empty()) return;
      auto& ga = detail::grad_of(ai.get());
      for (std::int64_t u = 0; u < outer; ++u)
        for (std::int64_t s = 0; s < len; ++s) {
          const T* src = oi->grad.data() + (u * len + s) * inner;
          T* dst = ga.data() + (u * d + start + s) * inner;
          for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax and normalization
// ---------------------------------------------------------------------------

// Numerically stable softmax over the last axis.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  const std::int64_t c = a.dim(a.rank() - 1);
  detail::require(c >= 1, "softmax_lastdim: empty last dim");
  const std::int64_t rows = a.numel() / c;
  Tensor<T> out(a.shape());
  const auto av = a.data();
  auto ov = out.data_mut();
  for (std::int64_t rI = 0; rI < rows; ++rI) {
    const T* x = av.data() + rI * c;
    T* y = ov.data() + rI * c;
    T mx = x[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    T denom{0};
    for (std::int64_t j = 0; j < c; ++j) {
      y[j] = static_cast<T>(std::exp(static_cast<double>(x[j] - mx)));
      denom += y[j];
    }
    for (std::int64_t j = 0; j < c; ++j) y[j] /= denom;
  }
  if (detail::taping<T>({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [ai, oi, rows, c] {
      if (oi->grad.empty()) return;
      auto& ga = detail::grad_of(ai.get());
      for (std::int64_t rI = 0; rI < rows; ++rI) {
        const T* p = oi->value.data() + rI * c;
        const T* dy = oi->grad.data() + rI * c;
        T dot{0};
        for (std::int64_t j = 0; j < c; ++j) dot += p[j] * dy[j];
        T* g = ga.data() + rI * c;
        for (std::int64_t j = 0; j < c; ++j) g[j] += p[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;

  static LayerNormParams make(std::int64_t channels) {
    return {Tensor<T>::full(Shape{channels}, T{1}), Tensor<T>::zeros(Shape{channels})};
  }
};

constexpr double kLayerNormEps = 1e-5;

namespace detail {

// Shared layer-norm kernel over `positions` groups of `c` elements gathered
// at stride `stride` from base offsets given by `base(pos)`.
template <typename T, class BaseFn>
Tensor<T> layer_norm_impl(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps,
                          std::int64_t positions, std::int64_t c, std::int64_t stride, BaseFn base, const char* opname) {
  require(gamma.rank() == 1 && gamma.dim(0) == c, std::string(opname) + ": gamma shape " + gamma.shape().str() + " vs channels " + std::to_string(c));
  require(beta.rank() == 1 && beta.dim(0) == c, std::string(opname) + ": beta shape " + beta.shape().str() + " vs channels " + std::to_string(c));
  require(eps > 0.0, std::string(opname) + ": eps must be positive");
  Tensor<T> out(x.shape());
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  auto ov = out.data_mut();
  // mu and inv-std per position, saved for backward
  auto stats = std::make_shared<std::vector<T>>(static_cast<std::size_t>(positions) * 2);
  for (std::int64_t pos = 0; pos < positions; ++pos) {
    const std::int64_t b0 = base(pos);
    T mean{0};
    for (std::int64_t j = 0; j < c; ++j) mean += xv[static_cast<std::size_t>(b0 + j * stride)];
    mean /= static_cast<T>(c);
    T var{0};
    for (std::int64_t j = 0; j < c; ++j) {
      const T d = xv[static_cast<std::size_t>(b0 + j * stride)] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + eps));
    (*stats)[static_cast<std::size_t>(pos) * 2] = mean;
    (*stats)[static_cast<std::size_t>(pos) * 2 + 1] = inv;
    for (std::int64_t j = 0; j < c; ++j) {
      const T xhat = (xv[static_cast<std::size_t>(b0 + j * stride)] - mean) * inv;
      ov[static_cast<std::size_t>(b0 + j * stride)] = gv[static_cast<std::size_t>(j)] * xhat + bv[static_cast<std::size_t>(j)];
    }
  }
  if (taping<T>({&x, &gamma, &beta})) {
    auto xi = x.impl_ptr();
    auto gi = gamma.impl_ptr();
    auto bi = beta.impl_ptr();
    auto oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [xi, gi, bi, oi, stats, positions, c, stride, base] {
      if (oi->grad.empty()) return;
      std::vector<T>* gx = xi->requires_grad ? &grad_of(xi.get()) : nullptr;
      std::vector<T>* gg = gi->requires_grad ? &grad_of(gi.get()) : nullptr;
      std::vector<T>* gb = bi->requires_grad ? &grad_of(bi.get()) : nullptr;
      for (std::int64_t pos = 0; pos < positions; ++pos) {
        const std::int64_t b0 = base(pos);
        const T mean = (*stats)[static_cast<std::size_t>(pos) * 2];
        const T inv = (*stats)[static_cast<std::size_t>(pos) * 2 + 1];
        T m1{0}, m2{0};
        for (std::int64_t j = 0; j < c; ++j) {
          const std::size_t idx = static_cast<std::size_t>(b0 + j * stride);
          const T xhat = (xi->value[idx] - mean) * inv;
          const T dy = oi->grad[idx];
          if (gg) (*gg)[static_cast<std::size_t>(j)] += dy * xhat;
          if (gb) (*gb)[static_cast<std::size_t>(j)] += dy;
          const T dxhat = dy * gi->value[static_cast<std::size_t>(j)];
          m1 += dxhat;
          m2 += dxhat * xhat;
        }
        if (!gx) continue;
        m1 /= static_cast<T>(c);
        m2 /= static_cast<T>(c);
        for (std::int64_t j = 0; j < c; ++j) {
          const std::size_t idx = static_cast<std::size_t>(b0 + j * stride);
          const T xhat = (xi->value[idx] - mean) * inv;
          const T dxhat = oi->grad[idx] * gi->value[static_cast<std::size_t>(j)];
          (*gx)[idx] += inv * (dxhat - m1 - xhat * m2);
        }
      }
    });
  }
  return out;
}

}  // namespace detail

// Normalizes over the last (channel) axis of a (..., C) tensor.
template <typename T>
Tensor<T> layer_norm_lastdim(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = kLayerNormEps) {
  const std::int64_t c = x.dim(x.rank() - 1);
  const std::int64_t positions = x.numel() / c;
  return detail::layer_norm_impl(x, gamma, beta, eps, positions, c, 1,
                                 [c](std::int64_t pos) { return pos * c; }, "layer_norm_lastdim");
}

// Normalizes over the channel axis of an NCHW map, independently per (n,h,w).
template <typename T>
Tensor<T> layer_norm_nchw(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = kLayerNormEps) {
  detail::require(x.rank() == 4, "layer_norm_nchw: expects NCHW, got " + x.shape().str());
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::int64_t positions = n * hw;
  return detail::layer_norm_impl(x, gamma, beta, eps, positions, c, hw,
                                 [c, hw](std::int64_t pos) {
                                   const std::int64_t item = pos / hw, px = pos % hw;
                                   return item * c * hw + px;
                                 },
                                 "layer_norm_nchw");
}

template <typename T>
Tensor<T> layer_norm_lastdim(const Tensor<T>& x, const LayerNormParams<T>& p, double eps = kLayerNormEps) {
  return layer_norm_lastdim(x, p.gamma, p.beta, eps);
}

template <typename T>
Tensor<T> layer_norm_nchw(const Tensor<T>& x, const LayerNormParams<T>& p, double eps = kLayerNormEps) {
  return layer_norm_nchw(x, p.gamma, p.beta, eps);
}

// ---------------------------------------------------------------------------
// Convolutions (NCHW, zero padding)
// ---------------------------------------------------------------------------

namespace detail {

inline void check_stride(int stride, const char* opname) {
  if (stride != 1 && stride != 2) throw ConfigError(std::string(opname) + ": stride must be 1 or 2, got " + std::to_string(stride));
}

}  // namespace detail

// Per-pixel channel map: out[n,o,i,j] = sum_c w[o,c] x[n,c,i*s,j*s] + b[o].
template <typename T>
Tensor<T> pointwise_conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}, int stride = 1) {
  detail::check_stride(stride, "pointwise_conv");
  detail::require(x.rank() == 4, "pointwise_conv: expects NCHW input, got " + x.shape().str());
  detail::require(w.rank() == 2 && w.dim(1) == x.dim(1),
                  "pointwise_conv: weight " + w.shape().str() + " vs input channels " + std::to_string(x.dim(1)));
  const std::int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(0);
  if (b.defined()) detail::require(b.rank() == 1 && b.dim(0) == co, "pointwise_conv: bias shape " + b.shape().str());
  const std::int64_t ho = (h + stride - 1) / stride, wo = (wd + stride - 1) / stride;
  Tensor<T> out(Shape{n, co, ho, wo});
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  T* ov = out.data_mut().data();
  threading::parallel_for(n * co, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t t = lo; t < hi; ++t) {
      const std::int64_t item = t / co, o = t % co;
      T* plane = ov + t * ho * wo;
      const T bias = b.defined() ? b.data()[static_cast<std::size_t>(o)] : T{0};
      std::fill(plane, plane + ho * wo, bias);
      for (std::int64_t c = 0; c < ci; ++c) {
        const T wc = wv[o * ci + c];
        const T* src = xv + (item * ci + c) * h * wd;
        for (std::int64_t i = 0; i < ho; ++i)
          for (std::int64_t j = 0; j < wo; ++j) plane[i * wo + j] += wc * src[(i * stride) * wd + (j * stride)];
      }
    }
  });
  if (detail::taping<T>({&x, &w, &b})) {
    auto xi = x.impl_ptr(), wi = w.impl_ptr(), oi = out.impl_ptr();
    auto bimpl = b.defined() ? b.impl_ptr() : nullptr;
    Tape<T>::current()->record(out.impl(), [xi, wi, bimpl, oi, n, ci, h, wd, co, ho, wo, stride] {
      if (oi->grad.empty()) return;
      const T* dy = oi->grad.data();
      if (xi->requires_grad) {
        auto& gx = detail::grad_of(xi.get());
        for (std::int64_t item = 0; item < n; ++item)
          for (std::int64_t c = 0; c < ci; ++c) {
            T* gplane = gx.data() + (item * ci + c) * h * wd;
            for (std::int64_t o = 0; o < co; ++o) {
              const T wc = wi->value[static_cast<std::size_t>(o * ci + c)];
              const T* dplane = dy + (item * co + o) * ho * wo;
              for (std::int64_t i = 0; i < ho; ++i)
                for (std::int64_t j = 0; j < wo; ++j) gplane[(i * stride) * wd + (j * stride)] += wc * dplane[i * wo + j];
            }
          }
      }
      if (wi->requires_grad) {
        auto& gw = detail::grad_of(wi.get());
        for (std::int64_t o = 0; o < co; ++o)
          for (std::int64_t c = 0; c < ci; ++c) {
            T acc{0};
            for (std::int64_t item = 0; item < n; ++item) {
              const T* dplane = dy + (item * co + o) * ho * wo;
              const T* xplane = xi->value.data() + (item * ci + c) * h * wd;
              for (std::int64_t i = 0; i < ho; ++i)
                for (std::int64_t j = 0; j < wo; ++j) acc += dplane[i * wo + j] * xplane[(i * stride) * wd + (j * stride)];
            }
            gw[static_cast<std::size_t>(o * ci + c)] += acc;
          }
      }
      if (bimpl && bimpl->requires_grad) {
        auto& gb = detail::grad_of(bimpl.get());
        for (std::int64_t item = 0; item < n; ++item)
          for (std::int64_t o = 0; o < co; ++o) {
            const T* dplane = dy + (item * co + o) * ho * wo;
            T acc{0};
            for (std::int64_t i = 0; i < ho * wo; ++i) acc += dplane[i];
            gb[static_cast<std::size_t>(o)] += acc;
          }
      }
    });
  }
  return out;
}

// Dense 3x3 convolution, zero padding 1 (the stem convolution).
template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}, int stride = 1) {
  detail::check_stride(stride, "conv3x3");
  detail::require(x.rank() == 4, "conv3x3: expects NCHW input, got " + x.shape().str());
  detail::require(w.rank() == 4 && w.dim(1) == x.dim(1) && w.dim(2) == 3 && w.dim(3) == 3,
                  "conv3x3: weight " + w.shape().str() + " vs input " + x.shape().str());
  const std::int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(0);
  if (b.defined()) detail::require(b.rank() == 1 && b.dim(0) == co, "conv3x3: bias shape " + b.shape().str());
  const std::int64_t ho = (h - 1) / stride + 1, wo = (wd - 1) / stride + 1;
  Tensor<T> out(Shape{n, co, ho, wo});
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  T* ov = out.data_mut().data();
  const auto bounds = [stride](std::int64_t off, std::int64_t extent, std::int64_t limit) {
    const std::int64_t lo = off < 0 ? (-off + stride - 1) / stride : 0;
    const std::int64_t hi = std::min(limit - 1, extent - 1 - off < 0 ? std::int64_t{-1} : (extent - 1 - off) / stride);
    return std::pair<std::int64_t, std::int64_t>(lo, hi);
  };
  threading::parallel_for(n * co, [&](std::int64_t lo_t, std::int64_t hi_t) {
    for (std::int64_t t = lo_t; t < hi_t; ++t) {
      const std::int64_t item = t / co, o = t % co;
      T* plane = ov + t * ho * wo;
      const T bias = b.defined() ? b.data()[static_cast<std::size_t>(o)] : T{0};
      std::fill(plane, plane + ho * wo, bias);
      for (std::int64_t c = 0; c < ci; ++c) {
        const T* src = xv + (item * ci + c) * h * wd;
        for (int u = 0; u < 3; ++u)
          for (int v = 0; v < 3; ++v) {
            const T wk = wv[((o * ci + c) * 3 + u) * 3 + v];
            const std::int64_t du = u - 1, dv = v - 1;
            const auto [ilo, ihi] = bounds(du, h, ho);
            const auto [jlo, jhi] = bounds(dv, wd, wo);
            for (std::int64_t i = ilo; i <= ihi; ++i)
              for (std::int64_t j = jlo; j <= jhi; ++j)
                plane[i * wo + j] += wk * src[(i * stride + du) * wd + (j * stride + dv)];
          }
      }
    }
  });
  if (detail::taping<T>({&x, &w, &b})) {
    auto xi = x.impl_ptr(), wi = w.impl_ptr(), oi = out.impl_ptr();
    auto bimpl = b.defined() ? b.impl_ptr() : nullptr;
    Tape<T>::current()->record(out.impl(), [xi, wi, bimpl, oi, n, ci, h, wd, co, ho, wo, stride, bounds] {
      if (oi->grad.empty()) return;
      const T* dy = oi->grad.data();
      if (xi->requires_grad) {
        auto& gx = detail::grad_of(xi.get());
        for (std::int64_t item = 0; item < n; ++item)
          for (std::int64_t c = 0; c < ci; ++c) {
            T* gplane = gx.data() + (item * ci + c) * h * wd;
            for (std::int64_t o = 0; o < co; ++o) {
              const T* dplane = dy + (item * co + o) * ho * wo;
              for (int u = 0; u < 3; ++u)
                for (int v = 0; v < 3; ++v) {
                  const T wk = wi->value[static_cast<std::size_t>(((o * ci + c) * 3 + u) * 3 + v)];
                  const std::int64_t du = u - 1, dv = v - 1;
                  const auto [ilo, ihi] = bounds(du, h, ho);
                  const auto [jlo, jhi] = bounds(dv, wd, wo);
                  for (std::int64_t i = ilo; i <= ihi; ++i)
                    for (std::int64_t j = jlo; j <= jhi; ++j)
                      gplane[(i * stride + du) * wd + (j * stride + dv)] += wk * dplane[i * wo + j];
                }
            }
          }
      }
      if (wi->requires_grad) {
        auto& gw = detail::grad_of(wi.get());
        for (std::int64_t o = 0; o < co; ++o)
          for (std::int64_t c = 0; c < ci; ++c)
            for (int u = 0; u < 3; ++u)
              for (int v = 0; v < 3; ++v) {
                const std::int64_t du = u - 1, dv = v - 1;
                const auto [ilo, ihi] = bounds(du, h, ho);
                const auto [jlo, jhi] = bounds(dv, wd, wo);
                T acc{0};
                for (std::int64_t item = 0; item < n; ++item) {
                  const T* dplane = dy + (item * co + o) * ho * wo;
                  const T* xplane = xi->value.data() + (item * ci + c) * h * wd;
                  for (std::int64_t i = ilo; i <= ihi; ++i)
                    for (std::int64_t j = jlo; j <= jhi; ++j)
                      acc += dplane[i * wo + j] * xplane[(i * stride + du) * wd + (j * stride + dv)];
                }
                gw[static_cast<std::size_t>(((o * ci + c) * 3 + u) * 3 + v)] += acc;
              }
      }
      if (bimpl && bimpl->requires_grad) {
        auto& gb = detail::grad_of(bimpl.get());
        for (std::int64_t item = 0; item < n; ++item)
          for (std::int64_t o = 0; o < co; ++o) {
            const T* dplane = dy + (item * co + o) * ho * wo;
            T acc{0};
            for (std::int64_t i = 0; i < ho * wo; ++i) acc += dplane[i];
            gb[static_cast<std::size_t>(o)] += acc;
          }
      }
    });
  }
  return out;
}

// Per-channel 3x3 correlation, taps spaced `dilation` pixels apart, zero
// padding of size `dilation` (stride 1 preserves H,W; stride 2 gives
// ceil(H/2)).
template <typename T>
Tensor<T> depthwise_conv3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}, int dilation = 1, int stride = 1) {
  if (dilation < 1) throw ConfigError("depthwise_conv3x3: dilation must be >= 1, got " + std::to_string(dilation));
  detail::check_stride(stride, "depthwise_conv3x3");
  detail::require(x.rank() == 4, "depthwise_conv3x3: expects NCHW input, got " + x.shape().str());
  detail::require(w.rank() == 3 && w.dim(0) == x.dim(1) && w.dim(1) == 3 && w.dim(2) == 3,
                  "depthwise_conv3x3: weight " + w.shape().str() + " vs input channels " + std::to_string(x.dim(1)));
  const std::int64_t n = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (b.defined()) detail::require(b.rank() == 1 && b.dim(0) == ch, "depthwise_conv3x3: bias shape " + b.shape().str());
  const std::int64_t ho = (h - 1) / stride + 1, wo = (wd - 1) / stride + 1;
  Tensor<T> out(Shape{n, ch, ho, wo});
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  T* ov = out.data_mut().data();
  const auto bounds = [stride](std::int64_t off, std::int64_t extent, std::int64_t limit) {
    const std::int64_t lo = off < 0 ? (-off + stride - 1) / stride : 0;
    const std::int64_t hi = std::min(limit - 1, extent - 1 - off < 0 ? std::int64_t{-1} : (extent - 1 - off) / stride);
    return std::pair<std::int64_t, std::int64_t>(lo, hi);
  };
  threading::parallel_for(n * ch, [&](std::int64_t lo_t, std::int64_t hi_t) {
    for (std::int64_t t = lo_t; t < hi_t; ++t) {
      const std::int64_t c = t % ch;
      T* plane = ov + t * ho * wo;
      const T* src = xv + t * h * wd;
      const T bias = b.defined() ? b.data()[static_cast<std::size_t>(c)] : T{0};
      std::fill(plane, plane + ho * wo, bias);
      for (int u = 0; u < 3; ++u)
        for (int v = 0; v < 3; ++v) {
          const T wk = wv[(c * 3 + u) * 3 + v];
          const std::int64_t du = static_cast<std::int64_t>(u - 1) * dilation;
          const std::int64_t dv = static_cast<std::int64_t>(v - 1) * dilation;
          const auto [ilo, ihi] = bounds(du, h, ho);
          const auto [jlo, jhi] = bounds(dv, wd, wo);
          for (std::int64_t i = ilo; i <= ihi; ++i)
            for (std::int64_t j = jlo; j <= jhi; ++j)
              plane[i * wo + j] += wk * src[(i * stride + du) * wd + (j * stride + dv)];
        }
    }
  });
  if (detail::taping<T>({&x, &w, &b})) {
    auto xi = x.impl_ptr(), wi = w.impl_ptr(), oi = out.impl_ptr();
    auto bimpl = b.defined() ? b.impl_ptr() : nullptr;
    Tape<T>::current()->record(out.impl(), [xi, wi, bimpl, oi, n, ch, h, wd, ho, wo, dilation, stride, bounds] {
      if (oi->grad.empty()) return;
      const T* dy = oi->grad.data();
      for (std::int64_t t = 0; t < n * ch; ++t) {
        const std::int64_t c = t % ch;
        const T* dplane = dy + t * ho * wo;
        for (int u = 0; u < 3; ++u)
          for (int v = 0; v < 3; ++v) {
            const std::int64_t du = static_cast<std::int64_t>(u - 1) * dilation;
            const std::int64_t dv = static_cast<std::int64_t>(v - 1) * dilation;
            const auto [ilo, ihi] = bounds(du, h, ho);
            const auto [jlo, jhi] = bounds(dv, wd, wo);
            if (xi->requires_grad) {
              auto& gx = detail::grad_of(xi.get());
              T* gplane = gx.data() + t * h * wd;
              const T wk = wi->value[static_cast<std::size_t>((c * 3 + u) * 3 + v)];
              for (std::int64_t i = ilo; i <= ihi; ++i)
                for (std::int64_t j = jlo; j <= jhi; ++j)
                  gplane[(i * stride + du) * wd + (j * stride + dv)] += wk * dplane[i * wo + j];
            }
            if (wi->requires_grad) {
              auto& gw = detail::grad_of(wi.get());
              const T* xplane = xi->value.data() + t * h * wd;
              T acc{0};
              for (std::int64_t i = ilo; i <= ihi; ++i)
                for (std::int64_t j = jlo; j <= jhi; ++j)
                  acc += dplane[i * wo + j] * xplane[(i * stride + du) * wd + (j * stride + dv)];
              gw[static_cast<std::size_t>((c * 3 + u) * 3 + v)] += acc;
            }
          }
        if (bimpl && bimpl->requires_grad) {
          auto& gb = detail::grad_of(bimpl.get());
          T acc{0};
          for (std::int64_t i = 0; i < ho * wo; ++i) acc += dplane[i];
          gb[static_cast<std::size_t>(c)] += acc;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require(x.rank() == 4, "global_avg_pool: expects NCHW input, got " + x.shape().str());
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{n, c});
  const auto xv = x.data();
  auto ov = out.data_mut();
  for (std::int64_t t = 0; t < n * c; ++t) {
    T acc{0};
    const T* plane = xv.data() + t * hw;
    for (std::int64_t i = 0; i < hw; ++i) acc += plane[i];
    ov[static_cast<std::size_t>(t)] = acc / static_cast<T>(hw);
  }
  if (detail::taping<T>({&x})) {
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [xi, oi, n, c, hw] {
      if (oi->grad.empty()) return;
      auto& gx = detail::grad_of(xi.get());
      for (std::int64_t t = 0; t < n * c; ++t) {
        const T g = oi->grad[static_cast<std::size_t>(t)] / static_cast<T>(hw);
        T* plane = gx.data() + t * hw;
        for (std::int64_t i = 0; i < hw; ++i) plane[i] += g;
      }
    });
  }
  return out;
}

// Broadcast-multiplies an NCHW map by a per-(item, channel) scale.
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
  detail::require(x.rank() == 4, "scale_channels: expects NCHW input, got " + x.shape().str());
  detail::require(s.rank() == 2 && s.dim(0) == x.dim(0) && s.dim(1) == x.dim(1),
                  "scale_channels: scale " + s.shape().str() + " vs input " + x.shape().str());
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  const auto xv = x.data();
  const auto sv = s.data();
  auto ov = out.data_mut();
  for (std::int64_t t = 0; t < n * c; ++t) {
    const T sc = sv[static_cast<std::size_t>(t)];
    const T* src = xv.data() + t * hw;
    T* dst = ov.data() + t * hw;
    for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] * sc;
  }
  if (detail::taping<T>({&x, &s})) {
    auto xi = x.impl_ptr(), si = s.impl_ptr(), oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [xi, si, oi, n, c, hw] {
      if (oi->grad.empty()) return;
      const T* dy = oi->grad.data();
      if (xi->requires_grad) {
        auto& gx = detail::grad_of(xi.get());
        for (std::int64_t t = 0; t < n * c; ++t) {
          const T sc = si->value[static_cast<std::size_t>(t)];
          const T* d = dy + t * hw;
          T* g = gx.data() + t * hw;
          for (std::int64_t i = 0; i < hw; ++i) g[i] += d[i] * sc;
        }
      }
      if (si->requires_grad) {
        auto& gs = detail::grad_of(si.get());
        for (std::int64_t t = 0; t < n * c; ++t) {
          const T* d = dy + t * hw;
          const T* xvp = xi->value.data() + t * hw;
          T acc{0};
          for (std::int64_t i = 0; i < hw; ++i) acc += d[i] * xvp[i];
          gs[static_cast<std::size_t>(t)] += acc;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean softmax cross-entropy against label-smoothed one-hot targets:
// t_k = smoothing/K + (1-smoothing)[k == label]. Gradient is (p - t)/N.
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<int>& labels, double smoothing = 0.0) {
  detail::require(logits.rank() == 2, "cross_entropy_logits: expects (N, K) logits, got " + logits.shape().str());
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  detail::require(static_cast<std::int64_t>(labels.size()) == n, "cross_entropy_logits: label count mismatch");
  for (const int y : labels)
    if (y < 0 || y >= k) throw DimensionError("cross_entropy_logits: label " + std::to_string(y) + " out of range");
  const auto xv = logits.data();
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n * k));
  double total = 0.0;
  for (std::int64_t r = 0; r < n; ++r) {
    const T* row = xv.data() + r * k;
    T mx = row[0];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(denom);
    double dot = 0.0;
    for (std::int64_t j = 0; j < k; ++j) {
      const double t = smoothing / static_cast<double>(k) + (j == labels[static_cast<std::size_t>(r)] ? 1.0 - smoothing : 0.0);
      dot += t * static_cast<double>(row[j]);
      (*probs)[static_cast<std::size_t>(r * k + j)] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
    }
    total += lse - dot;
  }
  Tensor<T> out(Shape{1}, std::vector<T>{static_cast<T>(total / static_cast<double>(n))});
  if (detail::taping<T>({&logits})) {
    auto xi = logits.impl_ptr();
    auto oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [xi, oi, probs, labels, n, k, smoothing] {
      if (oi->grad.empty()) return;
      const T g = oi->grad[0];
      auto& gx = detail::grad_of(xi.get());
      for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t j = 0; j < k; ++j) {
          const double t = smoothing / static_cast<double>(k) + (j == labels[static_cast<std::size_t>(r)] ? 1.0 - smoothing : 0.0);
          gx[static_cast<std::size_t>(r * k + j)] +=
              g * static_cast<T>((static_cast<double>((*probs)[static_cast<std::size_t>(r * k + j)]) - t) / static_cast<double>(n));
        }
    });
  }
  return out;
}

}  // namespace accvit
