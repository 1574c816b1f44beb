#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "accvit/ops.hpp"
#include "accvit/tensor.hpp"

// Learnable input-conditioned gate over k parallel branches. Gate logits are
// computed per channel and per position from the input map, softmax-normalized
// across the k branches, and the branches are fused as the resulting convex
// combination: y_fused = sum_i g_i (.) y_i.

namespace accvit {

// Gates stored as (N, k*C, H, W) with branch-major channel grouping; slice
// i*C..(i+1)*C is branch i's per-channel gate map. Sum over branches is 1 at
// every (n, c, h, w).
template <typename T>
struct GateTensor {
  Tensor<T> g;
  int branch_count = 1;

  std::int64_t channels() const { return g.dim(1) / branch_count; }

  Tensor<T> branch(int i) const {
    const std::int64_t c = channels();
    return slice_dim(g, 1, i * c, c);
  }
};

// Softmax across the k branch groups of a (N, k*C, H, W) tensor, i.e. over
// the slices {x[n, i*C + c, h, w] : i in 0..k-1} at each (n, c, h, w).
template <typename T>
Tensor<T> group_softmax_channels(const Tensor<T>& x, int k) {
  detail::require(x.rank() == 4, "group_softmax_channels: expects NCHW input, got " + x.shape().str());
  detail::require(k >= 1 && x.dim(1) % k == 0,
                  "group_softmax_channels: channels " + std::to_string(x.dim(1)) + " not divisible by k=" + std::to_string(k));
  const std::int64_t n = x.dim(0), kc = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::int64_t c = kc / k;
  Tensor<T> out(x.shape());
  const auto xv = x.data();
  auto ov = out.data_mut();
  const std::int64_t group_stride = c * hw;
  for (std::int64_t item = 0; item < n; ++item)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t px = 0; px < hw; ++px) {
        const std::int64_t base = (item * kc + ch) * hw + px;
        T mx = xv[static_cast<std::size_t>(base)];
        for (int i = 1; i < k; ++i) mx = std::max(mx, xv[static_cast<std::size_t>(base + i * group_stride)]);
        T denom{0};
        for (int i = 0; i < k; ++i) {
          const T e = static_cast<T>(std::exp(static_cast<double>(xv[static_cast<std::size_t>(base + i * group_stride)] - mx)));
          ov[static_cast<std::size_t>(base + i * group_stride)] = e;
          denom += e;
        }
        for (int i = 0; i < k; ++i) ov[static_cast<std::size_t>(base + i * group_stride)] /= denom;
      }
  if (detail::taping<T>({&x})) {
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [xi, oi, n, kc, c, hw, k, group_stride] {
      if (oi->grad.empty()) return;
      auto& gx = detail::grad_of(xi.get());
      for (std::int64_t item = 0; item < n; ++item)
        for (std::int64_t ch = 0; ch < c; ++ch)
          for (std::int64_t px = 0; px < hw; ++px) {
            const std::int64_t base = (item * kc + ch) * hw + px;
            T dot{0};
            for (int i = 0; i < k; ++i) {
              const std::size_t idx = static_cast<std::size_t>(base + i * group_stride);
              dot += oi->value[idx] * oi->grad[idx];
            }
            for (int i = 0; i < k; ++i) {
              const std::size_t idx = static_cast<std::size_t>(base + i * group_stride);
              gx[idx] += oi->value[idx] * (oi->grad[idx] - dot);
            }
          }
    });
  }
  return out;
}

// Pointwise gate: a per-position linear channel map C -> k*C shared across
// positions (a 1x1 conv), GELU, then softmax across the k branch groups.
template <typename T>
struct GateParams {
  int branch_count = 1;
  Tensor<T> weight;  // (k*C, C)
  Tensor<T> bias;    // (k*C)

  static GateParams make(int branch_count, std::int64_t channels, Rng& rng) {
    GateParams p;
    p.branch_count = branch_count;
    // near-zero weights + zero bias start the gate at uniform fusion
    p.weight = Tensor<T>::trunc_normal(Shape{branch_count * channels, channels}, 0.02, rng);
    p.bias = Tensor<T>::zeros(Shape{branch_count * channels});
    return p;
  }

  std::int64_t channels() const { return weight.dim(1); }
};

// `stride` subsamples the gate's spatial grid (identical to computing the
// full-resolution gate, then taking every stride-th position).
template <typename T>
GateTensor<T> compute_gates(const Tensor<T>& x, const GateParams<T>& params, int stride = 1) {
  detail::require(x.rank() == 4, "compute_gates: expects NCHW input, got " + x.shape().str());
  detail::require(x.dim(1) == params.channels(),
                  "compute_gates: input channels " + std::to_string(x.dim(1)) + " vs gate channels " + std::to_string(params.channels()));
  auto logits = pointwise_conv(x, params.weight, params.bias, stride);
  logits = gelu(logits);
  return GateTensor<T>{group_softmax_channels(logits, params.branch_count), params.branch_count};
}

// Channel-wise gate: per-branch, per-channel affine logits from the input map
// (one scale and one shift per gated channel), softmax across branches. Same
// GateTensor contract as the pointwise gate at a tiny parameter/compute cost;
// used inside the conv block where the gated width is the expanded 4C map.
template <typename T>
struct ChannelGateParams {
  int branch_count = 1;
  Tensor<T> scale;  // (k*C)
  Tensor<T> shift;  // (k*C)

  static ChannelGateParams make(int branch_count, std::int64_t channels, Rng& rng) {
    ChannelGateParams p;
    p.branch_count = branch_count;
    p.scale = Tensor<T>::trunc_normal(Shape{branch_count * channels}, 0.02, rng);
    p.shift = Tensor<T>::zeros(Shape{branch_count * channels});
    return p;
  }

  std::int64_t channels() const { return scale.dim(0) / branch_count; }
};

namespace detail {

// out[n, i*C+c, h', w'] = scale[i*C+c] * x[n, c, h'*s, w'*s] + shift[i*C+c]
template <typename T>
Tensor<T> channel_affine_expand(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift, int k, int stride) {
  check_stride(stride, "channel_affine_expand");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(scale.rank() == 1 && scale.dim(0) == k * c && shift.shape() == scale.shape(),
          "channel_affine_expand: params " + scale.shape().str() + " vs channels " + std::to_string(c) + " x k=" + std::to_string(k));
  const std::int64_t ho = (h + stride - 1) / stride, wo = (w + stride - 1) / stride;
  Tensor<T> out(Shape{n, k * c, ho, wo});
  const auto xv = x.data();
  const auto av = scale.data();
  const auto bv = shift.data();
  auto ov = out.data_mut();
  for (std::int64_t item = 0; item < n; ++item)
    for (std::int64_t oc = 0; oc < k * c; ++oc) {
      const std::int64_t ch = oc % c;
      const T a = av[static_cast<std::size_t>(oc)];
      const T b = bv[static_cast<std::size_t>(oc)];
      const T* src = xv.data() + (item * c + ch) * h * w;
      T* dst = ov.data() + (item * k * c + oc) * ho * wo;
      for (std::int64_t i = 0; i < ho; ++i)
        for (std::int64_t j = 0; j < wo; ++j) dst[i * wo + j] = a * src[(i * stride) * w + (j * stride)] + b;
    }
  if (taping<T>({&x, &scale, &shift})) {
    auto xi = x.impl_ptr(), si = scale.impl_ptr(), hi = shift.impl_ptr(), oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [xi, si, hi, oi, n, c, h, w, ho, wo, k, stride] {
      if (oi->grad.empty()) return;
      const T* dy = oi->grad.data();
      for (std::int64_t item = 0; item < n; ++item)
        for (std::int64_t oc = 0; oc < k * c; ++oc) {
          const std::int64_t ch = oc % c;
          const T* d = dy + (item * k * c + oc) * ho * wo;
          const T* src = xi->value.data() + (item * c + ch) * h * w;
          if (xi->requires_grad) {
            auto& gx = grad_of(xi.get());
            T* g = gx.data() + (item * c + ch) * h * w;
            const T a = si->value[static_cast<std::size_t>(oc)];
            for (std::int64_t i = 0; i < ho; ++i)
              for (std::int64_t j = 0; j < wo; ++j) g[(i * stride) * w + (j * stride)] += a * d[i * wo + j];
          }
          if (si->requires_grad) {
            auto& gs = grad_of(si.get());
            T acc{0};
            for (std::int64_t i = 0; i < ho; ++i)
              for (std::int64_t j = 0; j < wo; ++j) acc += d[i * wo + j] * src[(i * stride) * w + (j * stride)];
            gs[static_cast<std::size_t>(oc)] += acc;
          }
          if (hi->requires_grad) {
            auto& gh = grad_of(hi.get());
            T acc{0};
            for (std::int64_t i = 0; i < ho * wo; ++i) acc += d[i];
            gh[static_cast<std::size_t>(oc)] += acc;
          }
        }
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
GateTensor<T> compute_gates_channelwise(const Tensor<T>& x, const ChannelGateParams<T>& params, int stride = 1) {
  detail::require(x.rank() == 4, "compute_gates_channelwise: expects NCHW input, got " + x.shape().str());
  detail::require(x.dim(1) == params.channels(),
                  "compute_gates_channelwise: input channels " + std::to_string(x.dim(1)) + " vs gate channels " + std::to_string(params.channels()));
  auto logits = detail::channel_affine_expand(x, params.scale, params.shift, params.branch_count, stride);
  logits = gelu(logits);
  return GateTensor<T>{group_softmax_channels(logits, params.branch_count), params.branch_count};
}

// Elementwise convex combination of branches under the gate; fixed ascending
// branch order.
template <typename T>
Tensor<T> fuse(std::span<const Tensor<T>> branches, const GateTensor<T>& gates) {
  detail::require(static_cast<int>(branches.size()) == gates.branch_count,
                  "fuse: " + std::to_string(branches.size()) + " branches vs gate k=" + std::to_string(gates.branch_count));
  const std::int64_t c = gates.channels();
  for (const auto& b : branches) {
    detail::require(b.shape() == branches[0].shape(), "fuse: branch shapes disagree");
    detail::require(b.rank() == 4 && b.dim(1) == c, "fuse: branch " + b.shape().str() + " vs gate channels " + std::to_string(c));
  }
  detail::require(branches[0].dim(0) == gates.g.dim(0) && branches[0].dim(2) == gates.g.dim(2) && branches[0].dim(3) == gates.g.dim(3),
                  "fuse: branch " + branches[0].shape().str() + " vs gate " + gates.g.shape().str());
  Tensor<T> acc = mul(gates.branch(0), branches[0]);
  for (int i = 1; i < gates.branch_count; ++i) acc = add(acc, mul(gates.branch(i), branches[static_cast<std::size_t>(i)]));
  return acc;
}

template <typename T>
Tensor<T> fuse(const std::vector<Tensor<T>>& branches, const GateTensor<T>& gates) {
  return fuse(std::span<const Tensor<T>>(branches.data(), branches.size()), gates);
}

}  // namespace accvit
