#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "accvit/gating.hpp"
#include "accvit/ops.hpp"
#include "accvit/partition.hpp"
#include "accvit/tensor.hpp"

// Windowed multi-head self-attention with a learned relative position bias,
// and the full atrous attention layer: one undilated branch plus one branch
// per dilation level, gate-fused, followed by a single shared MLP. All
// branches produce full-resolution maps before fusion.

namespace accvit {

// Learned additive logit bias indexed by the relative offset between query
// and key positions inside a PxP window:
//   bias[h, q, k] = table[(di + P - 1)*(2P - 1) + (dj + P - 1), h]
// with (di, dj) = pos(k) - pos(q).
template <typename T>
Tensor<T> rel_pos_bias(const Tensor<T>& table, int window) {
  const std::int64_t p = window, t = p * p, offsets = (2 * p - 1) * (2 * p - 1);
  detail::require(table.rank() == 2 && table.dim(0) == offsets,
                  "rel_pos_bias: table " + table.shape().str() + " vs window " + std::to_string(window) +
                      " (wants " + std::to_string(offsets) + " offsets)");
  const std::int64_t heads = table.dim(1);
  Tensor<T> out(Shape{heads, t, t});
  const auto tv = table.data();
  auto ov = out.data_mut();
  for (std::int64_t h = 0; h < heads; ++h)
    for (std::int64_t q = 0; q < t; ++q)
      for (std::int64_t k = 0; k < t; ++k) {
        const std::int64_t di = k / p - q / p, dj = k % p - q % p;
        const std::int64_t idx = (di + p - 1) * (2 * p - 1) + (dj + p - 1);
        ov[static_cast<std::size_t>((h * t + q) * t + k)] = tv[static_cast<std::size_t>(idx * heads + h)];
      }
  if (detail::taping<T>({&table})) {
    auto ti = table.impl_ptr();
    auto oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [ti, oi, heads, t, p] {
      if (oi->grad.empty()) return;
      auto& gt = detail::grad_of(ti.get());
      for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t q = 0; q < t; ++q)
          for (std::int64_t k = 0; k < t; ++k) {
            const std::int64_t di = k / p - q / p, dj = k % p - q % p;
            const std::int64_t idx = (di + p - 1) * (2 * p - 1) + (dj + p - 1);
            gt[static_cast<std::size_t>(idx * heads + h)] += oi->grad[static_cast<std::size_t>((h * t + q) * t + k)];
          }
    });
  }
  return out;
}

namespace detail {

// logits[(b*H + h), i, j] += bias[h, i, j], broadcast over the window batch.
template <typename T>
Tensor<T> add_head_bias(const Tensor<T>& logits, const Tensor<T>& bias) {
  require(logits.rank() == 3 && bias.rank() == 3, "add_head_bias: rank mismatch");
  const std::int64_t heads = bias.dim(0), t = bias.dim(1);
  require(bias.dim(2) == t && logits.dim(1) == t && logits.dim(2) == t && logits.dim(0) % heads == 0,
          "add_head_bias: logits " + logits.shape().str() + " vs bias " + bias.shape().str());
  const std::int64_t groups = logits.dim(0) / heads, plane = t * t;
  Tensor<T> out(logits.shape());
  const auto lv = logits.data();
  const auto bv = bias.data();
  auto ov = out.data_mut();
  for (std::int64_t b = 0; b < groups; ++b)
    for (std::int64_t h = 0; h < heads; ++h) {
      const T* src = lv.data() + (b * heads + h) * plane;
      const T* bp = bv.data() + h * plane;
      T* dst = ov.data() + (b * heads + h) * plane;
      for (std::int64_t i = 0; i < plane; ++i) dst[i] = src[i] + bp[i];
    }
  if (taping<T>({&logits, &bias})) {
    auto li = logits.impl_ptr(), bi = bias.impl_ptr(), oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [li, bi, oi, groups, heads, plane] {
      if (oi->grad.empty()) return;
      if (li->requires_grad) accumulate(li.get(), std::span<const T>(oi->grad));
      if (bi->requires_grad) {
        auto& gb = grad_of(bi.get());
        for (std::int64_t b = 0; b < groups; ++b)
          for (std::int64_t h = 0; h < heads; ++h) {
            const T* d = oi->grad.data() + (b * heads + h) * plane;
            T* g = gb.data() + h * plane;
            for (std::int64_t i = 0; i < plane; ++i) g[i] += d[i];
          }
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
struct WMHSAParams {
  std::int64_t dim = 0;
  int window = 0;
  int heads = 0;
  int head_dim = 0;
  Tensor<T> qkv_w;     // (3C, C)
  Tensor<T> qkv_b;     // (3C)
  Tensor<T> out_w;     // (C, C)
  Tensor<T> out_b;     // (C)
  Tensor<T> rel_table; // ((2P-1)^2, heads), zero-initialized

  static WMHSAParams make(std::int64_t dim, int window, int head_dim, Rng& rng) {
    if (head_dim < 1 || dim % head_dim != 0)
      throw ConfigError("WMHSAParams: dim " + std::to_string(dim) + " not divisible by head_dim " + std::to_string(head_dim));
    WMHSAParams p;
    p.dim = dim;
    p.window = window;
    p.head_dim = head_dim;
    p.heads = static_cast<int>(dim / head_dim);
    p.qkv_w = Tensor<T>::he_normal(Shape{3 * dim, dim}, dim, rng);
    p.qkv_b = Tensor<T>::zeros(Shape{3 * dim});
    p.out_w = Tensor<T>::he_normal(Shape{dim, dim}, dim, rng);
    p.out_b = Tensor<T>::zeros(Shape{dim});
    p.rel_table = Tensor<T>::zeros(Shape{(2 * window - 1) * (2 * window - 1), p.heads});
    return p;
  }
};

// Largest divisor of C no greater than `preferred` (32 for the published
// variants; 48-channel stages get 24).
inline int pick_head_dim(std::int64_t channels, int preferred) {
  int d = static_cast<int>(std::min<std::int64_t>(preferred, channels));
  while (channels % d != 0) --d;
  return d;
}

// Attention over already-partitioned windows (B, P^2, C): per-head scaled
// dot-product with relative position bias, softmax over keys, output
// projection. Pre-norm and residual are the caller's.
template <typename T>
Tensor<T> w_mhsa(const Tensor<T>& windows, const WMHSAParams<T>& p) {
  detail::require(windows.rank() == 3, "w_mhsa: expects (windows, tokens, C) input, got " + windows.shape().str());
  const std::int64_t b = windows.dim(0), t = windows.dim(1), c = windows.dim(2);
  detail::require(c == p.dim, "w_mhsa: channels " + std::to_string(c) + " vs params dim " + std::to_string(p.dim));
  detail::require(t == static_cast<std::int64_t>(p.window) * p.window,
                  "w_mhsa: token count " + std::to_string(t) + " != P^2 for P=" + std::to_string(p.window));
  const std::int64_t heads = p.heads, hd = p.head_dim;

  auto tokens = reshape(windows, Shape{b * t, c});
  auto qkv = linear(tokens, p.qkv_w, p.qkv_b);  // (B*T, 3C)
  const auto to_heads = [&](Tensor<T> m) {
    m = reshape(m, Shape{b, t, heads, hd});
    m = permute(m, {0, 2, 1, 3});
    return reshape(m, Shape{b * heads, t, hd});
  };
  auto q = to_heads(slice_dim(qkv, 1, 0, c));
  auto k = to_heads(slice_dim(qkv, 1, c, c));
  auto v = to_heads(slice_dim(qkv, 1, 2 * c, c));

  auto logits = scale(bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(hd)));
  logits = detail::add_head_bias(logits, rel_pos_bias(p.rel_table, p.window));
  auto attn = softmax_lastdim(logits);
  auto ctx = bmm_nn(attn, v);  // (B*heads, T, hd)

  ctx = reshape(ctx, Shape{b, heads, t, hd});
  ctx = permute(ctx, {0, 2, 1, 3});
  ctx = reshape(ctx, Shape{b * t, c});
  auto out = linear(ctx, p.out_w, p.out_b);
  return reshape(out, Shape{b, t, c});
}

// Parallel-branch attention layer. Branch 0 is plain windowed attention on
// the full map; branch k partitions the map at rate 2^k and runs windowed
// attention over the dilated sub-images. A gate computed from the layer input
// fuses the branches, then one shared MLP (pre-norm, residual) finishes.
template <typename T>
struct AtrousAttentionLayer {
  std::int64_t dim = 0;
  int levels = 0;   // L; branch count is L+1
  int window = 0;   // requested P; per-branch windows shrink to the sub-image side
  std::int64_t input_h = 0;
  std::int64_t input_w = 0;
  LayerNormParams<T> pre_norm;
  std::vector<WMHSAParams<T>> branches;  // 0 = undilated, then levels 1..L
  GateParams<T> gate;
  LayerNormParams<T> mlp_norm;
  Tensor<T> mlp_w1;  // (4C, C)
  Tensor<T> mlp_b1;
  Tensor<T> mlp_w2;  // (C, 4C)
  Tensor<T> mlp_b2;

  // Divisibility is enforced here, at construction, not at forward time.
  static AtrousAttentionLayer make(std::int64_t dim, int levels, int window, std::int64_t h, std::int64_t w,
                                   int head_dim, Rng& rng) {
    if (levels < 0) throw ConfigError("AtrousAttentionLayer: levels must be >= 0");
    AtrousAttentionLayer layer;
    layer.dim = dim;
    layer.levels = levels;
    layer.window = window;
    layer.input_h = h;
    layer.input_w = w;
    layer.pre_norm = LayerNormParams<T>::make(dim);
    const int hd = pick_head_dim(dim, head_dim);
    for (int k = 0; k <= levels; ++k) {
      const std::int64_t rate = std::int64_t{1} << k;
      if (h % rate != 0 || w % rate != 0)
        throw ConfigError("AtrousAttentionLayer: map " + std::to_string(h) + "x" + std::to_string(w) +
                          " not divisible by dilation rate " + std::to_string(rate));
      const std::int64_t side = std::min(h, w) / rate;
      const int pk = static_cast<int>(std::min<std::int64_t>(window, side));
      if ((h / rate) % pk != 0 || (w / rate) % pk != 0)
        throw ConfigError("AtrousAttentionLayer: sub-image " + std::to_string(h / rate) + "x" + std::to_string(w / rate) +
                          " not divisible by window " + std::to_string(pk));
      layer.branches.push_back(WMHSAParams<T>::make(dim, pk, hd, rng));
    }
    layer.gate = GateParams<T>::make(levels + 1, dim, rng);
    layer.mlp_norm = LayerNormParams<T>::make(dim);
    layer.mlp_w1 = Tensor<T>::he_normal(Shape{4 * dim, dim}, dim, rng);
    layer.mlp_b1 = Tensor<T>::zeros(Shape{4 * dim});
    layer.mlp_w2 = Tensor<T>::he_normal(Shape{dim, 4 * dim}, 4 * dim, rng);
    layer.mlp_b2 = Tensor<T>::zeros(Shape{dim});
    return layer;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    detail::require(x.rank() == 4 && x.dim(1) == dim && x.dim(2) == input_h && x.dim(3) == input_w,
                    "AtrousAttentionLayer: input " + x.shape().str() + " does not match layer (C=" + std::to_string(dim) +
                        ", " + std::to_string(input_h) + "x" + std::to_string(input_w) + ")");
    // Per-channel LN commutes with partitioning, so normalize once up front.
    auto normed = layer_norm_nchw(x, pre_norm);
    std::vector<Tensor<T>> outputs;
    outputs.reserve(branches.size());
    for (int k = 0; k < static_cast<int>(branches.size()); ++k) {
      const auto& params = branches[static_cast<std::size_t>(k)];
      Tensor<T> y;
      if (k == 0) {
        const auto wspec = WindowSpec::make(params.window, input_h, input_w);
        y = departition_windows(w_mhsa(partition_windows(normed, wspec), params), wspec, input_h, input_w);
      } else {
        const auto pspec = PartitionSpec::make(k, input_h, input_w);
        const auto wspec = WindowSpec::make(params.window, pspec.sub_h, pspec.sub_w);
        auto sub = partition_windows(partition_dilated(normed, pspec), wspec);
        y = departition_dilated(departition_windows(w_mhsa(sub, params), wspec, pspec.sub_h, pspec.sub_w), pspec);
      }
      outputs.push_back(add(y, x));  // residual at full resolution
    }
    auto gates = compute_gates(x, gate);
    auto fused = fuse(outputs, gates);
    auto h = layer_norm_nchw(fused, mlp_norm);
    h = pointwise_conv(h, mlp_w1, mlp_b1);
    h = gelu(h);
    h = pointwise_conv(h, mlp_w2, mlp_b2);
    return add(h, fused);
  }

  void collect_params(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".pre_norm.gamma", pre_norm.gamma});
    out.push_back({prefix + ".pre_norm.beta", pre_norm.beta});
    for (std::size_t k = 0; k < branches.size(); ++k) {
      const std::string b = prefix + ".branch" + std::to_string(k);
      out.push_back({b + ".qkv_w", branches[k].qkv_w});
      out.push_back({b + ".qkv_b", branches[k].qkv_b});
      out.push_back({b + ".out_w", branches[k].out_w});
      out.push_back({b + ".out_b", branches[k].out_b});
      out.push_back({b + ".rel_table", branches[k].rel_table});
    }
    out.push_back({prefix + ".gate.weight", gate.weight});
    out.push_back({prefix + ".gate.bias", gate.bias});
    out.push_back({prefix + ".mlp_norm.gamma", mlp_norm.gamma});
    out.push_back({prefix + ".mlp_norm.beta", mlp_norm.beta});
    out.push_back({prefix + ".mlp.w1", mlp_w1});
    out.push_back({prefix + ".mlp.b1", mlp_b1});
    out.push_back({prefix + ".mlp.w2", mlp_w2});
    out.push_back({prefix + ".mlp.b2", mlp_b2});
  }
};

}  // namespace accvit
