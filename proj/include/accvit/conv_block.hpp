#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "accvit/gating.hpp"
#include "accvit/ops.hpp"
#include "accvit/tensor.hpp"

// Parallel atrous inverted residual convolution: pointwise expand to 4C,
// three parallel depthwise 3x3 convolutions at dilations 1/2/3, gated fusion,
// squeeze-excitation, pointwise projection, residual. The first block of a
// stage strides by 2 (all three depthwise branches plus a strided 1x1
// shortcut); other blocks keep an identity residual.

namespace accvit {

template <typename T>
struct SEParams {
  Tensor<T> reduce_w;  // (C/4, C)
  Tensor<T> reduce_b;
  Tensor<T> expand_w;  // (C, C/4)
  Tensor<T> expand_b;

  static SEParams make(std::int64_t channels, Rng& rng) {
    if (channels % 4 != 0) throw ConfigError("SEParams: channels " + std::to_string(channels) + " not divisible by reduction 4");
    const std::int64_t mid = channels / 4;
    SEParams p;
    p.reduce_w = Tensor<T>::he_normal(Shape{mid, channels}, channels, rng);
    p.reduce_b = Tensor<T>::zeros(Shape{mid});
    p.expand_w = Tensor<T>::he_normal(Shape{channels, mid}, mid, rng);
    p.expand_b = Tensor<T>::zeros(Shape{channels});
    return p;
  }
};

// x (.) sigmoid(expand(silu(reduce(gap(x))))), broadcast over H,W.
template <typename T>
Tensor<T> se_apply(const Tensor<T>& x, const SEParams<T>& p) {
  detail::require(x.rank() == 4 && x.dim(1) == p.reduce_w.dim(1),
                  "se_apply: input " + x.shape().str() + " vs SE channels " + std::to_string(p.reduce_w.dim(1)));
  auto pooled = global_avg_pool(x);
  auto mid = silu(linear(pooled, p.reduce_w, p.reduce_b));
  auto gatevec = sigmoid(linear(mid, p.expand_w, p.expand_b));
  return scale_channels(x, gatevec);
}

template <typename T>
struct AtrousIRConvBlock {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  int stride = 1;
  LayerNormParams<T> pre_norm;      // over in_channels
  Tensor<T> expand_w;               // (4Cin, Cin)
  Tensor<T> expand_b;
  std::array<Tensor<T>, 3> dw_w;    // (4Cin, 3, 3), dilations 1, 2, 3
  std::array<Tensor<T>, 3> dw_b;
  ChannelGateParams<T> gate;        // k = 3 over the expanded map
  SEParams<T> se;                   // on the expanded map, before projection
  Tensor<T> proj_w;                 // (Cout, 4Cin)
  Tensor<T> proj_b;
  Tensor<T> shortcut_w;             // (Cout, Cin) when shape changes, else undefined
  Tensor<T> shortcut_b;

  bool identity_residual() const { return stride == 1 && in_channels == out_channels; }

  static AtrousIRConvBlock make(std::int64_t in_channels, std::int64_t out_channels, int stride, Rng& rng) {
    if (stride != 1 && stride != 2) throw ConfigError("AtrousIRConvBlock: stride must be 1 or 2, got " + std::to_string(stride));
    AtrousIRConvBlock b;
    b.in_channels = in_channels;
    b.out_channels = out_channels;
    b.stride = stride;
    const std::int64_t e = 4 * in_channels;
    b.pre_norm = LayerNormParams<T>::make(in_channels);
    b.expand_w = Tensor<T>::he_normal(Shape{e, in_channels}, in_channels, rng);
    b.expand_b = Tensor<T>::zeros(Shape{e});
    for (int i = 0; i < 3; ++i) {
      b.dw_w[static_cast<std::size_t>(i)] = Tensor<T>::he_normal(Shape{e, 3, 3}, 9, rng);
      b.dw_b[static_cast<std::size_t>(i)] = Tensor<T>::zeros(Shape{e});
    }
    b.gate = ChannelGateParams<T>::make(3, e, rng);
    b.se = SEParams<T>::make(e, rng);
    b.proj_w = Tensor<T>::he_normal(Shape{out_channels, e}, e, rng);
    b.proj_b = Tensor<T>::zeros(Shape{out_channels});
    if (!b.identity_residual()) {
      b.shortcut_w = Tensor<T>::he_normal(Shape{out_channels, in_channels}, in_channels, rng);
      b.shortcut_b = Tensor<T>::zeros(Shape{out_channels});
    }
    return b;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    detail::require(x.rank() == 4 && x.dim(1) == in_channels,
                    "AtrousIRConvBlock: input " + x.shape().str() + " vs Cin=" + std::to_string(in_channels));
    auto normed = layer_norm_nchw(x, pre_norm);
    auto expanded = pointwise_conv(normed, expand_w, expand_b);
    std::vector<Tensor<T>> branch_outs;
    branch_outs.reserve(3);
    for (int i = 0; i < 3; ++i)
      branch_outs.push_back(depthwise_conv3x3(expanded, dw_w[static_cast<std::size_t>(i)], dw_b[static_cast<std::size_t>(i)],
                                              /*dilation=*/i + 1, stride));
    // gate conditioned on the expanded map entering the branches
    auto gates = compute_gates_channelwise(expanded, gate, stride);
    auto fused = fuse(branch_outs, gates);
    auto projected = pointwise_conv(se_apply(fused, se), proj_w, proj_b);
    auto residual = identity_residual() ? x : pointwise_conv(x, shortcut_w, shortcut_b, stride);
    return add(residual, projected);
  }

  void collect_params(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".pre_norm.gamma", pre_norm.gamma});
    out.push_back({prefix + ".pre_norm.beta", pre_norm.beta});
    out.push_back({prefix + ".expand_w", expand_w});
    out.push_back({prefix + ".expand_b", expand_b});
    for (int i = 0; i < 3; ++i) {
      out.push_back({prefix + ".dw" + std::to_string(i + 1) + "_w", dw_w[static_cast<std::size_t>(i)]});
      out.push_back({prefix + ".dw" + std::to_string(i + 1) + "_b", dw_b[static_cast<std::size_t>(i)]});
    }
    out.push_back({prefix + ".gate.scale", gate.scale});
    out.push_back({prefix + ".gate.shift", gate.shift});
    out.push_back({prefix + ".se.reduce_w", se.reduce_w});
    out.push_back({prefix + ".se.reduce_b", se.reduce_b});
    out.push_back({prefix + ".se.expand_w", se.expand_w});
    out.push_back({prefix + ".se.expand_b", se.expand_b});
    out.push_back({prefix + ".proj_w", proj_w});
    out.push_back({prefix + ".proj_b", proj_b});
    if (!identity_residual()) {
      out.push_back({prefix + ".shortcut_w", shortcut_w});
      out.push_back({prefix + ".shortcut_b", shortcut_b});
    }
  }
};

}  // namespace accvit
