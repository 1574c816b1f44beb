#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "accvit/config.hpp"

// Multiply-accumulate accounting (1 MAC = 1 FLOP, the convention of the
// published tables). Counted: convolutions, linear layers, attention
// matmuls (QK^T and attn*V), the pointwise attention gate. Ignored:
// normalizations, activations, softmax, residual adds, the channel-wise
// conv gate, and other elementwise work. Counts are per image.

namespace accvit {
namespace flops {

inline std::int64_t conv2d(std::int64_t ho, std::int64_t wo, std::int64_t cin, std::int64_t cout, std::int64_t k) {
  return ho * wo * cout * cin * k * k;
}

inline std::int64_t depthwise(std::int64_t ho, std::int64_t wo, std::int64_t c, std::int64_t k) {
  return ho * wo * c * k * k;  // conv2d with cin groups
}

inline std::int64_t pointwise(std::int64_t ho, std::int64_t wo, std::int64_t cin, std::int64_t cout) {
  return conv2d(ho, wo, cin, cout, 1);
}

inline std::int64_t linear(std::int64_t rows, std::int64_t cin, std::int64_t cout) { return rows * cin * cout; }

// One window: heads * (T^2 * head_dim) for QK^T plus the same for attn*V.
inline std::int64_t attention_window_core(std::int64_t tokens, std::int64_t heads, std::int64_t head_dim) {
  return heads * tokens * tokens * head_dim * 2;
}

inline std::int64_t conv_block(std::int64_t cin, std::int64_t cout, int stride, std::int64_t side_in) {
  const std::int64_t e = 4 * cin;
  const std::int64_t side_out = side_in / stride;
  std::int64_t macs = pointwise(side_in, side_in, cin, e);                    // expand
  macs += 3 * depthwise(side_out, side_out, e, 3);                            // parallel dilated branches
  macs += linear(1, e, e / 4) + linear(1, e / 4, e);                          // SE bottleneck (pooled)
  macs += pointwise(side_out, side_out, e, cout);                             // project
  if (stride != 1 || cin != cout) macs += pointwise(side_out, side_out, cin, cout);  // shortcut
  return macs;
}

inline std::int64_t attention_layer(std::int64_t channels, int levels, std::int64_t side, std::int64_t window) {
  const std::int64_t hw = side * side;
  std::int64_t macs = 0;
  for (int k = 0; k <= levels; ++k) {
    const std::int64_t rate = std::int64_t{1} << k;
    const std::int64_t sub = side / rate;
    const std::int64_t p = std::min<std::int64_t>(window, sub);
    const std::int64_t tokens = p * p;
    // QKV + output projections over every token, attention core per window
    macs += linear(hw, channels, 3 * channels) + linear(hw, channels, channels);
    macs += (hw / tokens) * attention_window_core(tokens, /*heads=*/1, /*head_dim=*/channels);
  }
  macs += pointwise(side, side, channels, (levels + 1) * channels);  // gate
  macs += linear(hw, channels, 4 * channels) + linear(hw, 4 * channels, channels);  // shared MLP
  return macs;
}

struct ModulePart {
  std::string name;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

// Per-module MACs at the given resolution; validates divisibility first.
inline std::vector<ModulePart> count(const VariantConfig& cfg, std::int64_t resolution) {
  check_resolution(cfg, resolution);
  const auto sides = stage_sides(cfg, resolution);
  std::vector<ModulePart> parts;
  {
    ModulePart stem{"stem", 0, 0};
    stem.flops = conv2d(sides[0], sides[0], 3, cfg.stem_channels, 3) +
                 conv2d(sides[0], sides[0], cfg.stem_channels, cfg.stem_channels, 3);
    parts.push_back(stem);
  }
  std::int64_t cin = cfg.stem_channels;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const auto& stage = cfg.stages[i];
    ModulePart part{"stage" + std::to_string(i + 1), 0, 0};
    for (int b = 0; b < stage.blocks; ++b) {
      const std::int64_t block_in = b == 0 ? cin : stage.channels;
      const int stride = b == 0 ? 2 : 1;
      const std::int64_t side_in = b == 0 ? sides[i] : sides[i + 1];
      part.flops += conv_block(block_in, stage.channels, stride, side_in);
      part.flops += attention_layer(stage.channels, stage.dilation_levels, sides[i + 1], cfg.window);
    }
    parts.push_back(part);
    cin = stage.channels;
  }
  parts.push_back({"head", 0, linear(1, cin, cfg.num_classes)});
  return parts;
}

}  // namespace flops
}  // namespace accvit
