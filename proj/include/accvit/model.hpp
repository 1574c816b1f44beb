#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "accvit/attention.hpp"
#include "accvit/config.hpp"
#include "accvit/conv_block.hpp"
#include "accvit/flops.hpp"
#include "accvit/ops.hpp"
#include "accvit/tensor.hpp"

// Full model assembly: two-conv stem (first stride 2, GELU between), four
// stages of [conv block, attention layer] pairs with stride-2 stage entry,
// then global average pooling, layer norm, and a zero-initialized linear
// classifier.

namespace accvit {

template <typename T>
struct ModelBlock {
  AtrousIRConvBlock<T> conv;
  AtrousAttentionLayer<T> attn;
};

template <typename T>
struct ModelStage {
  StageSpec spec;
  std::vector<ModelBlock<T>> blocks;
};

template <typename T>
struct Model {
  VariantConfig config;
  std::int64_t resolution = 0;
  Tensor<T> stem1_w, stem1_b;  // 3 -> C0, stride 2
  Tensor<T> stem2_w, stem2_b;  // C0 -> C0
  std::vector<ModelStage<T>> stages;
  LayerNormParams<T> head_norm;
  Tensor<T> head_w, head_b;  // zero-initialized classifier

  Tensor<T> forward(const Tensor<T>& images) const {
    detail::require(images.rank() == 4, "Model::forward: expects NCHW images, got " + images.shape().str());
    if (images.dim(1) != 3)
      throw ConfigError("Model::forward: expected 3 input channels, got " + std::to_string(images.dim(1)));
    if (images.dim(2) != resolution || images.dim(3) != resolution)
      throw ConfigError("Model::forward: model was built for " + std::to_string(resolution) + "x" + std::to_string(resolution) +
                        ", got " + images.shape().str());
    auto h = conv3x3(images, stem1_w, stem1_b, /*stride=*/2);
    h = gelu(h);
    h = conv3x3(h, stem2_w, stem2_b, /*stride=*/1);
    for (const auto& stage : stages)
      for (const auto& block : stage.blocks) {
        h = block.conv.forward(h);
        h = block.attn.forward(h);
      }
    auto pooled = global_avg_pool(h);
    auto normed = layer_norm_lastdim(pooled, head_norm);
    return linear(normed, head_w, head_b);
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    out.push_back({"stem.conv1_w", stem1_w});
    out.push_back({"stem.conv1_b", stem1_b});
    out.push_back({"stem.conv2_w", stem2_w});
    out.push_back({"stem.conv2_b", stem2_b});
    for (std::size_t s = 0; s < stages.size(); ++s)
      for (std::size_t b = 0; b < stages[s].blocks.size(); ++b) {
        const std::string prefix = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
        stages[s].blocks[b].conv.collect_params(prefix + ".conv", out);
        stages[s].blocks[b].attn.collect_params(prefix + ".attn", out);
      }
    out.push_back({"head.norm.gamma", head_norm.gamma});
    out.push_back({"head.norm.beta", head_norm.beta});
    out.push_back({"head.linear_w", head_w});
    out.push_back({"head.linear_b", head_b});
    return out;
  }

  void set_requires_grad(bool enabled) {
    for (auto& p : parameters()) p.tensor.set_requires_grad(enabled);
  }
};

template <typename T>
Model<T> build_model(const VariantConfig& cfg, std::int64_t resolution, std::uint64_t seed) {
  check_resolution(cfg, resolution);
  const auto sides = stage_sides(cfg, resolution);
  Rng rng(seed);
  Model<T> m;
  m.config = cfg;
  m.resolution = resolution;
  m.stem1_w = Tensor<T>::he_normal(Shape{cfg.stem_channels, 3, 3, 3}, 3 * 9, rng);
  m.stem1_b = Tensor<T>::zeros(Shape{cfg.stem_channels});
  m.stem2_w = Tensor<T>::he_normal(Shape{cfg.stem_channels, cfg.stem_channels, 3, 3}, cfg.stem_channels * 9, rng);
  m.stem2_b = Tensor<T>::zeros(Shape{cfg.stem_channels});
  std::int64_t cin = cfg.stem_channels;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const auto& spec = cfg.stages[i];
    ModelStage<T> stage;
    stage.spec = spec;
    const std::int64_t side = sides[i + 1];
    for (int b = 0; b < spec.blocks; ++b) {
      ModelBlock<T> block{
          AtrousIRConvBlock<T>::make(b == 0 ? cin : spec.channels, spec.channels, b == 0 ? 2 : 1, rng),
          AtrousAttentionLayer<T>::make(spec.channels, spec.dilation_levels, cfg.window, side, side, cfg.head_dim, rng)};
      stage.blocks.push_back(std::move(block));
    }
    m.stages.push_back(std::move(stage));
    cin = spec.channels;
  }
  m.head_norm = LayerNormParams<T>::make(cin);
  m.head_w = Tensor<T>::zeros(Shape{cfg.num_classes, cin});
  m.head_b = Tensor<T>::zeros(Shape{cfg.num_classes});
  m.set_requires_grad(true);
  return m;
}

using ModulePart = flops::ModulePart;

struct ModelSummary {
  std::vector<ModulePart> parts;
  std::int64_t total_params = 0;
  std::int64_t total_flops = 0;
};

namespace detail {

inline std::string module_of(const std::string& param_name) {
  const auto dot = param_name.find('.');
  return dot == std::string::npos ? param_name : param_name.substr(0, dot);
}

}  // namespace detail

// Exact integer parameter count from the registry, grouped by top module.
template <typename T>
ModelSummary count_params(const Model<T>& m) {
  ModelSummary s;
  for (const auto& p : m.parameters()) {
    const std::string mod = detail::module_of(p.name);
    if (s.parts.empty() || s.parts.back().name != mod) s.parts.push_back({mod, 0, 0});
    s.parts.back().params += p.tensor.numel();
    s.total_params += p.tensor.numel();
  }
  return s;
}

// Analytic per-image MAC count; valid for any resolution the config admits.
inline ModelSummary count_flops(const VariantConfig& cfg, std::int64_t resolution) {
  ModelSummary s;
  s.parts = flops::count(cfg, resolution);
  for (const auto& p : s.parts) s.total_flops += p.flops;
  return s;
}

template <typename T>
ModelSummary count_flops(const Model<T>& m, std::int64_t resolution) {
  return count_flops(m.config, resolution);
}

// Parameter and MAC accounting on matching module boundaries.
template <typename T>
ModelSummary summarize(const Model<T>& m, std::int64_t resolution) {
  ModelSummary s = count_params(m);
  const ModelSummary f = count_flops(m.config, resolution);
  if (s.parts.size() != f.parts.size()) throw UsageError("summarize: module partition mismatch");
  for (std::size_t i = 0; i < s.parts.size(); ++i) {
    if (s.parts[i].name != f.parts[i].name) throw UsageError("summarize: module order mismatch");
    s.parts[i].flops = f.parts[i].flops;
    s.total_flops += f.parts[i].flops;
  }
  return s;
}

}  // namespace accvit
