#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "accvit/common.hpp"

// Model variant configuration: per-stage block counts and channel widths,
// dilation schedule, window size. The six published presets plus JSON-loaded
// custom configs for experimentation.

namespace accvit {

struct StageSpec {
  int blocks = 1;
  std::int64_t channels = 0;
  int dilation_levels = 0;  // L; attention branch count is L+1
};

struct PublishedTargets {
  double params_millions = 0.0;
  double flops_giga = 0.0;
};

struct VariantConfig {
  std::string name;
  std::int64_t stem_channels = 0;
  std::vector<StageSpec> stages;
  int window = 7;
  int head_dim = 32;
  int num_classes = 1000;

  static const std::vector<std::string>& known_variants() {
    static const std::vector<std::string> names = {"tiny", "small", "base", "nano", "pico", "femto"};
    return names;
  }

  // Stage table for the published family; dilation schedule is 3,2,1,0.
  static VariantConfig preset(const std::string& name, int num_classes = 1000) {
    VariantConfig c;
    c.name = name;
    c.num_classes = num_classes;
    const auto stages4 = [](std::int64_t c0, int b1, std::int64_t c1, int b2, std::int64_t c2, int b3, std::int64_t c3,
                            int b4, std::int64_t c4) {
      return std::pair<std::int64_t, std::vector<StageSpec>>{
          c0,
          {{b1, c1, 3}, {b2, c2, 2}, {b3, c3, 1}, {b4, c4, 0}}};
    };
    std::pair<std::int64_t, std::vector<StageSpec>> t;
    if (name == "tiny")
      t = stages4(64, 2, 64, 3, 128, 6, 256, 2, 512);
    else if (name == "small")
      t = stages4(64, 2, 96, 3, 192, 6, 384, 2, 768);
    else if (name == "base")
      t = stages4(64, 4, 96, 6, 192, 14, 384, 2, 768);
    else if (name == "nano")
      t = stages4(64, 1, 64, 2, 128, 4, 256, 1, 512);
    else if (name == "pico")
      t = stages4(48, 1, 48, 2, 96, 4, 192, 1, 384);
    else if (name == "femto")
      t = stages4(32, 1, 32, 2, 64, 4, 128, 1, 256);
    else
      throw ConfigError("unknown variant '" + name + "' (known: tiny, small, base, nano, pico, femto)");
    c.stem_channels = t.first;
    c.stages = std::move(t.second);
    return c;
  }

  static std::optional<PublishedTargets> targets(const std::string& name) {
    if (name == "tiny") return PublishedTargets{28.367, 5.694};
    if (name == "small") return PublishedTargets{62.886, 11.59};
    if (name == "base") return PublishedTargets{103.576, 22.316};
    if (name == "nano") return PublishedTargets{16.649, 3.812};
    if (name == "pico") return PublishedTargets{9.55, 2.217};
    if (name == "femto") return PublishedTargets{4.4, 1.049};
    return std::nullopt;
  }

  static VariantConfig from_json(const nlohmann::json& j) {
    VariantConfig c;
    c.name = j.value("name", std::string("custom"));
    if (!j.contains("stem_channels") || !j.contains("stages"))
      throw ConfigError("variant config: 'stem_channels' and 'stages' are required");
    c.stem_channels = j.at("stem_channels").get<std::int64_t>();
    c.window = j.value("window", 7);
    c.head_dim = j.value("head_dim", 32);
    c.num_classes = j.value("num_classes", 1000);
    const auto& stages = j.at("stages");
    const int n = static_cast<int>(stages.size());
    for (int i = 0; i < n; ++i) {
      const auto& s = stages[static_cast<std::size_t>(i)];
      StageSpec spec;
      spec.blocks = s.at("blocks").get<int>();
      spec.channels = s.at("channels").get<std::int64_t>();
      spec.dilation_levels = s.value("dilation_levels", std::max(0, n - 1 - i));
      if (spec.blocks < 1 || spec.channels < 4) throw ConfigError("variant config: stage " + std::to_string(i + 1) + " is invalid");
      c.stages.push_back(spec);
    }
    if (c.stages.empty()) throw ConfigError("variant config: at least one stage required");
    return c;
  }

  static VariantConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open variant config '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("malformed variant config '" + path + "': " + e.what());
    }
    return from_json(j);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["name"] = name;
    j["stem_channels"] = stem_channels;
    j["window"] = window;
    j["head_dim"] = head_dim;
    j["num_classes"] = num_classes;
    j["stages"] = nlohmann::json::array();
    for (const auto& s : stages)
      j["stages"].push_back({{"blocks", s.blocks}, {"channels", s.channels}, {"dilation_levels", s.dilation_levels}});
    return j;
  }
};

// Spatial side of each stage's output at the given input resolution:
// stem halves once, each stage halves once more.
inline std::vector<std::int64_t> stage_sides(const VariantConfig& cfg, std::int64_t resolution) {
  std::vector<std::int64_t> sides;
  std::int64_t side = resolution;
  for (std::size_t i = 0; i < cfg.stages.size() + 1; ++i) {
    if (side % 2 != 0)
      throw ConfigError("resolution " + std::to_string(resolution) + ": side " + std::to_string(side) +
                        " is odd entering " + (i == 0 ? std::string("the stem") : "stage " + std::to_string(i)));
    side /= 2;
    sides.push_back(side);  // sides[0] = stem output, sides[i] = stage i output
  }
  return sides;
}

// Validates all partition/window preconditions per stage; throws ConfigError
// naming the first failing stage.
inline void check_resolution(const VariantConfig& cfg, std::int64_t resolution) {
  const auto sides = stage_sides(cfg, resolution);
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const auto& stage = cfg.stages[i];
    const std::int64_t side = sides[i + 1];
    for (int k = 0; k <= stage.dilation_levels; ++k) {
      const std::int64_t rate = std::int64_t{1} << k;
      if (side % rate != 0)
        throw ConfigError("resolution " + std::to_string(resolution) + ": stage " + std::to_string(i + 1) + " side " +
                          std::to_string(side) + " not divisible by dilation rate " + std::to_string(rate));
      const std::int64_t sub = side / rate;
      const std::int64_t window = std::min<std::int64_t>(cfg.window, sub);
      if (sub % window != 0)
        throw ConfigError("resolution " + std::to_string(resolution) + ": stage " + std::to_string(i + 1) +
                          " sub-image side " + std::to_string(sub) + " not divisible by window " + std::to_string(window));
    }
  }
}

}  // namespace accvit
