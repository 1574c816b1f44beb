#pragma once

#include <cstdint>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "accvit/digest.hpp"
#include "accvit/harness.hpp"
#include "accvit/io.hpp"
#include "accvit/model.hpp"

// Command-line surface: describe / forward / gradcheck / train-toy / bench.
// Structured output is JSON on stdout (tables only with --pretty); logs go to
// stderr. Exit codes: 0 success, 1 verification failure, 2 usage or
// configuration error. ACCVIT_THREADS caps internal parallelism (default 1).

namespace accvit {
namespace cli {

namespace detail_cli {

using nlohmann::json;

inline VariantConfig resolve_variant(const std::string& variant, const std::string& config_path, int num_classes) {
  if (!config_path.empty()) return VariantConfig::load(config_path);
  return VariantConfig::preset(variant, num_classes);
}

inline json summary_json(const VariantConfig& cfg, const ModelSummary& s, std::int64_t resolution) {
  json j;
  j["variant"] = cfg.name;
  j["resolution"] = resolution;
  j["stem_channels"] = cfg.stem_channels;
  j["window"] = cfg.window;
  j["head_dim"] = cfg.head_dim;
  j["num_classes"] = cfg.num_classes;
  const auto sides = stage_sides(cfg, resolution);
  j["stages"] = json::array();
  for (std::size_t i = 0; i < cfg.stages.size(); ++i)
    j["stages"].push_back({{"blocks", cfg.stages[i].blocks},
                           {"channels", cfg.stages[i].channels},
                           {"dilation_levels", cfg.stages[i].dilation_levels},
                           {"attention_branches", cfg.stages[i].dilation_levels + 1},
                           {"side", sides[i + 1]}});
  j["params"] = s.total_params;
  j["params_millions"] = static_cast<double>(s.total_params) / 1e6;
  j["flops"] = s.total_flops;
  j["flops_giga"] = static_cast<double>(s.total_flops) / 1e9;
  j["modules"] = json::array();
  for (const auto& p : s.parts) j["modules"].push_back({{"name", p.name}, {"params", p.params}, {"flops", p.flops}});
  if (const auto t = VariantConfig::targets(cfg.name)) {
    j["target_params_millions"] = t->params_millions;
    j["params_deviation_pct"] = 100.0 * (static_cast<double>(s.total_params) / 1e6 - t->params_millions) / t->params_millions;
    if (resolution == 224) {  // the published MAC counts are 224-specific
      j["target_flops_giga"] = t->flops_giga;
      j["flops_deviation_pct"] = 100.0 * (static_cast<double>(s.total_flops) / 1e9 - t->flops_giga) / t->flops_giga;
    }
  }
  return j;
}

inline void print_pretty_summary(const json& j, std::ostream& out) {
  out << j["variant"].get<std::string>() << " @ " << j["resolution"].get<std::int64_t>() << "\n";
  out << "  stage      blocks  channels  branches  side\n";
  int idx = 1;
  for (const auto& s : j["stages"])
    out << "  stage" << idx++ << "    " << std::setw(6) << s["blocks"].get<int>() << "  " << std::setw(8)
        << s["channels"].get<std::int64_t>() << "  " << std::setw(8) << s["attention_branches"].get<int>() << "  "
        << std::setw(4) << s["side"].get<std::int64_t>() << "\n";
  out << "  params: " << std::fixed << std::setprecision(3) << j["params_millions"].get<double>() << " M";
  if (j.contains("target_params_millions"))
    out << "  (published " << j["target_params_millions"].get<double>() << " M, " << std::showpos << std::setprecision(1)
        << j["params_deviation_pct"].get<double>() << "%" << std::noshowpos << ")";
  out << "\n  flops:  " << std::setprecision(3) << j["flops_giga"].get<double>() << " G";
  if (j.contains("target_flops_giga"))
    out << "  (published " << j["target_flops_giga"].get<double>() << " G, " << std::showpos << std::setprecision(1)
        << j["flops_deviation_pct"].get<double>() << "%" << std::noshowpos << ")";
  out << "\n" << std::defaultfloat;
}

}  // namespace detail_cli

inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  using detail_cli::json;
  CLI::App app{"atrous-attention vision backbone toolkit"};
  app.require_subcommand(1);

  // describe
  std::string d_variant = "tiny", d_config;
  std::int64_t d_resolution = 224;
  std::uint64_t d_seed = 0;
  bool d_json = false, d_pretty = false;
  auto* describe = app.add_subcommand("describe", "per-stage config, parameter and MAC counts vs published targets");
  describe->add_option("--variant", d_variant, "variant name (tiny, small, base, nano, pico, femto)");
  describe->add_option("--config", d_config, "variant config JSON file (overrides --variant)");
  describe->add_option("--resolution", d_resolution, "input resolution");
  describe->add_option("--seed", d_seed, "build seed");
  describe->add_flag("--json", d_json, "JSON output (default)");
  describe->add_flag("--pretty", d_pretty, "human-readable table instead of JSON");

  // forward
  std::string f_variant = "tiny", f_config, f_input, f_output;
  std::uint64_t f_seed = 0;
  auto* forward = app.add_subcommand("forward", "run a tensor file through a freshly built model");
  forward->add_option("--variant", f_variant, "variant name");
  forward->add_option("--config", f_config, "variant config JSON file");
  forward->add_option("--input", f_input, "input tensor file (N,3,H,W)")->required();
  forward->add_option("--output", f_output, "logits tensor file (default <input>.logits.tsr)");
  forward->add_option("--seed", f_seed, "build seed");

  // gradcheck
  std::string g_component = "gate";
  std::uint64_t g_seed = 1;
  int g_coords = 4;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification of one component");
  gc->add_option("--component", g_component, "gate, wmhsa, atrous_attention, atrous_ir_conv, micro_model")->required();
  gc->add_option("--seed", g_seed, "seed");
  gc->add_option("--coords", g_coords, "coordinates sampled per parameter tensor");

  // train-toy
  std::string t_config, t_out;
  std::uint64_t t_seed = 0;
  bool t_seed_set = false, t_freeze = false, t_json = false;
  auto* tt = app.add_subcommand("train-toy", "train the micro model on the synthetic bars dataset");
  tt->add_option("--config", t_config, "train config JSON file");
  tt->add_option("--out", t_out, "run directory for metrics and final parameters");
  tt->add_option("--seed", t_seed, "seed override")->each([&](const std::string&) { t_seed_set = true; });
  tt->add_flag("--freeze-gates", t_freeze, "pin all gates at uniform fusion");
  tt->add_flag("--json", t_json, "single JSON document instead of per-epoch lines");

  // bench
  int b_stage = 1;
  std::int64_t b_resolution = 224;
  std::string b_variant = "tiny";
  std::uint64_t b_seed = 1;
  auto* bench = app.add_subcommand("bench", "time partition/attention/conv for one stage");
  bench->add_option("--stage", b_stage, "stage index, 1-based")->required();
  bench->add_option("--resolution", b_resolution, "input resolution");
  bench->add_option("--variant", b_variant, "variant name");
  bench->add_option("--seed", b_seed, "seed");

  try {
    std::reverse(args.begin(), args.end());  // CLI11 consumes args back to front
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return 0;
    }
    err << e.what() << "\n";
    return 2;
  }

  try {
    if (*describe) {
      const auto cfg = detail_cli::resolve_variant(d_variant, d_config, 1000);
      const auto model = build_model<float>(cfg, d_resolution, d_seed);
      const auto summary = summarize(model, d_resolution);
      const json j = detail_cli::summary_json(cfg, summary, d_resolution);
      if (d_pretty)
        detail_cli::print_pretty_summary(j, out);
      else
        out << j.dump(2) << "\n";
      return 0;
    }

    if (*forward) {
      const auto cfg = detail_cli::resolve_variant(f_variant, f_config, 1000);
      const auto loaded = io::read_tensor(f_input);
      if (loaded.shape.rank() != 4 || loaded.shape.dim(1) != 3)
        throw ConfigError("forward: input must be (N, 3, H, W), got " + loaded.shape.str());
      if (loaded.shape.dim(2) != loaded.shape.dim(3))
        throw ConfigError("forward: input must be square, got " + loaded.shape.str());
      const std::int64_t resolution = loaded.shape.dim(2);
      const auto model = build_model<float>(cfg, resolution, f_seed);
      const auto logits = model.forward(loaded.as<float>());
      if (has_nonfinite(logits)) {
        err << "forward: non-finite logits\n";
        return 1;
      }
      const std::string out_path = f_output.empty() ? f_input + ".logits.tsr" : f_output;
      io::write_tensor(out_path, logits);
      json j;
      j["input"] = f_input;
      j["output"] = out_path;
      j["variant"] = cfg.name;
      j["seed"] = f_seed;
      j["shape"] = {logits.dim(0), logits.dim(1)};
      j["sha256"] = sha256_hex(logits.data().data(), logits.data().size_bytes());
      out << j.dump(2) << "\n";
      return 0;
    }

    if (*gc) {
      const auto report = gradcheck(g_component, g_seed, g_coords);
      json j;
      j["component"] = report.component;
      j["coordinates"] = report.coordinates;
      j["max_rel_err"] = report.max_rel_err;
      j["threshold"] = report.threshold;
      j["pass"] = report.pass;
      out << j.dump(2) << "\n";
      return report.pass ? 0 : 1;
    }

    if (*tt) {
      TrainConfig cfg = t_config.empty() ? TrainConfig{} : TrainConfig::load(t_config);
      if (t_seed_set) cfg.seed = t_seed;
      if (t_freeze) cfg.freeze_gates = true;
      if (!t_out.empty()) cfg.out_dir = t_out;
      const auto result = train_toy(cfg, t_json ? nullptr : &out);
      json summary;
      summary["epochs_run"] = result.epochs_run;
      summary["final_train_acc"] = result.final_train_acc;
      summary["reached_target"] = result.reached_target;
      summary["diverged"] = result.diverged;
      if (result.diverged) summary["diverged_epoch"] = result.diverged_epoch;
      if (!result.epochs.empty()) summary["heldout_acc"] = result.epochs.back().heldout_acc;
      if (t_json) {
        json doc;
        doc["epochs"] = json::array();
        for (const auto& m : result.epochs) doc["epochs"].push_back(train_detail::metrics_json(m));
        doc["summary"] = summary;
        out << doc.dump(2) << "\n";
      } else {
        out << summary.dump() << "\n";
      }
      if (result.diverged) {
        err << "train-toy: loss diverged at epoch " << result.diverged_epoch << "\n";
        return 1;
      }
      return result.reached_target ? 0 : 1;
    }

    if (*bench) {
      const auto cfg = detail_cli::resolve_variant(b_variant, "", 1000);
      const auto report = bench_stage(cfg, b_stage, b_resolution, b_seed);
      json j;
      j["stage"] = report.stage;
      j["resolution"] = report.resolution;
      j["channels"] = report.channels;
      j["side"] = report.side;
      j["attention_branches"] = report.attention_branches;
      j["dilation_rates"] = report.dilation_rates;
      j["partition_us"] = report.partition_us;
      j["attention_us"] = report.attention_us;
      j["conv_us"] = report.conv_us;
      j["attention_macs"] = report.attention_macs;
      j["conv_macs"] = report.conv_macs;
      j["attention_mac_per_s"] = report.attention_us > 0 ? 1e6 * static_cast<double>(report.attention_macs) / report.attention_us : 0.0;
      j["conv_mac_per_s"] = report.conv_us > 0 ? 1e6 * static_cast<double>(report.conv_macs) / report.conv_us : 0.0;
      out << j.dump(2) << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const PartitionError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

inline int run_main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(std::move(args), std::cout, std::cerr);
}

}  // namespace cli
}  // namespace accvit
