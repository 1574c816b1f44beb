#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "accvit/cli.hpp"

using namespace accvit;
using nlohmann::json;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

std::string micro_config_path() {
  static const std::string path = [] {
    const json j = {{"name", "cli-micro"},
                    {"stem_channels", 8},
                    {"window", 2},
                    {"head_dim", 4},
                    {"num_classes", 3},
                    {"stages", {{{"blocks", 1}, {"channels", 8}, {"dilation_levels", 1}}, {{"blocks", 1}, {"channels", 16}, {"dilation_levels", 0}}}}};
    const auto p = temp_file("accvit_cli_micro.json").string();
    std::ofstream(p) << j.dump();
    return p;
  }();
  return path;
}

}  // namespace

TEST_CASE("describe emits one valid json document per variant, stable across runs") {
  for (const auto& variant : VariantConfig::known_variants()) {
    const auto first = run_cli({"describe", "--variant", variant});
    REQUIRE(first.code == 0);
    const auto again = run_cli({"describe", "--variant", variant});
    CHECK(first.out == again.out);

    const json j = json::parse(first.out);
    CHECK(j.at("variant") == variant);
    CHECK(j.at("stages").size() == 4);
    CHECK(j.at("modules").size() == 6);
    CHECK(std::abs(j.at("params_deviation_pct").get<double>()) <= 15.0);
    CHECK(std::abs(j.at("flops_deviation_pct").get<double>()) <= 15.0);

    // committed golden output
    const std::string golden_path = std::string(ACCVIT_TEST_DIR) + "/golden/describe_" + variant + ".json";
    std::ifstream golden(golden_path);
    REQUIRE(golden.good());
    std::stringstream buf;
    buf << golden.rdbuf();
    CHECK(first.out == buf.str());
  }
}

TEST_CASE("describe reports the published targets with deviations") {
  const auto r = run_cli({"describe", "--variant", "tiny"});
  const json j = json::parse(r.out);
  CHECK(j.at("target_params_millions").get<double>() == 28.367);
  CHECK(j.at("target_flops_giga").get<double>() == 5.694);
  const auto f = run_cli({"describe", "--variant", "femto"});
  const json jf = json::parse(f.out);
  CHECK(jf.at("target_params_millions").get<double>() == 4.4);
  CHECK(jf.at("target_flops_giga").get<double>() == 1.049);
}

TEST_CASE("describe rejects unknown variants with exit 2") {
  const auto r = run_cli({"describe", "--variant", "bogus"});
  CHECK(r.code == 2);
  CHECK(r.err.find("unknown variant") != std::string::npos);
  CHECK(r.out.empty());
}

TEST_CASE("describe accepts a custom config file") {
  const auto r = run_cli({"describe", "--config", micro_config_path(), "--resolution", "16"});
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  CHECK(j.at("variant") == "cli-micro");
  CHECK(j.at("stages").size() == 2);
  CHECK_FALSE(j.contains("target_params_millions"));
  CHECK(run_cli({"describe", "--config", "/nonexistent.json"}).code == 2);
}

TEST_CASE("pretty output is a table, not json") {
  const auto r = run_cli({"describe", "--variant", "nano", "--pretty"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("published") != std::string::npos);
  CHECK_THROWS_AS(json::parse(r.out), json::exception);
}

TEST_CASE("forward writes logits with a reproducible digest") {
  Rng rng(3);
  auto images = Tensor<float>::uniform(Shape{2, 3, 16, 16}, -1.0, 1.0, rng);
  const auto in_path = temp_file("accvit_cli_fwd.tsr").string();
  io::write_tensor(in_path, images);
  const auto out_path = temp_file("accvit_cli_fwd_logits.tsr").string();

  const auto r1 = run_cli({"forward", "--config", micro_config_path(), "--input", in_path, "--output", out_path, "--seed", "5"});
  REQUIRE(r1.code == 0);
  const json j1 = json::parse(r1.out);
  CHECK(j1.at("shape") == json({2, 3}));
  const auto r2 = run_cli({"forward", "--config", micro_config_path(), "--input", in_path, "--output", out_path, "--seed", "5"});
  CHECK(j1.at("sha256") == json::parse(r2.out).at("sha256"));

  // batch split: per-item runs concatenated equal the batched run bit-exactly
  auto first = Tensor<float>(Shape{1, 3, 16, 16}, std::vector<float>(images.data().begin(), images.data().begin() + 768));
  auto second = Tensor<float>(Shape{1, 3, 16, 16}, std::vector<float>(images.data().begin() + 768, images.data().end()));
  const auto a_path = temp_file("accvit_cli_a.tsr").string();
  const auto b_path = temp_file("accvit_cli_b.tsr").string();
  io::write_tensor(a_path, first);
  io::write_tensor(b_path, second);
  REQUIRE(run_cli({"forward", "--config", micro_config_path(), "--input", a_path, "--seed", "5"}).code == 0);
  REQUIRE(run_cli({"forward", "--config", micro_config_path(), "--input", b_path, "--seed", "5"}).code == 0);
  const auto batched = io::read_tensor(out_path).as<float>();
  const auto la = io::read_tensor(a_path + ".logits.tsr").as<float>();
  const auto lb = io::read_tensor(b_path + ".logits.tsr").as<float>();
  for (std::int64_t j = 0; j < 3; ++j) {
    CHECK(batched.at(j) == la.at(j));
    CHECK(batched.at(3 + j) == lb.at(j));
  }
  for (const auto& p : {in_path, out_path, a_path, b_path, a_path + ".logits.tsr", b_path + ".logits.tsr"}) std::remove(p.c_str());
}

TEST_CASE("forward rejects bad inputs with exit 2") {
  Rng rng(4);
  const auto path = temp_file("accvit_cli_bad.tsr").string();
  io::write_tensor(path, Tensor<float>::uniform(Shape{1, 4, 16, 16}, -1.0, 1.0, rng));  // wrong channels
  CHECK(run_cli({"forward", "--config", micro_config_path(), "--input", path}).code == 2);
  std::ofstream(path) << "garbage\n";
  CHECK(run_cli({"forward", "--config", micro_config_path(), "--input", path}).code == 2);
  CHECK(run_cli({"forward", "--config", micro_config_path(), "--input", "/missing.tsr"}).code == 2);
  std::remove(path.c_str());
}

TEST_CASE("gradcheck subcommand reports pass json with exit 0") {
  const auto r = run_cli({"gradcheck", "--component", "gate", "--seed", "1"});
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  CHECK(j.at("component") == "gate");
  CHECK(j.at("pass") == true);
  CHECK(j.at("max_rel_err").get<double>() <= 1e-4);
  CHECK(run_cli({"gradcheck", "--component", "bogus"}).code == 2);
}

TEST_CASE("train-toy streams metrics and honors the exit contract") {
  json cfg;
  cfg["samples"] = 32;
  cfg["batch_size"] = 8;
  cfg["epochs"] = 2;
  cfg["seed"] = 4;
  cfg["target_acc"] = 0.0;  // reached immediately: exercises the success path
  const auto cfg_path = temp_file("accvit_cli_train.json").string();
  std::ofstream(cfg_path) << cfg.dump();

  const auto r = run_cli({"train-toy", "--config", cfg_path});
  REQUIRE(r.code == 0);
  std::istringstream lines(r.out);
  std::string line;
  int json_lines = 0;
  while (std::getline(lines, line)) {
    CHECK_NOTHROW(json::parse(line));
    ++json_lines;
  }
  CHECK(json_lines == 2);  // one epoch line + summary

  // --json mode emits one document
  const auto rj = run_cli({"train-toy", "--config", cfg_path, "--json"});
  REQUIRE(rj.code == 0);
  const json doc = json::parse(rj.out);
  CHECK(doc.at("summary").at("reached_target") == true);
  CHECK(doc.at("epochs").size() == 1);

  // an unreachable target exits 1
  cfg["target_acc"] = 2.0;
  cfg["epochs"] = 1;
  std::ofstream(cfg_path) << cfg.dump();
  CHECK(run_cli({"train-toy", "--config", cfg_path}).code == 1);
  std::remove(cfg_path.c_str());
}

TEST_CASE("train-toy writes a run directory when asked") {
  json cfg;
  cfg["samples"] = 16;
  cfg["batch_size"] = 8;
  cfg["epochs"] = 1;
  cfg["target_acc"] = 0.0;
  const auto cfg_path = temp_file("accvit_cli_train_dir.json").string();
  std::ofstream(cfg_path) << cfg.dump();
  const auto run_dir = temp_file("accvit_cli_run").string();
  REQUIRE(run_cli({"train-toy", "--config", cfg_path, "--out", run_dir}).code == 0);
  CHECK(std::filesystem::exists(run_dir + "/metrics.jsonl"));
  CHECK(std::filesystem::exists(run_dir + "/params.avp"));
  std::filesystem::remove_all(run_dir);
  std::remove(cfg_path.c_str());
}

TEST_CASE("bench reports branch structure for stage one") {
  const auto r = run_cli({"bench", "--stage", "1", "--resolution", "224", "--variant", "tiny"});
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  CHECK(j.at("attention_branches") == 4);  // L = 3 plus the undilated branch
  CHECK(j.at("dilation_rates") == json({2, 4, 8}));
  CHECK(j.at("side") == 56);
  CHECK(j.at("attention_us").get<double>() > 0.0);
  CHECK(j.at("attention_mac_per_s").get<double>() > 0.0);
  CHECK(run_cli({"bench", "--stage", "7", "--resolution", "224"}).code == 2);
}

TEST_CASE("usage errors exit 2 and help exits 0") {
  CHECK(run_cli({}).code == 2);
  CHECK(run_cli({"frobnicate"}).code == 2);
  CHECK(run_cli({"describe", "--no-such-flag"}).code == 2);
  CHECK(run_cli({"--help"}).code == 0);
}
