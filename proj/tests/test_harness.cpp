#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "accvit/harness.hpp"

using namespace accvit;
using Catch::Approx;

TEST_CASE("toy dataset is a pure function of seed and index") {
  const ToySpec spec{11, 8, 32, 0.1};
  auto a = gen_toy(spec);
  auto b = gen_toy(spec);
  REQUIRE(a.size() == 8);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(bit_equal(a[i].image, b[i].image));
    CHECK(a[i].label == b[i].label);
  }
  const ToySpec other{12, 8, 32, 0.1};
  CHECK_FALSE(bit_equal(gen_toy(other)[0].image, a[0].image));
}

TEST_CASE("toy dataset is exactly balanced and bar-shaped") {
  const ToySpec spec{3, 64, 32, 0.0};  // noiseless for structural checks
  auto data = gen_toy(spec);
  int counts[2] = {0, 0};
  for (const auto& s : data) ++counts[s.label];
  CHECK(counts[0] == 32);
  CHECK(counts[1] == 32);

  for (const auto& s : data) {
    REQUIRE(s.image.shape() == Shape{3, 32, 32});
    // noiseless: class 0 rows are constant, class 1 columns are constant
    const auto px = s.image.data();
    for (std::int64_t i = 0; i < 32; ++i)
      for (std::int64_t j = 1; j < 32; ++j) {
        if (s.label == 0)
          CHECK(px[static_cast<std::size_t>(i * 32 + j)] == px[static_cast<std::size_t>(i * 32)]);
        else
          CHECK(px[static_cast<std::size_t>(j * 32 + i)] == px[static_cast<std::size_t>(i)]);
      }
  }
}

TEST_CASE("toy classes have indistinguishable bar energy") {
  const ToySpec spec{5, 512, 64, 0.1};
  double energy[2] = {0.0, 0.0};
  for (int i = 0; i < spec.n_samples; ++i) {
    const auto s = gen_toy_sample(spec, i);
    energy[s.label] += s.bar_energy;
  }
  // widths, positions and contrasts are drawn before orientation, so the
  // per-class sums agree up to sampling noise
  CHECK(energy[0] / energy[1] == Approx(1.0).margin(0.1));
}

TEST_CASE("gradcheck passes for every named component") {
  for (const auto& component : gradcheck_components()) {
    const auto report = gradcheck(component, /*seed=*/1);
    INFO(component << ": max_rel_err=" << report.max_rel_err << " over " << report.coordinates << " coords");
    CHECK(report.pass);
    CHECK(report.max_rel_err <= 1e-4);
    CHECK(report.coordinates > 0);
  }
  CHECK_THROWS_AS(gradcheck("bogus", 1), ConfigError);
}

TEST_CASE("adamw updates every tensor that received gradient") {
  auto model = build_model<float>(gradcheck_detail::micro_2stage_config(), 16, 5);
  auto params = model.parameters();
  std::vector<std::vector<float>> before;
  for (const auto& p : params) before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());

  Rng rng(6);
  auto images = Tensor<float>::uniform(Shape{4, 3, 16, 16}, -1.0, 1.0, rng);
  const std::vector<int> labels = {0, 1, 0, 1};
  AdamW<float> opt(params, 1e-3, 0.05);
  Tape<float> tape;
  Tensor<float> loss;
  {
    Tape<float>::Scope scope(tape);
    loss = cross_entropy_logits(model.forward(images), labels, 0.1f);
  }
  tape.backward(loss);
  opt.step();

  for (std::size_t t = 0; t < params.size(); ++t) {
    double gmax = 0.0;
    for (std::int64_t i = 0; i < params[t].tensor.numel(); ++i)
      gmax = std::max(gmax, std::abs(static_cast<double>(params[t].tensor.grad_at(i))));
    if (gmax == 0.0) continue;
    bool changed = false;
    for (std::int64_t i = 0; i < params[t].tensor.numel() && !changed; ++i)
      changed = params[t].tensor.at(i) != before[t][static_cast<std::size_t>(i)];
    INFO(params[t].name << " with |g|max=" << gmax);
    CHECK(changed);
  }
}

namespace {

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.samples = 40;
  cfg.batch_size = 8;
  cfg.epochs = 2;
  cfg.target_acc = 2.0;  // never early-stop
  cfg.seed = 9;
  return cfg;
}

}  // namespace

TEST_CASE("epoch one loss sits at ln 2 for the zero-initialized head") {
  auto cfg = quick_config();
  cfg.epochs = 1;
  const auto result = train_toy(cfg);
  REQUIRE(result.epochs.size() == 1);
  CHECK(std::abs(result.epochs[0].loss - std::log(2.0)) <= 0.1);
}

TEST_CASE("zero learning rate stays exactly at chance") {
  auto cfg = quick_config();
  cfg.lr = 0.0;
  const auto result = train_toy(cfg);
  // zero head + zero lr: logits stay zero, argmax ties resolve to class 0,
  // and the alternating labels make that exactly one half
  for (const auto& m : result.epochs) {
    CHECK(m.train_acc == Approx(0.5));
    CHECK(m.loss == Approx(std::log(2.0)).margin(1e-6));
  }
}

TEST_CASE("training metrics replay bit-identically for one seed") {
  auto cfg = quick_config();
  std::ostringstream first_stream, second_stream;
  const auto first = train_toy(cfg, &first_stream);
  const auto second = train_toy(cfg, &second_stream);
  REQUIRE(first.epochs.size() == second.epochs.size());
  for (std::size_t i = 0; i < first.epochs.size(); ++i) {
    CHECK(first.epochs[i].loss == second.epochs[i].loss);
    CHECK(first.epochs[i].train_acc == second.epochs[i].train_acc);
    CHECK(first.epochs[i].heldout_acc == second.epochs[i].heldout_acc);
  }
  CHECK(first_stream.str() == second_stream.str());

  auto other = cfg;
  other.seed = 10;
  const auto third = train_toy(other);
  bool differs = false;
  for (std::size_t i = 0; i < first.epochs.size(); ++i) differs = differs || third.epochs[i].loss != first.epochs[i].loss;
  CHECK(differs);
}

TEST_CASE("frozen gates stay at uniform while the rest trains") {
  // mechanism check at one step
  auto model = build_model<float>(gradcheck_detail::micro_2stage_config(), 16, 8);
  auto params = model.parameters();
  for (auto& p : params)
    if (p.name.find(".gate.") != std::string::npos) {
      auto v = p.tensor.data_mut();
      std::fill(v.begin(), v.end(), 0.0f);
      p.tensor.set_requires_grad(false);
    }
  AdamW<float> opt(params, 1e-3, 0.05);
  Rng rng(7);
  auto images = Tensor<float>::uniform(Shape{4, 3, 16, 16}, -1.0, 1.0, rng);
  Tape<float> tape;
  Tensor<float> loss;
  {
    Tape<float>::Scope scope(tape);
    loss = cross_entropy_logits(model.forward(images), {0, 1, 0, 1}, 0.1f);
  }
  tape.backward(loss);
  opt.step();
  opt.step();  // weight decay alone must not move frozen tensors either
  for (const auto& p : params)
    if (p.name.find(".gate.") != std::string::npos)
      for (std::int64_t i = 0; i < p.tensor.numel(); ++i) CHECK(p.tensor.at(i) == 0.0f);

  // end-to-end flag: runs, and a paired short run is recorded (not asserted)
  auto frozen_cfg = quick_config();
  frozen_cfg.freeze_gates = true;
  const auto frozen = train_toy(frozen_cfg);
  const auto learned = train_toy(quick_config());
  CHECK_FALSE(frozen.diverged);
  WARN("paired short-run losses (recorded, not asserted): frozen-gates="
       << frozen.epochs.back().loss << " learned-gates=" << learned.epochs.back().loss);
}

TEST_CASE("divergence is reported with the epoch index") {
  auto cfg = quick_config();
  cfg.lr = 1e6;  // force a blow-up
  cfg.epochs = 6;
  const auto result = train_toy(cfg);
  if (result.diverged) {
    CHECK(result.diverged_epoch >= 1);
    CHECK(result.epochs_run == result.diverged_epoch);
  } else {
    WARN("extreme learning rate did not diverge on this seed; nothing to assert");
  }
}

TEST_CASE("bench reports the stage dilation schedule") {
  const auto cfg = micro_variant();
  const auto report = bench_stage(cfg, 1, 64);
  CHECK(report.stage == 1);
  CHECK(report.attention_branches == 4);
  CHECK(report.dilation_rates == std::vector<int>{2, 4, 8});
  CHECK(report.attention_us > 0.0);
  CHECK(report.conv_us > 0.0);
  CHECK(report.attention_macs > 0);
  CHECK(report.conv_macs > 0);
  const auto s2 = bench_stage(cfg, 2, 64);
  CHECK(s2.attention_branches == 3);
  CHECK_THROWS_AS(bench_stage(cfg, 9, 64), ConfigError);
}
