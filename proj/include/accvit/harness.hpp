#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "accvit/io.hpp"
#include "accvit/model.hpp"

// Verification and demonstration: finite-difference gradient checking of
// every block, a synthetic bars dataset, and a deterministic desk-scale
// training loop that shows the whole stack learns end to end.

namespace accvit {

// ---------------------------------------------------------------------------
// Synthetic bars dataset
// ---------------------------------------------------------------------------

// Class 0 draws a horizontal bar, class 1 a vertical one; width, position and
// per-channel contrast are sampled before the orientation is applied, so the
// two classes have identical marginal statistics (equal bar energy) and only
// the spatial structure separates them. Generation is a pure function of
// (seed, index); labels alternate, so any prefix of even length is balanced.
struct ToySpec {
  std::uint64_t seed = 0;
  int n_samples = 256;
  std::int64_t image_size = 64;
  double noise_sigma = 0.1;
};

struct ToySample {
  Tensor<float> image;  // (3, S, S)
  int label = 0;
  double bar_energy = 0.0;  // noiseless sum of bar pixel values
};

inline ToySample gen_toy_sample(const ToySpec& spec, int index) {
  if (spec.n_samples < 2) throw ConfigError("ToySpec: need at least 2 samples");
  const std::int64_t s = spec.image_size;
  Rng rng = Rng::fork(spec.seed, static_cast<std::uint64_t>(index));
  const std::int64_t width = 4 + static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(s / 4 - 3)));
  const std::int64_t pos = static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(s - width + 1)));
  std::array<double, 3> contrast{};
  for (auto& c : contrast) c = 0.5 + 0.5 * rng.uniform();
  ToySample sample;
  sample.label = index % 2;
  sample.image = Tensor<float>::zeros(Shape{3, s, s});
  auto px = sample.image.data_mut();
  for (int ch = 0; ch < 3; ++ch)
    for (std::int64_t i = 0; i < s; ++i)
      for (std::int64_t j = 0; j < s; ++j) {
        const std::int64_t along = sample.label == 0 ? i : j;
        const bool on_bar = along >= pos && along < pos + width;
        double v = on_bar ? contrast[static_cast<std::size_t>(ch)] : 0.0;
        sample.bar_energy += v;
        v += spec.noise_sigma * rng.normal();
        px[static_cast<std::size_t>((ch * s + i) * s + j)] = static_cast<float>(v);
      }
  return sample;
}

inline std::vector<ToySample> gen_toy(const ToySpec& spec) {
  std::vector<ToySample> out;
  out.reserve(static_cast<std::size_t>(spec.n_samples));
  for (int i = 0; i < spec.n_samples; ++i) out.push_back(gen_toy_sample(spec, i));
  return out;
}

// Stacks (3,S,S) images into one (N,3,S,S) batch.
inline Tensor<float> stack_images(const std::vector<ToySample>& samples, const std::vector<int>& indices) {
  if (indices.empty()) throw UsageError("stack_images: empty batch");
  const auto& first = samples[static_cast<std::size_t>(indices[0])].image;
  const std::int64_t per = first.numel();
  Tensor<float> batch(Shape{static_cast<std::int64_t>(indices.size()), first.dim(0), first.dim(1), first.dim(2)});
  auto dst = batch.data_mut();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto src = samples[static_cast<std::size_t>(indices[b])].image.data();
    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(b * static_cast<std::size_t>(per)));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Gradient checking (double precision, central differences)
// ---------------------------------------------------------------------------

struct GradCheckReport {
  std::string component;
  int coordinates = 0;
  double max_rel_err = 0.0;
  double threshold = 1e-4;
  bool pass = false;
};

namespace gradcheck_detail {

struct Problem {
  ParamList<double> params;                     // every tensor requires grad
  std::function<Tensor<double>()> loss;         // scalar loss of current values
};

inline double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
}

inline GradCheckReport run(const std::string& name, Problem problem, std::uint64_t seed, int coords_per_tensor) {
  GradCheckReport report;
  report.component = name;
  // analytic gradients via one taped pass
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    auto l = problem.loss();
    tape.backward(l);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(problem.params.size());
  for (auto& p : problem.params) {
    const auto g = p.tensor.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(static_cast<std::size_t>(p.tensor.numel()), 0.0);
  }
  Rng rng(seed ^ 0xabcdef12345ULL);
  for (std::size_t t = 0; t < problem.params.size(); ++t) {
    auto values = problem.params[t].tensor.data_mut();
    const int coords = static_cast<int>(std::min<std::int64_t>(coords_per_tensor, problem.params[t].tensor.numel()));
    for (int k = 0; k < coords; ++k) {
      const std::size_t idx = static_cast<std::size_t>(rng.uniform_index(static_cast<std::uint64_t>(values.size())));
      const double theta = values[idx];
      const double h = 1e-4 * std::max(1.0, std::abs(theta));
      values[idx] = theta + h;
      const double fp = problem.loss().at(0);
      values[idx] = theta - h;
      const double fm = problem.loss().at(0);
      values[idx] = theta;
      const double numeric = (fp - fm) / (2.0 * h);
      report.max_rel_err = std::max(report.max_rel_err, rel_err(analytic[t][idx], numeric));
      ++report.coordinates;
    }
  }
  report.pass = report.max_rel_err <= report.threshold;
  return report;
}

// loss = sum(out (.) U) for a fixed random projection U, so every output
// coordinate influences the check.
inline Tensor<double> project(const Tensor<double>& out, const Tensor<double>& u) { return sum_all(mul(out, u)); }

inline Problem gate_problem(std::uint64_t seed) {
  Rng rng(seed);
  const std::int64_t c = 4, n = 2, h = 4, w = 4;
  const int k = 3;
  auto params = GateParams<double>::make(k, c, rng);
  auto x = Tensor<double>::uniform(Shape{n, c, h, w}, -1.0, 1.0, rng).set_requires_grad(true);
  std::vector<Tensor<double>> branches;
  for (int i = 0; i < k; ++i) branches.push_back(Tensor<double>::uniform(Shape{n, c, h, w}, -1.0, 1.0, rng).set_requires_grad(true));
  auto u = Tensor<double>::uniform(Shape{n, c, h, w}, -1.0, 1.0, rng);
  Problem p;
  p.params = {{"gate.weight", params.weight.set_requires_grad(true)},
              {"gate.bias", params.bias.set_requires_grad(true)},
              {"x", x}};
  for (int i = 0; i < k; ++i) p.params.push_back({"branch" + std::to_string(i), branches[static_cast<std::size_t>(i)]});
  p.loss = [params, x, branches, u] { return project(fuse(branches, compute_gates(x, params)), u); };
  return p;
}

inline Problem wmhsa_problem(std::uint64_t seed) {
  Rng rng(seed);
  const std::int64_t c = 8, b = 2;
  const int window = 3;
  auto params = WMHSAParams<double>::make(c, window, /*head_dim=*/4, rng);
  params.qkv_w.set_requires_grad(true);
  params.qkv_b.set_requires_grad(true);
  params.out_w.set_requires_grad(true);
  params.out_b.set_requires_grad(true);
  params.rel_table = Tensor<double>::uniform(params.rel_table.shape(), -0.5, 0.5, rng).set_requires_grad(true);
  auto x = Tensor<double>::uniform(Shape{b, window * window, c}, -1.0, 1.0, rng).set_requires_grad(true);
  auto u = Tensor<double>::uniform(x.shape(), -1.0, 1.0, rng);
  Problem p;
  p.params = {{"qkv_w", params.qkv_w}, {"qkv_b", params.qkv_b}, {"out_w", params.out_w},
              {"out_b", params.out_b}, {"rel_table", params.rel_table}, {"x", x}};
  p.loss = [params, x, u] { return project(w_mhsa(x, params), u); };
  return p;
}

inline Problem atrous_attention_problem(std::uint64_t seed) {
  Rng rng(seed);
  const std::int64_t c = 16, h = 16;
  auto layer = AtrousAttentionLayer<double>::make(c, /*levels=*/1, /*window=*/4, h, h, /*head_dim=*/8, rng);
  auto x = Tensor<double>::uniform(Shape{1, c, h, h}, -1.0, 1.0, rng).set_requires_grad(true);
  auto u = Tensor<double>::uniform(x.shape(), -1.0, 1.0, rng);
  Problem p;
  layer.collect_params("layer", p.params);
  for (auto& np : p.params) np.tensor.set_requires_grad(true);
  p.params.push_back({"x", x});
  p.loss = [layer, x, u] { return project(layer.forward(x), u); };
  return p;
}

inline Problem atrous_ir_conv_problem(std::uint64_t seed) {
  Rng rng(seed);
  const std::int64_t c = 8, h = 8;
  auto block = AtrousIRConvBlock<double>::make(c, c, /*stride=*/1, rng);
  auto x = Tensor<double>::uniform(Shape{1, c, h, h}, -1.0, 1.0, rng).set_requires_grad(true);
  auto u = Tensor<double>::uniform(x.shape(), -1.0, 1.0, rng);
  Problem p;
  block.collect_params("block", p.params);
  for (auto& np : p.params) np.tensor.set_requires_grad(true);
  p.params.push_back({"x", x});
  p.loss = [block, x, u] { return project(block.forward(x), u); };
  return p;
}

inline VariantConfig micro_2stage_config() {
  VariantConfig cfg;
  cfg.name = "micro-2stage";
  cfg.stem_channels = 8;
  cfg.stages = {{1, 8, 1}, {1, 16, 0}};
  cfg.window = 2;
  cfg.head_dim = 4;
  cfg.num_classes = 2;
  return cfg;
}

inline Problem micro_model_problem(std::uint64_t seed) {
  auto model = build_model<double>(micro_2stage_config(), /*resolution=*/16, seed);
  Rng rng(seed + 1);
  auto images = Tensor<double>::uniform(Shape{2, 3, 16, 16}, -1.0, 1.0, rng);
  const std::vector<int> labels = {0, 1};
  Problem p;
  p.params = model.parameters();
  p.loss = [model, images, labels] { return cross_entropy_logits(model.forward(images), labels, 0.1); };
  return p;
}

}  // namespace gradcheck_detail

// Central-difference gradient verification for one named component at micro
// scale. Components: gate, wmhsa, atrous_attention, atrous_ir_conv,
// micro_model.
inline GradCheckReport gradcheck(const std::string& component, std::uint64_t seed, int coords_per_tensor = 4) {
  using namespace gradcheck_detail;
  if (component == "gate") return run(component, gate_problem(seed), seed, std::max(coords_per_tensor, 8));
  if (component == "wmhsa") return run(component, wmhsa_problem(seed), seed, std::max(coords_per_tensor, 6));
  if (component == "atrous_attention") return run(component, atrous_attention_problem(seed), seed, coords_per_tensor);
  if (component == "atrous_ir_conv") return run(component, atrous_ir_conv_problem(seed), seed, coords_per_tensor);
  if (component == "micro_model") return run(component, micro_model_problem(seed), seed, coords_per_tensor);
  throw ConfigError("gradcheck: unknown component '" + component +
                    "' (known: gate, wmhsa, atrous_attention, atrous_ir_conv, micro_model)");
}

inline const std::vector<std::string>& gradcheck_components() {
  static const std::vector<std::string> names = {"gate", "wmhsa", "atrous_attention", "atrous_ir_conv", "micro_model"};
  return names;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

template <typename T>
class AdamW {
 public:
  AdamW(ParamList<T> params, double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(static_cast<std::size_t>(params_[i].tensor.numel()), 0.0);
      v_[i].assign(static_cast<std::size_t>(params_[i].tensor.numel()), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // Decoupled weight decay, bias-corrected moments.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].tensor;
      if (!p.requires_grad()) continue;
      auto values = p.data_mut();
      for (std::size_t j = 0; j < values.size(); ++j) {
        const double g = static_cast<double>(p.grad_at(static_cast<std::int64_t>(j)));
        double& m = m_[i][j];
        double& v = v_[i][j];
        m = beta1_ * m + (1.0 - beta1_) * g;
        v = beta2_ * v + (1.0 - beta2_) * g * g;
        const double update = (m / bc1) / (std::sqrt(v / bc2) + eps_) + wd_ * static_cast<double>(values[j]);
        values[j] = static_cast<T>(static_cast<double>(values[j]) - lr_ * update);
      }
    }
  }

 private:
  ParamList<T> params_;
  double lr_, wd_, beta1_, beta2_, eps_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Desk-scale training
// ---------------------------------------------------------------------------

// Reduced model that keeps every mechanism exercised at 64x64 input.
inline VariantConfig micro_variant() {
  VariantConfig cfg;
  cfg.name = "micro";
  cfg.stem_channels = 16;
  cfg.stages = {{1, 16, 3}, {1, 32, 2}, {1, 64, 1}, {1, 128, 0}};
  cfg.window = 4;
  cfg.head_dim = 8;
  cfg.num_classes = 2;
  return cfg;
}

struct TrainConfig {
  VariantConfig model = micro_variant();
  std::int64_t resolution = 64;
  int epochs = 50;
  int batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double label_smoothing = 0.1;
  int samples = 256;
  std::uint64_t seed = 7;
  double target_acc = 0.95;  // stop early once train accuracy reaches this
  double noise_sigma = 0.1;
  bool freeze_gates = false;  // pin all gates at uniform fusion
  std::string out_dir;

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("model")) c.model = VariantConfig::from_json(j.at("model"));
    c.resolution = j.value("resolution", c.resolution);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
    c.samples = j.value("samples", c.samples);
    c.seed = j.value("seed", c.seed);
    c.target_acc = j.value("target_acc", c.target_acc);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.freeze_gates = j.value("freeze_gates", c.freeze_gates);
    c.out_dir = j.value("out_dir", c.out_dir);
    return c;
  }

  static TrainConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open train config '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("malformed train config '" + path + "': " + e.what());
    }
    return from_json(j);
  }
};

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double heldout_acc = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  int epochs_run = 0;
  double final_train_acc = 0.0;
  bool reached_target = false;
  bool diverged = false;
  int diverged_epoch = -1;
};

namespace train_detail {

inline int argmax_row(std::span<const float> logits, std::int64_t row, std::int64_t k) {
  int best = 0;
  for (std::int64_t j = 1; j < k; ++j)
    if (logits[static_cast<std::size_t>(row * k + j)] > logits[static_cast<std::size_t>(row * k + best)]) best = static_cast<int>(j);
  return best;
}

inline nlohmann::json metrics_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch}, {"loss", m.loss}, {"train_acc", m.train_acc}, {"heldout_acc", m.heldout_acc}};
}

}  // namespace train_detail

// Deterministic training on the bars dataset. Emits one JSON object per
// epoch to `metrics_stream` (and to <out_dir>/metrics.jsonl when set);
// divergence (non-finite loss) stops the run and is reported, not thrown.
inline TrainResult train_toy(const TrainConfig& cfg, std::ostream* metrics_stream = nullptr) {
  ToySpec spec{cfg.seed, cfg.samples, cfg.resolution, cfg.noise_sigma};
  const auto data = gen_toy(spec);
  int n_train = cfg.samples * 4 / 5;
  n_train -= n_train % 2;  // alternating labels: even prefix stays balanced
  std::vector<int> train_idx(static_cast<std::size_t>(n_train));
  for (int i = 0; i < n_train; ++i) train_idx[static_cast<std::size_t>(i)] = i;
  std::vector<int> held_idx;
  for (int i = n_train; i < cfg.samples; ++i) held_idx.push_back(i);

  auto model = build_model<float>(cfg.model, cfg.resolution, cfg.seed);
  auto params = model.parameters();
  if (cfg.freeze_gates) {
    for (auto& p : params)
      if (p.name.find(".gate.") != std::string::npos) {
        auto vals = p.tensor.data_mut();
        std::fill(vals.begin(), vals.end(), 0.0f);
        p.tensor.set_requires_grad(false);
      }
  }
  AdamW<float> opt(params, cfg.lr, cfg.weight_decay);

  std::ofstream run_log;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    run_log.open(cfg.out_dir + "/metrics.jsonl");
  }

  const auto evaluate = [&](const std::vector<int>& indices) {
    if (indices.empty()) return 0.0;
    int correct = 0;
    auto batch = stack_images(data, indices);
    auto logits = model.forward(batch);
    for (std::size_t b = 0; b < indices.size(); ++b)
      if (train_detail::argmax_row(logits.data(), static_cast<std::int64_t>(b), logits.dim(1)) ==
          data[static_cast<std::size_t>(indices[b])].label)
        ++correct;
    return static_cast<double>(correct) / static_cast<double>(indices.size());
  };

  TrainResult result;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // deterministic shuffle per epoch
    Rng shuffle_rng = Rng::fork(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch));
    std::vector<int> order = train_idx;
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_index(i))]);

    double loss_sum = 0.0;
    int correct = 0, seen = 0;
    for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), off + static_cast<std::size_t>(cfg.batch_size));
      const std::vector<int> batch_idx(order.begin() + static_cast<std::ptrdiff_t>(off), order.begin() + static_cast<std::ptrdiff_t>(end));
      auto batch = stack_images(data, batch_idx);
      std::vector<int> labels;
      for (const int i : batch_idx) labels.push_back(data[static_cast<std::size_t>(i)].label);

      Tape<float> tape;
      Tensor<float> loss;
      {
        Tape<float>::Scope scope(tape);
        auto logits = model.forward(batch);
        for (std::size_t b = 0; b < batch_idx.size(); ++b)
          if (train_detail::argmax_row(logits.data(), static_cast<std::int64_t>(b), logits.dim(1)) == labels[b]) ++correct;
        loss = cross_entropy_logits(logits, labels, cfg.label_smoothing);
      }
      if (!std::isfinite(static_cast<double>(loss.at(0)))) {
        result.diverged = true;
        result.diverged_epoch = epoch;
        result.epochs_run = epoch;
        return result;
      }
      tape.backward(loss);
      opt.step();
      opt.zero_grad();
      loss_sum += static_cast<double>(loss.at(0)) * static_cast<double>(batch_idx.size());
      seen += static_cast<int>(batch_idx.size());
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.loss = loss_sum / static_cast<double>(seen);
    m.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    m.heldout_acc = evaluate(held_idx);
    result.epochs.push_back(m);
    result.epochs_run = epoch;
    result.final_train_acc = m.train_acc;
    const auto line = train_detail::metrics_json(m).dump();
    if (metrics_stream) (*metrics_stream) << line << "\n";
    if (run_log) run_log << line << "\n";
    if (m.train_acc >= cfg.target_acc) {
      result.reached_target = true;
      break;
    }
  }
  if (!cfg.out_dir.empty()) io::save_parameters(cfg.out_dir + "/params.avp", params);
  return result;
}

// ---------------------------------------------------------------------------
// Micro-benchmarks
// ---------------------------------------------------------------------------

struct BenchReport {
  int stage = 0;
  std::int64_t resolution = 0;
  std::int64_t channels = 0;
  std::int64_t side = 0;
  int attention_branches = 0;
  std::vector<int> dilation_rates;
  double partition_us = 0.0;
  double attention_us = 0.0;
  double conv_us = 0.0;
  std::int64_t attention_macs = 0;
  std::int64_t conv_macs = 0;
};

// Wall-clock for one stage's partition/attention/conv at the given input
// resolution (single image).
inline BenchReport bench_stage(const VariantConfig& cfg, int stage, std::int64_t resolution, std::uint64_t seed = 1) {
  if (stage < 1 || stage > static_cast<int>(cfg.stages.size()))
    throw ConfigError("bench: stage must be 1.." + std::to_string(cfg.stages.size()));
  check_resolution(cfg, resolution);
  const auto sides = stage_sides(cfg, resolution);
  const auto& spec = cfg.stages[static_cast<std::size_t>(stage - 1)];
  const std::int64_t side = sides[static_cast<std::size_t>(stage)];

  Rng rng(seed);
  auto x = Tensor<float>::uniform(Shape{1, spec.channels, side, side}, -1.0, 1.0, rng);
  auto attn = AtrousAttentionLayer<float>::make(spec.channels, spec.dilation_levels, cfg.window, side, side, cfg.head_dim, rng);
  auto conv = AtrousIRConvBlock<float>::make(spec.channels, spec.channels, 1, rng);

  const auto time_us = [](auto&& fn) {
    fn();  // warm up
    double best = 1e30;
    for (int rep = 0; rep < 3; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      fn();
      const auto t1 = std::chrono::steady_clock::now();
      best = std::min(best, std::chrono::duration<double, std::micro>(t1 - t0).count());
    }
    return best;
  };

  BenchReport report;
  report.stage = stage;
  report.resolution = resolution;
  report.channels = spec.channels;
  report.side = side;
  report.attention_branches = spec.dilation_levels + 1;
  for (int k = 1; k <= spec.dilation_levels; ++k) report.dilation_rates.push_back(1 << k);
  report.partition_us = time_us([&] {
    for (int k = 1; k <= spec.dilation_levels; ++k) {
      const auto pspec = PartitionSpec::make(k, side, side);
      auto sub = partition_dilated(x, pspec);
      auto back = departition_dilated(sub, pspec);
      (void)back;
    }
  });
  report.attention_us = time_us([&] { (void)attn.forward(x); });
  report.conv_us = time_us([&] { (void)conv.forward(x); });
  report.attention_macs = flops::attention_layer(spec.channels, spec.dilation_levels, side, cfg.window);
  report.conv_macs = flops::conv_block(spec.channels, spec.channels, 1, side);
  return report;
}

}  // namespace accvit
