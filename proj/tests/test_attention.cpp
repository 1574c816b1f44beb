#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "accvit/attention.hpp"
#include "support/finite_diff.hpp"

using namespace accvit;
using Catch::Approx;

TEST_CASE("rel pos bias index arithmetic") {
  // zero table -> zero bias
  auto zero = rel_pos_bias(Tensor<double>::zeros(Shape{9, 2}), 2);
  REQUIRE(zero.shape() == Shape{2, 4, 4});
  for (std::int64_t i = 0; i < zero.numel(); ++i) CHECK(zero.at(i) == 0.0);

  // P=1: single offset
  Rng rng(1);
  auto t1 = Tensor<double>::uniform(Shape{1, 3}, -1.0, 1.0, rng);
  auto b1 = rel_pos_bias(t1, 1);
  REQUIRE(b1.shape() == Shape{3, 1, 1});
  for (int h = 0; h < 3; ++h) CHECK(b1.at(h) == t1.at(h));

  // P=2: query (0,0) vs key (1,1) reads offset index (1+1)*3 + (1+1) = 8
  auto t2 = Tensor<double>::uniform(Shape{9, 2}, -1.0, 1.0, rng);
  auto b2 = rel_pos_bias(t2, 2);
  CHECK(b2.at((0 * 4 + 0) * 4 + 3) == t2.at(8 * 2 + 0));  // head 0
  CHECK(b2.at((1 * 4 + 0) * 4 + 3) == t2.at(8 * 2 + 1));  // head 1

  // the index depends only on the relative offset
  const int p = 3;
  auto t3 = Tensor<double>::uniform(Shape{25, 1}, -1.0, 1.0, rng);
  auto b3 = rel_pos_bias(t3, p);
  for (int q = 0; q < p * p; ++q)
    for (int k = 0; k < p * p; ++k) {
      const int q2 = ((q / p + 1) % p) * p + q % p;  // shift both down a row
      const int k2 = ((k / p + 1) % p) * p + k % p;
      if (k / p - q / p == k2 / p - q2 / p && k % p - q % p == k2 % p - q2 % p)
        CHECK(b3.at(q * p * p + k) == b3.at(q2 * p * p + k2));
    }

  CHECK_THROWS_AS(rel_pos_bias(t2, 3), DimensionError);
}

TEST_CASE("head width picker takes the largest divisor") {
  CHECK(pick_head_dim(64, 32) == 32);
  CHECK(pick_head_dim(512, 32) == 32);
  CHECK(pick_head_dim(48, 32) == 24);
  CHECK(pick_head_dim(16, 32) == 16);
  CHECK(pick_head_dim(16, 8) == 8);
}

TEST_CASE("single-token window reduces to out_proj of V") {
  Rng rng(2);
  const std::int64_t c = 6;
  auto params = WMHSAParams<double>::make(c, /*window=*/1, /*head_dim=*/3, rng);
  auto qkv_b = Tensor<double>::uniform(Shape{3 * c}, -0.5, 0.5, rng);
  params.qkv_b = qkv_b;
  auto x = Tensor<double>::uniform(Shape{2, 1, c}, -1.0, 1.0, rng);
  auto y = w_mhsa(x, params);
  REQUIRE(y.shape() == x.shape());
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t o = 0; o < c; ++o) {
      // v = qkv rows [2c, 3c); out = out_w * v + out_b
      double expect = params.out_b.at(o);
      for (std::int64_t i = 0; i < c; ++i) {
        double v = qkv_b.at(2 * c + i);
        for (std::int64_t j = 0; j < c; ++j) v += params.qkv_w.at((2 * c + i) * c + j) * x.at(b * c + j);
        expect += params.out_w.at(o * c + i) * v;
      }
      CHECK(y.at(b * c + o) == Approx(expect).epsilon(1e-10));
    }
}

TEST_CASE("zero qkv weights give uniform attention and a constant output") {
  Rng rng(3);
  const std::int64_t c = 4;
  const int p = 2;
  auto params = WMHSAParams<double>::make(c, p, /*head_dim=*/2, rng);
  params.qkv_w = Tensor<double>::zeros(Shape{3 * c, c});
  params.qkv_b = Tensor<double>::uniform(Shape{3 * c}, -1.0, 1.0, rng);
  auto x = Tensor<double>::uniform(Shape{3, p * p, c}, -2.0, 2.0, rng);
  auto y = w_mhsa(x, params);
  // every token of every window: out = out_w * bias_v + out_b
  for (std::int64_t o = 0; o < c; ++o) {
    double expect = params.out_b.at(o);
    for (std::int64_t i = 0; i < c; ++i) expect += params.out_w.at(o * c + i) * params.qkv_b.at(2 * c + i);
    for (std::int64_t bt = 0; bt < 3 * p * p; ++bt) CHECK(y.at(bt * c + o) == Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("attention rows sum to one for random inputs") {
  Rng rng(4);
  const std::int64_t c = 8, b = 2;
  const int p = 3;
  auto params = WMHSAParams<double>::make(c, p, 4, rng);
  params.rel_table = Tensor<double>::uniform(params.rel_table.shape(), -0.5, 0.5, rng);
  auto windows = Tensor<double>::uniform(Shape{b, p * p, c}, -1.0, 1.0, rng);
  // replicate the logits path and check the softmax rows
  const std::int64_t t = p * p;
  auto tokens = reshape(windows, Shape{b * t, c});
  auto qkv = linear(tokens, params.qkv_w, params.qkv_b);
  const auto to_heads = [&](Tensor<double> m) {
    m = reshape(m, Shape{b, t, params.heads, params.head_dim});
    m = permute(m, {0, 2, 1, 3});
    return reshape(m, Shape{b * params.heads, t, params.head_dim});
  };
  auto q = to_heads(slice_dim(qkv, 1, 0, c));
  auto k = to_heads(slice_dim(qkv, 1, c, c));
  auto logits = detail::add_head_bias(scale(bmm_nt(q, k), 1.0 / std::sqrt(4.0)), rel_pos_bias(params.rel_table, p));
  auto attn = softmax_lastdim(logits);
  for (std::int64_t row = 0; row < b * params.heads * t; ++row) {
    double sum = 0;
    for (std::int64_t j = 0; j < t; ++j) sum += attn.at(row * t + j);
    CHECK(std::abs(sum - 1.0) <= 1e-6);
  }
  // and the full op runs with the same params
  auto y = w_mhsa(windows, params);
  CHECK(y.shape() == windows.shape());
  CHECK_FALSE(has_nonfinite(y));
}

TEST_CASE("token count must match the window") {
  Rng rng(5);
  auto params = WMHSAParams<double>::make(4, 2, 2, rng);
  auto bad = Tensor<double>::uniform(Shape{1, 5, 4}, -1.0, 1.0, rng);
  CHECK_THROWS_AS(w_mhsa(bad, params), DimensionError);
}

TEST_CASE("w_mhsa gradients match finite differences") {
  Rng rng(6);
  const std::int64_t c = 8;
  const int p = 2;
  auto params = WMHSAParams<double>::make(c, p, 4, rng);
  params.qkv_w.set_requires_grad(true);
  params.qkv_b.set_requires_grad(true);
  params.out_w.set_requires_grad(true);
  params.out_b.set_requires_grad(true);
  params.rel_table = Tensor<double>::uniform(params.rel_table.shape(), -0.3, 0.3, rng).set_requires_grad(true);
  auto x = Tensor<double>::uniform(Shape{2, p * p, c}, -1.0, 1.0, rng).set_requires_grad(true);
  auto u = Tensor<double>::uniform(x.shape(), -1.0, 1.0, rng);
  Rng coords(7);
  auto r = testsupport::check_gradients([params, x, u] { return sum_all(mul(w_mhsa(x, params), u)); },
                                        {params.qkv_w, params.qkv_b, params.out_w, params.out_b, params.rel_table, x},
                                        coords, 12);
  CHECK(r.max_rel_err <= 1e-4);
}

TEST_CASE("layer with L=0 reduces to a plain windowed transformer block") {
  Rng rng(8);
  const std::int64_t c = 8, side = 8;
  auto layer = AtrousAttentionLayer<double>::make(c, 0, 4, side, side, 4, rng);
  auto x = Tensor<double>::uniform(Shape{2, c, side, side}, -1.0, 1.0, rng);
  auto got = layer.forward(x);

  // manual trace with the same parameters: singleton gate is exactly one
  const auto wspec = WindowSpec::make(4, side, side);
  auto normed = layer_norm_nchw(x, layer.pre_norm);
  auto y0 = add(departition_windows(w_mhsa(partition_windows(normed, wspec), layer.branches[0]), wspec, side, side), x);
  auto h = layer_norm_nchw(y0, layer.mlp_norm);
  h = pointwise_conv(h, layer.mlp_w1, layer.mlp_b1);
  h = gelu(h);
  h = pointwise_conv(h, layer.mlp_w2, layer.mlp_b2);
  auto expect = add(h, y0);
  CHECK(bit_equal(got, expect));
}

TEST_CASE("constant path: zero attention weights fuse to branch-mean plus MLP") {
  Rng rng(9);
  const std::int64_t c = 4, side = 8;
  auto layer = AtrousAttentionLayer<double>::make(c, 1, 2, side, side, 2, rng);
  // zero every attention path except the per-branch output bias
  std::vector<Tensor<double>> branch_bias;
  for (auto& br : layer.branches) {
    br.qkv_w = Tensor<double>::zeros(br.qkv_w.shape());
    br.qkv_b = Tensor<double>::zeros(br.qkv_b.shape());
    br.out_w = Tensor<double>::zeros(br.out_w.shape());
    br.out_b = Tensor<double>::uniform(Shape{c}, -1.0, 1.0, rng);
    branch_bias.push_back(br.out_b);
  }
  layer.gate.weight = Tensor<double>::zeros(layer.gate.weight.shape());
  layer.gate.bias = Tensor<double>::zeros(layer.gate.bias.shape());
  auto x = Tensor<double>::uniform(Shape{1, c, side, side}, -1.0, 1.0, rng);
  auto got = layer.forward(x);

  // y_k = x + out_b_k broadcast; uniform gate -> y_fused = x + mean_k(out_b_k)
  Tensor<double> fused(x.shape());
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double mean = (branch_bias[0].at(ch) + branch_bias[1].at(ch)) / 2.0;
    for (std::int64_t px = 0; px < side * side; ++px)
      fused.data_mut()[static_cast<std::size_t>(ch * side * side + px)] = x.at(ch * side * side + px) + mean;
  }
  auto h = layer_norm_nchw(fused, layer.mlp_norm);
  h = pointwise_conv(h, layer.mlp_w1, layer.mlp_b1);
  h = gelu(h);
  h = pointwise_conv(h, layer.mlp_w2, layer.mlp_b2);
  auto expect = add(h, fused);
  CHECK(max_abs_diff(got, expect) <= 1e-12);
}

TEST_CASE("layer preserves shape across variant stage configurations") {
  Rng rng(10);
  struct StageCase {
    std::int64_t channels;
    int levels;
    std::int64_t side;
  };
  // tiny and femto stage geometry at 224 input (sides 56, 28, 14, 7)
  const StageCase cases[] = {{64, 3, 56}, {128, 2, 28}, {256, 1, 14}, {512, 0, 7},
                             {32, 3, 56}, {64, 2, 28}, {128, 1, 14}, {256, 0, 7}};
  for (const auto& sc : cases) {
    auto layer = AtrousAttentionLayer<float>::make(sc.channels, sc.levels, 7, sc.side, sc.side, 32, rng);
    CHECK(static_cast<int>(layer.branches.size()) == sc.levels + 1);
    auto x = Tensor<float>::uniform(Shape{1, sc.channels, sc.side, sc.side}, -1.0, 1.0, rng);
    auto y = layer.forward(x);
    CHECK(y.shape() == x.shape());
    CHECK_FALSE(has_nonfinite(y));
  }
}

TEST_CASE("layer parameter count matches the closed form") {
  Rng rng(11);
  for (const int levels : {0, 1, 2, 3}) {
    const std::int64_t c = 32, side = 32;
    const int window = 4;
    auto layer = AtrousAttentionLayer<double>::make(c, levels, window, side, side, 8, rng);
    ParamList<double> params;
    layer.collect_params("layer", params);
    std::int64_t total = 0;
    for (const auto& p : params) total += p.tensor.numel();

    const std::int64_t heads = c / 8;
    std::int64_t expect = 0;
    for (const auto& br : layer.branches) {
      const std::int64_t pk = br.window;
      expect += 3 * c * c + 3 * c + c * c + c + (2 * pk - 1) * (2 * pk - 1) * heads;
    }
    const std::int64_t k = levels + 1;
    expect += k * c * c + k * c;       // gate
    expect += 2 * (2 * c);             // two layer norms
    expect += 4 * c * c + 4 * c + c * 4 * c + c;  // one shared MLP
    CHECK(total == expect);

    // exactly one shared MLP regardless of branch count
    int mlp_tensors = 0;
    for (const auto& p : params)
      if (p.name.find(".mlp.") != std::string::npos) ++mlp_tensors;
    CHECK(mlp_tensors == 4);
  }
}

TEST_CASE("construction rejects indivisible geometry") {
  Rng rng(12);
  CHECK_THROWS_AS(AtrousAttentionLayer<float>::make(8, 2, 4, 10, 10, 4, rng), ConfigError);
  auto layer = AtrousAttentionLayer<float>::make(8, 1, 4, 8, 8, 4, rng);
  auto bad = Tensor<float>::uniform(Shape{1, 8, 16, 16}, -1.0, 1.0, rng);
  CHECK_THROWS_AS(layer.forward(bad), DimensionError);
}

TEST_CASE("full atrous layer gradients match finite differences") {
  Rng rng(13);
  const std::int64_t c = 8, side = 8;
  auto layer = AtrousAttentionLayer<double>::make(c, 1, 2, side, side, 4, rng);
  ParamList<double> params;
  layer.collect_params("layer", params);
  for (auto& p : params) p.tensor.set_requires_grad(true);
  auto x = Tensor<double>::uniform(Shape{1, c, side, side}, -1.0, 1.0, rng).set_requires_grad(true);
  auto u = Tensor<double>::uniform(x.shape(), -1.0, 1.0, rng);
  std::vector<Tensor<double>> check;
  for (auto& p : params) check.push_back(p.tensor);
  check.push_back(x);
  Rng coords(14);
  auto r = testsupport::check_gradients([layer, x, u] { return sum_all(mul(layer.forward(x), u)); }, check, coords, 3);
  CHECK(r.max_rel_err <= 1e-4);
}
