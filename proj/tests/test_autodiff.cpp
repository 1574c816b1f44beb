#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "accvit/attention.hpp"
#include "accvit/gating.hpp"
#include "accvit/ops.hpp"
#include "accvit/partition.hpp"
#include "support/finite_diff.hpp"

using namespace accvit;
using Catch::Approx;
using testsupport::check_gradients;

TEST_CASE("tape usage errors") {
  auto x = Tensor<double>::full(Shape{1}, 2.0).set_requires_grad(true);
  Tape<double> tape;
  CHECK_THROWS_AS(tape.backward(x), UsageError);  // leaf never recorded on this tape
  Tensor<double> loss;
  {
    Tape<double>::Scope scope(tape);
    loss = sum_all(mul(x, x));
    Tape<double> nested;
    CHECK_THROWS_AS(Tape<double>::Scope{nested}, UsageError);  // single writer
  }
  Tape<double> other;
  CHECK_THROWS_AS(other.backward(loss), UsageError);  // wrong tape
  tape.backward(loss);
  CHECK(x.grad_at(0) == Approx(4.0));  // d(x^2)/dx = 2x
  CHECK_THROWS_AS(tape.backward(loss), UsageError);  // tape already replayed
}

TEST_CASE("loss sum of squares has gradient 2x") {
  Rng rng(1);
  auto x = Tensor<double>::uniform(Shape{3, 4}, -2.0, 2.0, rng).set_requires_grad(true);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    tape.backward(sum_all(mul(x, x)));
  }
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad_at(i) == Approx(2.0 * x.at(i)).epsilon(1e-12));
}

TEST_CASE("d sum(A*B) / dA equals ones * B^T") {
  Rng rng(2);
  auto a = Tensor<double>::uniform(Shape{3, 4}, -1.0, 1.0, rng).set_requires_grad(true);
  auto b = Tensor<double>::uniform(Shape{4, 5}, -1.0, 1.0, rng).set_requires_grad(true);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    tape.backward(sum_all(matmul(a, b)));
  }
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t p = 0; p < 4; ++p) {
      double expect = 0.0;  // row sum of B
      for (std::int64_t j = 0; j < 5; ++j) expect += b.at(p * 5 + j);
      CHECK(a.grad_at(i * 4 + p) == Approx(expect).epsilon(1e-12));
    }
  // also against the finite-difference oracle
  auto a2 = Tensor<double>::uniform(Shape{3, 4}, -1.0, 1.0, rng).set_requires_grad(true);
  auto b2 = Tensor<double>::uniform(Shape{4, 5}, -1.0, 1.0, rng).set_requires_grad(true);
  Rng coords(3);
  auto r = check_gradients([a2, b2] { return sum_all(matmul(a2, b2)); }, {a2, b2}, coords);
  CHECK(r.max_rel_err <= 1e-4);
}

TEST_CASE("softmax cross-entropy gradient is p - t") {
  Rng rng(4);
  auto logits = Tensor<double>::uniform(Shape{3, 5}, -2.0, 2.0, rng).set_requires_grad(true);
  const std::vector<int> labels = {1, 4, 0};
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    tape.backward(cross_entropy_logits(logits, labels, 0.0));
  }
  auto p = softmax_lastdim(logits);
  for (std::int64_t r = 0; r < 3; ++r)
    for (std::int64_t j = 0; j < 5; ++j) {
      const double t = j == labels[static_cast<std::size_t>(r)] ? 1.0 : 0.0;
      CHECK(logits.grad_at(r * 5 + j) == Approx((p.at(r * 5 + j) - t) / 3.0).epsilon(1e-9));
    }
  // smoothed variant against finite differences
  auto l2 = Tensor<double>::uniform(Shape{4, 3}, -2.0, 2.0, rng).set_requires_grad(true);
  const std::vector<int> y2 = {0, 2, 1, 1};
  Rng coords(5);
  auto r = check_gradients([l2, y2] { return cross_entropy_logits(l2, y2, 0.1); }, {l2}, coords);
  CHECK(r.max_rel_err <= 1e-4);
}

TEST_CASE("frozen tensors receive exactly zero gradient") {
  Rng rng(6);
  auto x = Tensor<double>::uniform(Shape{2, 3}, -1.0, 1.0, rng).set_requires_grad(true);
  auto frozen = Tensor<double>::uniform(Shape{3, 3}, -1.0, 1.0, rng);  // requires_grad = false
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    tape.backward(sum_all(matmul(x, frozen)));
  }
  CHECK(frozen.grad().empty());
  for (std::int64_t i = 0; i < frozen.numel(); ++i) CHECK(frozen.grad_at(i) == 0.0);
  CHECK_FALSE(x.grad().empty());
}

TEST_CASE("gradients accumulate across reuse of one tensor") {
  auto x = Tensor<double>::full(Shape{2}, 3.0).set_requires_grad(true);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    tape.backward(sum_all(add(mul(x, x), x)));  // d/dx (x^2 + x) = 2x + 1
  }
  CHECK(x.grad_at(0) == Approx(7.0));
  CHECK(x.grad_at(1) == Approx(7.0));
}

// every primitive, 30 random coordinates, double precision, central
// differences, relative error <= 1e-4
TEST_CASE("primitive gradient checks") {
  Rng rng(100);
  Rng coords(200);
  const auto check = [&](const char* name, std::function<Tensor<double>()> loss, std::vector<Tensor<double>> params) {
    INFO(name);
    auto r = check_gradients(loss, std::move(params), coords, 30);
    CHECK(r.max_rel_err <= 1e-4);
  };

  const auto uniform = [&](Shape s) { return Tensor<double>::uniform(s, -1.0, 1.0, rng).set_requires_grad(true); };
  const auto project = [&](Shape s) { return Tensor<double>::uniform(s, -1.0, 1.0, rng); };

  {
    auto a = uniform(Shape{4, 5}), b = uniform(Shape{4, 5});
    auto u = project(Shape{4, 5});
    check("add", [=] { return sum_all(mul(add(a, b), u)); }, {a, b});
    check("sub", [=] { return sum_all(mul(sub(a, b), u)); }, {a, b});
    check("mul", [=] { return sum_all(mul(mul(a, b), u)); }, {a, b});
    check("scale", [=] { return sum_all(mul(scale(a, 1.7), u)); }, {a});
  }
  {
    auto a = uniform(Shape{5, 3}), b = uniform(Shape{3, 6});
    auto u = project(Shape{5, 6});
    check("matmul", [=] { return sum_all(mul(matmul(a, b), u)); }, {a, b});
  }
  {
    auto x = uniform(Shape{6, 4}), w = uniform(Shape{5, 4}), b = uniform(Shape{5});
    auto u = project(Shape{6, 5});
    check("linear", [=] { return sum_all(mul(linear(x, w, b), u)); }, {x, w, b});
  }
  {
    auto a = uniform(Shape{3, 4, 5}), b = uniform(Shape{3, 5, 2});
    auto u = project(Shape{3, 4, 2});
    check("bmm_nn", [=] { return sum_all(mul(bmm_nn(a, b), u)); }, {a, b});
    auto bt = uniform(Shape{3, 2, 5});
    check("bmm_nt", [=] { return sum_all(mul(bmm_nt(a, bt), u)); }, {a, bt});
  }
  {
    auto x = uniform(Shape{2, 3, 4});
    auto u = project(Shape{24});
    check("reshape", [=] { return sum_all(mul(reshape(x, Shape{24}), u)); }, {x});
    auto up = project(Shape{4, 2, 3});
    check("permute", [=] { return sum_all(mul(permute(x, {2, 0, 1}), up)); }, {x});
    auto us = project(Shape{2, 2, 4});
    check("slice_dim", [=] { return sum_all(mul(slice_dim(x, 1, 1, 2), us)); }, {x});
  }
  {
    auto x = uniform(Shape{3, 7});
    auto u = project(Shape{3, 7});
    check("softmax_lastdim", [=] { return sum_all(mul(softmax_lastdim(x), u)); }, {x});
    check("gelu", [=] { return sum_all(mul(gelu(x), u)); }, {x});
    check("silu", [=] { return sum_all(mul(silu(x), u)); }, {x});
    check("sigmoid", [=] { return sum_all(mul(sigmoid(x), u)); }, {x});
  }
  {
    auto x = uniform(Shape{2, 4, 5}), g = uniform(Shape{5}), b = uniform(Shape{5});
    auto u = project(Shape{2, 4, 5});
    check("layer_norm_lastdim", [=] { return sum_all(mul(layer_norm_lastdim(x, g, b, 1e-5), u)); }, {x, g, b});
  }
  {
    auto x = uniform(Shape{2, 5, 3, 4}), g = uniform(Shape{5}), b = uniform(Shape{5});
    auto u = project(Shape{2, 5, 3, 4});
    check("layer_norm_nchw", [=] { return sum_all(mul(layer_norm_nchw(x, g, b, 1e-5), u)); }, {x, g, b});
  }
  for (int stride : {1, 2}) {
    auto x = uniform(Shape{2, 3, 6, 6}), w = uniform(Shape{4, 3}), b = uniform(Shape{4});
    const std::int64_t ho = stride == 1 ? 6 : 3;
    auto u = project(Shape{2, 4, ho, ho});
    check("pointwise_conv", [=] { return sum_all(mul(pointwise_conv(x, w, b, stride), u)); }, {x, w, b});
  }
  for (int stride : {1, 2}) {
    auto x = uniform(Shape{2, 2, 5, 5}), w = uniform(Shape{3, 2, 3, 3}), b = uniform(Shape{3});
    const std::int64_t ho = stride == 1 ? 5 : 3;
    auto u = project(Shape{2, 3, ho, ho});
    check("conv3x3", [=] { return sum_all(mul(conv3x3(x, w, b, stride), u)); }, {x, w, b});
  }
  for (int dilation : {1, 2, 3})
    for (int stride : {1, 2}) {
      auto x = uniform(Shape{2, 3, 7, 7}), w = uniform(Shape{3, 3, 3}), b = uniform(Shape{3});
      const std::int64_t ho = stride == 1 ? 7 : 4;
      auto u = project(Shape{2, 3, ho, ho});
      check("depthwise_conv3x3", [=] { return sum_all(mul(depthwise_conv3x3(x, w, b, dilation, stride), u)); }, {x, w, b});
    }
  {
    auto x = uniform(Shape{2, 4, 3, 3});
    auto u = project(Shape{2, 4});
    check("global_avg_pool", [=] { return sum_all(mul(global_avg_pool(x), u)); }, {x});
    auto s = uniform(Shape{2, 4});
    auto uf = project(Shape{2, 4, 3, 3});
    check("scale_channels", [=] { return sum_all(mul(scale_channels(x, s), uf)); }, {x, s});
  }
  {
    auto x = uniform(Shape{2, 6, 4, 4});
    auto u = project(Shape{2, 6, 4, 4});
    check("group_softmax_channels", [=] { return sum_all(mul(group_softmax_channels(x, 3), u)); }, {x});
  }
  {
    auto x = uniform(Shape{2, 3, 4, 4}), sc = uniform(Shape{6}), sh = uniform(Shape{6});
    auto u = project(Shape{2, 6, 4, 4});
    check("channel_affine_expand",
          [=] { return sum_all(mul(detail::channel_affine_expand(x, sc, sh, 2, 1), u)); }, {x, sc, sh});
  }
  {
    auto table = uniform(Shape{9, 2});  // P=2 -> (2P-1)^2 = 9 offsets
    auto u = project(Shape{2, 4, 4});
    check("rel_pos_bias", [=] { return sum_all(mul(rel_pos_bias(table, 2), u)); }, {table});
  }
  {
    auto logits = uniform(Shape{6, 4, 4}), bias = uniform(Shape{3, 4, 4});
    auto u = project(Shape{6, 4, 4});
    check("add_head_bias", [=] { return sum_all(mul(detail::add_head_bias(logits, bias), u)); }, {logits, bias});
  }
  {
    auto x = uniform(Shape{1, 2, 8, 8});
    const auto pspec = PartitionSpec::make(2, 8, 8);
    auto u = project(Shape{16, 2, 2, 2});
    check("partition_dilated", [=] { return sum_all(mul(partition_dilated(x, pspec), u)); }, {x});
    auto sub = uniform(Shape{16, 2, 2, 2});
    auto uf = project(Shape{1, 2, 8, 8});
    check("departition_dilated", [=] { return sum_all(mul(departition_dilated(sub, pspec), uf)); }, {sub});
    const auto wspec = WindowSpec::make(4, 8, 8);
    auto uw = project(Shape{4, 16, 2});
    check("partition_windows", [=] { return sum_all(mul(partition_windows(x, wspec), uw)); }, {x});
    auto win = uniform(Shape{4, 16, 2});
    check("departition_windows", [=] { return sum_all(mul(departition_windows(win, wspec, 8, 8), uf)); }, {win});
  }
}
