#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>

#include "chart/checkpoint.hpp"
#include "chart/error.hpp"
#include "chart/optim.hpp"
#include "test_support.hpp"

using namespace chart;
using chart::testing::check_grads;
using chart::testing::random_tensor;

TEST_CASE("matmul: identity, hand arithmetic, shape errors") {
  Rng rng(1);
  Tensor m = random_tensor(rng, {2, 2});
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor r = matmul(eye, m);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.data()[i] == m.data()[i]);

  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 1}, {1, 1});
  Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.data()[0] == 3.0);
  CHECK(c.data()[1] == 7.0);

  CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 1})), InputError);
}

TEST_CASE("matmul gradcheck 3x4 . 4x2") {
  Rng rng(2);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {4, 2});
  auto rep = check_grads([&] { return matmul(a, b); }, {{"a", a}, {"b", b}});
  CHECK(rep.max_rel_error() < 1e-4);
}

TEST_CASE("softmax: symmetry, stability, normalisation") {
  Tensor u = softmax(Tensor::from({3}, {0, 0, 0}), 0);
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  Tensor big = softmax(Tensor::from({2}, {1000, 0}), 0);
  CHECK(std::isfinite(big.data()[0]));
  CHECK(big.data()[0] == doctest::Approx(1.0));
  CHECK(big.data()[1] < 1e-300);

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor(rng, {4, 7, 3}, -30, 30, false);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      Tensor s = softmax(x, axis);
      Tensor sums = sum_axis(s, axis);
      for (double v : sums.data()) CHECK(std::abs(v - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("softmax gradcheck on 2x5") {
  Rng rng(4);
  Tensor x = random_tensor(rng, {2, 5}, -2, 2);
  CHECK(check_grads([&] { return softmax(x, 1); }, {{"x", x}}).max_rel_error() < 1e-4);
  CHECK(check_grads([&] { return softmax(x, 0); }, {{"x", x}}).max_rel_error() < 1e-4);
}

TEST_CASE("masked_softmax ignores masked entries") {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  std::vector<std::uint8_t> keep{1, 0, 1, 0, 0, 0};
  Tensor s = masked_softmax(x, keep);
  CHECK(s.data()[1] == 0.0);
  CHECK(s.data()[0] + s.data()[2] == doctest::Approx(1.0));
  for (std::size_t i = 3; i < 6; ++i) CHECK(s.data()[i] == 0.0);
  std::vector<std::uint8_t> all(6, 1);
  CHECK(chart::testing::max_abs_diff(masked_softmax(x, all).data(), softmax(x, 1).data()) < 1e-15);
  CHECK(check_grads([&] { return masked_softmax(x, keep); }, {{"x", x}}).max_rel_error() < 1e-4);
}

TEST_CASE("layer_norm: closed forms and moments") {
  Tensor ones = Tensor::from({2}, {1, 1});
  Tensor zeros = Tensor::from({2}, {0, 0});
  Tensor flat = layer_norm(Tensor::from({1, 2}, {5, 5}), ones, zeros, 1);
  CHECK(flat.data()[0] == 0.0);
  CHECK(flat.data()[1] == 0.0);

  Tensor y = layer_norm(Tensor::from({1, 2}, {1, 3}), ones, zeros, 1);
  CHECK(y.data()[0] == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(y.data()[1] == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-14));

  // Pre-affine moments; inputs drawn wide enough that eps/var stays below 1e-6.
  Rng rng(5);
  Tensor x = random_tensor(rng, {6, 16, 5}, -20, 20, false);
  Tensor g = Tensor::full({16}, 1.0), b = Tensor::zeros({16});
  Tensor n = layer_norm(x, g, b, 1);
  for (std::size_t o = 0; o < 6; ++o)
    for (std::size_t i = 0; i < 5; ++i) {
      double mu = 0, var = 0;
      for (std::size_t e = 0; e < 16; ++e) mu += n.at({o, e, i});
      mu /= 16;
      for (std::size_t e = 0; e < 16; ++e) var += std::pow(n.at({o, e, i}) - mu, 2);
      var /= 16;
      CHECK(std::abs(mu) < 1e-9);
      CHECK(std::abs(var - 1.0) < 1e-6);
    }
  CHECK_THROWS_AS(layer_norm(x, Tensor::full({5}, 1.0), b, 1), InputError);
}

TEST_CASE("layer_norm gradcheck") {
  Rng rng(6);
  Tensor x = random_tensor(rng, {3, 4, 2});
  Tensor g = random_tensor(rng, {3}, 0.5, 1.5);
  Tensor b = random_tensor(rng, {3});
  auto rep = check_grads([&] { return layer_norm(x, g, b, 0); }, {{"x", x}, {"gain", g}, {"bias", b}});
  CHECK(rep.max_rel_error() < 1e-4);
}

TEST_CASE("conv2d: identity, direct summation, extents, errors") {
  Rng rng(7);
  Tensor x = random_tensor(rng, {3, 4, 5}, -1, 1, false);
  std::vector<double> k(9, 0.0);
  for (std::size_t c = 0; c < 3; ++c) k[c * 3 + c] = 1.0;
  Tensor ident = conv2d(x, Tensor::from({3, 3, 1, 1}, k), Tensor(), 1, 0);
  CHECK(chart::testing::max_abs_diff(ident.data(), x.data()) == 0.0);

  Tensor ones = conv2d(Tensor::full({1, 5, 5}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0), Tensor(), 1, 1);
  CHECK(ones.shape() == Shape{1, 5, 5});
  CHECK(ones.at({0, 2, 2}) == 9.0);
  CHECK(ones.at({0, 0, 0}) == 4.0);
  CHECK(ones.at({0, 0, 2}) == 6.0);

  Tensor strided = conv2d(Tensor::zeros({2, 9, 7}), Tensor::zeros({4, 2, 3, 3}), Tensor(), 2, 1);
  CHECK(strided.shape() == Shape{4, (9 + 2 - 3) / 2 + 1, (7 + 2 - 3) / 2 + 1});

  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), Tensor(), 1, 1), InputError);
  CHECK_THROWS_AS(conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor(), 1, 1), InputError);
}

TEST_CASE("conv2d 1x1 equals per-pixel matmul") {
  Rng rng(8);
  Tensor x = random_tensor(rng, {3, 4, 4}, -1, 1, false);
  Tensor w = random_tensor(rng, {5, 3, 1, 1}, -1, 1, false);
  Tensor y = conv2d(x, w, Tensor(), 1, 0);
  Tensor tokens = map_to_tokens(x);                          // [16, 3]
  Tensor wm = transpose(reshape(w, {5, 3}));                 // [3, 5]
  Tensor ref = tokens_to_map(matmul(tokens, wm), 4, 4);      // [5, 4, 4]
  CHECK(chart::testing::max_abs_diff(y.data(), ref.data()) < 1e-14);
}

TEST_CASE("conv2d gradcheck wrt input, kernel and bias") {
  Rng rng(9);
  Tensor x = random_tensor(rng, {2, 5, 6});
  Tensor k = random_tensor(rng, {3, 2, 3, 3});
  Tensor b = random_tensor(rng, {3});
  auto rep = check_grads([&] { return conv2d(x, k, b, 2, 1); }, {{"x", x}, {"kernel", k}, {"bias", b}});
  CHECK(rep.max_rel_error() < 1e-4);
}

TEST_CASE("pointwise definitions and gradchecks") {
  Tensor v = Tensor::from({2}, {-1, 2});
  CHECK(relu(v).data()[0] == 0.0);
  CHECK(relu(v).data()[1] == 2.0);
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(gelu(Tensor::scalar(1.0)).item() == doctest::Approx(0.8413447460685429).epsilon(1e-14));
  CHECK(tanh(Tensor::scalar(0.5)).item() == doctest::Approx(std::tanh(0.5)));

  Rng rng(10);
  std::vector<double> away;
  for (int i = 0; i < 12; ++i) {
    const double s = rng.bernoulli(0.5) ? 1.0 : -1.0;
    away.push_back(s * rng.uniform(0.1, 2.5));
  }
  Tensor x = Tensor::from({12}, away, true);
  for (Activation a : {Activation::gelu, Activation::relu, Activation::sigmoid, Activation::tanh}) {
    CHECK(check_grads([&] { return pointwise(x, a); }, {{"x", x}}).max_rel_error() < 1e-4);
  }
}

TEST_CASE("bilinear_sample: grid points, symmetry, bounds, clamping") {
  Rng rng(11);
  Tensor x = random_tensor(rng, {3, 4, 5}, -1, 1, false);
  // Point (x=j, y=i) reads x[:, i, j] exactly.
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      Tensor s = bilinear_sample(x, Tensor::from({1, 2}, {double(j), double(i)}));
      for (std::size_t c = 0; c < 3; ++c) CHECK(s.data()[c] == x.at({c, i, j}));
    }
  Tensor sq = Tensor::from({1, 2, 2}, {1, 2, 3, 10});
  CHECK(bilinear_sample(sq, Tensor::from({1, 2}, {0.5, 0.5})).item() == doctest::Approx(4.0).epsilon(1e-15));

  // Convex combination stays within the 4 sources.
  for (int t = 0; t < 200; ++t) {
    const double px = rng.uniform(0, 4), py = rng.uniform(0, 3);
    Tensor s = bilinear_sample(x, Tensor::from({1, 2}, {px, py}));
    const std::size_t x0 = std::min<std::size_t>(std::size_t(px), 3), y0 = std::min<std::size_t>(std::size_t(py), 2);
    for (std::size_t c = 0; c < 3; ++c) {
      const double vals[4] = {x.at({c, y0, x0}), x.at({c, y0, x0 + 1}), x.at({c, y0 + 1, x0}), x.at({c, y0 + 1, x0 + 1})};
      CHECK(s.data()[c] >= *std::min_element(vals, vals + 4) - 1e-15);
      CHECK(s.data()[c] <= *std::max_element(vals, vals + 4) + 1e-15);
    }
  }
  // Out-of-range points clamp to the border.
  Tensor far = bilinear_sample(x, Tensor::from({1, 2}, {-3.0, 99.0}));
  for (std::size_t c = 0; c < 3; ++c) CHECK(far.data()[c] == x.at({c, 3, 0}));
}

TEST_CASE("bilinear_sample gradcheck wrt features and interior points") {
  Rng rng(12);
  Tensor x = random_tensor(rng, {2, 4, 5});
  std::vector<double> pts;
  for (int p = 0; p < 6; ++p) {
    pts.push_back(rng.integer(0, 3) + rng.uniform(0.1, 0.9));
    pts.push_back(rng.integer(0, 2) + rng.uniform(0.1, 0.9));
  }
  Tensor p = Tensor::from({6, 2}, pts, true);
  auto rep = check_grads([&] { return bilinear_sample(x, p); }, {{"x", x}, {"points", p}});
  CHECK(rep.max_rel_error() < 1e-4);
}

TEST_CASE("local_attention: singleton window and gradcheck") {
  Rng rng(13);
  Tensor q = random_tensor(rng, {20, 4}), k = random_tensor(rng, {20, 4}), v = random_tensor(rng, {20, 4});
  Tensor single = local_attention(q, k, v, 4, 5, 1, 2);
  CHECK(chart::testing::max_abs_diff(single.data(), v.data()) < 1e-15);
  auto rep = check_grads([&] { return local_attention(q, k, v, 4, 5, 3, 2); }, {{"q", q}, {"k", k}, {"v", v}});
  CHECK(rep.max_rel_error() < 1e-4);
  CHECK_THROWS_AS(local_attention(q, k, v, 4, 5, 5, 2), ConfigError);
}

TEST_CASE("shape ops gradcheck: concat, slice, reshape, transpose, gather, upsample, broadcast") {
  Rng rng(14);
  Tensor a = random_tensor(rng, {2, 3, 2}), b = random_tensor(rng, {2, 1, 2});
  Tensor bias = random_tensor(rng, {4});
  Tensor table = random_tensor(rng, {5, 3});
  std::vector<std::size_t> rows{4, 0, 4, 2};
  auto rep = check_grads(
      [&] {
        Tensor c = concat({a, b}, 1);                        // [2,4,2]
        Tensor s = slice(c, 1, 1, 4);                        // [2,3,2]
        Tensor t = transpose(reshape(s, {2, 6}));            // [6,2]
        Tensor u = upsample_nearest(reshape(c, {2, 2, 4}), 2);  // [2,4,8]
        Tensor g = gather_rows(table, rows);                 // [4,3]
        Tensor br = add_broadcast(reshape(u, {2, 4, 8}), bias, 1);
        return concat({reshape(t, {12}), reshape(br, {64}), reshape(g, {12}), reshape(sum_axis(a, 1), {4})}, 0);
      },
      {{"a", a}, {"b", b}, {"bias", bias}, {"table", table}});
  CHECK(rep.max_rel_error() < 1e-4);
}

TEST_CASE("elementwise arithmetic gradcheck") {
  Rng rng(15);
  Tensor a = random_tensor(rng, {7}), b = random_tensor(rng, {7}, 0.5, 2.0);
  auto rep = check_grads([&] { return add_scalar(scale(div(mul(sub(a, b), add(a, b)), b), 1.7), 0.3); },
                         {{"a", a}, {"b", b}});
  CHECK(rep.max_rel_error() < 1e-4);
}

TEST_CASE("loss primitives gradcheck") {
  Rng rng(16);
  Tensor logits = random_tensor(rng, {5, 4}, -2, 2);
  std::vector<std::size_t> tgt{0, 3, 1, 1, 2};
  std::vector<double> w{1.0, 2.0, 0.5, 0.1};
  CHECK(check_grads([&] { return cross_entropy(logits, tgt, w); }, {{"logits", logits}}).max_rel_error() < 1e-4);

  Tensor ml = random_tensor(rng, {3, 8}, -3, 3);
  std::vector<double> g(24);
  for (double& t : g) t = rng.bernoulli(0.4) ? 1.0 : 0.0;
  CHECK(check_grads([&] { return sigmoid_focal(ml, g, 0.25, 2.0); }, {{"logits", ml}}).max_rel_error() < 1e-4);
}

TEST_CASE("cross_entropy matches the direct formula") {
  Tensor logits = Tensor::from({1, 3}, {1.0, 2.0, 0.5});
  std::vector<std::size_t> t{1};
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(0.5);
  CHECK(cross_entropy(logits, t).item() == doctest::Approx(-std::log(std::exp(2.0) / z)).epsilon(1e-14));
}

TEST_CASE("backward: linearity, closed form, errors, accumulation") {
  Tensor x = Tensor::from({4}, {1, -2, 3, 0.5}, true);
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 2.0);

  Tensor s = Tensor::scalar(3.0, true);
  mul(s, s).backward();
  CHECK(s.grad()[0] == 6.0);

  CHECK_THROWS_AS(scale(x, 2.0).backward(), InputError);
}

TEST_CASE("graph is topologically ordered and skips constants") {
  Rng rng(17);
  Tensor a = random_tensor(rng, {3, 3});
  Tensor c = random_tensor(rng, {3, 3}, -1, 1, false);
  Tensor h = gelu(matmul(a, c));
  Tensor loss = sum(add(h, softmax(h, 1)));
  Graph g(loss);
  const auto& order = g.order();
  CHECK(order.back() == loss.impl());
  for (std::size_t i = 0; i < order.size(); ++i)
    for (const auto& in : order[i]->node->inputs) {
      if (!in->node) continue;
      auto pos = std::find(order.begin(), order.end(), in.get());
      REQUIRE(pos != order.end());
      CHECK(static_cast<std::size_t>(pos - order.begin()) < i);
    }
  CHECK(g.size() == 5);
  {
    NoGradGuard guard;
    CHECK_FALSE(matmul(a, c).requires_grad());
  }
  CHECK(matmul(a, c).requires_grad());
}

TEST_CASE("grad_check harness contract") {
  Rng rng(18);
  Tensor w = random_tensor(rng, {4});
  Tensor bias = random_tensor(rng, {1});
  Tensor cst = random_tensor(rng, {4}, -1, 1, false);
  auto linear = grad_check([&] { return add(sum(mul(w, cst)), bias); }, {{"w", w}, {"bias", bias}});
  CHECK(linear.max_rel_error() < 1e-9);
  REQUIRE(linear.entries.size() == 2);
  CHECK(linear.entries[0].name == "w");
  CHECK(linear.entries[1].name == "bias");
  CHECK(linear.entries[0].checked == 4);

  Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 5});
  auto chain = check_grads([&] { return matmul(softmax(matmul(a, b), 1), transpose(b)); }, {{"a", a}, {"b", b}});
  CHECK(chain.max_rel_error() < 1e-4);
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(0.0, 1e-12) == doctest::Approx(1e-4));
}

TEST_CASE("determinism: same seed, same values") {
  Rng r1(99), r2(99);
  Tensor a1 = random_tensor(r1, {8, 8}), a2 = random_tensor(r2, {8, 8});
  Tensor y1 = softmax(matmul(a1, a1), 1), y2 = softmax(matmul(a2, a2), 1);
  CHECK(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(20);
  std::vector<NamedTensor> ts;
  for (int k = 0; k < 5; ++k) {
    Tensor t = random_tensor(rng, {std::size_t(rng.integer(1, 4)), std::size_t(rng.integer(1, 6))}, -1e3, 1e3, false);
    ts.push_back({"t" + std::to_string(k), t});
  }
  ts.push_back({"special", Tensor::from({5}, {-0.0, 5e-324, 1.7976931348623157e308, -1e-310, 0.1})});
  nlohmann::json cfg = {{"k", 4}};
  const std::string bytes = encode_checkpoint(ts, cfg);
  Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.config == cfg);
  REQUIRE(back.tensors.size() == ts.size());
  for (std::size_t k = 0; k < ts.size(); ++k) {
    CHECK(back.tensors[k].name == ts[k].name);
    CHECK(back.tensors[k].tensor.shape() == ts[k].tensor.shape());
    CHECK(std::memcmp(back.tensors[k].tensor.data().data(), ts[k].tensor.data().data(),
                      ts[k].tensor.numel() * sizeof(double)) == 0);
  }
  CHECK(encode_checkpoint(back.tensors, back.config) == bytes);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), InputError);
}

TEST_CASE("optimizer: zero step size leaves parameters unchanged") {
  Rng rng(21);
  Tensor p = random_tensor(rng, {6});
  std::vector<double> before(p.data().begin(), p.data().end());
  for (const char* kind : {"sgd_momentum", "adam"}) {
    OptimizerConfig cfg;
    cfg.kind = kind;
    cfg.learning_rate = 0.0;
    Optimizer opt(cfg, {p});
    sum(mul(p, p)).backward();
    opt.step();
    CHECK(std::equal(before.begin(), before.end(), p.data().begin()));
  }
  OptimizerConfig sgd;
  sgd.learning_rate = 0.1;
  Optimizer opt(sgd, {p});
  sum(p).backward();
  opt.step();
  CHECK(p.data()[0] == doctest::Approx(before[0] - 0.1));
}
