#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "chart/attention.hpp"
#include "chart/error.hpp"
#include "test_support.hpp"

using namespace chart;
using chart::testing::check_grads;
using chart::testing::jitter;
using chart::testing::max_abs_diff;
using chart::testing::random_tensor;
using chart::testing::with_inputs;

namespace {

AttentionConfig small_config(std::size_t heads = 2) {
  AttentionConfig cfg;
  cfg.heads = heads;
  cfg.window = 3;
  cfg.offset_kernel = 3;
  cfg.max_offset = 1.5;
  cfg.question_len = 3;
  cfg.question_dim = 4;
  return cfg;
}

// Reference scaled dot-product attention written with plain loops.
std::vector<double> naive_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  const std::size_t n = q.dim(0), m = k.dim(0), ch = q.dim(1), d = ch / heads;
  std::vector<double> out(n * ch, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logit(m);
      double mx = -1e300;
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < d; ++c) s += q.at({i, h * d + c}) * k.at({j, h * d + c});
        logit[j] = s / std::sqrt(double(d));
        mx = std::max(mx, logit[j]);
      }
      double z = 0;
      for (double& l : logit) z += (l = std::exp(l - mx));
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t c = 0; c < d; ++c) out[i * ch + h * d + c] += logit[j] / z * v.at({j, h * d + c});
    }
  return out;
}

}  // namespace

TEST_CASE("multi_head_attention matches a loop reference and rows sum to one") {
  Rng rng(40);
  Tensor q = random_tensor(rng, {5, 6}), k = random_tensor(rng, {7, 6}), v = random_tensor(rng, {7, 6});
  std::vector<Tensor> w;
  Tensor out = multi_head_attention(q, k, v, 3, {}, &w);
  CHECK(max_abs_diff(out.data(), naive_attention(q, k, v, 3)) < 1e-14);
  REQUIRE(w.size() == 3);
  for (const Tensor& wh : w) {
    Tensor s = sum_axis(wh, 1);
    for (double x : s.data()) CHECK(std::abs(x - 1.0) < 1e-9);
  }
  std::vector<std::uint8_t> keep(35, 1);
  CHECK(max_abs_diff(multi_head_attention(q, k, v, 3, keep).data(), out.data()) == 0.0);
  CHECK(check_grads([&] { return multi_head_attention(q, k, v, 3); }, {{"q", q}, {"k", k}, {"v", v}}).max_rel_error() <
        1e-4);
}

TEST_CASE("head permutation with matching merge rows leaves the output unchanged") {
  Rng rng(41);
  const std::size_t heads = 3, d = 2, ch = heads * d;
  Tensor x = random_tensor(rng, {6, ch}, -1, 1, false);
  Tensor wq = random_tensor(rng, {ch, ch}, -1, 1, false), wk = random_tensor(rng, {ch, ch}, -1, 1, false);
  Tensor wv = random_tensor(rng, {ch, ch}, -1, 1, false), wo = random_tensor(rng, {ch, ch}, -1, 1, false);
  const std::size_t perm[heads] = {2, 0, 1};
  auto permute_cols = [&](const Tensor& w) {
    std::vector<double> out(ch * ch);
    for (std::size_t r = 0; r < ch; ++r)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t c = 0; c < d; ++c) out[r * ch + h * d + c] = w.at({r, perm[h] * d + c});
    return Tensor::from({ch, ch}, out);
  };
  auto permute_rows = [&](const Tensor& w) {
    std::vector<double> out(ch * ch);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t c = 0; c < d; ++c)
        for (std::size_t col = 0; col < ch; ++col) out[(h * d + c) * ch + col] = w.at({perm[h] * d + c, col});
    return Tensor::from({ch, ch}, out);
  };
  Tensor base = matmul(multi_head_attention(matmul(x, wq), matmul(x, wk), matmul(x, wv), heads), wo);
  Tensor perm_out = matmul(multi_head_attention(matmul(x, permute_cols(wq)), matmul(x, permute_cols(wk)),
                                                matmul(x, permute_cols(wv)), heads),
                           permute_rows(wo));
  CHECK(max_abs_diff(base.data(), perm_out.data()) < 1e-10);
}

TEST_CASE("neighborhood attention: singleton window, constant input, errors, gradcheck") {
  Rng rng(42);
  AttentionConfig cfg = small_config();
  cfg.window = 1;
  ParamRegistry reg;
  NeighborhoodAttention na1(reg, "na", 4, cfg, rng);
  Tensor x = random_tensor(rng, {4, 3, 3}, -1, 1, false);
  Tensor direct = tokens_to_map(matmul(matmul(map_to_tokens(x), reg.find("na.wv.weight")->detach()),
                                       reg.find("na.wo.weight")->detach()),
                                3, 3);
  CHECK(max_abs_diff(na1.attend(x).data(), direct.data()) < 1e-14);

  ParamRegistry reg3;
  NeighborhoodAttention na3(reg3, "na", 4, small_config(), rng);
  std::vector<double> cval(4 * 5 * 5);
  for (std::size_t i = 0; i < cval.size(); ++i) cval[i] = 0.1 * double(i / 25) - 0.2;
  Tensor cst = Tensor::from({4, 5, 5}, cval);
  Tensor a = na3.attend(cst);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 1; p < 25; ++p) CHECK(std::abs(a.data()[c * 25 + p] - a.data()[c * 25]) < 1e-14);
  CHECK(na3(cst).shape() == cst.shape());
  CHECK_THROWS_AS(na3(random_tensor(rng, {4, 2, 5}, -1, 1, false)), ConfigError);

  jitter(reg3, rng);
  Tensor xin = random_tensor(rng, {4, 5, 5});
  auto rep = check_grads([&] { return na3(xin); }, with_inputs(reg3, {{"x", xin}}));
  CHECK(rep.max_rel_error() < 1e-4);
}

TEST_CASE("offset network: zero init, bound, gradcheck") {
  Rng rng(43);
  AttentionConfig cfg = small_config();
  ParamRegistry reg;
  OffsetNetwork net(reg, "off", 4, 4, cfg, rng);
  Tensor x = random_tensor(rng, {4, 4, 5});
  Tensor zero = net(x);
  CHECK(zero.shape() == Shape{20, 2});
  for (double v : zero.data()) CHECK(v == 0.0);

  jitter(reg, rng, 3.0);
  Tensor big = net(scale(x, 10.0));
  for (double v : big.data()) CHECK(std::abs(v) <= cfg.max_offset);

  ParamRegistry reg2;
  OffsetNetwork net2(reg2, "off", 4, 4, cfg, rng);
  jitter(reg2, rng);
  CHECK(check_grads([&] { return net2(x); }, with_inputs(reg2, {{"x", x}})).max_rel_error() < 1e-4);
}

TEST_CASE("deformable_sample: grid identity, ramp shift, gradcheck") {
  Rng rng(44);
  Tensor x = random_tensor(rng, {3, 4, 5}, -1, 1, false);
  Tensor same = deformable_sample(x, Tensor::zeros({20, 2}));
  CHECK(max_abs_diff(same.data(), map_to_tokens(x).data()) == 0.0);

  const double step = 0.7;
  std::vector<double> ramp(4 * 6);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) ramp[i * 6 + j] = step * double(j);
  std::vector<double> half(24 * 2, 0.0);
  for (std::size_t p = 0; p < 24; ++p) half[2 * p] = 0.5;
  Tensor shifted = deformable_sample(Tensor::from({1, 4, 6}, ramp), Tensor::from({24, 2}, half));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j + 1 < 6; ++j) CHECK(shifted.data()[i * 6 + j] == doctest::Approx(step * (j + 0.5)));

  std::vector<double> off(20 * 2);
  for (double& o : off) o = rng.uniform(0.1, 0.4) * (rng.bernoulli(0.5) ? 1 : -1);
  // Keep border points inside the clamp box.
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      if (j == 0) off[2 * (i * 5 + j)] = std::abs(off[2 * (i * 5 + j)]);
      if (j == 4) off[2 * (i * 5 + j)] = -std::abs(off[2 * (i * 5 + j)]);
      if (i == 0) off[2 * (i * 5 + j) + 1] = std::abs(off[2 * (i * 5 + j) + 1]);
      if (i == 3) off[2 * (i * 5 + j) + 1] = -std::abs(off[2 * (i * 5 + j) + 1]);
    }
  Tensor offsets = Tensor::from({20, 2}, off, true);
  Tensor xs = random_tensor(rng, {3, 4, 5});
  CHECK(check_grads([&] { return deformable_sample(xs, offsets); }, {{"x", xs}, {"offsets", offsets}})
            .max_rel_error() < 1e-4);
}

TEST_CASE("deformable attention: zero offsets equal plain attention on the grid") {
  Rng rng(45);
  ParamRegistry reg;
  DeformableAttention da(reg, "da", 8, small_config(2), rng);
  Tensor x = random_tensor(rng, {8, 4, 4}, -1, 1, false);
  DeformableTrace trace;
  Tensor out = da.attend(x, &trace);
  for (double v : trace.offsets.data()) CHECK(v == 0.0);
  REQUIRE(trace.weights.size() == 2);
  for (const Tensor& w : trace.weights) {
    const Tensor rows = sum_axis(w, 1);
    for (double s : rows.data()) CHECK(std::abs(s - 1.0) < 1e-9);
  }

  const Tensor t = map_to_tokens(x);
  const Tensor q = matmul(t, da.wq().weight()), k = matmul(t, da.wk().weight()), v = matmul(t, da.wv().weight());
  const Tensor ref = tokens_to_map(matmul(Tensor::from({16, 8}, naive_attention(q, k, v, 2)), da.wo().weight()), 4, 4);
  CHECK(max_abs_diff(out.data(), ref.data()) < 1e-10);
  CHECK(da(x).shape() == x.shape());
}

TEST_CASE("deformable attention gradcheck on an 8x4x4 input") {
  Rng rng(46);
  ParamRegistry reg;
  DeformableAttention da(reg, "da", 8, small_config(2), rng);
  jitter(reg, rng, 0.1);
  Tensor x = random_tensor(rng, {8, 4, 4});
  auto rep = check_grads([&] { return da(x); }, with_inputs(reg, {{"x", x}}));
  for (const auto& e : rep.entries) INFO(e.name, " ", e.max_rel_error);
  CHECK(rep.max_rel_error() < 1e-4);
}

TEST_CASE("question-guided offsets: zero question, zero init, order sensitivity, errors") {
  Rng rng(47);
  AttentionConfig cfg = small_config();
  ParamRegistry reg;
  QuestionOffsetNetwork qon(reg, "qon", 4, cfg, rng);
  Tensor x = random_tensor(rng, {4, 4, 4}, -1, 1, false);
  Tensor z = random_tensor(rng, {3, 4}, -1, 1, false);
  const Tensor init_off = qon(x, z);
  for (double v : init_off.data()) CHECK(v == 0.0);

  jitter(reg, rng);
  Tensor zq = Tensor::zeros({3, 4});
  const Tensor sim = qon.similarity(x, zq);
  for (double s : sim.data()) CHECK(s == 0.0);
  Tensor const_off = qon(x, zq);
  for (std::size_t p = 1; p < 16; ++p) {
    CHECK(const_off.at({p, 0}) == const_off.at({0, 0}));
    CHECK(const_off.at({p, 1}) == const_off.at({0, 1}));
  }
  Tensor other_x = random_tensor(rng, {4, 4, 4}, -1, 1, false);
  CHECK(max_abs_diff(const_off.data(), qon(other_x, zq).data()) == 0.0);

  Tensor zp = concat({slice(z, 0, 2, 3), slice(z, 0, 0, 2)}, 0);
  CHECK(max_abs_diff(qon(x, z).data(), qon(x, zp).data()) > 1e-6);
  CHECK_THROWS_AS(qon(x, Tensor::zeros({4, 4})), InputError);
}

TEST_CASE("DCAttention: constant x, output shape, mismatch, gradcheck") {
  Rng rng(48);
  ParamRegistry reg;
  DCAttention dca(reg, "dca", 4, small_config(2), rng);
  jitter(reg, rng, 0.2);
  std::vector<double> cval(4 * 4 * 5);
  for (std::size_t i = 0; i < cval.size(); ++i) cval[i] = 0.3 * double(i / 20) - 0.4;
  Tensor xc = Tensor::from({4, 4, 5}, cval);
  Tensor y = random_tensor(rng, {4, 4, 5});
  Tensor z = random_tensor(rng, {3, 4});
  Tensor out = dca(xc, y, z);
  CHECK(out.shape() == Shape{20, 4});
  for (std::size_t p = 1; p < 20; ++p)
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(out.at({p, c}) - out.at({0, c})) < 1e-12);
  CHECK_THROWS_AS(dca(random_tensor(rng, {4, 5, 5}), y, z), InputError);

  Tensor x = random_tensor(rng, {4, 4, 5});
  auto rep = check_grads([&] { return dca(x, y, z); }, with_inputs(reg, {{"x", x}, {"y", y}, {"z", z}}));
  CHECK(rep.max_rel_error() < 1e-4);
}

TEST_CASE("QDCAt: zero value projection, output contract, zero-offset identity, gradcheck") {
  Rng rng(49);
  ParamRegistry reg;
  QDCAtBlock block(reg, "qd", 4, 6, small_config(2), rng);
  Tensor x = random_tensor(rng, {4, 4, 4});
  Tensor y = random_tensor(rng, {4, 4, 4});
  Tensor z = random_tensor(rng, {3, 4});
  Tensor o = block(x, y, z);
  CHECK(o.shape() == Shape{16, 6});
  CHECK(max_abs_diff(o.data(), block(x, y, z, false).data()) < 1e-10);

  {
    Tensor wv = block.dca().wv().weight();
    std::vector<double> saved(wv.data().begin(), wv.data().end());
    std::fill(wv.mutable_data().begin(), wv.mutable_data().end(), 0.0);
    Tensor b = block.residual(x, y, z);
    Tensor ln = layer_norm(map_to_tokens(y), Tensor::full({4}, 1.0), Tensor::zeros({4}), 1);
    CHECK(max_abs_diff(b.data(), ln.data()) < 1e-14);
    std::copy(saved.begin(), saved.end(), wv.mutable_data().begin());
  }

  jitter(reg, rng, 0.2);
  auto rep = check_grads([&] { return block(x, y, z); }, with_inputs(reg, {{"x", x}, {"y", y}, {"z", z}}));
  CHECK(rep.max_rel_error() < 1e-4);
}

TEST_CASE("attention config validation and JSON round trip") {
  AttentionConfig cfg;
  CHECK_NOTHROW(cfg.validate(16));
  CHECK_THROWS_AS(cfg.validate(10), ConfigError);
  cfg.window = 4;
  CHECK_THROWS_AS(cfg.validate(16), ConfigError);
  nlohmann::json j = AttentionConfig{};
  AttentionConfig back = j.get<AttentionConfig>();
  CHECK(back.heads == 4);
  CHECK_THROWS_AS((nlohmann::json{{"nope", 1}}.get<AttentionConfig>()), ConfigError);
}
