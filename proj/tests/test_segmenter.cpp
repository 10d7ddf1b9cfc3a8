#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "chart/error.hpp"
#include "chart/segmenter.hpp"
#include "test_support.hpp"

using namespace chart;
using chart::testing::check_grads;
using chart::testing::jitter;
using chart::testing::max_abs_diff;
using chart::testing::random_tensor;

namespace {

SegmenterConfig tiny_config() {
  SegmenterConfig cfg;
  cfg.base_channels = 4;
  cfg.embed_channels = 8;
  cfg.query_channels = 8;
  cfg.queries = 3;
  cfg.decoder_layers = 1;
  cfg.classes = 3;
  cfg.attention.heads = 2;
  cfg.attention.max_offset = 1.5;
  return cfg;
}

Tensor random_image(Rng& rng, std::size_t h, std::size_t w, bool requires_grad = false) {
  return random_tensor(rng, {3, h, w}, 0.0, 1.0, requires_grad);
}

SegTarget box_target(std::size_t h, std::size_t w, std::size_t count, std::size_t classes) {
  SegTarget t;
  for (std::size_t g = 0; g < count; ++g) {
    Mask m(h, w);
    for (std::size_t y = 2 + 3 * g; y < std::min(h, 8 + 5 * g); ++y)
      for (std::size_t x = 1 + 4 * g; x < std::min(w, 12 + 4 * g); ++x) m.set(y, x);
    t.masks.push_back(m);
    t.labels.push_back(g % classes);
  }
  return t;
}

// Minimum total cost over all injections of columns into rows.
double brute_force_cost(const std::vector<double>& c, std::size_t rows, std::size_t cols) {
  std::vector<std::size_t> rows_idx(rows);
  std::iota(rows_idx.begin(), rows_idx.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  // Every permutation's first `cols` entries enumerate all injections (with repeats).
  do {
    double s = 0.0;
    for (std::size_t g = 0; g < cols; ++g) s += c[rows_idx[g] * cols + g];
    best = std::min(best, s);
  } while (std::next_permutation(rows_idx.begin(), rows_idx.end()));
  return best;
}

double assignment_cost(const std::vector<double>& c, const std::vector<std::size_t>& a, std::size_t cols) {
  double s = 0.0;
  for (std::size_t g = 0; g < cols; ++g) s += c[a[g] * cols + g];
  return s;
}

}  // namespace

TEST_CASE("stem and encoder follow the stride and channel chain") {
  SegmenterConfig cfg;
  ChartFormer model(cfg, 0);
  Rng rng(1);
  const Tensor img = random_image(rng, 64, 64);
  const Tensor e = model.encoder().stem(img);
  CHECK(e.shape() == Shape{16, 16, 16});
  const EncoderOutput enc = model.encoder()(img);
  REQUIRE(enc.stages.size() == 4);
  const Shape expected[] = {{16, 16, 16}, {32, 8, 8}, {64, 4, 4}, {128, 2, 2}};
  for (std::size_t s = 0; s < 4; ++s) CHECK(enc.stages[s].shape() == expected[s]);
  CHECK(enc.x().shape() == Shape{128, 2, 2});

  const PixelOutput px = model.decode_pixels(enc, img);
  REQUIRE(px.levels.size() == 3);
  CHECK(px.levels[0].shape() == Shape{64, 4, 4});
  CHECK(px.levels[1].shape() == Shape{64, 8, 8});
  CHECK(px.levels[2].shape() == Shape{64, 16, 16});
  CHECK(px.full.shape() == Shape{64, 64, 64});

  CHECK_THROWS_AS(model.encoder().stem(random_image(rng, 48, 64)), InputError);
  CHECK_THROWS_AS(model.forward(Tensor::zeros({1, 64, 64})), InputError);
}

TEST_CASE("shape chain holds for non-square divisible sizes") {
  SegmenterConfig cfg = tiny_config();
  ChartFormer model(cfg, 2);
  Rng rng(3);
  const Tensor img = random_image(rng, 32, 96);
  const SegmentationForward f = model.forward(img);
  CHECK(f.encoder.x().shape() == Shape{32, 1, 3});
  CHECK(f.pixels.full.shape() == Shape{8, 32, 96});
  CHECK(f.final().class_logits.shape() == Shape{3, 4});
  CHECK(f.final().mask_logits.shape() == Shape{3, 32 * 96});
  CHECK(f.queries.shape() == Shape{3, 8});
}

TEST_CASE("stem, encoder and pixel decoder gradients") {
  SegmenterConfig cfg = tiny_config();
  ChartFormer model(cfg, 4);
  Rng rng(5);
  jitter(model.params(), rng, 0.2);
  Tensor img = random_image(rng, 32, 32, true);
  const auto stem_report = check_grads([&] { return model.encoder().stem(img); }, {{"image", img}}, 40);
  CHECK(stem_report.max_rel_error() < 1e-4);
  const auto enc_report = check_grads([&] { return model.encoder()(img).x(); }, model.params().entries(), 3);
  CHECK(enc_report.max_rel_error() < 1e-4);
  const auto px_report =
      check_grads([&] { return model.decode_pixels(model.encoder()(img), img).full; }, model.params().entries(), 3);
  CHECK(px_report.max_rel_error() < 1e-4);
}

TEST_CASE("mask decoder: shape, all-pass mask identity, gradcheck") {
  SegmenterConfig cfg = tiny_config();
  cfg.queries = 4;
  cfg.decoder_layers = 2;
  ParamRegistry reg;
  Rng rng(6);
  MaskDecoder dec(reg, "dec", cfg, rng);
  jitter(reg, rng, 0.2);
  const Tensor q = dec.initial_queries();
  CHECK(q.shape() == Shape{4, 8});
  const Tensor mem = random_tensor(rng, {25, 8});
  const std::vector<std::uint8_t> all(4 * 25, 1);
  const Tensor open = dec.layer(0, q, mem, {});
  const Tensor masked = dec.layer(0, q, mem, all);
  CHECK(open.shape() == Shape{4, 8});
  CHECK(max_abs_diff(open.data(), masked.data()) < 1e-10);

  // Partial masks change the result; fully blocked rows fall back to open rows upstream.
  std::vector<std::uint8_t> half(4 * 25, 0);
  for (std::size_t i = 0; i < half.size(); i += 2) half[i] = 1;
  CHECK(max_abs_diff(open.data(), dec.layer(0, q, mem, half).data()) > 1e-6);

  Tensor mem_g = random_tensor(rng, {25, 8});
  const auto report = check_grads(
      [&] { return dec.layer(1, dec.layer(0, dec.initial_queries(), mem_g, {}), mem_g, half); },
      chart::testing::with_inputs(reg, {{"memory", mem_g}}), 4);
  CHECK(report.max_rel_error() < 1e-4);
}

TEST_CASE("attention mask pools full-resolution probabilities") {
  SegmenterConfig cfg = tiny_config();
  ChartFormer model(cfg, 0);
  // Query 0 is on in the top-left quadrant only, query 1 is off everywhere.
  std::vector<double> logits(2 * 16, -5.0);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x) logits[y * 4 + x] = 5.0;
  const auto keep = model.attention_mask(Tensor::from({2, 16}, logits), 4, 4, 2, 2);
  CHECK(keep == std::vector<std::uint8_t>{1, 0, 0, 0, 1, 1, 1, 1});
}

TEST_CASE("predict: thresholds at the extremes, simplex rows, tight boxes, monotone shrinkage") {
  SegmenterConfig cfg = tiny_config();
  ChartFormer model(cfg, 7);
  Rng rng(8);
  jitter(model.params(), rng, 0.3);
  const Tensor img = random_image(rng, 32, 32);
  const auto full = model.predict(img, 0.0);
  const auto none = model.predict(img, 1.0);
  for (std::size_t i = 0; i < cfg.queries; ++i) {
    CHECK(full.masks[i].count() == 32u * 32u);
    CHECK(none.masks[i].count() == 0u);
    CHECK_FALSE(none.boxes[i].has_value());
    REQUIRE(full.boxes[i].has_value());
    CHECK(*full.boxes[i] == PixelBox{0, 0, 31, 31});
    const double s = std::accumulate(full.class_probs[i].begin(), full.class_probs[i].end(), 0.0);
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
  std::vector<Mask> prev = full.masks;
  for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    const auto out = model.predict(img, t);
    for (std::size_t i = 0; i < cfg.queries; ++i) {
      for (std::size_t k = 0; k < prev[i].bits.size(); ++k) CHECK_FALSE((out.masks[i].bits[k] && !prev[i].bits[k]));
      if (out.boxes[i]) CHECK(*out.boxes[i] == bbox_from_mask(out.masks[i]));
    }
    prev = out.masks;
  }
  const auto dets = full.detections();
  REQUIRE(dets.size() == cfg.queries);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const auto& p = full.class_probs[i];
    CHECK(dets[i].category_id >= 1);
    CHECK(dets[i].category_id <= 3);
    CHECK(dets[i].score == *std::max_element(p.begin(), p.end() - 1));
  }
}

TEST_CASE("hungarian matching equals brute force") {
  CHECK(hungarian_match({3.0}, 1, 1) == std::vector<std::size_t>{0});
  std::vector<double> diag(16, 1.0);
  for (std::size_t i = 0; i < 4; ++i) diag[i * 4 + i] = 0.0;
  CHECK(hungarian_match(diag, 4, 4) == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK_THROWS_AS(hungarian_match(std::vector<double>(6, 0.0), 2, 3), InputError);
  CHECK(hungarian_match({}, 3, 0).empty());

  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t g = 1 + static_cast<std::size_t>(trial % 6);
    const std::size_t n = 6;
    std::vector<double> c(n * g);
    for (double& v : c) v = trial % 2 == 0 ? rng.integer(0, 5) : rng.uniform(-1.0, 1.0);
    const auto a = hungarian_match(c, n, g);
    std::vector<std::size_t> sorted = a;
    std::sort(sorted.begin(), sorted.end());
    CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
    CHECK(assignment_cost(c, a, g) == brute_force_cost(c, n, g));
  }
}

TEST_CASE("dice stays in [0, 1]; perfect masks give small dice and focal") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor logits = random_tensor(rng, {3, 20}, -6.0, 6.0, false);
    std::vector<double> tg(60);
    for (double& v : tg) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
    const Tensor d = dice_loss(logits, tg, 3, 1e-6);
    for (double v : d.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  const double eps = 1e-3;
  const double big = std::log((1.0 - eps) / eps);
  SegmenterConfig cfg = tiny_config();
  SegTarget t;
  Mask m(4, 8);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 8; ++x) m.set(y, x);
  t.masks.push_back(m);
  t.labels.push_back(1);
  std::vector<double> ml(3 * 32, -big);
  for (std::size_t k = 0; k < 32; ++k) ml[k] = m.bits[k] ? big : -big;
  std::vector<double> cl(3 * 4, -20.0);
  cl[0 * 4 + 1] = 20.0;
  cl[1 * 4 + 3] = 20.0;
  cl[2 * 4 + 3] = 20.0;
  const HeadOutput head{Tensor::from({3, 4}, cl), Tensor::from({3, 32}, ml)};
  const LossBreakdown lb = segmentation_loss(head, t, cfg);
  CHECK(lb.assignment == std::vector<std::size_t>{0});
  CHECK(lb.dice <= 2 * eps);
  CHECK(lb.focal <= -std::log(1.0 - eps));
  CHECK(lb.classification < 1e-6);
}

TEST_CASE("loss gradients w.r.t. class and mask logits") {
  Rng rng(13);
  SegmenterConfig cfg = tiny_config();
  cfg.queries = 4;
  const SegTarget t = box_target(16, 16, 3, cfg.classes);
  Tensor cl = random_tensor(rng, {4, 4}, -2.0, 2.0);
  Tensor ml = random_tensor(rng, {4, 256}, -3.0, 3.0);
  const HeadOutput head{cl, ml};
  const auto assignment = segmentation_loss(head, t, cfg).assignment;
  GradCheckOptions opt;
  opt.eps = 1e-5;
  const auto report = grad_check([&] { return segmentation_loss({cl, ml}, t, cfg, assignment).total; },
                                 {{"class_logits", cl}, {"mask_logits", ml}}, opt);
  CHECK(report.max_rel_error() < 1e-4);
  std::vector<double> flat;
  for (const auto& mk : t.masks)
    for (auto b : mk.bits) flat.push_back(b);
  Tensor rows = random_tensor(rng, {3, 256}, -3.0, 3.0);
  const auto dice_report = grad_check([&] { return sum(dice_loss(rows, flat, 3, 1e-6)); }, {{"rows", rows}}, opt);
  CHECK(dice_report.max_rel_error() < 1e-4);
  CHECK_THROWS_AS(segmentation_loss(head, box_target(8, 8, 1, 3), cfg), InputError);
}

TEST_CASE("end-to-end gradcheck on the tiny configuration") {
  SegmenterConfig cfg = tiny_config();
  ChartFormer model(cfg, 14);
  Rng rng(15);
  jitter(model.params(), rng, 0.2);
  const Tensor img = random_image(rng, 32, 32);
  const SegTarget t = box_target(32, 32, 2, cfg.classes);
  std::vector<std::size_t> assignment;
  {
    NoGradGuard g;
    assignment = segmentation_loss(model.forward(img).final(), t, cfg).assignment;
  }
  GradCheckOptions opt;
  opt.eps = 1e-5;
  opt.max_entries = 3;
  const auto report = grad_check([&] { return segmentation_loss(model.forward(img).final(), t, cfg, assignment).total; },
                                 model.params().entries(), opt);
  CHECK(report.entries.size() == model.params().entries().size());
  CHECK(report.max_rel_error() < 1e-4);
}

TEST_CASE("train step: zero step size, determinism, loss decrease") {
  SegmenterConfig cfg = tiny_config();
  cfg.base_channels = 8;
  cfg.embed_channels = 16;
  cfg.query_channels = 16;
  cfg.queries = 5;
  cfg.decoder_layers = 2;
  Rng rng(16);
  const TrainSample sample{random_image(rng, 32, 32), box_target(32, 32, 3, cfg.classes)};

  {
    ChartFormer model(cfg, 0);
    std::vector<std::vector<double>> before;
    for (const auto& e : model.params().entries()) before.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
    OptimizerConfig oc;
    oc.learning_rate = 0.0;
    SegTrainer trainer(model, oc);
    trainer.step({&sample});
    for (std::size_t i = 0; i < before.size(); ++i) {
      const auto now = model.params().entries()[i].tensor.data();
      CHECK(std::equal(now.begin(), now.end(), before[i].begin()));
    }
  }

  auto run = [&] {
    ChartFormer model(cfg, 0);
    OptimizerConfig oc;
    oc.kind = "adam";
    oc.learning_rate = 2e-3;
    SegTrainer trainer(model, oc);
    std::vector<double> losses;
    for (int i = 0; i < 50; ++i) losses.push_back(trainer.step({&sample}));
    return losses;
  };
  const auto a = run();
  const auto b = run();
  CHECK(a == b);
  const double first = std::accumulate(a.begin(), a.begin() + 10, 0.0);
  const double last = std::accumulate(a.end() - 10, a.end(), 0.0);
  CHECK(last < first);
}

TEST_CASE("config validation and JSON round trip") {
  SegmenterConfig cfg;
  cfg.validate();
  nlohmann::json j = cfg;
  CHECK(j.get<SegmenterConfig>().queries == 20);
  j["queries"] = 7;
  CHECK(j.get<SegmenterConfig>().queries == 7);
  j["bogus"] = 1;
  CHECK_THROWS_AS(j.get<SegmenterConfig>(), ConfigError);
  SegmenterConfig bad = cfg;
  bad.mask_threshold = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.depths = {1, 1};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.query_channels = 30;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("training samples rasterize record polygons") {
  InstanceImage rec;
  rec.size = {32, 32};
  rec.annotations.push_back({Category::pie, {4, 4, 12, 4, 12, 12, 4, 12}, rec.size});
  rec.annotations.push_back({Category::legend, {20, 20, 20.2, 20, 20.2, 20.2}, rec.size});
  const TrainSample s = make_train_sample(Tensor::zeros({3, 32, 32}), rec);
  REQUIRE(s.target.masks.size() == 1);
  CHECK(s.target.labels[0] == 2);
  CHECK(s.target.masks[0].count() == 64u);
  CHECK_THROWS_AS(make_train_sample(Tensor::zeros({3, 16, 32}), rec), InputError);
}
