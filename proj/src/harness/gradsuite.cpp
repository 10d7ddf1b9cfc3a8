#include <chrono>
#include <cmath>
#include <functional>

#include "chart/error.hpp"
#include "chart/gradcheck.hpp"
#include "chart/harness.hpp"

namespace chart {

namespace {

Tensor rand_t(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Values in +-[lo, hi] so kinks at zero stay outside the finite-difference stencil.
Tensor away_from_zero(Rng& rng, Shape shape, double lo, double hi) {
  Tensor t = rand_t(rng, std::move(shape), lo, hi);
  for (double& x : t.mutable_data())
    if (rng.bernoulli(0.5)) x = -x;
  return t;
}

// Fixed random weighting of every output entry.
Tensor weigh(const Tensor& out) {
  Rng rng(7);
  std::vector<double> w(out.numel());
  for (double& x : w) x = rng.uniform(-1.0, 1.0);
  return sum(mul(out, Tensor::from(out.shape(), std::move(w))));
}

void shake(ParamRegistry& reg, Rng& rng, double amp) {
  for (const auto& e : reg.entries()) {
    Tensor t = e.tensor;
    for (double& v : t.mutable_data()) v += rng.uniform(-amp, amp);
  }
}

std::vector<NamedTensor> plus(const ParamRegistry& reg, std::vector<NamedTensor> inputs) {
  std::vector<NamedTensor> all = reg.entries();
  all.insert(all.end(), inputs.begin(), inputs.end());
  return all;
}

struct Case {
  std::string name;
  std::string scope;
  std::function<GradCheckReport(const GradCheckOptions&)> run;
  std::size_t max_entries = 0;
};

GradCheckReport check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& params,
                      const GradCheckOptions& opt) {
  return grad_check([&] { return weigh(f()); }, params, opt);
}

SegmenterConfig small_segmenter() {
  SegmenterConfig cfg;
  cfg.base_channels = 4;
  cfg.embed_channels = 8;
  cfg.query_channels = 8;
  cfg.queries = 4;
  cfg.decoder_layers = 2;
  cfg.classes = 3;
  cfg.attention.heads = 2;
  cfg.attention.max_offset = 1.5;
  return cfg;
}

AttentionConfig small_attention() {
  AttentionConfig a;
  a.heads = 2;
  a.max_offset = 1.5;
  a.question_len = 3;
  a.question_dim = 5;
  return a;
}

std::vector<Case> op_cases() {
  std::vector<Case> cs;
  auto unary = [&](const std::string& name, std::function<Tensor(const Tensor&)> f, double lo = -1.5,
                   double hi = 1.5, bool signed_gap = false) {
    cs.push_back({name, "ops", [=](const GradCheckOptions& o) {
                    Rng rng(11);
                    Tensor a = signed_gap ? away_from_zero(rng, {3, 4}, lo, hi) : rand_t(rng, {3, 4}, lo, hi);
                    return check([&] { return f(a); }, {{"a", a}}, o);
                  }});
  };
  auto binary = [&](const std::string& name, std::function<Tensor(const Tensor&, const Tensor&)> f) {
    cs.push_back({name, "ops", [=](const GradCheckOptions& o) {
                    Rng rng(12);
                    Tensor a = rand_t(rng, {3, 4}, -1.0, 1.0);
                    Tensor b = away_from_zero(rng, {3, 4}, 0.5, 1.5);
                    return check([&] { return f(a, b); }, {{"a", a}, {"b", b}}, o);
                  }});
  };
  binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); });
  binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); });
  binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); });
  binary("div", [](const Tensor& a, const Tensor& b) { return div(a, b); });
  unary("scale", [](const Tensor& a) { return scale(a, -1.7); });
  unary("add_scalar", [](const Tensor& a) { return mul(add_scalar(a, 0.4), a); });
  unary("transpose", [](const Tensor& a) { return transpose(a); });
  unary("reshape", [](const Tensor& a) { return reshape(a, {2, 6}); });
  unary("slice", [](const Tensor& a) { return slice(a, 1, 1, 3); });
  unary("sum", [](const Tensor& a) { return mul(sum(a), sum(a)); });
  unary("mean", [](const Tensor& a) { return mul(mean(a), sum(a)); });
  unary("sum_axis", [](const Tensor& a) { return sum_axis(a, 0); });
  unary("softmax", [](const Tensor& a) { return softmax(a, 1); }, -2.0, 2.0);
  unary("masked_softmax", [](const Tensor& a) {
    static const std::vector<std::uint8_t> keep = {1, 0, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1};
    return masked_softmax(a, keep);
  });
  unary("gelu", [](const Tensor& a) { return gelu(a); }, -3.0, 3.0);
  unary("relu", [](const Tensor& a) { return relu(a); }, 0.1, 2.0, true);
  unary("sigmoid", [](const Tensor& a) { return sigmoid(a); }, -4.0, 4.0);
  unary("tanh", [](const Tensor& a) { return tanh(a); }, -2.0, 2.0);
  cs.push_back({"add_broadcast", "ops", [](const GradCheckOptions& o) {
                  Rng rng(13);
                  Tensor x = rand_t(rng, {2, 3, 4}, -1.0, 1.0), b = rand_t(rng, {3}, -1.0, 1.0);
                  return check([&] { return add_broadcast(x, b, 1); }, {{"x", x}, {"bias", b}}, o);
                }});
  cs.push_back({"matmul", "ops", [](const GradCheckOptions& o) {
                  Rng rng(14);
                  Tensor a = rand_t(rng, {3, 5}, -1.0, 1.0), b = rand_t(rng, {5, 2}, -1.0, 1.0);
                  return check([&] { return matmul(a, b); }, {{"a", a}, {"b", b}}, o);
                }});
  cs.push_back({"concat", "ops", [](const GradCheckOptions& o) {
                  Rng rng(15);
                  Tensor a = rand_t(rng, {2, 3}, -1.0, 1.0), b = rand_t(rng, {2, 2}, -1.0, 1.0);
                  return check([&] { return concat({a, b, a}, 1); }, {{"a", a}, {"b", b}}, o);
                }});
  cs.push_back({"gather_rows", "ops", [](const GradCheckOptions& o) {
                  Rng rng(16);
                  Tensor t = rand_t(rng, {4, 3}, -1.0, 1.0);
                  const std::vector<std::size_t> rows = {2, 0, 2, 3};
                  return check([&] { return gather_rows(t, rows); }, {{"table", t}}, o);
                }});
  cs.push_back({"layer_norm", "ops", [](const GradCheckOptions& o) {
                  Rng rng(17);
                  Tensor x = rand_t(rng, {3, 5}, -2.0, 2.0), g = rand_t(rng, {5}, 0.5, 1.5), b = rand_t(rng, {5}, -0.5, 0.5);
                  return check([&] { return layer_norm(x, g, b, 1); }, {{"x", x}, {"gain", g}, {"bias", b}}, o);
                }});
  cs.push_back({"layer_norm_channels", "ops", [](const GradCheckOptions& o) {
                  Rng rng(18);
                  Tensor x = rand_t(rng, {4, 2, 3}, -2.0, 2.0), g = rand_t(rng, {4}, 0.5, 1.5), b = rand_t(rng, {4}, -0.5, 0.5);
                  return check([&] { return layer_norm(x, g, b, 0); }, {{"x", x}, {"gain", g}, {"bias", b}}, o);
                }});
  for (std::size_t stride : {1u, 2u}) {
    cs.push_back({"conv2d_s" + std::to_string(stride), "ops", [stride](const GradCheckOptions& o) {
                    Rng rng(19);
                    Tensor x = rand_t(rng, {2, 5, 6}, -1.0, 1.0), k = rand_t(rng, {3, 2, 3, 3}, -1.0, 1.0);
                    Tensor b = rand_t(rng, {3}, -1.0, 1.0);
                    return check([&] { return conv2d(x, k, b, stride, 1); }, {{"x", x}, {"kernel", k}, {"bias", b}}, o);
                  }});
  }
  cs.push_back({"upsample_nearest", "ops", [](const GradCheckOptions& o) {
                  Rng rng(20);
                  Tensor x = rand_t(rng, {2, 2, 3}, -1.0, 1.0);
                  return check([&] { return upsample_nearest(x, 2); }, {{"x", x}}, o);
                }});
  cs.push_back({"bilinear_sample", "ops", [](const GradCheckOptions& o) {
                  Rng rng(21);
                  Tensor x = rand_t(rng, {2, 4, 5}, -1.0, 1.0);
                  // Off-integer interior points keep the stencil inside one cell.
                  std::vector<double> pv;
                  for (int i = 0; i < 6; ++i) {
                    pv.push_back(std::floor(rng.uniform(0.0, 3.99)) + rng.uniform(0.1, 0.9));
                    pv.push_back(std::floor(rng.uniform(0.0, 2.99)) + rng.uniform(0.1, 0.9));
                  }
                  Tensor p = Tensor::from({6, 2}, std::move(pv), true);
                  return check([&] { return bilinear_sample(x, p); }, {{"x", x}, {"points", p}}, o);
                }});
  cs.push_back({"local_attention", "ops", [](const GradCheckOptions& o) {
                  Rng rng(22);
                  Tensor q = rand_t(rng, {12, 4}, -1.0, 1.0), k = rand_t(rng, {12, 4}, -1.0, 1.0), v = rand_t(rng, {12, 4}, -1.0, 1.0);
                  return check([&] { return local_attention(q, k, v, 3, 4, 3, 2); }, {{"q", q}, {"k", k}, {"v", v}}, o);
                }});
  cs.push_back({"multi_head_attention", "ops", [](const GradCheckOptions& o) {
                  Rng rng(23);
                  Tensor q = rand_t(rng, {3, 4}, -1.0, 1.0), k = rand_t(rng, {5, 4}, -1.0, 1.0), v = rand_t(rng, {5, 4}, -1.0, 1.0);
                  std::vector<std::uint8_t> keep(15, 1);
                  keep[1] = keep[7] = 0;
                  return check([&] { return multi_head_attention(q, k, v, 2, keep); }, {{"q", q}, {"k", k}, {"v", v}}, o);
                }});
  cs.push_back({"deformable_sample", "ops", [](const GradCheckOptions& o) {
                  Rng rng(24);
                  Tensor x = rand_t(rng, {2, 4, 4}, -1.0, 1.0);
                  std::vector<double> ov(32);
                  for (double& d : ov) d = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.15, 0.85);
                  Tensor off = Tensor::from({16, 2}, std::move(ov), true);
                  return check([&] { return deformable_sample(x, off); }, {{"x", x}, {"offsets", off}}, o);
                }});
  cs.push_back({"cross_entropy", "ops", [](const GradCheckOptions& o) {
                  Rng rng(25);
                  Tensor lg = rand_t(rng, {4, 3}, -2.0, 2.0);
                  const std::vector<std::size_t> t = {0, 2, 1, 2};
                  const std::vector<double> w = {1.0, 0.5, 2.0};
                  return grad_check([&] { return cross_entropy(lg, t, w); }, {{"logits", lg}}, o);
                }});
  cs.push_back({"sigmoid_focal", "ops", [](const GradCheckOptions& o) {
                  Rng rng(26);
                  Tensor lg = rand_t(rng, {3, 4}, -3.0, 3.0);
                  std::vector<double> t(12);
                  for (double& v : t) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
                  return check([&] { return sigmoid_focal(lg, t, 0.25, 2.0); }, {{"logits", lg}}, o);
                }});
  return cs;
}

std::vector<Case> module_cases() {
  std::vector<Case> cs;
  const AttentionConfig ac = small_attention();
  cs.push_back({"offset_network", "modules", [ac](const GradCheckOptions& o) {
                  ParamRegistry reg;
                  Rng rng(31);
                  OffsetNetwork net(reg, "off", 4, 4, ac, rng);
                  shake(reg, rng, 0.3);
                  Tensor x = rand_t(rng, {4, 3, 4}, -1.0, 1.0);
                  return check([&] { return net(x); }, plus(reg, {{"x", x}}), o);
                }});
  cs.push_back({"neighborhood_attention", "modules", [ac](const GradCheckOptions& o) {
                  ParamRegistry reg;
                  Rng rng(32);
                  NeighborhoodAttention na(reg, "na", 4, ac, rng);
                  shake(reg, rng, 0.3);
                  Tensor x = rand_t(rng, {4, 3, 4}, -1.0, 1.0);
                  return check([&] { return na(x); }, plus(reg, {{"x", x}}), o);
                }});
  cs.push_back({"deformable_attention", "modules", [ac](const GradCheckOptions& o) {
                  ParamRegistry reg;
                  Rng rng(33);
                  DeformableAttention da(reg, "da", 4, ac, rng);
                  shake(reg, rng, 0.3);
                  Tensor x = rand_t(rng, {4, 3, 4}, -1.0, 1.0);
                  return check([&] { return da(x); }, plus(reg, {{"x", x}}), o);
                }});
  cs.push_back({"question_offset_network", "modules", [ac](const GradCheckOptions& o) {
                  ParamRegistry reg;
                  Rng rng(34);
                  QuestionOffsetNetwork qon(reg, "qon", 4, ac, rng);
                  shake(reg, rng, 0.3);
                  Tensor x = rand_t(rng, {4, 3, 4}, -1.0, 1.0), z = rand_t(rng, {3, 5}, -1.0, 1.0);
                  return check([&] { return qon(x, z); }, plus(reg, {{"x", x}, {"z", z}}), o);
                }});
  cs.push_back({"qdcat_block", "modules", [ac](const GradCheckOptions& o) {
                  ParamRegistry reg;
                  Rng rng(35);
                  QDCAtBlock blk(reg, "qdcat", 4, 6, ac, rng);
                  shake(reg, rng, 0.3);
                  Tensor x = rand_t(rng, {4, 3, 4}, -1.0, 1.0), y = rand_t(rng, {4, 3, 4}, -1.0, 1.0);
                  Tensor z = rand_t(rng, {3, 5}, -1.0, 1.0);
                  return check([&] { return blk(x, y, z); }, plus(reg, {{"x", x}, {"y", y}, {"z", z}}), o);
                }});
  cs.push_back({"mask_decoder_layer", "modules", [](const GradCheckOptions& o) {
                  const SegmenterConfig cfg = small_segmenter();
                  ParamRegistry reg;
                  Rng rng(36);
                  MaskDecoder dec(reg, "dec", cfg, rng);
                  shake(reg, rng, 0.2);
                  Tensor mem = rand_t(rng, {20, cfg.embed_channels}, -1.0, 1.0);
                  std::vector<std::uint8_t> keep(cfg.queries * 20, 0);
                  for (std::size_t i = 0; i < keep.size(); i += 2) keep[i] = 1;
                  return check([&] { return dec.layer(1, dec.layer(0, dec.initial_queries(), mem, {}), mem, keep); },
                               plus(reg, {{"memory", mem}}), o);
                }});
  return cs;
}

std::vector<Case> loss_cases() {
  std::vector<Case> cs;
  cs.push_back({"segmentation_loss", "losses", [](const GradCheckOptions& o) {
                  SegmenterConfig cfg = small_segmenter();
                  Rng rng(41);
                  SegTarget t;
                  for (std::size_t g = 0; g < 3; ++g) {
                    Mask m(8, 8);
                    for (std::size_t y = g; y < 4 + 2 * g; ++y)
                      for (std::size_t x = 1 + g; x < 6 + g; ++x) m.set(y, x);
                    t.masks.push_back(m);
                    t.labels.push_back(g % cfg.classes);
                  }
                  Tensor cl = rand_t(rng, {cfg.queries, cfg.classes + 1}, -2.0, 2.0);
                  Tensor ml = rand_t(rng, {cfg.queries, 64}, -3.0, 3.0);
                  const auto assignment = segmentation_loss({cl, ml}, t, cfg).assignment;
                  return grad_check([&] { return segmentation_loss({cl, ml}, t, cfg, assignment).total; },
                                    {{"class_logits", cl}, {"mask_logits", ml}}, o);
                }});
  cs.push_back({"answer_loss", "losses", [](const GradCheckOptions& o) {
                  SegmenterConfig sc = small_segmenter();
                  ChartFormer chart(sc, 42);
                  QaConfig qc;
                  qc.fusion = small_attention();
                  qc.decoder_dim = 8;
                  qc.decoder_heads = 2;
                  qc.decoder_layers = 2;
                  qc.max_answer_tokens = 3;
                  const Vocabulary vocab = Vocabulary::build({"which bar is the tallest ?", "red blue"});
                  QaModel m(chart, qc, vocab, 43);
                  Rng rng(44);
                  shake(m.params(), rng, 0.2);
                  QaSample s;
                  s.id = "q";
                  s.image = rand_t(rng, {3, 64, 64}, 0.0, 1.0);
                  s.image.set_requires_grad(false);
                  s.question = vocab.encode("which bar is the tallest ?");
                  s.answer = vocab.encode("red blue");
                  m.prepare(s);
                  return grad_check([&] { return m.loss(s); }, m.params().entries(), o);
                },
                24});
  return cs;
}

}  // namespace

std::vector<GradSuiteResult> run_gradcheck_suite(const std::string& scope, double eps) {
  if (scope != "all" && scope != "ops" && scope != "modules" && scope != "losses") {
    throw ConfigError("gradcheck scope must be all, ops, modules or losses");
  }
  std::vector<Case> cases;
  for (auto* group : {&op_cases, &module_cases, &loss_cases})
    for (auto& c : (*group)())
      if (scope == "all" || c.scope == scope) cases.push_back(std::move(c));
  std::vector<GradSuiteResult> out;
  for (const Case& c : cases) {
    GradCheckOptions opt;
    opt.eps = eps;
    opt.max_entries = c.max_entries;
    const auto t0 = std::chrono::steady_clock::now();
    const GradCheckReport rep = c.run(opt);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::size_t checked = 0;
    for (const auto& e : rep.entries) checked += e.checked;
    out.push_back({c.name, c.scope, rep.max_rel_error(), checked, secs});
  }
  return out;
}

nlohmann::json gradcheck_report_json(const std::vector<GradSuiteResult>& results, double tolerance) {
  nlohmann::json ops = nlohmann::json::array();
  double worst = 0.0;
  for (const auto& r : results) {
    ops.push_back({{"name", r.name},
                   {"scope", r.scope},
                   {"max_rel_error", r.max_rel_error},
                   {"entries_checked", r.checked},
                   {"seconds", r.seconds},
                   {"passed", r.max_rel_error < tolerance}});
    worst = std::max(worst, r.max_rel_error);
  }
  return {{"tolerance", tolerance}, {"max_rel_error", worst}, {"passed", worst < tolerance}, {"ops", ops}};
}

}  // namespace chart
