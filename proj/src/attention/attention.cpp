#include "chart/attention.hpp"

#include <cmath>

#include "chart/error.hpp"

namespace chart {

namespace {

std::size_t grid_extent(std::size_t n, std::size_t stride) { return (n - 1) / stride + 1; }

}  // namespace

void AttentionConfig::validate(std::size_t channels) const {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("attention: " + std::to_string(channels) + " channels do not split over " +
                      std::to_string(heads) + " heads");
  }
  if (window == 0 || window % 2 == 0) throw ConfigError("attention: window must be odd");
  if (offset_kernel == 0 || offset_kernel % 2 == 0) throw ConfigError("attention: offset_kernel must be odd");
  if (!(max_offset > 0.0)) throw ConfigError("attention: max_offset must be positive");
  if (question_len == 0 || question_dim == 0) throw ConfigError("attention: question_len and question_dim must be positive");
  if (downsample == 0) throw ConfigError("attention: downsample must be at least 1");
}

void to_json(nlohmann::json& j, const AttentionConfig& c) {
  j = {{"heads", c.heads},
       {"window", c.window},
       {"offset_kernel", c.offset_kernel},
       {"max_offset", c.max_offset},
       {"question_len", c.question_len},
       {"question_dim", c.question_dim},
       {"downsample", c.downsample}};
}

void from_json(const nlohmann::json& j, AttentionConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "heads") c.heads = value.get<std::size_t>();
    else if (key == "window") c.window = value.get<std::size_t>();
    else if (key == "offset_kernel") c.offset_kernel = value.get<std::size_t>();
    else if (key == "max_offset") c.max_offset = value.get<double>();
    else if (key == "question_len") c.question_len = value.get<std::size_t>();
    else if (key == "question_dim") c.question_dim = value.get<std::size_t>();
    else if (key == "downsample") c.downsample = value.get<std::size_t>();
    else throw ConfigError("unknown attention key: " + key);
  }
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            std::span<const std::uint8_t> keep, std::vector<Tensor>* weights) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) throw InputError("multi_head_attention: expects 2-D q, k, v");
  const std::size_t ch = q.dim(1);
  if (k.dim(1) != ch || v.dim(1) != ch || k.dim(0) != v.dim(0)) {
    throw InputError("multi_head_attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                     shape_str(v.shape()) + " do not line up");
  }
  if (heads == 0 || ch % heads != 0) throw ConfigError("multi_head_attention: channels must split evenly across heads");
  if (!keep.empty() && keep.size() != q.dim(0) * k.dim(0)) throw InputError("multi_head_attention: mask size mismatch");
  const std::size_t d = ch / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Tensor> parts;
  parts.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? q : slice(q, 1, h * d, (h + 1) * d);
    const Tensor kh = heads == 1 ? k : slice(k, 1, h * d, (h + 1) * d);
    const Tensor vh = heads == 1 ? v : slice(v, 1, h * d, (h + 1) * d);
    const Tensor logits = scale(matmul(qh, transpose(kh)), inv);
    const Tensor w = keep.empty() ? softmax(logits, 1) : masked_softmax(logits, keep);
    if (weights != nullptr) weights->push_back(w);
    parts.push_back(matmul(w, vh));
  }
  return heads == 1 ? parts[0] : concat(parts, 1);
}

Tensor reference_grid(std::size_t height, std::size_t width, std::size_t stride) {
  std::vector<double> pts;
  pts.reserve(height * width * 2);
  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j) {
      pts.push_back(static_cast<double>(j * stride));
      pts.push_back(static_cast<double>(i * stride));
    }
  return Tensor::from({height * width, 2}, std::move(pts));
}

Tensor deformable_sample(const Tensor& map, const Tensor& offsets, std::size_t stride) {
  if (map.rank() != 3) throw InputError("deformable_sample: map must be [C, H, W]");
  const std::size_t gh = grid_extent(map.dim(1), stride), gw = grid_extent(map.dim(2), stride);
  if (offsets.shape() != Shape{gh * gw, 2}) {
    throw InputError("deformable_sample: offsets " + shape_str(offsets.shape()) + " do not match the " +
                     std::to_string(gh) + "x" + std::to_string(gw) + " grid");
  }
  return bilinear_sample(map, add(reference_grid(gh, gw, stride), offsets));
}

// --- OffsetNetwork -------------------------------------------------------------

OffsetNetwork::OffsetNetwork(ParamRegistry& reg, const std::string& name, std::size_t in_channels, std::size_t hidden,
                             const AttentionConfig& cfg, Rng& rng)
    : conv_(reg, name + ".conv", in_channels, hidden, cfg.offset_kernel, cfg.downsample, rng),
      norm_(reg, name + ".norm", hidden, rng),
      proj_(reg, name + ".proj", hidden, 2, 1, 1, rng, true, Init::zeros),
      max_offset_(cfg.max_offset) {}

Tensor OffsetNetwork::operator()(const Tensor& map) const {
  const Tensor h = gelu(norm_(conv_(map), 0));
  const Tensor o = scale(tanh(proj_(h)), max_offset_);  // [2, H', W']
  return map_to_tokens(o);
}

// --- NeighborhoodAttention -----------------------------------------------------

NeighborhoodAttention::NeighborhoodAttention(ParamRegistry& reg, const std::string& name, std::size_t channels,
                                             const AttentionConfig& cfg, Rng& rng)
    : wq_(reg, name + ".wq", channels, channels, rng, false),
      wk_(reg, name + ".wk", channels, channels, rng, false),
      wv_(reg, name + ".wv", channels, channels, rng, false),
      wo_(reg, name + ".wo", channels, channels, rng, false),
      norm_(reg, name + ".norm", channels, rng),
      heads_(cfg.heads),
      window_(cfg.window) {
  cfg.validate(channels);
}

Tensor NeighborhoodAttention::attend(const Tensor& map, std::size_t window) const {
  const Tensor t = map_to_tokens(map);
  const std::size_t win = window == 0 ? window_ : window;
  const Tensor a = local_attention(wq_(t), wk_(t), wv_(t), map.dim(1), map.dim(2), win, heads_);
  return tokens_to_map(wo_(a), map.dim(1), map.dim(2));
}

Tensor NeighborhoodAttention::operator()(const Tensor& map, std::size_t window) const {
  return norm_(add(map, attend(map, window)), 0);
}

// --- DeformableAttention -------------------------------------------------------

DeformableAttention::DeformableAttention(ParamRegistry& reg, const std::string& name, std::size_t channels,
                                         const AttentionConfig& cfg, Rng& rng)
    : wq_(reg, name + ".wq", channels, channels, rng, false),
      wk_(reg, name + ".wk", channels, channels, rng, false),
      wv_(reg, name + ".wv", channels, channels, rng, false),
      wo_(reg, name + ".wo", channels, channels, rng, false),
      offsets_(reg, name + ".offset", channels, channels, cfg, rng),
      norm_(reg, name + ".norm", channels, rng),
      heads_(cfg.heads),
      stride_(cfg.downsample) {
  cfg.validate(channels);
}

Tensor DeformableAttention::attend(const Tensor& map, DeformableTrace* trace) const {
  const std::size_t h = map.dim(1), w = map.dim(2);
  const Tensor q = wq_(map_to_tokens(map));
  const Tensor offsets = offsets_(tokens_to_map(q, h, w));
  const Tensor sampled = deformable_sample(map, offsets, stride_);
  std::vector<Tensor>* weights = trace != nullptr ? &trace->weights : nullptr;
  const Tensor a = multi_head_attention(q, wk_(sampled), wv_(sampled), heads_, {}, weights);
  if (trace != nullptr) trace->offsets = offsets;
  return tokens_to_map(wo_(a), h, w);
}

Tensor DeformableAttention::operator()(const Tensor& map, DeformableTrace* trace) const {
  return norm_(add(map, attend(map, trace)), 0);
}

// --- QuestionOffsetNetwork -----------------------------------------------------

QuestionOffsetNetwork::QuestionOffsetNetwork(ParamRegistry& reg, const std::string& name, std::size_t channels,
                                             const AttentionConfig& cfg, Rng& rng)
    : wa_(reg, name + ".wa", channels, cfg.question_dim, rng, false),
      net_(reg, name + ".offset", cfg.question_len, channels, cfg, rng),
      question_len_(cfg.question_len) {}

Tensor QuestionOffsetNetwork::similarity(const Tensor& x, const Tensor& z) const {
  if (z.rank() != 2 || z.dim(0) != question_len_) {
    throw InputError("question embedding must have " + std::to_string(question_len_) + " rows, got " +
                     shape_str(z.shape()));
  }
  const Tensor a = wa_(map_to_tokens(x));           // [HW, D_z]
  const Tensor s = matmul(z, transpose(a));         // [T_q, HW]
  return reshape(s, {question_len_, x.dim(1), x.dim(2)});
}

Tensor QuestionOffsetNetwork::operator()(const Tensor& x, const Tensor& z) const { return net_(similarity(x, z)); }

// --- DCAttention ---------------------------------------------------------------

DCAttention::DCAttention(ParamRegistry& reg, const std::string& name, std::size_t channels, const AttentionConfig& cfg,
                         Rng& rng)
    : qon_(reg, name + ".qon", channels, cfg, rng),
      wq_(reg, name + ".wq", channels, channels, rng, false),
      wk_(reg, name + ".wk", channels, channels, rng, false),
      wv_(reg, name + ".wv", channels, channels, rng, false),
      wm_(reg, name + ".wm", channels, channels, rng, false),
      heads_(cfg.heads),
      stride_(cfg.downsample) {
  cfg.validate(channels);
}

Tensor DCAttention::sample(const Tensor& x, const Tensor& z, Tensor* offsets) const {
  const Tensor dp = qon_(x, z);
  if (offsets != nullptr) *offsets = dp;
  return deformable_sample(x, dp, stride_);
}

Tensor DCAttention::operator()(const Tensor& x, const Tensor& y, const Tensor& z, bool use_qon,
                               CoAttentionTrace* trace) const {
  if (x.rank() != 3 || y.rank() != 3 || x.dim(1) != y.dim(1) || x.dim(2) != y.dim(2) || x.dim(0) != y.dim(0)) {
    throw InputError("DCAttention: x " + shape_str(x.shape()) + " and y " + shape_str(y.shape()) +
                     " must share channels and spatial extents");
  }
  Tensor offsets;
  const Tensor src = use_qon ? sample(x, z, &offsets) : map_to_tokens(x);
  const Tensor q = wq_(map_to_tokens(y));
  std::vector<Tensor>* weights = trace != nullptr ? &trace->weights : nullptr;
  const Tensor a = multi_head_attention(q, wk_(src), wv_(src), heads_, {}, weights);
  if (trace != nullptr) trace->offsets = offsets;
  return wm_(a);
}

// --- QDCAtBlock ----------------------------------------------------------------

QDCAtBlock::QDCAtBlock(ParamRegistry& reg, const std::string& name, std::size_t channels, std::size_t out_channels,
                       const AttentionConfig& cfg, Rng& rng)
    : dca_(reg, name + ".dca", channels, cfg, rng),
      norm1_(reg, name + ".norm1", channels, rng),
      norm2_(reg, name + ".norm2", channels, rng),
      ffn_(reg, name + ".ffn", channels, channels, 3, 1, rng),
      wo_(reg, name + ".wo", channels, out_channels, rng) {}

Tensor QDCAtBlock::residual(const Tensor& x, const Tensor& y, const Tensor& z, bool use_qon) const {
  return norm1_(add(map_to_tokens(y), dca_(x, y, z, use_qon)), 1);
}

Tensor QDCAtBlock::operator()(const Tensor& x, const Tensor& y, const Tensor& z, bool use_qon,
                              CoAttentionTrace* trace) const {
  const Tensor b_tokens = norm1_(add(map_to_tokens(y), dca_(x, y, z, use_qon, trace)), 1);
  const Tensor b = tokens_to_map(b_tokens, y.dim(1), y.dim(2));
  const Tensor c = norm2_(add(b, relu(ffn_(b))), 0);
  return wo_(map_to_tokens(c));
}

}  // namespace chart
