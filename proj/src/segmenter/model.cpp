#include <algorithm>
#include <cmath>
#include <limits>

#include "chart/error.hpp"
#include "chart/segmenter.hpp"

namespace chart {

namespace {

// Maps [0, 1] pixels to [-1, 1].
Tensor center_image(const Tensor& image) { return add_scalar(scale(image, 2.0), -1.0); }

std::size_t odd_floor(std::size_t n) { return n % 2 == 1 ? n : n - 1; }

void check_image(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw InputError("image must be [3, H, W], got " + shape_str(image.shape()));
  if (image.dim(1) % 32 != 0 || image.dim(2) % 32 != 0) {
    throw InputError("image extents " + std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)) +
                     " must be divisible by 32");
  }
}

}  // namespace

void SegmenterConfig::validate() const {
  if (base_channels == 0) throw ConfigError("segmenter: base_channels must be positive");
  if (depths.size() != 4) throw ConfigError("segmenter: depths must list 4 stages");
  for (std::size_t d : depths)
    if (d == 0) throw ConfigError("segmenter: every stage needs at least one block");
  if (embed_channels == 0 || query_channels == 0) throw ConfigError("segmenter: channel widths must be positive");
  if (queries == 0) throw ConfigError("segmenter: queries must be positive");
  if (decoder_layers == 0) throw ConfigError("segmenter: decoder_layers must be positive");
  if (classes == 0) throw ConfigError("segmenter: classes must be positive");
  if (!(mask_threshold >= 0.0 && mask_threshold <= 1.0)) throw ConfigError("segmenter: mask_threshold must lie in [0, 1]");
  if (!(attention_mask_threshold > 0.0 && attention_mask_threshold < 1.0)) {
    throw ConfigError("segmenter: attention_mask_threshold must lie in (0, 1)");
  }
  if (lambda_cls < 0 || lambda_focal < 0 || lambda_dice < 0) throw ConfigError("segmenter: loss weights must be non-negative");
  if (!(no_object_weight > 0.0)) throw ConfigError("segmenter: no_object_weight must be positive");
  for (std::size_t s = 0; s < 4; ++s) attention.validate(stage_channels(s));
  if (query_channels % attention.heads != 0) throw ConfigError("segmenter: query_channels must split over the heads");
}

void to_json(nlohmann::json& j, const SegmenterConfig& c) {
  j = {{"base_channels", c.base_channels},
       {"depths", c.depths},
       {"embed_channels", c.embed_channels},
       {"query_channels", c.query_channels},
       {"queries", c.queries},
       {"decoder_layers", c.decoder_layers},
       {"classes", c.classes},
       {"mask_threshold", c.mask_threshold},
       {"attention_mask_threshold", c.attention_mask_threshold},
       {"lambda_cls", c.lambda_cls},
       {"lambda_focal", c.lambda_focal},
       {"lambda_dice", c.lambda_dice},
       {"no_object_weight", c.no_object_weight},
       {"focal_alpha", c.focal_alpha},
       {"focal_gamma", c.focal_gamma},
       {"dice_epsilon", c.dice_epsilon},
       {"aux_loss", c.aux_loss},
       {"attention", c.attention}};
}

void from_json(const nlohmann::json& j, SegmenterConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "base_channels") c.base_channels = value.get<std::size_t>();
    else if (key == "depths") c.depths = value.get<std::vector<std::size_t>>();
    else if (key == "embed_channels") c.embed_channels = value.get<std::size_t>();
    else if (key == "query_channels") c.query_channels = value.get<std::size_t>();
    else if (key == "queries") c.queries = value.get<std::size_t>();
    else if (key == "decoder_layers") c.decoder_layers = value.get<std::size_t>();
    else if (key == "classes") c.classes = value.get<std::size_t>();
    else if (key == "mask_threshold") c.mask_threshold = value.get<double>();
    else if (key == "attention_mask_threshold") c.attention_mask_threshold = value.get<double>();
    else if (key == "lambda_cls") c.lambda_cls = value.get<double>();
    else if (key == "lambda_focal") c.lambda_focal = value.get<double>();
    else if (key == "lambda_dice") c.lambda_dice = value.get<double>();
    else if (key == "no_object_weight") c.no_object_weight = value.get<double>();
    else if (key == "focal_alpha") c.focal_alpha = value.get<double>();
    else if (key == "focal_gamma") c.focal_gamma = value.get<double>();
    else if (key == "dice_epsilon") c.dice_epsilon = value.get<double>();
    else if (key == "aux_loss") c.aux_loss = value.get<bool>();
    else if (key == "attention") c.attention = value.get<AttentionConfig>();
    else throw ConfigError("unknown segmenter key: " + key);
  }
}

// --- encoder -------------------------------------------------------------------

ChartEncoder::ChartEncoder(ParamRegistry& reg, const std::string& name, const SegmenterConfig& cfg, Rng& rng)
    : stem1_(reg, name + ".stem1", 3, cfg.base_channels, 3, 2, rng),
      stem2_(reg, name + ".stem2", cfg.base_channels, cfg.base_channels, 3, 2, rng),
      window_(cfg.attention.window),
      out_channels_(cfg.stage_channels(3)) {
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t ch = cfg.stage_channels(s);
    na_.emplace_back();
    da_.emplace_back();
    for (std::size_t b = 0; b < cfg.depths[s]; ++b) {
      const std::string tag = name + ".s" + std::to_string(s) + ".b" + std::to_string(b);
      na_.back().emplace_back(reg, tag + ".na", ch, cfg.attention, rng);
      da_.back().emplace_back(reg, tag + ".da", ch, cfg.attention, rng);
    }
    if (s < 3) down_.emplace_back(reg, name + ".down" + std::to_string(s), ch, 2 * ch, 3, 2, rng);
  }
}

Tensor ChartEncoder::stem(const Tensor& image) const {
  check_image(image);
  return gelu(stem2_(gelu(stem1_(center_image(image)))));
}

EncoderOutput ChartEncoder::operator()(const Tensor& image) const {
  EncoderOutput out;
  out.stem = stem(image);
  Tensor h = out.stem;
  for (std::size_t s = 0; s < 4; ++s) {
    if (s > 0) h = down_[s - 1](h);
    // Late stages can be smaller than the configured window.
    const std::size_t win = std::min(window_, odd_floor(std::min(h.dim(1), h.dim(2))));
    for (std::size_t b = 0; b < na_[s].size(); ++b) {
      h = na_[s][b](h, win);
      h = da_[s][b](h);
    }
    out.stages.push_back(h);
  }
  return out;
}

// --- pixel decoder -------------------------------------------------------------

PixelDecoder::PixelDecoder(ParamRegistry& reg, const std::string& name, const SegmenterConfig& cfg, Rng& rng)
    : image_lateral_(reg, name + ".image", 3, cfg.embed_channels, 3, 1, rng),
      out_(reg, name + ".out", cfg.embed_channels, cfg.embed_channels, 1, 1, rng) {
  const std::size_t ce = cfg.embed_channels;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t in = i == 0 ? cfg.stage_channels(3) : ce;
    up_.emplace_back(reg, name + ".up" + std::to_string(i), in, ce, 3, 1, rng);
    lateral_.emplace_back(reg, name + ".lat" + std::to_string(i), cfg.stage_channels(2 - i), ce, 1, 1, rng);
  }
}

PixelOutput PixelDecoder::operator()(const EncoderOutput& enc, const Tensor& image) const {
  PixelOutput out;
  Tensor p = enc.x();
  for (std::size_t i = 0; i < 3; ++i) {
    p = gelu(add(up_[i](upsample_nearest(p, 2)), lateral_[i](enc.stages[2 - i])));
    out.levels.push_back(p);
  }
  out.full = out_(gelu(add(upsample_nearest(p, 4), image_lateral_(center_image(image)))));
  return out;
}

// --- mask decoder --------------------------------------------------------------

MaskDecoder::MaskDecoder(ParamRegistry& reg, const std::string& name, const SegmenterConfig& cfg, Rng& rng)
    : heads_(cfg.attention.heads) {
  const std::size_t cq = cfg.query_channels, ce = cfg.embed_channels;
  queries_ = reg.add(name + ".queries", {cfg.queries, cq}, Init::xavier, rng, 1, cq);
  for (std::size_t l = 0; l < cfg.decoder_layers; ++l) {
    const std::string t = name + ".l" + std::to_string(l);
    Layer layer{Linear(reg, t + ".cq", cq, cq, rng, false),      Linear(reg, t + ".ck", ce, cq, rng, false),
                Linear(reg, t + ".cv", ce, cq, rng, false),      Linear(reg, t + ".co", cq, cq, rng, false),
                Linear(reg, t + ".sq", cq, cq, rng, false),      Linear(reg, t + ".sk", cq, cq, rng, false),
                Linear(reg, t + ".sv", cq, cq, rng, false),      Linear(reg, t + ".so", cq, cq, rng, false),
                Linear(reg, t + ".ff1", cq, 2 * cq, rng),        Linear(reg, t + ".ff2", 2 * cq, cq, rng),
                LayerNorm(reg, t + ".n1", cq, rng),              LayerNorm(reg, t + ".n2", cq, rng),
                LayerNorm(reg, t + ".n3", cq, rng)};
    layers_.push_back(std::move(layer));
  }
}

Tensor MaskDecoder::layer(std::size_t index, const Tensor& q, const Tensor& memory,
                          std::span<const std::uint8_t> keep) const {
  const Layer& L = layers_.at(index);
  Tensor h = L.n1(add(q, L.co(multi_head_attention(L.cq(q), L.ck(memory), L.cv(memory), heads_, keep))), 1);
  h = L.n2(add(h, L.so(multi_head_attention(L.sq(h), L.sk(h), L.sv(h), heads_))), 1);
  return L.n3(add(h, L.ff2(gelu(L.ff1(h)))), 1);
}

// --- full model ----------------------------------------------------------------

ChartFormer::ChartFormer(const SegmenterConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  encoder_ = ChartEncoder(params_, "encoder", cfg_, rng);
  pixel_decoder_ = PixelDecoder(params_, "pixel", cfg_, rng);
  mask_decoder_ = MaskDecoder(params_, "decoder", cfg_, rng);
  class_head_ = Linear(params_, "head.class", cfg_.query_channels, cfg_.classes + 1, rng);
  mlp1_ = Linear(params_, "head.mask1", cfg_.query_channels, cfg_.query_channels, rng);
  mlp2_ = Linear(params_, "head.mask2", cfg_.query_channels, cfg_.query_channels, rng);
  mlp3_ = Linear(params_, "head.mask3", cfg_.query_channels, cfg_.embed_channels, rng);
}

PixelOutput ChartFormer::decode_pixels(const EncoderOutput& enc, const Tensor& image) const {
  return pixel_decoder_(enc, image);
}

HeadOutput ChartFormer::heads(const Tensor& queries, const Tensor& pixels) const {
  const Tensor m = mlp3_(gelu(mlp2_(gelu(mlp1_(queries)))));  // [N, C_E]
  const std::size_t hw = pixels.dim(1) * pixels.dim(2);
  return {class_head_(queries), matmul(m, reshape(pixels, {pixels.dim(0), hw}))};
}

std::vector<std::uint8_t> ChartFormer::attention_mask(const Tensor& mask_logits, std::size_t height, std::size_t width,
                                                      std::size_t lh, std::size_t lw) const {
  const std::size_t n = mask_logits.dim(0);
  const std::size_t fy = height / lh, fx = width / lw;
  const auto d = mask_logits.data();
  std::vector<std::uint8_t> keep(n * lh * lw, 0);
  const double inv = 1.0 / static_cast<double>(fy * fx);
  for (std::size_t q = 0; q < n; ++q) {
    const double* row = d.data() + q * height * width;
    std::uint8_t* k = keep.data() + q * lh * lw;
    bool any = false;
    for (std::size_t y = 0; y < lh; ++y)
      for (std::size_t x = 0; x < lw; ++x) {
        double s = 0.0;
        for (std::size_t dy = 0; dy < fy; ++dy)
          for (std::size_t dx = 0; dx < fx; ++dx) {
            const double v = row[(y * fy + dy) * width + x * fx + dx];
            s += 1.0 / (1.0 + std::exp(-v));
          }
        const bool on = s * inv >= cfg_.attention_mask_threshold;
        k[y * lw + x] = on;
        any = any || on;
      }
    // A query with no foreground anywhere attends everywhere.
    if (!any) std::fill(k, k + lh * lw, std::uint8_t{1});
  }
  return keep;
}

std::vector<HeadOutput> ChartFormer::decode_queries(const PixelOutput& pixels, Tensor* final_queries) const {
  const std::size_t height = pixels.full.dim(1), width = pixels.full.dim(2);
  std::vector<HeadOutput> outs;
  Tensor q = mask_decoder_.initial_queries();
  for (std::size_t l = 0; l < mask_decoder_.layers(); ++l) {
    const Tensor& level = pixels.levels[l % 3];
    std::vector<std::uint8_t> keep;
    if (l > 0) keep = attention_mask(outs.back().mask_logits, height, width, level.dim(1), level.dim(2));
    q = mask_decoder_.layer(l, q, map_to_tokens(level), keep);
    outs.push_back(heads(q, pixels.full));
  }
  if (final_queries != nullptr) *final_queries = q;
  return outs;
}

SegmentationForward ChartFormer::forward(const Tensor& image) const {
  SegmentationForward f;
  f.encoder = encoder_(image);
  f.pixels = pixel_decoder_(f.encoder, image);
  f.layers = decode_queries(f.pixels, &f.queries);
  return f;
}

SegmentationOutput make_output(const HeadOutput& head, std::size_t height, std::size_t width, double t) {
  SegmentationOutput out;
  const std::size_t n = head.class_logits.dim(0), c = head.class_logits.dim(1);
  const auto cl = head.class_logits.data();
  const auto ml = head.mask_logits.data();
  // sigma(v) > t  <=>  v > logit(t); the logit form stays exact where sigma saturates.
  const double cut = t <= 0.0 ? -std::numeric_limits<double>::infinity()
                     : t >= 1.0 ? std::numeric_limits<double>::infinity()
                                : std::log(t / (1.0 - t));
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = cl.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    std::vector<double> p(c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (p[j] = std::exp(row[j] - mx));
    for (double& v : p) v /= z;
    out.class_probs.push_back(std::move(p));
    Mask m(height, width);
    for (std::size_t k = 0; k < height * width; ++k) m.bits[k] = ml[i * height * width + k] > cut;
    out.boxes.push_back(m.count() > 0 ? std::optional<PixelBox>(bbox_from_mask(m)) : std::nullopt);
    out.masks.push_back(std::move(m));
  }
  return out;
}

SegmentationOutput ChartFormer::predict(const Tensor& image, std::optional<double> threshold) const {
  NoGradGuard guard;
  const SegmentationForward f = forward(image);
  return make_output(f.final(), image.dim(1), image.dim(2), threshold.value_or(cfg_.mask_threshold));
}

std::vector<Detection> SegmentationOutput::detections() const {
  std::vector<Detection> dets;
  for (std::size_t i = 0; i < class_probs.size(); ++i) {
    const auto& p = class_probs[i];
    const std::size_t real = p.size() - 1;
    const auto best = static_cast<std::size_t>(std::max_element(p.begin(), p.begin() + static_cast<long>(real)) - p.begin());
    dets.push_back({static_cast<int>(best + 1), p[best], masks[i], boxes[i]});
  }
  return dets;
}

std::vector<Tensor> param_tensors(const ParamRegistry& reg) {
  std::vector<Tensor> out;
  for (const auto& e : reg.entries()) out.push_back(e.tensor);
  return out;
}

}  // namespace chart
