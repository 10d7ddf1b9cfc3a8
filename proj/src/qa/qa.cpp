#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <stdexcept>

#include "chart/error.hpp"
#include "chart/qa.hpp"

namespace chart {

namespace {

std::size_t odd_floor(std::size_t n) { return n % 2 == 1 ? n : n - 1; }

std::vector<std::uint8_t> causal_keep(std::size_t n) {
  std::vector<std::uint8_t> keep(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) keep[i * n + j] = 1;
  return keep;
}

}  // namespace

std::string_view fusion_name(FusionMode m) {
  switch (m) {
    case FusionMode::qdcat: return "qdcat";
    case FusionMode::qdcat_minus_qon: return "qdcat_minus_qon";
    case FusionMode::concat: return "concat";
    case FusionMode::concat_cnn: return "concat_cnn";
  }
  return "?";
}

FusionMode parse_fusion(std::string_view name) {
  for (FusionMode m : all_fusion_modes())
    if (fusion_name(m) == name) return m;
  throw ConfigError("unknown fusion mode: " + std::string(name));
}

const std::vector<FusionMode>& all_fusion_modes() {
  static const std::vector<FusionMode> modes = {FusionMode::qdcat, FusionMode::qdcat_minus_qon, FusionMode::concat,
                                                FusionMode::concat_cnn};
  return modes;
}

// --- vocabulary ----------------------------------------------------------------

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (ch == '?' || ch == ',' || ch == '!') {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

Vocabulary::Vocabulary() {
  for (std::string_view w : {kPadToken, kUnknownToken, kTaskToken, kAnswerToken, kEndToken}) add(std::string(w));
}

void Vocabulary::add(const std::string& w) {
  if (ids_.count(w)) return;
  ids_.emplace(w, words_.size());
  words_.push_back(w);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts) {
  std::set<std::string> words;
  for (const auto& t : texts)
    for (auto& w : tokenize(t)) words.insert(std::move(w));
  Vocabulary v;
  for (const auto& w : words) v.add(w);
  return v;
}

std::size_t Vocabulary::id(std::string_view word) const {
  const auto it = ids_.find(std::string(word));
  return it == ids_.end() ? unknown() : it->second;
}

const std::string& Vocabulary::word(std::size_t id) const {
  if (id >= words_.size()) throw InputError("token id " + std::to_string(id) + " outside the vocabulary");
  return words_[id];
}

std::vector<std::size_t> Vocabulary::encode(std::string_view text) const {
  std::vector<std::size_t> ids;
  for (const auto& w : tokenize(text)) ids.push_back(id(w));
  return ids;
}

std::string Vocabulary::decode(const std::vector<std::size_t>& ids) const {
  std::string out;
  for (std::size_t id : ids) {
    if (id == end()) break;
    if (id < 5) continue;
    if (!out.empty()) out += ' ';
    out += word(id);
  }
  return out;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  Vocabulary v;
  const auto words = j.get<std::vector<std::string>>();
  if (words.size() < 5) throw InputError("vocabulary is missing its special tokens");
  for (std::size_t i = 0; i < 5; ++i)
    if (words[i] != v.words_[i]) throw InputError("vocabulary special tokens are out of order");
  for (const auto& w : words) v.add(w);
  return v;
}

// --- config --------------------------------------------------------------------

void QaConfig::validate(std::size_t channels) const {
  fusion.validate(channels);
  if (vision_depths.size() != 4) throw ConfigError("qa: vision_depths must list 4 stages");
  for (std::size_t d : vision_depths)
    if (d == 0) throw ConfigError("qa: every vision stage needs at least one block");
  if (decoder_dim == 0 || decoder_heads == 0 || decoder_dim % decoder_heads != 0) {
    throw ConfigError("qa: decoder_dim must split evenly over decoder_heads");
  }
  if (decoder_layers == 0) throw ConfigError("qa: decoder_layers must be positive");
  if (max_answer_tokens == 0) throw ConfigError("qa: max_answer_tokens must be positive");
  if ((mode == FusionMode::concat || mode == FusionMode::concat_cnn) && fusion.downsample != 1) {
    throw ConfigError("qa: concatenation modes need one sample per feature location (downsample 1)");
  }
}

void to_json(nlohmann::json& j, const QaConfig& c) {
  j = {{"mode", std::string(fusion_name(c.mode))},
       {"vision_depths", c.vision_depths},
       {"fusion", c.fusion},
       {"decoder_dim", c.decoder_dim},
       {"decoder_layers", c.decoder_layers},
       {"decoder_heads", c.decoder_heads},
       {"max_answer_tokens", c.max_answer_tokens}};
}

void from_json(const nlohmann::json& j, QaConfig& c) {
  for (const auto& [key, v] : j.items()) {
    if (key == "mode") c.mode = parse_fusion(v.get<std::string>());
    else if (key == "vision_depths") c.vision_depths = v.get<std::vector<std::size_t>>();
    else if (key == "fusion") c.fusion = v.get<AttentionConfig>();
    else if (key == "decoder_dim") c.decoder_dim = v.get<std::size_t>();
    else if (key == "decoder_layers") c.decoder_layers = v.get<std::size_t>();
    else if (key == "decoder_heads") c.decoder_heads = v.get<std::size_t>();
    else if (key == "max_answer_tokens") c.max_answer_tokens = v.get<std::size_t>();
    else throw ConfigError("unknown qa key: " + key);
  }
}

// --- question embedding ----------------------------------------------------------

Tensor normalize_question(const Tensor& embeddings, std::size_t length) {
  if (embeddings.rank() != 2 || embeddings.dim(0) == 0) throw InputError("normalize_question: empty question");
  if (length == 0) throw InputError("normalize_question: target length must be positive");
  const std::size_t n = embeddings.dim(0);
  if (n == length) return embeddings;
  std::vector<double> a(length * n, 0.0);
  for (std::size_t i = 0; i < length; ++i) {
    const double pos = length == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(n - 1) / static_cast<double>(length - 1);
    const auto lo = std::min(static_cast<std::size_t>(pos), n - 1);
    const double frac = pos - static_cast<double>(lo);
    a[i * n + lo] += 1.0 - frac;
    if (frac > 0.0) a[i * n + lo + 1] += frac;
  }
  return matmul(Tensor::from({length, n}, std::move(a)), embeddings);
}

// --- vision encoder ---------------------------------------------------------------

VisionEncoder::VisionEncoder(ParamRegistry& reg, const std::string& name, const SegmenterConfig& chain,
                             const std::vector<std::size_t>& depths, std::size_t out_channels, Rng& rng)
    : stem1_(reg, name + ".stem1", 3, chain.base_channels, 3, 2, rng),
      stem2_(reg, name + ".stem2", chain.base_channels, chain.base_channels, 3, 2, rng),
      window_(chain.attention.window) {
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t ch = chain.stage_channels(s);
    blocks_.emplace_back();
    for (std::size_t b = 0; b < depths.at(s); ++b) {
      blocks_.back().emplace_back(reg, name + ".s" + std::to_string(s) + ".b" + std::to_string(b), ch, chain.attention, rng);
    }
    if (s < 3) down_.emplace_back(reg, name + ".down" + std::to_string(s), ch, 2 * ch, 3, 2, rng);
  }
  proj_ = Conv2d(reg, name + ".proj", chain.stage_channels(3), out_channels, 1, 1, rng);
}

Tensor VisionEncoder::operator()(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) % 32 != 0 || image.dim(2) % 32 != 0) {
    throw InputError("vision encoder: image must be [3, H, W] with H, W divisible by 32");
  }
  Tensor h = gelu(stem2_(gelu(stem1_(add_scalar(scale(image, 2.0), -1.0)))));
  for (std::size_t s = 0; s < 4; ++s) {
    if (s > 0) h = down_[s - 1](h);
    const std::size_t win = std::min(window_, odd_floor(std::min(h.dim(1), h.dim(2))));
    for (const auto& block : blocks_[s]) h = block(h, win);
  }
  return proj_(h);
}

// --- fusion -----------------------------------------------------------------------

Fusion::Fusion(ParamRegistry& reg, const std::string& name, FusionMode mode, std::size_t channels, std::size_t out,
               const AttentionConfig& cfg, Rng& rng)
    : mode_(mode), stride_(cfg.downsample) {
  switch (mode) {
    case FusionMode::qdcat:
    case FusionMode::qdcat_minus_qon:
      block_ = QDCAtBlock(reg, name + ".qdcat", channels, out, cfg, rng);
      break;
    case FusionMode::concat:
      qon_ = QuestionOffsetNetwork(reg, name + ".qon", channels, cfg, rng);
      proj_ = Linear(reg, name + ".proj", 2 * channels, out, rng);
      break;
    case FusionMode::concat_cnn:
      qon_ = QuestionOffsetNetwork(reg, name + ".qon", channels, cfg, rng);
      mix_ = Conv2d(reg, name + ".mix", 2 * channels, channels, 3, 1, rng);
      proj_ = Linear(reg, name + ".proj", channels, out, rng);
      break;
  }
}

Tensor Fusion::offsets(const Tensor& x, const Tensor& z) const {
  switch (mode_) {
    case FusionMode::qdcat: return block_.dca().qon()(x, z);
    case FusionMode::qdcat_minus_qon: {
      const std::size_t h = (x.dim(1) + stride_ - 1) / stride_, w = (x.dim(2) + stride_ - 1) / stride_;
      return Tensor::zeros({h * w, 2});
    }
    default: return qon_(x, z);
  }
}

Tensor Fusion::operator()(const Tensor& x, const Tensor& y, const Tensor& z) const {
  if (x.rank() != 3 || y.rank() != 3 || x.dim(1) != y.dim(1) || x.dim(2) != y.dim(2) || x.dim(0) != y.dim(0)) {
    throw InputError("fusion: x " + shape_str(x.shape()) + " and y " + shape_str(y.shape()) + " must align");
  }
  switch (mode_) {
    case FusionMode::qdcat: return block_(x, y, z, true);
    case FusionMode::qdcat_minus_qon: return block_(x, y, z, false);
    case FusionMode::concat: {
      const Tensor xs = deformable_sample(x, qon_(x, z), stride_);
      return proj_(concat({xs, map_to_tokens(y)}, 1));
    }
    case FusionMode::concat_cnn: {
      const Tensor xs = tokens_to_map(deformable_sample(x, qon_(x, z), stride_), x.dim(1), x.dim(2));
      return proj_(map_to_tokens(relu(mix_(concat({xs, y}, 0)))));
    }
  }
  throw ConfigError("fusion: unknown mode");
}

// --- answer decoder ---------------------------------------------------------------

AnswerDecoder::AnswerDecoder(ParamRegistry& reg, const std::string& name, std::size_t vocab, std::size_t dim,
                             std::size_t layers, std::size_t heads, std::size_t max_len, Rng& rng)
    : heads_(heads), max_len_(max_len) {
  tokens_ = Embedding(reg, name + ".tokens", vocab, dim, rng);
  positions_ = reg.add(name + ".positions", {max_len, dim}, Init::xavier, rng, max_len, dim);
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string t = name + ".l" + std::to_string(l);
    layers_.push_back({Linear(reg, t + ".sq", dim, dim, rng, false), Linear(reg, t + ".sk", dim, dim, rng, false),
                       Linear(reg, t + ".sv", dim, dim, rng, false), Linear(reg, t + ".so", dim, dim, rng, false),
                       Linear(reg, t + ".cq", dim, dim, rng, false), Linear(reg, t + ".ck", dim, dim, rng, false),
                       Linear(reg, t + ".cv", dim, dim, rng, false), Linear(reg, t + ".co", dim, dim, rng, false),
                       Linear(reg, t + ".ff1", dim, 2 * dim, rng), Linear(reg, t + ".ff2", 2 * dim, dim, rng),
                       LayerNorm(reg, t + ".n1", dim, rng), LayerNorm(reg, t + ".n2", dim, rng),
                       LayerNorm(reg, t + ".n3", dim, rng)});
  }
  out_ = Linear(reg, name + ".out", dim, vocab, rng);
}

Tensor AnswerDecoder::logits(const Tensor& memory, const std::vector<std::size_t>& ids) const {
  const std::size_t n = ids.size();
  if (n == 0 || n > max_len_) throw InputError("answer decoder: sequence length must lie in [1, " + std::to_string(max_len_) + "]");
  const std::vector<std::uint8_t> keep = causal_keep(n);
  Tensor h = add(tokens_(ids), slice(positions_, 0, 0, n));
  for (const Layer& L : layers_) {
    h = L.n1(add(h, L.so(multi_head_attention(L.sq(h), L.sk(h), L.sv(h), heads_, keep))), 1);
    h = L.n2(add(h, L.co(multi_head_attention(L.cq(h), L.ck(memory), L.cv(memory), heads_))), 1);
    h = L.n3(add(h, L.ff2(gelu(L.ff1(h)))), 1);
  }
  return out_(h);
}

std::vector<std::size_t> AnswerDecoder::greedy(const Tensor& memory, const std::vector<std::size_t>& prompt,
                                               std::size_t end, std::size_t max_new) const {
  NoGradGuard guard;
  std::vector<std::size_t> ids = prompt;
  std::vector<std::size_t> out;
  while (out.size() < max_new && ids.size() < max_len_) {
    const Tensor lg = logits(memory, ids);
    const auto d = lg.data();
    const std::size_t v = lg.dim(1);
    const double* last = d.data() + (ids.size() - 1) * v;
    const auto next = static_cast<std::size_t>(std::max_element(last, last + v) - last);
    out.push_back(next);
    if (next == end) break;
    ids.push_back(next);
  }
  return out;
}

// --- model --------------------------------------------------------------------------

QaModel::QaModel(const ChartFormer& chart, const QaConfig& cfg, Vocabulary vocab, std::uint64_t seed)
    : cfg_(cfg), vocab_(std::move(vocab)), chart_(chart.config(), 0) {
  const std::size_t channels = chart.config().stage_channels(3);
  cfg_.validate(channels);
  chart_.params().copy_from(chart.params());
  chart_.params().set_requires_grad(false);
  Rng rng(seed);
  embed_ = Embedding(params_, "qa.embed", vocab_.size(), cfg_.fusion.question_dim, rng);
  vision_ = VisionEncoder(params_, "qa.vision", chart.config(), cfg_.vision_depths, channels, rng);
  fusion_ = Fusion(params_, "qa.fusion", cfg_.mode, channels, cfg_.decoder_dim, cfg_.fusion, rng);
  decoder_ = AnswerDecoder(params_, "qa.decoder", vocab_.size(), cfg_.decoder_dim, cfg_.decoder_layers,
                           cfg_.decoder_heads, cfg_.max_answer_tokens + 3, rng);
}

Tensor QaModel::chart_features(const Tensor& image) const {
  NoGradGuard guard;
  return chart_.encoder()(image).x();
}

Tensor QaModel::vision_features(const Tensor& image) const { return vision_(image); }

Tensor QaModel::question_features(const std::vector<std::size_t>& ids) const {
  if (ids.empty()) throw InputError("question is empty");
  if (ids.size() > 4 * cfg_.fusion.question_len) {
    throw InputError("question has " + std::to_string(ids.size()) + " tokens; at most " +
                     std::to_string(4 * cfg_.fusion.question_len) + " are accepted");
  }
  for (std::size_t id : ids)
    if (id >= vocab_.size()) throw InputError("question token outside the vocabulary");
  return normalize_question(embed_(ids), cfg_.fusion.question_len);
}

Tensor QaModel::fuse(const Tensor& x, const Tensor& y, const Tensor& z) const { return fusion_(x, y, z); }

void QaModel::prepare(QaSample& sample) const {
  if (!sample.chart_features.defined()) sample.chart_features = chart_features(sample.image);
}

Tensor QaModel::memory(const QaSample& s) const {
  const Tensor x = s.chart_features.defined() ? s.chart_features : chart_features(s.image);
  const Tensor y = s.vision_override.defined() ? s.vision_override : vision_features(s.image);
  const Tensor z = s.question_override.defined() ? s.question_override : question_features(s.question);
  return fusion_(x, y, z);
}

Tensor QaModel::loss(const QaSample& s) const {
  if (s.answer.empty()) throw InputError("sample " + s.id + " has an empty answer");
  if (s.answer.size() > cfg_.max_answer_tokens) throw InputError("answer of sample " + s.id + " is too long");
  std::vector<std::size_t> inputs = prompt();
  inputs.insert(inputs.end(), s.answer.begin(), s.answer.end());
  std::vector<std::size_t> targets = s.answer;
  targets.push_back(vocab_.end());
  const Tensor lg = decoder_.logits(memory(s), inputs);
  return cross_entropy(slice(lg, 0, 1, inputs.size()), targets);
}

std::string QaModel::answer(const QaSample& s) const {
  NoGradGuard guard;
  return vocab_.decode(decoder_.greedy(memory(s), prompt(), vocab_.end(), cfg_.max_answer_tokens));
}

std::vector<Point> QaModel::deformed_points(const QaSample& s, std::size_t* grid_h, std::size_t* grid_w) const {
  NoGradGuard guard;
  const Tensor x = s.chart_features.defined() ? s.chart_features : chart_features(s.image);
  const Tensor z = s.question_override.defined() ? s.question_override : question_features(s.question);
  const Tensor off = fusion_.offsets(x, z);
  const std::size_t stride = cfg_.fusion.downsample;
  const std::size_t h = (x.dim(1) + stride - 1) / stride, w = (x.dim(2) + stride - 1) / stride;
  const double sy = static_cast<double>(s.image.dim(1)) / static_cast<double>(x.dim(1));
  const double sx = static_cast<double>(s.image.dim(2)) / static_cast<double>(x.dim(2));
  const auto d = off.data();
  std::vector<Point> pts;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t k = i * w + j;
      const double fx = std::clamp(static_cast<double>(j * stride) + d[2 * k], 0.0, static_cast<double>(x.dim(2) - 1));
      const double fy = std::clamp(static_cast<double>(i * stride) + d[2 * k + 1], 0.0, static_cast<double>(x.dim(1) - 1));
      pts.push_back({(fx + 0.5) * sx, (fy + 0.5) * sy});
    }
  if (grid_h) *grid_h = h;
  if (grid_w) *grid_w = w;
  return pts;
}

QaTrainer::QaTrainer(QaModel& model, OptimizerConfig opt)
    : model_(model), optimizer_(std::move(opt), param_tensors(model.params())) {}

double QaTrainer::step(const std::vector<const QaSample*>& batch) {
  if (batch.empty()) throw InputError("train step needs a non-empty batch");
  double total = 0.0;
  for (const QaSample* s : batch) {
    const Tensor loss = model_.loss(*s);
    const double v = loss.item();
    if (!std::isfinite(v)) throw std::runtime_error("QA loss became non-finite on sample " + s->id);
    total += v;
    scale(loss, 1.0 / static_cast<double>(batch.size())).backward();
  }
  optimizer_.step();
  return total / static_cast<double>(batch.size());
}

std::vector<QaRecord> parse_qa_dataset(const nlohmann::json& doc) {
  if (!doc.is_array()) throw InputError("QA dataset must be a JSON array");
  std::vector<QaRecord> out;
  for (const auto& r : doc) {
    QaRecord q{r.at("image").get<std::string>(), r.at("question").get<std::string>(), r.at("answer").get<std::string>()};
    if (q.answer.empty()) throw InputError("QA record with an empty answer for " + q.image);
    if (q.question.empty()) throw InputError("QA record with an empty question for " + q.image);
    out.push_back(std::move(q));
  }
  return out;
}

}  // namespace chart
