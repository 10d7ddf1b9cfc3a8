#pragma once

// QDChart: frozen chart encoder, trainable vision encoder, question embedding,
// fusion (QDCAt and its ablations) and a small autoregressive answer decoder.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "chart/attention.hpp"
#include "chart/nn.hpp"
#include "chart/optim.hpp"
#include "chart/segmenter.hpp"
#include "json.hpp"

namespace chart {

enum class FusionMode { qdcat, qdcat_minus_qon, concat, concat_cnn };

std::string_view fusion_name(FusionMode m);
// Throws ConfigError on an unknown name.
FusionMode parse_fusion(std::string_view name);
const std::vector<FusionMode>& all_fusion_modes();

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kUnknownToken = "<unk>";
inline constexpr std::string_view kTaskToken = "<chartvqa>";
inline constexpr std::string_view kAnswerToken = "<s_answer>";
inline constexpr std::string_view kEndToken = "</s>";

// Lower-cased words; '?', ',' and '!' become separate tokens.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  // Special tokens only.
  Vocabulary();
  static Vocabulary build(const std::vector<std::string>& texts);

  std::size_t size() const { return words_.size(); }
  std::size_t id(std::string_view word) const;  // <unk> when absent
  const std::string& word(std::size_t id) const;
  bool contains(std::string_view word) const { return ids_.count(std::string(word)) > 0; }
  std::vector<std::size_t> encode(std::string_view text) const;
  // Joins words with single spaces, stopping at </s> and skipping specials.
  std::string decode(const std::vector<std::size_t>& ids) const;

  std::size_t pad() const { return 0; }
  std::size_t unknown() const { return 1; }
  std::size_t task() const { return 2; }
  std::size_t answer() const { return 3; }
  std::size_t end() const { return 4; }

  nlohmann::json to_json() const { return words_; }
  static Vocabulary from_json(const nlohmann::json& j);

 private:
  void add(const std::string& w);
  std::vector<std::string> words_;
  std::map<std::string, std::size_t> ids_;
};

struct QaConfig {
  FusionMode mode = FusionMode::qdcat;
  std::vector<std::size_t> vision_depths = {1, 1, 1, 1};
  AttentionConfig fusion;  // heads, offsets, T_q, D_z of the fusion block
  std::size_t decoder_dim = 64;
  std::size_t decoder_layers = 2;
  std::size_t decoder_heads = 4;
  std::size_t max_answer_tokens = 16;

  // Throws ConfigError; `channels` is the chart encoder's output width.
  void validate(std::size_t channels) const;
};

void to_json(nlohmann::json& j, const QaConfig& c);
void from_json(const nlohmann::json& j, QaConfig& c);

// Linear interpolation of [n, D] token embeddings along the sequence axis to
// exactly `length` rows (end points aligned).
Tensor normalize_question(const Tensor& embeddings, std::size_t length);

// Stand-in for the pretrained vision backbone: stem, four neighbourhood
// attention stages on the same stride/channel chain, then a 1x1 projection.
class VisionEncoder {
 public:
  VisionEncoder() = default;
  VisionEncoder(ParamRegistry& reg, const std::string& name, const SegmenterConfig& chain,
                const std::vector<std::size_t>& depths, std::size_t out_channels, Rng& rng);
  Tensor operator()(const Tensor& image) const;

 private:
  Conv2d stem1_, stem2_;
  std::vector<std::vector<NeighborhoodAttention>> blocks_;
  std::vector<Conv2d> down_;
  Conv2d proj_;
  std::size_t window_ = 3;
};

// x (frozen chart features), y (vision features), z (question) -> o as [HW, D] rows.
class Fusion {
 public:
  Fusion() = default;
  Fusion(ParamRegistry& reg, const std::string& name, FusionMode mode, std::size_t channels, std::size_t out,
         const AttentionConfig& cfg, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& y, const Tensor& z) const;
  // Offsets Delta p^z on the feature grid; zeros for the mode without a QON.
  Tensor offsets(const Tensor& x, const Tensor& z) const;
  FusionMode mode() const { return mode_; }

 private:
  FusionMode mode_ = FusionMode::qdcat;
  QDCAtBlock block_;
  QuestionOffsetNetwork qon_;
  Conv2d mix_;
  Linear proj_;
  std::size_t stride_ = 1;
};

// Post-norm transformer decoder: causal self-attention, cross-attention to o, FFN.
class AnswerDecoder {
 public:
  AnswerDecoder() = default;
  AnswerDecoder(ParamRegistry& reg, const std::string& name, std::size_t vocab, std::size_t dim, std::size_t layers,
                std::size_t heads, std::size_t max_len, Rng& rng);
  // Next-token logits [len, vocab] for every prefix of `ids`.
  Tensor logits(const Tensor& memory, const std::vector<std::size_t>& ids) const;
  // Greedy continuation of `prompt` until `end` or `max_new` tokens; returns the new tokens.
  std::vector<std::size_t> greedy(const Tensor& memory, const std::vector<std::size_t>& prompt, std::size_t end,
                                  std::size_t max_new) const;
  std::size_t max_len() const { return max_len_; }

 private:
  struct Layer {
    Linear sq, sk, sv, so, cq, ck, cv, co, ff1, ff2;
    LayerNorm n1, n2, n3;
  };
  Embedding tokens_;
  Tensor positions_;
  std::vector<Layer> layers_;
  Linear out_;
  std::size_t heads_ = 1, max_len_ = 0;
};

struct QaSample {
  std::string id;
  Tensor image;  // [3, H, W]
  std::vector<std::size_t> question;
  std::vector<std::size_t> answer;
  std::string answer_text;
  Tensor chart_features;  // cached frozen x; filled by QaModel::prepare
  Tensor question_override;  // precomputed z (parity mode), optional
  Tensor vision_override;    // precomputed y (parity mode), optional
};

class QaModel {
 public:
  // `chart` is a trained segmenter whose encoder is copied and frozen.
  QaModel(const ChartFormer& chart, const QaConfig& cfg, Vocabulary vocab, std::uint64_t seed);

  const QaConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }
  const ParamRegistry& frozen_params() const { return chart_.params(); }

  Tensor chart_features(const Tensor& image) const;  // never records a graph
  Tensor vision_features(const Tensor& image) const;
  Tensor question_features(const std::vector<std::size_t>& ids) const;
  Tensor fuse(const Tensor& x, const Tensor& y, const Tensor& z) const;
  const Fusion& fusion() const { return fusion_; }
  const AnswerDecoder& decoder() const { return decoder_; }

  // Fills cached chart features.
  void prepare(QaSample& sample) const;
  Tensor memory(const QaSample& sample) const;
  Tensor loss(const QaSample& sample) const;
  std::vector<std::size_t> prompt() const { return {vocab_.task(), vocab_.answer()}; }
  std::string answer(const QaSample& sample) const;
  // p + Delta p^z in image pixel coordinates, one per feature-grid location.
  std::vector<Point> deformed_points(const QaSample& sample, std::size_t* grid_h = nullptr,
                                     std::size_t* grid_w = nullptr) const;

 private:
  QaConfig cfg_;
  Vocabulary vocab_;
  ChartFormer chart_;
  ParamRegistry params_;
  Embedding embed_;
  VisionEncoder vision_;
  Fusion fusion_;
  AnswerDecoder decoder_;
  std::size_t stride_ = 32;
};

class QaTrainer {
 public:
  QaTrainer(QaModel& model, OptimizerConfig opt);
  double step(const std::vector<const QaSample*>& batch);

 private:
  QaModel& model_;
  Optimizer optimizer_;
};

struct QaRecord {
  std::string image;
  std::string question;
  std::string answer;
};

std::vector<QaRecord> parse_qa_dataset(const nlohmann::json& doc);

}  // namespace chart
