#pragma once

// ChartFormer: stem, four-stage attention encoder, pixel decoder, masked
// query decoder, prediction heads, bipartite matching and the training loss.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "chart/attention.hpp"
#include "chart/geometry.hpp"
#include "chart/nn.hpp"
#include "chart/optim.hpp"
#include "json.hpp"

namespace chart {

struct SegmenterConfig {
  std::size_t base_channels = 16;      // K
  std::vector<std::size_t> depths = {1, 1, 1, 1};
  std::size_t embed_channels = 64;     // C_E
  std::size_t query_channels = 64;     // C_Q
  std::size_t queries = 20;            // N
  std::size_t decoder_layers = 3;      // L_dec
  std::size_t classes = kCategoryCount;  // L
  double mask_threshold = 0.5;         // t
  double attention_mask_threshold = 0.5;
  double lambda_cls = 2.0;
  double lambda_focal = 5.0;
  double lambda_dice = 5.0;
  double no_object_weight = 0.1;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double dice_epsilon = 1e-6;
  bool aux_loss = true;                // supervise every decoder layer
  AttentionConfig attention;

  void validate() const;
  std::size_t stage_channels(std::size_t stage) const { return base_channels << stage; }
};

void to_json(nlohmann::json& j, const SegmenterConfig& c);
void from_json(const nlohmann::json& j, SegmenterConfig& c);

// Stage outputs of the chart encoder; `stages[3]` is x.
struct EncoderOutput {
  Tensor stem;
  std::vector<Tensor> stages;
  const Tensor& x() const { return stages.back(); }
};

struct PixelOutput {
  std::vector<Tensor> levels;  // P_1 (/16), P_2 (/8), P_3 (/4) at C_E channels
  Tensor full;                 // P = P_4 at full resolution, [C_E, H, W]
};

// Raw head outputs for one decoder layer.
struct HeadOutput {
  Tensor class_logits;  // [N, L+1]
  Tensor mask_logits;   // [N, H*W]
};

struct SegmentationForward {
  EncoderOutput encoder;
  PixelOutput pixels;
  Tensor queries;                  // Q: [N, C_Q] after the last layer
  std::vector<HeadOutput> layers;  // one per decoder layer, last = final prediction
  const HeadOutput& final() const { return layers.back(); }
};

struct Detection {
  int category_id = 0;
  double score = 0.0;
  Mask mask;
  std::optional<PixelBox> box;
};

struct SegmentationOutput {
  std::vector<std::vector<double>> class_probs;  // N rows over L+1 classes
  std::vector<Mask> masks;
  std::vector<std::optional<PixelBox>> boxes;
  // One detection per query, labelled with its best real class.
  std::vector<Detection> detections() const;
};

// Per-image training target: rasterized masks and 0-based class labels.
struct SegTarget {
  std::vector<Mask> masks;
  std::vector<std::size_t> labels;
};

class ChartEncoder {
 public:
  ChartEncoder() = default;
  ChartEncoder(ParamRegistry& reg, const std::string& name, const SegmenterConfig& cfg, Rng& rng);
  // image: [3, H, W] with H, W divisible by 32.
  Tensor stem(const Tensor& image) const;
  EncoderOutput operator()(const Tensor& image) const;
  std::size_t out_channels() const { return out_channels_; }

 private:
  Conv2d stem1_, stem2_;
  std::vector<std::vector<NeighborhoodAttention>> na_;
  std::vector<std::vector<DeformableAttention>> da_;
  std::vector<Conv2d> down_;
  std::size_t window_ = 3;
  std::size_t out_channels_ = 0;
};

class PixelDecoder {
 public:
  PixelDecoder() = default;
  PixelDecoder(ParamRegistry& reg, const std::string& name, const SegmenterConfig& cfg, Rng& rng);
  PixelOutput operator()(const EncoderOutput& enc, const Tensor& image) const;

 private:
  std::vector<Conv2d> up_, lateral_;
  Conv2d image_lateral_, out_;
};

class MaskDecoder {
 public:
  MaskDecoder() = default;
  MaskDecoder(ParamRegistry& reg, const std::string& name, const SegmenterConfig& cfg, Rng& rng);

  struct Layer {
    Linear cq, ck, cv, co, sq, sk, sv, so, ff1, ff2;
    LayerNorm n1, n2, n3;
  };

  // One decoder layer on queries q [N, C_Q] against memory tokens [HW, C_E].
  // `keep` ([N, HW] or empty) restricts the cross-attention.
  Tensor layer(std::size_t index, const Tensor& q, const Tensor& memory, std::span<const std::uint8_t> keep) const;
  const Tensor& initial_queries() const { return queries_; }
  std::size_t layers() const { return layers_.size(); }
  std::size_t heads() const { return heads_; }

 private:
  Tensor queries_;
  std::vector<Layer> layers_;
  std::size_t heads_ = 1;
};

class ChartFormer {
 public:
  ChartFormer(const SegmenterConfig& cfg, std::uint64_t seed);
  const SegmenterConfig& config() const { return cfg_; }
  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }
  const ChartEncoder& encoder() const { return encoder_; }

  SegmentationForward forward(const Tensor& image) const;
  // Pixel decoder for a given encoder pass.
  PixelOutput decode_pixels(const EncoderOutput& enc, const Tensor& image) const;
  HeadOutput heads(const Tensor& queries, const Tensor& pixels) const;
  // Layer-wise query refinement; returns the head outputs for every layer.
  std::vector<HeadOutput> decode_queries(const PixelOutput& pixels, Tensor* final_queries = nullptr) const;
  // Binary attention mask for the next layer derived from mask logits.
  std::vector<std::uint8_t> attention_mask(const Tensor& mask_logits, std::size_t height, std::size_t width,
                                           std::size_t level_height, std::size_t level_width) const;

  SegmentationOutput predict(const Tensor& image, std::optional<double> threshold = std::nullopt) const;

 private:
  SegmenterConfig cfg_;
  ParamRegistry params_;
  ChartEncoder encoder_;
  PixelDecoder pixel_decoder_;
  MaskDecoder mask_decoder_;
  Linear class_head_;
  Linear mlp1_, mlp2_, mlp3_;
};

// Converts class probs and mask logits into binary masks at threshold t.
SegmentationOutput make_output(const HeadOutput& head, std::size_t height, std::size_t width, double threshold);

// Minimum-cost assignment of every column (ground truth) to a distinct row
// (prediction). costs: N x G row-major, N >= G. Returns the row for each column.
std::vector<std::size_t> hungarian_match(const std::vector<double>& costs, std::size_t rows, std::size_t cols);

struct LossBreakdown {
  Tensor total;
  double classification = 0.0;
  double focal = 0.0;
  double dice = 0.0;
  std::vector<std::size_t> assignment;  // prediction index per ground truth
};

// Matching cost matrix (N x G) used for assignment; no gradient.
std::vector<double> matching_costs(const HeadOutput& head, const SegTarget& target, const SegmenterConfig& cfg);

// Classification + focal + dice loss of one head output against a target under a
// given assignment (or a freshly computed one when `assignment` is empty).
LossBreakdown segmentation_loss(const HeadOutput& head, const SegTarget& target, const SegmenterConfig& cfg,
                                std::vector<std::size_t> assignment = {});

// Soft dice of probability rows against binary rows, per mask, as a [G] tensor.
Tensor dice_loss(const Tensor& mask_logits, const std::vector<double>& targets, std::size_t rows, double epsilon);

struct TrainSample {
  Tensor image;  // [3, H, W]
  SegTarget target;
};

// Builds a training sample from an instances record and its image.
TrainSample make_train_sample(const Tensor& image, const InstanceImage& record);

class SegTrainer {
 public:
  SegTrainer(ChartFormer& model, OptimizerConfig opt);
  // Forward, backward and one optimizer update on a batch; returns the mean loss.
  double step(const std::vector<const TrainSample*>& batch);
  Optimizer& optimizer() { return optimizer_; }

 private:
  ChartFormer& model_;
  Optimizer optimizer_;
};

std::vector<Tensor> param_tensors(const ParamRegistry& reg);

}  // namespace chart
