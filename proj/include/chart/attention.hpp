#pragma once

// Attention blocks: neighbourhood, deformable, question-guided deformable
// co-attention, and the offset networks that drive the deformable ones.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "chart/nn.hpp"
#include "chart/tensor.hpp"
#include "json.hpp"

namespace chart {

struct AttentionConfig {
  std::size_t heads = 4;
  std::size_t window = 3;          // neighbourhood k_n, odd
  std::size_t offset_kernel = 3;   // k of the offset conv
  double max_offset = 4.0;         // s_max, feature-grid pixels
  std::size_t question_len = 16;   // T_q
  std::size_t question_dim = 32;   // D_z
  std::size_t downsample = 1;      // sampling stride of the deformable grid

  // Throws ConfigError when `channels` cannot be split over the heads or a field is out of range.
  void validate(std::size_t channels) const;
};

void to_json(nlohmann::json& j, const AttentionConfig& c);
void from_json(const nlohmann::json& j, AttentionConfig& c);

// Scaled dot-product attention split over `heads` column groups of q/k/v
// ([n, C], [m, C], [m, C]); heads are concatenated back to [n, C].
// `keep` ([n, m], optional) removes logits; a row with nothing kept attends
// uniformly over zero weights and yields zeros.
// When `weights` is given it receives one [n, m] probability matrix per head.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            std::span<const std::uint8_t> keep = {}, std::vector<Tensor>* weights = nullptr);

// (x, y) reference points of the sampling grid over an h x w map.
Tensor reference_grid(std::size_t height, std::size_t width, std::size_t stride = 1);

// phi(x; p + dp) for points p on the reference grid. offsets: [P, 2] as (dx, dy).
Tensor deformable_sample(const Tensor& map, const Tensor& offsets, std::size_t stride = 1);

// Conv(k) -> LayerNorm over channels -> GELU -> 1x1 conv to 2 channels -> tanh * s_max.
class OffsetNetwork {
 public:
  OffsetNetwork() = default;
  OffsetNetwork(ParamRegistry& reg, const std::string& name, std::size_t in_channels, std::size_t hidden,
                const AttentionConfig& cfg, Rng& rng);
  // map: [C_in, H, W] -> offsets [H' * W', 2].
  Tensor operator()(const Tensor& map) const;
  const Conv2d& projection() const { return proj_; }

 private:
  Conv2d conv_;
  LayerNorm norm_;
  Conv2d proj_;
  double max_offset_ = 4.0;
};

// Post-norm residual wrapper around a k_n x k_n neighbourhood attention.
class NeighborhoodAttention {
 public:
  NeighborhoodAttention() = default;
  NeighborhoodAttention(ParamRegistry& reg, const std::string& name, std::size_t channels, const AttentionConfig& cfg,
                        Rng& rng);
  // Attention output before the residual and norm, on a [C, H, W] map.
  // A non-zero `window` overrides the configured one.
  Tensor attend(const Tensor& map, std::size_t window = 0) const;
  Tensor operator()(const Tensor& map, std::size_t window = 0) const;
  std::size_t window() const { return window_; }

 private:
  Linear wq_, wk_, wv_, wo_;
  LayerNorm norm_;
  std::size_t heads_ = 1, window_ = 3;
};

struct DeformableTrace {
  Tensor offsets;                // [P, 2]
  std::vector<Tensor> weights;   // per head [HW, P]
};

// Deformable self-attention: queries on the grid, keys/values at p + theta_offset(q).
class DeformableAttention {
 public:
  DeformableAttention() = default;
  DeformableAttention(ParamRegistry& reg, const std::string& name, std::size_t channels, const AttentionConfig& cfg,
                      Rng& rng);
  Tensor attend(const Tensor& map, DeformableTrace* trace = nullptr) const;
  Tensor operator()(const Tensor& map, DeformableTrace* trace = nullptr) const;

  const Linear& wq() const { return wq_; }
  const Linear& wk() const { return wk_; }
  const Linear& wv() const { return wv_; }
  const Linear& wo() const { return wo_; }
  const OffsetNetwork& offset_net() const { return offsets_; }
  std::size_t heads() const { return heads_; }

 private:
  Linear wq_, wk_, wv_, wo_;
  OffsetNetwork offsets_;
  LayerNorm norm_;
  std::size_t heads_ = 1, stride_ = 1;
};

// Delta p^z = tanh(W(GELU(Norm(Conv(z (x W_a)^T))))) * s_max.
class QuestionOffsetNetwork {
 public:
  QuestionOffsetNetwork() = default;
  QuestionOffsetNetwork(ParamRegistry& reg, const std::string& name, std::size_t channels, const AttentionConfig& cfg,
                        Rng& rng);
  // x: [C, H, W], z: [T_q, D_z] -> offsets [H' * W', 2].
  Tensor operator()(const Tensor& x, const Tensor& z) const;
  // The T_q-channel similarity map S fed to the offset convolution.
  Tensor similarity(const Tensor& x, const Tensor& z) const;
  const OffsetNetwork& offset_net() const { return net_; }

 private:
  Linear wa_;
  OffsetNetwork net_;
  std::size_t question_len_ = 16;
};

struct CoAttentionTrace {
  Tensor offsets;               // question-guided offsets, empty without the QON
  std::vector<Tensor> weights;  // per head
};

// Queries from y, keys/values from x sampled at question-guided points.
class DCAttention {
 public:
  DCAttention() = default;
  DCAttention(ParamRegistry& reg, const std::string& name, std::size_t channels, const AttentionConfig& cfg, Rng& rng);
  // Returns token rows [H*W, C]. With use_qon = false keys/values come from x directly.
  Tensor operator()(const Tensor& x, const Tensor& y, const Tensor& z, bool use_qon = true,
                    CoAttentionTrace* trace = nullptr) const;
  // Question-sampled x~ as token rows [P, C].
  Tensor sample(const Tensor& x, const Tensor& z, Tensor* offsets = nullptr) const;
  const Linear& wv() const { return wv_; }
  const QuestionOffsetNetwork& qon() const { return qon_; }

 private:
  QuestionOffsetNetwork qon_;
  Linear wq_, wk_, wv_, wm_;
  std::size_t heads_ = 1, stride_ = 1;
};

// b = LN(y + DCA(x, y, z)); c = LN(b + ReLU(Conv3x3(b))); o = c W_o.
class QDCAtBlock {
 public:
  QDCAtBlock() = default;
  QDCAtBlock(ParamRegistry& reg, const std::string& name, std::size_t channels, std::size_t out_channels,
             const AttentionConfig& cfg, Rng& rng);
  // o as token rows [H*W, out_channels].
  Tensor operator()(const Tensor& x, const Tensor& y, const Tensor& z, bool use_qon = true,
                    CoAttentionTrace* trace = nullptr) const;
  // Intermediate b, exposed for inspection.
  Tensor residual(const Tensor& x, const Tensor& y, const Tensor& z, bool use_qon = true) const;
  const DCAttention& dca() const { return dca_; }

 private:
  DCAttention dca_;
  LayerNorm norm1_, norm2_;
  Conv2d ffn_;
  Linear wo_;
};

}  // namespace chart
