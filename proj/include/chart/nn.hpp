#pragma once

// Parameter registry and the small set of layers every model here is built from.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "chart/tensor.hpp"

namespace chart {

// Seeded random source. Every stochastic choice in the project goes through one.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform(double lo, double hi);
  double normal(double mean = 0.0, double stddev = 1.0);
  // Integer in [lo, hi].
  int integer(int lo, int hi);
  bool bernoulli(double p);
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

enum class Init { xavier, zeros, ones };

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Ordered, named collection of trainable leaves.
class ParamRegistry {
 public:
  Tensor add(const std::string& name, Shape shape, Init init, Rng& rng, std::size_t fan_in = 0,
             std::size_t fan_out = 0);
  const std::vector<NamedTensor>& entries() const { return entries_; }
  const Tensor* find(const std::string& name) const;
  std::size_t parameter_count() const;
  void zero_grad();
  void set_requires_grad(bool on);
  // Copies values from another registry with identical names/shapes.
  void copy_from(const ParamRegistry& other);

 private:
  std::vector<NamedTensor> entries_;
};

// Dense projection on token rows: y = x W (+ b). x: [n, in], W: [in, out].
class Linear {
 public:
  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool bias = true, Init init = Init::xavier);
  Tensor operator()(const Tensor& x) const;
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

 private:
  Tensor weight_;
  Tensor bias_;
  std::size_t in_ = 0, out_ = 0;
};

// 2-D convolution on a [C, H, W] map with "same"-style padding k/2.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamRegistry& reg, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
         std::size_t stride, Rng& rng, bool bias = true, Init init = Init::xavier);
  Tensor operator()(const Tensor& x) const;
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }
  std::size_t out_channels() const { return out_; }

 private:
  Tensor weight_;
  Tensor bias_;
  std::size_t out_ = 0, kernel_ = 1, stride_ = 1;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamRegistry& reg, const std::string& name, std::size_t features, Rng& rng);
  // Normalises over `axis` (1 for token rows [n, C], 0 for maps [C, H, W]).
  Tensor operator()(const Tensor& x, std::size_t axis) const;
  const Tensor& gain() const { return gain_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor gain_;
  Tensor bias_;
};

class Embedding {
 public:
  Embedding() = default;
  Embedding(ParamRegistry& reg, const std::string& name, std::size_t vocab, std::size_t dim, Rng& rng);
  Tensor operator()(std::span<const std::size_t> ids) const;
  const Tensor& table() const { return table_; }

 private:
  Tensor table_;
};

// [C, H, W] map <-> [H*W, C] token rows.
Tensor map_to_tokens(const Tensor& map);
Tensor tokens_to_map(const Tensor& tokens, std::size_t height, std::size_t width);

}  // namespace chart
