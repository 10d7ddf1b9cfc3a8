#include "chart/nn.hpp"

#include <cmath>

#include "chart/error.hpp"

namespace chart {

double Rng::uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }

double Rng::normal(double mean, double stddev) { return std::normal_distribution<double>(mean, stddev)(engine_); }

int Rng::integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

bool Rng::bernoulli(double p) { return uniform(0.0, 1.0) < p; }

Tensor ParamRegistry::add(const std::string& name, Shape shape, Init init, Rng& rng, std::size_t fan_in,
                          std::size_t fan_out) {
  if (find(name) != nullptr) throw ConfigError("duplicate parameter name " + name);
  const std::size_t n = shape_numel(shape);
  std::vector<double> values(n, init == Init::ones ? 1.0 : 0.0);
  if (init == Init::xavier) {
    if (fan_in == 0) fan_in = shape.size() > 1 ? shape[0] : n;
    if (fan_out == 0) fan_out = shape.size() > 1 ? shape[1] : n;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double& v : values) v = rng.uniform(-bound, bound);
  }
  Tensor t = Tensor::from(std::move(shape), std::move(values), true);
  entries_.push_back({name, t});
  return t;
}

const Tensor* ParamRegistry::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

std::size_t ParamRegistry::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

void ParamRegistry::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

void ParamRegistry::set_requires_grad(bool on) {
  for (auto& e : entries_) e.tensor.set_requires_grad(on);
}

void ParamRegistry::copy_from(const ParamRegistry& other) {
  for (auto& e : entries_) {
    const Tensor* src = other.find(e.name);
    if (src == nullptr || src->shape() != e.tensor.shape()) {
      throw ConfigError("parameter " + e.name + " missing or mis-shaped in source registry");
    }
    auto dst = e.tensor.mutable_data();
    std::copy(src->data().begin(), src->data().end(), dst.begin());
  }
}

Linear::Linear(ParamRegistry& reg, const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool bias,
               Init init)
    : in_(in), out_(out) {
  weight_ = reg.add(name + ".weight", {in, out}, init, rng, in, out);
  if (bias) bias_ = reg.add(name + ".bias", {out}, Init::zeros, rng);
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight_);
  return bias_.defined() ? add_broadcast(y, bias_, 1) : y;
}

Conv2d::Conv2d(ParamRegistry& reg, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
               std::size_t stride, Rng& rng, bool bias, Init init)
    : out_(out), kernel_(kernel), stride_(stride) {
  weight_ = reg.add(name + ".weight", {out, in, kernel, kernel}, init, rng, in * kernel * kernel,
                    out * kernel * kernel);
  if (bias) bias_ = reg.add(name + ".bias", {out}, Init::zeros, rng);
}

Tensor Conv2d::operator()(const Tensor& x) const { return conv2d(x, weight_, bias_, stride_, kernel_ / 2); }

LayerNorm::LayerNorm(ParamRegistry& reg, const std::string& name, std::size_t features, Rng& rng) {
  gain_ = reg.add(name + ".gain", {features}, Init::ones, rng);
  bias_ = reg.add(name + ".bias", {features}, Init::zeros, rng);
}

Tensor LayerNorm::operator()(const Tensor& x, std::size_t axis) const { return layer_norm(x, gain_, bias_, axis); }

Embedding::Embedding(ParamRegistry& reg, const std::string& name, std::size_t vocab, std::size_t dim, Rng& rng) {
  table_ = reg.add(name + ".table", {vocab, dim}, Init::xavier, rng, 1, dim);
}

Tensor Embedding::operator()(std::span<const std::size_t> ids) const { return gather_rows(table_, ids); }

Tensor map_to_tokens(const Tensor& map) {
  if (map.rank() != 3) throw InputError("map_to_tokens: expected [C, H, W], got " + shape_str(map.shape()));
  return transpose(reshape(map, {map.dim(0), map.dim(1) * map.dim(2)}));
}

Tensor tokens_to_map(const Tensor& tokens, std::size_t height, std::size_t width) {
  if (tokens.rank() != 2 || tokens.dim(0) != height * width) {
    throw InputError("tokens_to_map: " + shape_str(tokens.shape()) + " is not " + std::to_string(height * width) +
                     " tokens");
  }
  return reshape(transpose(tokens), {tokens.dim(1), height, width});
}

}  // namespace chart
