#include "chart/optim.hpp"

#include <cmath>

#include "chart/error.hpp"

namespace chart {

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"kind", c.kind},     {"learning_rate", c.learning_rate}, {"momentum", c.momentum}, {"beta1", c.beta1},
       {"beta2", c.beta2}, {"epsilon", c.epsilon},             {"clip_norm", c.clip_norm}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "kind") c.kind = value.get<std::string>();
    else if (key == "learning_rate") c.learning_rate = value.get<double>();
    else if (key == "momentum") c.momentum = value.get<double>();
    else if (key == "beta1") c.beta1 = value.get<double>();
    else if (key == "beta2") c.beta2 = value.get<double>();
    else if (key == "epsilon") c.epsilon = value.get<double>();
    else if (key == "clip_norm") c.clip_norm = value.get<double>();
    else throw ConfigError("unknown optimizer key: " + key);
  }
  if (c.kind != "sgd_momentum" && c.kind != "adam") throw ConfigError("optimizer kind must be sgd_momentum or adam");
  if (c.learning_rate < 0.0) throw ConfigError("learning_rate must be non-negative");
}

Optimizer::Optimizer(OptimizerConfig config, std::vector<Tensor> params)
    : config_(std::move(config)), params_(std::move(params)) {
  for (const Tensor& p : params_) {
    first_.emplace_back(p.numel(), 0.0);
    second_.emplace_back(config_.kind == "adam" ? p.numel() : 0, 0.0);
  }
}

double Optimizer::grad_norm() const {
  double s = 0.0;
  for (const Tensor& p : params_)
    if (p.has_grad())
      for (double g : p.grad()) s += g * g;
  return std::sqrt(s);
}

void Optimizer::step() {
  ++steps_;
  double factor = 1.0;
  if (config_.clip_norm > 0.0) {
    const double norm = grad_norm();
    if (norm > config_.clip_norm) factor = config_.clip_norm / norm;
  }
  const double lr = config_.learning_rate;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    if (!p.has_grad()) continue;
    auto data = p.mutable_data();
    const auto grad = p.grad();
    auto& m = first_[k];
    if (config_.kind == "adam") {
      auto& v = second_[k];
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double g = grad[i] * factor;
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
        data[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.epsilon);
      }
    } else {
      for (std::size_t i = 0; i < data.size(); ++i) {
        m[i] = config_.momentum * m[i] + grad[i] * factor;
        data[i] -= lr * m[i];
      }
    }
    p.zero_grad();
  }
}

}  // namespace chart
