#pragma once

#include <string>
#include <vector>

#include "chart/nn.hpp"
#include "json.hpp"

namespace chart {

struct OptimizerConfig {
  std::string kind = "sgd_momentum";  // or "adam"
  double learning_rate = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<Tensor> params);
  // Applies one update from the accumulated grads, then clears them.
  void step();
  // Global L2 norm of the current gradients.
  double grad_norm() const;
  const OptimizerConfig& config() const { return config_; }

 private:
  OptimizerConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  long steps_ = 0;
};

}  // namespace chart
