#pragma once

#include <functional>
#include <string_view>
#include <vector>

#include "chart/tensor.hpp"

namespace chart::detail {

using BackwardFn = std::function<void(const TensorImpl& out)>;

// Builds an op result. The node is recorded only when grad mode is on and at
// least one input requires grad.
Tensor make_result(Shape shape, std::vector<double> data, std::string_view op,
                   std::vector<Tensor> inputs, BackwardFn backward);

// Splits a shape around an axis into (outer, extent, inner) strides.
struct AxisLayout {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};
AxisLayout axis_layout(const Shape& shape, std::size_t axis);

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op);
void require_rank(const Tensor& a, std::size_t rank, std::string_view op);

}  // namespace chart::detail
