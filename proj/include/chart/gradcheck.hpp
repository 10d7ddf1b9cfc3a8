#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "chart/nn.hpp"

namespace chart {

struct GradCheckOptions {
  double eps = 1e-5;
  // Entries checked per parameter; 0 checks every entry. When limited, the
  // entries are drawn with a fixed seed so reports are reproducible.
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error() const;
  bool passed(double tolerance) const { return max_rel_error() < tolerance; }
};

// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

// Compares reverse-mode gradients of the scalar `loss` against central
// differences (f(t+eps) - f(t-eps)) / (2 eps) for every listed parameter.
// `loss` must be deterministic and rebuild its graph on every call.
GradCheckReport grad_check(const std::function<Tensor()>& loss, const std::vector<NamedTensor>& params,
                           const GradCheckOptions& options = {});

}  // namespace chart
