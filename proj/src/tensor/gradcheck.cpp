#include "chart/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "chart/error.hpp"

namespace chart {

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
  return worst;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const std::function<Tensor()>& loss, const std::vector<NamedTensor>& params,
                           const GradCheckOptions& options) {
  for (const auto& p : params) {
    if (!p.tensor.is_leaf() || !p.tensor.requires_grad()) {
      throw InputError("grad_check: parameter " + p.name + " must be a leaf requiring grad");
    }
  }
  for (auto p : params) p.tensor.zero_grad();
  Tensor l = loss();
  if (l.numel() != 1) throw InputError("grad_check: loss must be scalar");
  l.backward();

  Rng rng(options.seed);
  GradCheckReport report;
  for (auto p : params) {
    const std::size_t n = p.tensor.numel();
    std::vector<double> analytic(n, 0.0);
    if (p.tensor.has_grad()) std::copy(p.tensor.grad().begin(), p.tensor.grad().end(), analytic.begin());

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (options.max_entries > 0 && n > options.max_entries) {
      std::shuffle(idx.begin(), idx.end(), rng.engine());
      idx.resize(options.max_entries);
      std::sort(idx.begin(), idx.end());
    }

    GradCheckEntry entry{p.name, 0.0, idx.size()};
    NoGradGuard guard;
    auto data = p.tensor.mutable_data();
    for (std::size_t i : idx) {
      const double saved = data[i];
      data[i] = saved + options.eps;
      const double up = loss().item();
      data[i] = saved - options.eps;
      const double down = loss().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      entry.max_rel_error = std::max(entry.max_rel_error, relative_error(analytic[i], numeric));
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace chart
