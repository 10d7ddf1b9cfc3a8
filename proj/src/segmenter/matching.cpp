#include <algorithm>
#include <cmath>
#include <limits>

#include "chart/error.hpp"
#include "chart/segmenter.hpp"

namespace chart {

// Shortest augmenting paths with row/column potentials, O(G^2 N).
std::vector<std::size_t> hungarian_match(const std::vector<double>& costs, std::size_t rows, std::size_t cols) {
  if (costs.size() != rows * cols) throw InputError("hungarian_match: cost matrix size mismatch");
  if (cols > rows) {
    throw InputError("hungarian_match: " + std::to_string(cols) + " targets exceed " + std::to_string(rows) +
                     " predictions");
  }
  for (double c : costs)
    if (!std::isfinite(c)) throw InputError("hungarian_match: non-finite cost");
  if (cols == 0) return {};

  // Internally the targets are the assigned side (1-based) and predictions the pool.
  const std::size_t n = cols, m = rows;
  const double inf = std::numeric_limits<double>::infinity();
  auto a = [&](std::size_t i, std::size_t j) { return costs[(j - 1) * cols + (i - 1)]; };
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> out(n, 0);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) out[p[j] - 1] = j - 1;
  return out;
}

}  // namespace chart
