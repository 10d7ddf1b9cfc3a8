#include <algorithm>
#include <cmath>

#include "chart/error.hpp"
#include "chart/geometry.hpp"

namespace chart {

std::size_t Mask::count() const {
  std::size_t n = 0;
  for (std::uint8_t b : bits) n += b != 0;
  return n;
}

Mask rasterize(const std::vector<double>& poly, ImageSize size) {
  Mask mask(size.height, size.width);
  const std::size_t n = poly.size() / 2;
  if (n < 3) return mask;
  const auto w = static_cast<long>(size.width);
  std::vector<double> xs;
  for (std::size_t y = 0; y < size.height; ++y) {
    const double yc = static_cast<double>(y) + 0.5;
    xs.clear();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      const double x0 = poly[2 * j], y0 = poly[2 * j + 1];
      const double x1 = poly[2 * i], y1 = poly[2 * i + 1];
      // Half-open rule: a vertex exactly on the scanline is counted once.
      if ((y0 <= yc) != (y1 <= yc)) xs.push_back(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      const long first = std::max(0L, static_cast<long>(std::ceil(xs[k] - 0.5)));
      const long last = std::min(w, static_cast<long>(std::ceil(xs[k + 1] - 0.5)));
      for (long x = first; x < last; ++x) mask.set(y, static_cast<std::size_t>(x));
    }
  }
  return mask;
}

Mask rasterize(const PolygonAnnotation& poly) { return rasterize(poly.polygon, poly.size); }

double mask_iou(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) throw InputError("mask_iou: masks differ in shape");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    const bool pa = a.bits[i] != 0, pb = b.bits[i] != 0;
    inter += pa && pb;
    uni += pa || pb;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

PixelBox bbox_from_mask(const Mask& mask) {
  PixelBox box{mask.width, mask.height, 0, 0};
  bool any = false;
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      any = true;
      box.x_min = std::min(box.x_min, x);
      box.y_min = std::min(box.y_min, y);
      box.x_max = std::max(box.x_max, x);
      box.y_max = std::max(box.y_max, y);
    }
  if (!any) throw InputError("bbox_from_mask: mask is empty");
  return box;
}

}  // namespace chart
