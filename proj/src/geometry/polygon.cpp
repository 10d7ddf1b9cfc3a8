#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "chart/error.hpp"
#include "chart/geometry.hpp"

namespace chart {

namespace {

constexpr double kTiny = 1e-12;

Point vertex(const std::vector<double>& poly, std::size_t i) { return {poly[2 * i], poly[2 * i + 1]}; }

double cross(Point o, Point a, Point b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

bool on_segment(Point a, Point b, Point p) {
  return std::min(a.x, b.x) - kTiny <= p.x && p.x <= std::max(a.x, b.x) + kTiny && std::min(a.y, b.y) - kTiny <= p.y &&
         p.y <= std::max(a.y, b.y) + kTiny;
}

int orientation(Point a, Point b, Point c) {
  const double v = cross(a, b, c);
  if (std::abs(v) <= kTiny) return 0;
  return v > 0 ? 1 : -1;
}

void push(std::vector<double>& out, Point p) {
  out.push_back(p.x);
  out.push_back(p.y);
}

// Drops consecutive duplicates, including the wrap-around pair.
std::vector<double> dedupe(const std::vector<double>& poly) {
  std::vector<double> out;
  const std::size_t n = poly.size() / 2;
  for (std::size_t i = 0; i < n; ++i) {
    const Point p = vertex(poly, i);
    if (!out.empty()) {
      const Point q{out[out.size() - 2], out.back()};
      if (std::abs(p.x - q.x) <= kTiny && std::abs(p.y - q.y) <= kTiny) continue;
    }
    push(out, p);
  }
  while (out.size() >= 4 && std::abs(out[0] - out[out.size() - 2]) <= kTiny && std::abs(out[1] - out.back()) <= kTiny) {
    out.resize(out.size() - 2);
  }
  return out;
}

PolygonAnnotation finish(Category category, const std::vector<double>& raw, ImageSize size) {
  if (size.height == 0 || size.width == 0) throw InputError("image size must be positive");
  std::vector<double> clipped = clip_to_image(raw, size);
  if (clipped.size() < 6 || polygon_area(clipped) <= kTiny) {
    throw InputError("polygon is degenerate or lies outside the image");
  }
  return {category, std::move(clipped), size};
}

Point add(Point a, Point b, double s = 1.0) { return {a.x + s * b.x, a.y + s * b.y}; }

// Intersection parameter along a->b for segments that properly cross.
bool crossing(Point a, Point b, Point c, Point d, Point& at) {
  const double den = (b.x - a.x) * (d.y - c.y) - (b.y - a.y) * (d.x - c.x);
  if (std::abs(den) <= kTiny) return false;
  const double t = ((c.x - a.x) * (d.y - c.y) - (c.y - a.y) * (d.x - c.x)) / den;
  const double u = ((c.x - a.x) * (b.y - a.y) - (c.y - a.y) * (b.x - a.x)) / den;
  if (t < 0 || t > 1 || u < 0 || u > 1) return false;
  at = {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)};
  return true;
}

// Cuts the swallowtail loops an offset polyline forms where short segments
// sit between converging neighbours.
std::vector<Point> trim_loops(std::vector<Point> run) {
  for (std::size_t i = 0; i + 1 < run.size(); ++i) {
    for (std::size_t j = run.size() - 1; j > i + 1; --j) {
      Point x;
      if (crossing(run[i], run[i + 1], run[j - 1], run[j], x)) {
        run.erase(run.begin() + static_cast<std::ptrdiff_t>(i + 1), run.begin() + static_cast<std::ptrdiff_t>(j));
        run.insert(run.begin() + static_cast<std::ptrdiff_t>(i + 1), x);
        break;
      }
    }
  }
  return run;
}

// Outline of the region a self-crossing ring covers. The ring is split at
// every crossing and the outer face of the resulting planar graph is walked.
std::vector<Point> outer_boundary(const std::vector<Point>& ring) {
  const std::size_t n = ring.size();
  std::vector<Point> nodes(ring);
  std::vector<std::vector<std::pair<double, std::size_t>>> cuts(n);
  for (std::size_t e = 0; e < n; ++e) cuts[e] = {{0.0, e}, {1.0, (e + 1) % n}};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 2; j < n; ++j) {
      if (i == 0 && j == n - 1) continue;
      const Point a = ring[i], b = ring[(i + 1) % n], c = ring[j], d = ring[(j + 1) % n];
      const double den = (b.x - a.x) * (d.y - c.y) - (b.y - a.y) * (d.x - c.x);
      if (std::abs(den) <= kTiny) continue;
      const double t = ((c.x - a.x) * (d.y - c.y) - (c.y - a.y) * (d.x - c.x)) / den;
      const double u = ((c.x - a.x) * (b.y - a.y) - (c.y - a.y) * (b.x - a.x)) / den;
      if (t <= 0 || t >= 1 || u <= 0 || u >= 1) continue;
      cuts[i].push_back({t, nodes.size()});
      cuts[j].push_back({u, nodes.size()});
      nodes.push_back({a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)});
    }
  std::vector<std::vector<std::size_t>> adj(nodes.size());
  auto link = [&](std::size_t a, std::size_t b) {
    if (a == b || std::find(adj[a].begin(), adj[a].end(), b) != adj[a].end()) return;
    adj[a].push_back(b);
    adj[b].push_back(a);
  };
  for (auto& c : cuts) {
    std::sort(c.begin(), c.end());
    for (std::size_t k = 1; k < c.size(); ++k) link(c[k - 1].second, c[k].second);
  }

  const double two_pi = 2.0 * std::numbers::pi;
  // Next node after arriving at `v` along a direction whose reverse has angle `back`.
  auto turn = [&](std::size_t v, double back, std::size_t from) {
    std::size_t best = from;
    double best_sweep = two_pi + 1.0;
    for (std::size_t w : adj[v]) {
      double sweep = std::atan2(nodes[w].y - nodes[v].y, nodes[w].x - nodes[v].x) - back;
      while (sweep <= 0) sweep += two_pi;
      while (sweep > two_pi) sweep -= two_pi;
      if (w == from) sweep = two_pi;
      if (sweep < best_sweep) {
        best_sweep = sweep;
        best = w;
      }
    }
    return best;
  };
  auto back_angle = [&](std::size_t v, std::size_t u) {
    return std::atan2(nodes[u].y - nodes[v].y, nodes[u].x - nodes[v].x);
  };

  std::size_t start = 0;
  for (std::size_t v = 1; v < nodes.size(); ++v)
    if (nodes[v].x < nodes[start].x || (nodes[v].x == nodes[start].x && nodes[v].y < nodes[start].y)) start = v;
  // The leftmost node sees the exterior in the -x direction.
  const std::size_t first = turn(start, std::numbers::pi, nodes.size());
  std::vector<std::size_t> walk{start};
  std::size_t prev = start, cur = first;
  for (std::size_t guard = 0; guard < 4 * nodes.size() * nodes.size(); ++guard) {
    const std::size_t next = turn(cur, back_angle(cur, prev), prev);
    if (cur == start && next == first) break;
    walk.push_back(cur);
    prev = cur;
    cur = next;
  }

  // Zero-width spurs are walked out and back; cancel them.
  for (bool changed = true; changed && walk.size() > 3;) {
    changed = false;
    for (std::size_t i = 0; i < walk.size() && walk.size() > 3; ++i) {
      const std::size_t m = walk.size();
      if (walk[(i + m - 1) % m] == walk[(i + 1) % m]) {
        const std::size_t hi = std::max(i, (i + 1) % m), lo = std::min(i, (i + 1) % m);
        walk.erase(walk.begin() + static_cast<std::ptrdiff_t>(hi));
        walk.erase(walk.begin() + static_cast<std::ptrdiff_t>(lo));
        changed = true;
      }
    }
  }
  // Lobes that touch at a node: later visits cut a tiny corner so the
  // outline no longer meets itself there.
  std::vector<std::size_t> seen_count(nodes.size(), 0);
  std::vector<Point> out;
  for (std::size_t i = 0; i < walk.size(); ++i) {
    const Point v = nodes[walk[i]];
    if (seen_count[walk[i]]++ == 0) {
      out.push_back(v);
      continue;
    }
    const Point a = nodes[walk[(i + walk.size() - 1) % walk.size()]], b = nodes[walk[(i + 1) % walk.size()]];
    constexpr double cut = 1e-3;
    out.push_back({v.x + cut * (a.x - v.x), v.y + cut * (a.y - v.y)});
    out.push_back({v.x + cut * (b.x - v.x), v.y + cut * (b.y - v.y)});
  }
  return out;
}

}  // namespace

double signed_area(const std::vector<double>& poly) {
  const std::size_t n = poly.size() / 2;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Point a = vertex(poly, i), b = vertex(poly, (i + 1) % n);
    s += a.x * b.y - b.x * a.y;
  }
  return 0.5 * s;
}

double polygon_area(const std::vector<double>& poly) { return std::abs(signed_area(poly)); }

bool segments_intersect(Point a, Point b, Point c, Point d) {
  const int o1 = orientation(a, b, c), o2 = orientation(a, b, d);
  const int o3 = orientation(c, d, a), o4 = orientation(c, d, b);
  if (o1 != o2 && o3 != o4) return true;
  if (o1 == 0 && on_segment(a, b, c)) return true;
  if (o2 == 0 && on_segment(a, b, d)) return true;
  if (o3 == 0 && on_segment(c, d, a)) return true;
  if (o4 == 0 && on_segment(c, d, b)) return true;
  return false;
}

bool is_simple(const std::vector<double>& poly) {
  const std::size_t n = poly.size() / 2;
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    const Point a = vertex(poly, i), b = vertex(poly, (i + 1) % n);
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool adjacent = j == i + 1 || (i == 0 && j == n - 1);
      if (adjacent) continue;
      if (segments_intersect(a, b, vertex(poly, j), vertex(poly, (j + 1) % n))) return false;
    }
  }
  return true;
}

bool point_in_polygon(const std::vector<double>& poly, Point p) {
  const std::size_t n = poly.size() / 2;
  bool inside = false;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Point a = vertex(poly, i), b = vertex(poly, j);
    if ((a.y > p.y) != (b.y > p.y)) {
      const double x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (p.x < x) inside = !inside;
    }
  }
  return inside;
}

double distance_to_boundary(const std::vector<double>& poly, Point p) {
  const std::size_t n = poly.size() / 2;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    const Point a = vertex(poly, i), b = vertex(poly, (i + 1) % n);
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    best = std::min(best, std::hypot(a.x + t * dx - p.x, a.y + t * dy - p.y));
  }
  return best;
}

std::vector<double> clip_to_image(const std::vector<double>& poly, ImageSize size) {
  const double w = static_cast<double>(size.width), h = static_cast<double>(size.height);
  const bool inside_all = [&] {
    for (std::size_t i = 0; i + 1 < poly.size(); i += 2)
      if (poly[i] < 0 || poly[i] > w || poly[i + 1] < 0 || poly[i + 1] > h) return false;
    return true;
  }();
  if (inside_all) return dedupe(poly);

  // Each edge of the image box as (axis, bound, keep-if-less-or-equal).
  struct Plane {
    int axis;
    double bound;
    bool keep_below;
  };
  const Plane planes[4] = {{0, 0.0, false}, {0, w, true}, {1, 0.0, false}, {1, h, true}};
  std::vector<Point> cur;
  for (std::size_t i = 0; i + 1 < poly.size(); i += 2) cur.push_back({poly[i], poly[i + 1]});
  for (const Plane& pl : planes) {
    if (cur.empty()) break;
    auto coord = [&](Point p) { return pl.axis == 0 ? p.x : p.y; };
    auto in = [&](Point p) { return pl.keep_below ? coord(p) <= pl.bound : coord(p) >= pl.bound; };
    std::vector<Point> next;
    for (std::size_t i = 0; i < cur.size(); ++i) {
      const Point a = cur[i], b = cur[(i + 1) % cur.size()];
      const bool ia = in(a), ib = in(b);
      if (ia) next.push_back(a);
      if (ia != ib) {
        const double t = (pl.bound - coord(a)) / (coord(b) - coord(a));
        Point x{a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)};
        if (pl.axis == 0) x.x = pl.bound;
        else x.y = pl.bound;
        next.push_back(x);
      }
    }
    cur = std::move(next);
  }
  std::vector<double> out;
  for (Point p : cur) push(out, p);
  return dedupe(out);
}

PolygonAnnotation pie_polygon(Point center, Point v1, Point v2, ImageSize size, const PieOptions& opt) {
  const double r1 = std::hypot(v1.x - center.x, v1.y - center.y);
  const double r2 = std::hypot(v2.x - center.x, v2.y - center.y);
  if (r1 <= kTiny || r2 <= kTiny) throw InputError("pie slice has zero radius");
  if (opt.winding != 1 && opt.winding != -1) throw InputError("pie winding must be +1 or -1");
  if (!(opt.points_per_radian >= 0.0)) throw InputError("points_per_radian must be non-negative");
  const double t1 = std::atan2(v1.y - center.y, v1.x - center.x);
  const double t2 = std::atan2(v2.y - center.y, v2.x - center.x);
  const double two_pi = 2.0 * std::numbers::pi;
  double sweep = std::fmod(opt.winding * (t2 - t1), two_pi);
  if (sweep < 0) sweep += two_pi;
  if (sweep <= 1e-9 || two_pi - sweep <= 1e-9) throw InputError("pie slice has zero sweep");

  const auto count = static_cast<std::size_t>(std::lround(opt.points_per_radian * sweep));
  std::vector<double> poly;
  push(poly, center);
  push(poly, v1);
  for (std::size_t k = 1; k <= count; ++k) {
    const double f = static_cast<double>(k) / static_cast<double>(count + 1);
    const double theta = t1 + opt.winding * f * sweep;
    const double r = r1 + f * (r2 - r1);
    push(poly, {center.x + r * std::cos(theta), center.y + r * std::sin(theta)});
  }
  push(poly, v2);
  return finish(Category::pie, poly, size);
}

PolygonAnnotation line_polygon(const std::vector<Point>& pts, ImageSize size, const LineOptions& opt) {
  if (pts.size() < 2) throw InputError("line needs at least 2 points");
  if (!(opt.thickness_frac > 0.0)) throw InputError("line thickness must be positive");
  const std::size_t segs = pts.size() - 1;
  std::vector<Point> dir(segs), nrm(segs);
  std::vector<double> len(segs);
  for (std::size_t i = 0; i < segs; ++i) {
    const double dx = pts[i + 1].x - pts[i].x, dy = pts[i + 1].y - pts[i].y;
    len[i] = std::hypot(dx, dy);
    if (len[i] <= kTiny) throw InputError("line has repeated consecutive points");
    dir[i] = {dx / len[i], dy / len[i]};
    nrm[i] = {-dir[i].y, dir[i].x};
  }
  const double half = 0.5 * opt.thickness_frac * static_cast<double>(size.height);
  const double spike_limit = opt.spike_angle_deg * std::numbers::pi / 180.0;

  std::vector<Point> upper, lower;
  upper.push_back(add(pts[0], nrm[0], half));
  lower.push_back(add(pts[0], nrm[0], -half));
  for (std::size_t i = 1; i < segs; ++i) {
    const Point a = dir[i - 1], b = dir[i];
    const double turn_cross = a.x * b.y - a.y * b.x;
    const double turn_dot = a.x * b.x + a.y * b.y;
    if (turn_dot < -1.0 + 1e-12) throw InputError("line folds back on itself");
    const double turn = std::atan2(std::abs(turn_cross), turn_dot);
    const double interior = std::numbers::pi - turn;
    Point bis{nrm[i - 1].x + nrm[i].x, nrm[i - 1].y + nrm[i].y};
    const double bl = std::hypot(bis.x, bis.y);
    bis = {bis.x / bl, bis.y / bl};
    double dist = half / std::cos(0.5 * turn);
    const double reach_limit = 0.45 * std::min(len[i - 1], len[i]);
    if (dist * std::sin(0.5 * turn) > reach_limit) dist = reach_limit / std::sin(0.5 * turn);

    for (const int side : {1, -1}) {
      std::vector<Point>& out = side == 1 ? upper : lower;
      const bool outer = side * turn_cross < 0;
      if (outer && interior < spike_limit) {
        const Point base = add(pts[i], bis, side * std::min(half, dist));
        Point perp{-bis.y, bis.x};
        if (perp.x * nrm[i - 1].x * side + perp.y * nrm[i - 1].y * side < 0) perp = {-perp.x, -perp.y};
        out.push_back(add(base, perp, 0.5 * opt.spike_shift));
        out.push_back(add(base, perp, -0.5 * opt.spike_shift));
      } else {
        out.push_back(add(pts[i], bis, side * dist));
      }
    }
  }
  upper.push_back(add(pts.back(), nrm.back(), half));
  lower.push_back(add(pts.back(), nrm.back(), -half));
  upper = trim_loops(std::move(upper));
  lower = trim_loops(std::move(lower));

  std::vector<double> poly;
  for (Point p : upper) push(poly, p);
  for (auto it = lower.rbegin(); it != lower.rend(); ++it) push(poly, *it);
  // Bands that pass close to an earlier part of the line overlap themselves.
  if (!is_simple(poly)) {
    std::vector<Point> ring(upper);
    ring.insert(ring.end(), lower.rbegin(), lower.rend());
    poly.clear();
    for (Point p : outer_boundary(ring)) push(poly, p);
  }
  return finish(Category::line, poly, size);
}

PolygonAnnotation rect_polygon(Point lo, Point hi, ImageSize size, Category category) {
  if (!(lo.x < hi.x && lo.y < hi.y)) throw InputError("rectangle has zero area");
  return finish(category, {lo.x, lo.y, hi.x, lo.y, hi.x, hi.y, lo.x, hi.y}, size);
}

}  // namespace chart
