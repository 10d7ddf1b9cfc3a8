#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "chart/error.hpp"
#include "chart/geometry.hpp"
#include "chart/nn.hpp"

using namespace chart;
using std::numbers::pi;

namespace {

std::vector<double> random_convex(Rng& rng, Point c, double r_lo, double r_hi, int n) {
  std::vector<double> angles;
  for (int i = 0; i < n; ++i) angles.push_back(rng.uniform(0, 2 * pi));
  std::sort(angles.begin(), angles.end());
  const double r = rng.uniform(r_lo, r_hi);
  std::vector<double> poly;
  for (double a : angles) {
    poly.push_back(c.x + r * std::cos(a));
    poly.push_back(c.y + r * std::sin(a));
  }
  return poly;
}

// x-monotone centerline in the style of a chart series.
std::vector<Point> random_series(Rng& rng, int n, double x0, double dx_lo, double dx_hi, double y_lo, double y_hi) {
  std::vector<Point> pts;
  double x = x0;
  for (int i = 0; i < n; ++i) {
    pts.push_back({x, rng.uniform(y_lo, y_hi)});
    x += rng.uniform(dx_lo, dx_hi);
  }
  return pts;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const ImageSize kBig{200, 200};

}  // namespace

TEST_CASE("pie: quarter slice point count and vertex order") {
  const Point c{50, 50}, v1{60, 50}, v2{50, 60};
  PolygonAnnotation p = pie_polygon(c, v1, v2, {100, 100});
  CHECK(p.category == Category::pie);
  REQUIRE(p.vertex_count() == 2 + 1 + 8);
  CHECK(p.polygon[0] == 50);
  CHECK(p.polygon[2] == 60);
  CHECK(p.polygon[p.polygon.size() - 1] == 60);
  for (std::size_t k = 2; k < 10; ++k) {
    const double x = p.polygon[2 * k] - 50, y = p.polygon[2 * k + 1] - 50;
    CHECK(std::hypot(x, y) == doctest::Approx(10.0));
    CHECK(std::atan2(y, x) == doctest::Approx((pi / 2) * double(k - 1) / 9.0));
  }
}

TEST_CASE("pie: degenerate inputs rejected") {
  CHECK_THROWS_AS(pie_polygon({5, 5}, {6, 5}, {6, 5}, {20, 20}), InputError);
  CHECK_THROWS_AS(pie_polygon({5, 5}, {5, 5}, {6, 5}, {20, 20}), InputError);
}

TEST_CASE("pie: semicircle area and sector-area property") {
  PolygonAnnotation semi = pie_polygon({5, 5}, {6, 5}, {4, 5}, {20, 20});
  CHECK(std::abs(polygon_area(semi.polygon) - pi / 2) / (pi / 2) < 0.01);

  Rng rng(31);
  for (int t = 0; t < 300; ++t) {
    const double r = rng.uniform(5, 80);
    const double sweep = rng.uniform(0.2, 2 * pi - 0.01);
    const double t1 = rng.uniform(-pi, pi);
    const Point c{100, 100};
    const Point v1{c.x + r * std::cos(t1), c.y + r * std::sin(t1)};
    const Point v2{c.x + r * std::cos(t1 + sweep), c.y + r * std::sin(t1 + sweep)};
    PieOptions opt;
    opt.points_per_radian = rng.uniform(5, 9);
    PolygonAnnotation p = pie_polygon(c, v1, v2, kBig, opt);
    const double sector = 0.5 * r * r * sweep;
    CHECK(std::abs(polygon_area(p.polygon) - sector) / sector <= 0.01);
    CHECK(is_simple(p.polygon));
    // The opposite winding takes the complementary arc.
    opt.winding = -1;
    const double other = polygon_area(pie_polygon(c, v1, v2, kBig, opt).polygon);
    CHECK(std::abs(other + polygon_area(p.polygon) - pi * r * r) / (pi * r * r) < 0.01);
  }
}

TEST_CASE("line: horizontal segment becomes a one-pixel rectangle") {
  PolygonAnnotation p = line_polygon({{10, 50}, {60, 50}}, {100, 100});
  REQUIRE(p.vertex_count() == 4);
  double y_lo = 1e9, y_hi = -1e9;
  for (std::size_t i = 1; i < p.polygon.size(); i += 2) {
    y_lo = std::min(y_lo, p.polygon[i]);
    y_hi = std::max(y_hi, p.polygon[i]);
  }
  CHECK(y_hi - y_lo == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(polygon_area(p.polygon) == doctest::Approx(50.0));
  CHECK_THROWS_AS(line_polygon({{1, 1}}, {100, 100}), InputError);
  CHECK_THROWS_AS(line_polygon({{1, 1}, {1, 1}}, {100, 100}), InputError);
}

TEST_CASE("line: right-angle miter length") {
  PolygonAnnotation p = line_polygon({{10, 10}, {50, 10}, {50, 50}}, {100, 100});
  const double expect = 0.5 * std::sqrt(2.0);
  // Corner vertex on each side: index 1 of the upper run, and its mirror on the lower run.
  REQUIRE(p.vertex_count() == 6);
  for (std::size_t k : {1u, 4u}) {
    const double d = std::hypot(p.polygon[2 * k] - 50, p.polygon[2 * k + 1] - 10);
    CHECK(d == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("line: acute bend gets two nearby outer vertices") {
  // Interior angle ~11 degrees at (60,50).
  PolygonAnnotation p = line_polygon({{10, 50}, {60, 50}, {10, 60}}, {100, 100});
  REQUIRE(p.vertex_count() == 7);
  CHECK(is_simple(p.polygon));
  double best = 1e9;
  for (std::size_t i = 0; i < p.vertex_count(); ++i)
    for (std::size_t j = i + 1; j < p.vertex_count(); ++j)
      best = std::min(best, std::hypot(p.polygon[2 * i] - p.polygon[2 * j], p.polygon[2 * i + 1] - p.polygon[2 * j + 1]));
  CHECK(best == doctest::Approx(0.25));
}

TEST_CASE("line: random series stay simple and contain their centerline") {
  Rng rng(32);
  for (int t = 0; t < 400; ++t) {
    const int n = rng.integer(2, 12);
    const bool steep = t % 2 == 0;
    auto pts = random_series(rng, n, 5, 2, 15, steep ? 10 : 90, steep ? 190 : 110);
    ImageSize size{200, 200};
    LineOptions opt;
    opt.thickness_frac = rng.uniform(0.005, 0.03);
    PolygonAnnotation p = line_polygon(pts, size, opt);
    CHECK(is_simple(p.polygon));
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const bool end = i == 0 || i + 1 == pts.size();
      if (end) CHECK((point_in_polygon(p.polygon, pts[i]) || distance_to_boundary(p.polygon, pts[i]) < 1e-9));
      else CHECK(point_in_polygon(p.polygon, pts[i]));
    }
  }
}

TEST_CASE("line: a band that overlaps itself still gives a simple outline") {
  // The third segment passes within half a thickness of the first point.
  const std::vector<Point> pts{{15.4977, 140.329}, {17.9336, 216.453}, {19.5881, 105.489},
                               {30.5087, 196.626}, {38.5735, 213.852}, {52.2411, 184.112}, {66.2154, 115.769}};
  LineOptions opt;
  opt.thickness_frac = 2 * 4.67282 / 256.0;
  PolygonAnnotation p = line_polygon(pts, {256, 256}, opt);
  CHECK(is_simple(p.polygon));
  for (const Point& q : pts) CHECK((point_in_polygon(p.polygon, q) || distance_to_boundary(p.polygon, q) < 1e-9));
}

TEST_CASE("rect: definition, area, self IoU, zero area") {
  PolygonAnnotation r = rect_polygon({0, 0}, {2, 3}, {10, 10});
  CHECK(r.polygon == std::vector<double>{0, 0, 2, 0, 2, 3, 0, 3});
  CHECK(polygon_area(r.polygon) == 6.0);
  Mask m = rasterize(rect_polygon({0, 0}, {1, 1}, {4, 4}));
  CHECK(mask_iou(m, m) == 1.0);
  CHECK_THROWS_AS(rect_polygon({1, 1}, {1, 3}, {10, 10}), InputError);
}

TEST_CASE("clipping keeps vertices inside the image") {
  PolygonAnnotation r = rect_polygon({-5, -5}, {5, 5}, {10, 10});
  CHECK(r.vertex_count() == 4);
  CHECK(polygon_area(r.polygon) == 25.0);
  PolygonAnnotation pie = pie_polygon({2, 2}, {2 + 10, 2}, {2, 12}, {10, 10});
  for (std::size_t i = 0; i < pie.polygon.size(); i += 2) {
    CHECK(pie.polygon[i] >= 0);
    CHECK(pie.polygon[i] <= 10);
    CHECK(pie.polygon[i + 1] >= 0);
    CHECK(pie.polygon[i + 1] <= 10);
  }
  CHECK_THROWS_AS(rect_polygon({20, 20}, {30, 30}, {10, 10}), InputError);
}

TEST_CASE("rasterize: pixel-center counting") {
  Mask m = rasterize(rect_polygon({0, 0}, {2, 3}, {5, 5}));
  CHECK(m.count() == 6);
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 5; ++x) CHECK(bool(m.at(y, x)) == (x < 2 && y < 3));

  Mask tiny = rasterize(std::vector<double>{1.1, 1.1, 1.3, 1.1, 1.2, 1.3}, {4, 4});
  CHECK(tiny.count() <= 1);

  Rng rng(33);
  for (int t = 0; t < 100; ++t) {
    auto poly = random_convex(rng, {100, 100}, 20, 90, rng.integer(5, 14));
    const double area = polygon_area(poly);
    if (area < 400) continue;
    const double ratio = double(rasterize(poly, kBig).count()) / area;
    CHECK(std::abs(ratio - 1.0) <= 0.02);
  }
}

TEST_CASE("mask_iou: identity, disjoint, half overlap, errors") {
  Mask a(4, 4), b(4, 4), c(4, 4);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x) {
      a.set(y, x);
      b.set(y, x + 1);
      c.set(y + 2, x + 2);
    }
  CHECK(mask_iou(a, a) == 1.0);
  CHECK(mask_iou(a, c) == 0.0);
  CHECK(mask_iou(a, b) == doctest::Approx(1.0 / 3.0));
  CHECK(mask_iou(Mask(3, 3), Mask(3, 3)) == 0.0);
  CHECK_THROWS_AS(mask_iou(Mask(3, 3), Mask(3, 4)), InputError);
}

TEST_CASE("mask_iou agrees with Monte-Carlo point sampling") {
  Rng rng(34);
  for (int t = 0; t < 20; ++t) {
    auto p = random_convex(rng, {rng.uniform(70, 130), rng.uniform(70, 130)}, 30, 60, rng.integer(5, 10));
    auto q = random_convex(rng, {rng.uniform(70, 130), rng.uniform(70, 130)}, 30, 60, rng.integer(5, 10));
    const double raster = mask_iou(rasterize(p, kBig), rasterize(q, kBig));
    double x0 = 200, y0 = 200, x1 = 0, y1 = 0;
    for (const auto* poly : {&p, &q})
      for (std::size_t i = 0; i < poly->size(); i += 2) {
        x0 = std::min(x0, (*poly)[i]), x1 = std::max(x1, (*poly)[i]);
        y0 = std::min(y0, (*poly)[i + 1]), y1 = std::max(y1, (*poly)[i + 1]);
      }
    std::size_t inter = 0, uni = 0;
    for (int s = 0; s < 100000; ++s) {
      const Point pt{rng.uniform(x0, x1), rng.uniform(y0, y1)};
      const bool ip = point_in_polygon(p, pt), iq = point_in_polygon(q, pt);
      inter += ip && iq;
      uni += ip || iq;
    }
    const double mc = uni ? double(inter) / double(uni) : 0.0;
    CHECK(std::abs(raster - mc) < 0.01);
  }
}

TEST_CASE("bbox_from_mask") {
  Mask one(8, 8);
  one.set(3, 5);
  CHECK(bbox_from_mask(one) == PixelBox{5, 3, 5, 3});
  Mask full(4, 6);
  std::fill(full.bits.begin(), full.bits.end(), 1);
  CHECK(bbox_from_mask(full) == PixelBox{0, 0, 5, 3});
  Mask ell(10, 10);
  for (std::size_t y = 2; y <= 7; ++y) ell.set(y, 1);
  for (std::size_t x = 1; x <= 6; ++x) ell.set(7, x);
  CHECK(bbox_from_mask(ell) == PixelBox{1, 2, 6, 7});
  CHECK_THROWS_AS(bbox_from_mask(Mask(3, 3)), InputError);

  Rng rng(35);
  for (int t = 0; t < 200; ++t) {
    const Point a{rng.uniform(0, 90), rng.uniform(0, 90)};
    const Point b{a.x + rng.uniform(1.2, 100), a.y + rng.uniform(1.2, 100)};
    const PixelBox box = bbox_from_mask(rasterize(rect_polygon(a, b, kBig)));
    const auto lo = [](double v) { return static_cast<std::size_t>(std::ceil(v - 0.5)); };
    const auto hi = [](double v) { return static_cast<std::size_t>(std::ceil(std::min(v, 200.0) - 0.5)) - 1; };
    CHECK(box == PixelBox{lo(a.x), lo(a.y), hi(b.x), hi(b.y)});
  }
}

TEST_CASE("convert_keypoints: counts, rejects, idempotence") {
  using nlohmann::json;
  ConversionReport rep;
  json empty = convert_keypoints(json{{"images", json::array()}}, {}, rep);
  CHECK(empty["annotations"].empty());
  CHECK(rep.counts.size() == 7);
  for (const auto& [name, n] : rep.counts) CHECK(n == 0);

  json doc = {{"images",
               {{{"id", 1},
                 {"height", 100},
                 {"width", 120},
                 {"objects",
                  {{{"category", "Bar"}, {"points", {{10, 40}, {20, 90}}}},
                   {{"category", "Bar"}, {"points", {{30, 20}, {40, 90}}}},
                   {{"category", "Bar"}, {"points", {{60, 90}, {50, 60}}}},
                   {{"category", "Line"}, {"points", {{10, 30}, {40, 20}, {70, 50}}}},
                   {{"category", "Pie"}, {"points", {{100, 50}, {80, 50}}}},
                   {{"category", "Pie"}, {"points", {{110, 60}, {90, 60}, {90, 70}}}, {"role", {"edge1", "center", "edge2"}}},
                   {{"category", "Blob"}, {"points", {{1, 1}, {2, 2}}}},
                   {{"category", "Bar"}, {"points", {{10, 10}, {500, 20}}}}}}}}}};
  json out = convert_keypoints(doc, {}, rep);
  CHECK(rep.counts["Bar"] == 3);
  CHECK(rep.counts["Line"] == 1);
  CHECK(rep.counts["Pie"] == 1);
  REQUIRE(rep.rejects.size() == 3);
  CHECK(rep.rejects[0].object_index == 4);
  CHECK(rep.rejects[1].object_index == 6);
  CHECK(rep.rejects[2].object_index == 7);
  CHECK(out["annotations"].size() == 5);
  CHECK(out["categories"][0]["name"] == "Bar");
  CHECK(out["categories"][6]["name"] == "CategoryAxisTitle");
  CHECK(out["annotations"][2]["bbox"] == json::array({50.0, 60.0, 10.0, 30.0}));

  const auto dir = std::filesystem::temp_directory_path() / "chart_geometry_test";
  std::filesystem::create_directories(dir);
  write_json_file(dir / "kp.json", doc);
  convert_dataset(dir / "kp.json", dir / "a.json");
  convert_dataset(dir / "kp.json", dir / "b.json");
  CHECK(slurp(dir / "a.json") == slurp(dir / "b.json"));
  auto imgs = load_instances(dir / "a.json");
  REQUIRE(imgs.size() == 1);
  CHECK(imgs[0].annotations.size() == 5);
  CHECK(imgs[0].annotations[4].category == Category::pie);
  std::filesystem::remove_all(dir);
}
