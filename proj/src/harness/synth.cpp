#include <algorithm>
#include <cmath>
#include <numbers>

#include "chart/error.hpp"
#include "chart/harness.hpp"

namespace chart {

namespace {

using Rgb = std::array<std::uint8_t, 3>;

constexpr Rgb kAxis{70, 70, 70};
constexpr Rgb kTextBack{232, 232, 232};
constexpr Rgb kTextInk{40, 40, 40};
constexpr Rgb kLegendBack{245, 245, 235};

const std::map<std::string, Rgb>& named_colors() {
  static const std::map<std::string, Rgb> colors = {
      {"red", {220, 40, 40}},     {"blue", {40, 80, 220}},   {"green", {40, 170, 60}},
      {"orange", {240, 150, 30}}, {"purple", {140, 60, 180}}, {"cyan", {30, 190, 200}},
      {"brown", {130, 80, 40}},   {"pink", {240, 120, 180}}};
  return colors;
}

int pick(Rng& rng, const CountRange& r) { return rng.integer(r.min, r.max); }

struct Box {
  int x0, y0, x1, y1;  // pixel edges, half-open
};

struct Canvas {
  RgbImage image;
  nlohmann::json objects = nlohmann::json::array();
  std::vector<Mask> masks;

  void add(Category c, nlohmann::json points, Mask mask, nlohmann::json extra = nullptr) {
    nlohmann::json o = {{"category", std::string(category_name(c))}, {"points", std::move(points)}};
    if (extra.is_object())
      for (const auto& [k, v] : extra.items()) o[k] = v;
    objects.push_back(std::move(o));
    masks.push_back(std::move(mask));
  }

  Mask fill_box(const Box& b, const Rgb& color) {
    Mask m(image.height, image.width);
    for (int y = b.y0; y < b.y1; ++y)
      for (int x = b.x0; x < b.x1; ++x) {
        image.put(static_cast<std::size_t>(y), static_cast<std::size_t>(x), color);
        m.set(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
      }
    return m;
  }
};

nlohmann::json corners(const Box& b) { return {{b.x0, b.y0}, {b.x1, b.y1}}; }

// Light block with dark glyph strokes; vertical text runs along y.
void draw_text(Canvas& cv, Category c, const Box& b, bool vertical, Rng& rng) {
  Mask m = cv.fill_box(b, kTextBack);
  const int len = vertical ? b.y1 - b.y0 : b.x1 - b.x0;
  const int across = vertical ? b.x1 - b.x0 : b.y1 - b.y0;
  for (int t = 1; t + 1 < len; ++t) {
    if (t % 3 == 0 || rng.bernoulli(0.15)) continue;
    for (int s = 1; s + 1 < across; ++s) {
      const int x = vertical ? b.x0 + s : b.x0 + t;
      const int y = vertical ? b.y0 + t : b.y0 + s;
      cv.image.put(static_cast<std::size_t>(y), static_cast<std::size_t>(x), kTextInk);
    }
  }
  cv.add(c, corners(b), std::move(m));
}

double dist_to_segment(double px, double py, const Point& a, const Point& b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double t = std::clamp(((px - a.x) * dx + (py - a.y) * dy) / (dx * dx + dy * dy), 0.0, 1.0);
  return std::hypot(px - (a.x + t * dx), py - (a.y + t * dy));
}

struct Layout {
  int plot_left, plot_right, plot_top, plot_bottom;
  double unit;  // pixels per value step
};

std::vector<std::string> shuffled(std::vector<std::string> v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(rng.integer(0, static_cast<int>(i) - 1))]);
  return v;
}

// Distinct integer values in [1, 9] with a unique maximum.
std::vector<int> distinct_values(std::size_t n, Rng& rng) {
  std::vector<int> pool = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<int> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(rng.integer(0, static_cast<int>(pool.size()) - 1));
    out.push_back(pool[k]);
    pool.erase(pool.begin() + static_cast<long>(k));
  }
  return out;
}

void draw_axes(Canvas& cv, const Layout& L) {
  for (int x = L.plot_left - 1; x < L.plot_right; ++x) cv.image.put(static_cast<std::size_t>(L.plot_bottom), static_cast<std::size_t>(x), kAxis);
  for (int y = L.plot_top; y <= L.plot_bottom; ++y) cv.image.put(static_cast<std::size_t>(y), static_cast<std::size_t>(L.plot_left - 1), kAxis);
}

void draw_legend(Canvas& cv, const Box& b, const std::vector<std::string>& colors) {
  Mask m = cv.fill_box(b, kLegendBack);
  for (std::size_t i = 0; i < colors.size(); ++i) {
    const int y = b.y0 + 1 + static_cast<int>(i) * 4;
    if (y + 3 > b.y1 - 1) break;
    const Rgb col = named_colors().at(colors[i]);
    for (int dy = 0; dy < 3; ++dy) {
      for (int dx = 0; dx < 3; ++dx) cv.image.put(static_cast<std::size_t>(y + dy), static_cast<std::size_t>(b.x0 + 1 + dx), col);
      if (dy == 1)
        for (int x = b.x0 + 5; x < b.x1 - 1; ++x) cv.image.put(static_cast<std::size_t>(y + dy), static_cast<std::size_t>(x), kTextInk);
    }
  }
  cv.add(Category::legend, corners(b), std::move(m));
}

}  // namespace

void SynthConfig::validate() const {
  if (images == 0) throw ConfigError("synth: images must be positive");
  if (height < 64 || width < 64 || height % 32 != 0 || width % 32 != 0) {
    throw ConfigError("synth: image size must be at least 64 and divisible by 32");
  }
  if (chart_mix.size() != 3) throw ConfigError("synth: chart_mix lists bar, line and pie weights");
  double total = 0.0;
  for (double w : chart_mix) {
    if (!(w >= 0.0)) throw ConfigError("synth: chart_mix weights must be non-negative");
    total += w;
  }
  if (total <= 0.0) throw ConfigError("synth: chart_mix needs a positive weight");
  auto check = [](const CountRange& r, const char* name, int lo, int hi) {
    if (r.min < lo || r.max < r.min || r.max > hi) {
      throw ConfigError(std::string("synth: ") + name + " range must satisfy " + std::to_string(lo) +
                        " <= min <= max <= " + std::to_string(hi));
    }
  };
  if (palette.size() < 2) throw ConfigError("synth: palette needs at least two colours");
  for (const auto& c : palette)
    if (!named_colors().count(c)) throw ConfigError("synth: unknown palette colour " + c);
  const int pal = static_cast<int>(palette.size());
  check(bars, "bars", 1, std::min(pal, 9));
  check(lines, "lines", 1, pal);
  check(points_per_line, "points_per_line", 2, 12);
  check(slices, "slices", 2, pal);
  check(legends, "legends", 0, 1);
  check(chart_titles, "chart_titles", 0, 1);
  check(value_axis_titles, "value_axis_titles", 0, 1);
  check(category_axis_titles, "category_axis_titles", 0, 1);
  if (!(line_thickness_frac > 0.0 && line_thickness_frac < 0.2)) throw ConfigError("synth: line_thickness_frac out of range");
  if (!(points_per_radian > 0.0)) throw ConfigError("synth: points_per_radian must be positive");
  if (questions_per_image > 0 && templates.empty()) throw ConfigError("synth: questions need at least one template");
  for (const auto& t : templates)
    if (t != "value" && t != "argmax" && t != "compare") throw ConfigError("synth: unknown question template " + t);
}

void to_json(nlohmann::json& j, const CountRange& r) { j = {r.min, r.max}; }
void from_json(const nlohmann::json& j, CountRange& r) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("count ranges are [min, max] pairs");
  r.min = j[0].get<int>();
  r.max = j[1].get<int>();
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"seed", c.seed},
       {"images", c.images},
       {"height", c.height},
       {"width", c.width},
       {"chart_mix", c.chart_mix},
       {"bars", c.bars},
       {"lines", c.lines},
       {"points_per_line", c.points_per_line},
       {"slices", c.slices},
       {"legends", c.legends},
       {"chart_titles", c.chart_titles},
       {"value_axis_titles", c.value_axis_titles},
       {"category_axis_titles", c.category_axis_titles},
       {"line_thickness_frac", c.line_thickness_frac},
       {"points_per_radian", c.points_per_radian},
       {"questions_per_image", c.questions_per_image},
       {"palette", c.palette},
       {"templates", c.templates}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  for (const auto& [key, v] : j.items()) {
    if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "images") c.images = v.get<std::size_t>();
    else if (key == "height") c.height = v.get<std::size_t>();
    else if (key == "width") c.width = v.get<std::size_t>();
    else if (key == "chart_mix") c.chart_mix = v.get<std::vector<double>>();
    else if (key == "bars") c.bars = v.get<CountRange>();
    else if (key == "lines") c.lines = v.get<CountRange>();
    else if (key == "points_per_line") c.points_per_line = v.get<CountRange>();
    else if (key == "slices") c.slices = v.get<CountRange>();
    else if (key == "legends") c.legends = v.get<CountRange>();
    else if (key == "chart_titles") c.chart_titles = v.get<CountRange>();
    else if (key == "value_axis_titles") c.value_axis_titles = v.get<CountRange>();
    else if (key == "category_axis_titles") c.category_axis_titles = v.get<CountRange>();
    else if (key == "line_thickness_frac") c.line_thickness_frac = v.get<double>();
    else if (key == "points_per_radian") c.points_per_radian = v.get<double>();
    else if (key == "questions_per_image") c.questions_per_image = v.get<std::size_t>();
    else if (key == "palette") c.palette = v.get<std::vector<std::string>>();
    else if (key == "templates") c.templates = v.get<std::vector<std::string>>();
    else throw ConfigError("unknown synth key: " + key);
  }
}

SynthChart render_chart(const SynthConfig& cfg, std::int64_t id, Rng& rng) {
  const int H = static_cast<int>(cfg.height), W = static_cast<int>(cfg.width);
  const double sy = H / 64.0, sx = W / 64.0;
  Canvas cv{RgbImage(cfg.height, cfg.width), nlohmann::json::array(), {}};

  // Chart kind from the mix weights.
  const double total = cfg.chart_mix[0] + cfg.chart_mix[1] + cfg.chart_mix[2];
  double r = rng.uniform(0.0, total);
  int kind = 0;
  while (kind < 2 && r >= cfg.chart_mix[static_cast<std::size_t>(kind)]) r -= cfg.chart_mix[static_cast<std::size_t>(kind++)];

  const bool has_legend = pick(rng, cfg.legends) > 0;
  const int band = std::max(4, static_cast<int>(std::lround(5 * sy)));
  Layout L{static_cast<int>(std::lround(10 * sx)), W - 2, band + 3, H - band - 3, 0.0};
  const int legend_w = static_cast<int>(std::lround(13 * sx));
  if (has_legend) L.plot_right = W - legend_w - 3;
  L.unit = (L.plot_bottom - L.plot_top) / 9.5;

  if (pick(rng, cfg.chart_titles) > 0) {
    const int w = rng.integer(static_cast<int>(0.3 * W), static_cast<int>(0.55 * W));
    const int x0 = rng.integer(L.plot_left, W - 1 - w);
    draw_text(cv, Category::chart_title, {x0, 1, x0 + w, 1 + band}, false, rng);
  }
  if (pick(rng, cfg.value_axis_titles) > 0) {
    const int h = rng.integer(static_cast<int>(0.3 * H), static_cast<int>(0.45 * H));
    const int y0 = rng.integer(L.plot_top, L.plot_bottom - h);
    draw_text(cv, Category::value_axis_title, {1, y0, 1 + band, y0 + h}, true, rng);
  }
  if (pick(rng, cfg.category_axis_titles) > 0) {
    const int w = rng.integer(static_cast<int>(0.25 * W), static_cast<int>(0.45 * W));
    const int x0 = rng.integer(L.plot_left, L.plot_right - w);
    draw_text(cv, Category::category_axis_title, {x0, H - 1 - band, x0 + w, H - 1}, false, rng);
  }

  std::vector<std::string> colors = shuffled(cfg.palette, rng);
  std::vector<QaPair> qa;
  std::vector<std::string> templates = shuffled(cfg.templates, rng);
  std::vector<std::string> legend_colors;

  if (kind == 0) {
    const auto n = static_cast<std::size_t>(pick(rng, cfg.bars));
    const std::vector<int> values = distinct_values(n, rng);
    const double slot = static_cast<double>(L.plot_right - L.plot_left) / static_cast<double>(n);
    const int bw = std::max(3, static_cast<int>(slot * 0.6));
    draw_axes(cv, L);
    for (std::size_t i = 0; i < n; ++i) {
      const int x0 = L.plot_left + static_cast<int>(std::lround(slot * static_cast<double>(i) + (slot - bw) / 2.0));
      const int y0 = L.plot_bottom - static_cast<int>(std::lround(values[i] * L.unit));
      const Box b{x0, y0, x0 + bw, L.plot_bottom};
      cv.add(Category::bar, corners(b), cv.fill_box(b, named_colors().at(colors[i])));
    }
    legend_colors.assign(colors.begin(), colors.begin() + static_cast<long>(n));
    const auto top = static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
    for (std::size_t q = 0; q < cfg.questions_per_image; ++q) {
      const std::string& t = templates[q % templates.size()];
      if (t == "value") {
        const auto i = static_cast<std::size_t>(rng.integer(0, static_cast<int>(n) - 1));
        qa.push_back({"what is the value of the " + colors[i] + " bar?", std::to_string(values[i])});
      } else if (t == "argmax") {
        qa.push_back({"which bar is the tallest?", colors[top]});
      } else if (n > 1) {
        qa.push_back({"is the leftmost bar taller than the rightmost bar?", values.front() > values.back() ? "yes" : "no"});
      } else {
        qa.push_back({"what is the value of the " + colors[0] + " bar?", std::to_string(values[0])});
      }
    }
  } else if (kind == 1) {
    const auto n = static_cast<std::size_t>(pick(rng, cfg.lines));
    const auto m = static_cast<std::size_t>(pick(rng, cfg.points_per_line));
    const double thick = cfg.line_thickness_frac * H;
    draw_axes(cv, L);
    std::vector<std::vector<int>> series;
    std::vector<int> finals = distinct_values(n, rng);
    for (std::size_t s = 0; s < n; ++s) {
      // Built backwards from the final value with bounded steps so bends stay obtuse enough to draw.
      std::vector<int> v(m);
      v[m - 1] = finals[s];
      do {
        for (std::size_t k = m - 1; k-- > 0;) v[k] = std::clamp(v[k + 1] + rng.integer(-3, 3), 1, 9);
      } while (v.front() == v.back());
      series.push_back(v);
      std::vector<Point> pts;
      nlohmann::json kp = nlohmann::json::array();
      for (std::size_t k = 0; k < m; ++k) {
        const double x = L.plot_left + 2 + (L.plot_right - L.plot_left - 4) * static_cast<double>(k) / static_cast<double>(m - 1);
        const double y = L.plot_bottom - v[k] * L.unit;
        pts.push_back({x, y});
        kp.push_back({x, y});
      }
      Mask mask(cfg.height, cfg.width);
      const Rgb col = named_colors().at(colors[s]);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double px = x + 0.5, py = y + 0.5;
          if (px < pts.front().x || px > pts.back().x) continue;
          double d = 1e300;
          for (std::size_t k = 0; k + 1 < m; ++k) d = std::min(d, dist_to_segment(px, py, pts[k], pts[k + 1]));
          if (d <= thick / 2.0) {
            mask.set(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
            cv.image.put(static_cast<std::size_t>(y), static_cast<std::size_t>(x), col);
          }
        }
      cv.add(Category::line, std::move(kp), std::move(mask));
    }
    legend_colors.assign(colors.begin(), colors.begin() + static_cast<long>(n));
    const auto top = static_cast<std::size_t>(std::max_element(finals.begin(), finals.end()) - finals.begin());
    for (std::size_t q = 0; q < cfg.questions_per_image; ++q) {
      const std::string& t = templates[q % templates.size()];
      const auto i = static_cast<std::size_t>(rng.integer(0, static_cast<int>(n) - 1));
      if (t == "value") {
        qa.push_back({"what is the last value of the " + colors[i] + " line?", std::to_string(finals[i])});
      } else if (t == "argmax") {
        qa.push_back({"which line ends highest?", colors[top]});
      } else {
        qa.push_back({"does the " + colors[i] + " line end higher than it starts?",
                      series[i].back() > series[i].front() ? "yes" : "no"});
      }
    }
  } else {
    const auto n = static_cast<std::size_t>(pick(rng, cfg.slices));
    std::vector<double> w;
    do {
      w.clear();
      for (std::size_t i = 0; i < n; ++i) w.push_back(rng.uniform(1.0, 3.0));
      std::vector<double> s = w;
      std::sort(s.begin(), s.end());
      bool separated = true;
      for (std::size_t i = 0; i + 1 < n; ++i) separated = separated && s[i + 1] - s[i] > 0.15;
      if (separated) break;
    } while (true);
    double sum = 0.0;
    for (double v : w) sum += v;
    const double cx = (L.plot_left + L.plot_right) / 2.0, cy = (L.plot_top + L.plot_bottom) / 2.0;
    const double radius = std::min(L.plot_right - L.plot_left, L.plot_bottom - L.plot_top) / 2.0 - 0.5;
    double theta = rng.uniform(-std::numbers::pi, std::numbers::pi);
    for (std::size_t i = 0; i < n; ++i) {
      const double sweep = 2.0 * std::numbers::pi * w[i] / sum;
      const double t2 = theta + sweep;
      Mask mask(cfg.height, cfg.width);
      const Rgb col = named_colors().at(colors[i]);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          if (std::hypot(dx, dy) > radius) continue;
          double a = std::atan2(dy, dx) - theta;
          a -= 2.0 * std::numbers::pi * std::floor(a / (2.0 * std::numbers::pi));
          if (a < sweep) {
            mask.set(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
            cv.image.put(static_cast<std::size_t>(y), static_cast<std::size_t>(x), col);
          }
        }
      const nlohmann::json kp = {{cx, cy},
                                 {cx + radius * std::cos(theta), cy + radius * std::sin(theta)},
                                 {cx + radius * std::cos(t2), cy + radius * std::sin(t2)}};
      cv.add(Category::pie, kp, std::move(mask), {{"role", {"center", "edge1", "edge2"}}, {"winding", 1}});
      theta = t2;
    }
    legend_colors.assign(colors.begin(), colors.begin() + static_cast<long>(n));
    const auto top = static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin());
    const auto low = static_cast<std::size_t>(std::min_element(w.begin(), w.end()) - w.begin());
    for (std::size_t q = 0; q < cfg.questions_per_image; ++q) {
      const std::string& t = templates[q % templates.size()];
      if (t == "value") {
        qa.push_back({"which slice is the smallest?", colors[low]});
      } else if (t == "argmax") {
        qa.push_back({"which slice is the largest?", colors[top]});
      } else {
        const auto i = static_cast<std::size_t>(rng.integer(0, static_cast<int>(n) - 1));
        const auto k = (i + 1 + static_cast<std::size_t>(rng.integer(0, static_cast<int>(n) - 2))) % n;
        qa.push_back({"is the " + colors[i] + " slice larger than the " + colors[k] + " slice?", w[i] > w[k] ? "yes" : "no"});
      }
    }
  }

  if (has_legend) {
    const int rows = static_cast<int>(std::min<std::size_t>(legend_colors.size(), 6));
    const Box b{W - legend_w - 1, L.plot_top, W - 1, L.plot_top + 4 * rows + 2};
    draw_legend(cv, b, legend_colors);
  }

  SynthChart out;
  out.image = std::move(cv.image);
  out.masks = std::move(cv.masks);
  out.questions = std::move(qa);
  char name[32];
  std::snprintf(name, sizeof name, "images/img_%04lld.ppm", static_cast<long long>(id));
  out.record = {{"id", id}, {"file_name", name}, {"height", cfg.height}, {"width", cfg.width}, {"objects", cv.objects}};
  return out;
}

SynthSummary synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir / "images");
  Rng rng(cfg.seed);
  SynthSummary summary;
  nlohmann::json images = nlohmann::json::array();
  nlohmann::json qa = nlohmann::json::array();
  for (std::size_t i = 0; i < cfg.images; ++i) {
    const SynthChart chart = render_chart(cfg, static_cast<std::int64_t>(i), rng);
    const std::string file = chart.record["file_name"].get<std::string>();
    write_ppm(out_dir / file, chart.image);
    summary.objects += chart.masks.size();
    for (const auto& q : chart.questions) qa.push_back({{"image", file}, {"question", q.question}, {"answer", q.answer}});
    summary.questions += chart.questions.size();
    images.push_back(chart.record);
  }
  summary.images = cfg.images;
  write_json_file(out_dir / "keypoints.json", {{"images", images}});
  write_json_file(out_dir / "qa_dataset.json", qa);
  return summary;
}

}  // namespace chart
