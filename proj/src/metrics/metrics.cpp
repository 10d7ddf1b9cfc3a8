#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <set>

#include "chart/error.hpp"
#include "chart/metrics.hpp"

namespace chart {

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

std::optional<double> average_precision(const std::vector<EvalDetection>& dets,
                                        const std::vector<EvalGroundTruth>& gts, double iou_threshold) {
  if (gts.empty()) return std::nullopt;
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<char> taken(gts.size(), 0);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const EvalDetection& d = dets[order[rank]];
    double best = -1.0;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].image_id != d.image_id) continue;
      const double iou = mask_iou(d.mask, gts[g].mask);
      if (iou >= iou_threshold && iou > best) {
        best = iou;
        best_g = g;
      }
    }
    if (best_g < gts.size()) {
      taken[best_g] = 1;
      ++tp;
    }
    // Equal scores form one operating point.
    if (rank + 1 < order.size() && dets[order[rank + 1]].score == d.score) continue;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(rank + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
  }
  // Precision envelope, then sampling at recall 0, 0.01, ..., 1.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r - 1e-12);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& [id, ap] : per_category) {
    cats.push_back({{"category_id", id},
                    {"name", std::string(category_name(category_from_id(id)))},
                    {"AP", ap.ap},
                    {"AP50", ap.ap50},
                    {"AP75", ap.ap75}});
  }
  return {{"mAP", map},
          {"mAP50", map50},
          {"mAP75", map75},
          {"per_category", cats},
          {"counts", {{"images", images}, {"detections", detections}, {"ground_truths", ground_truths}}}};
}

EvalReport map_suite(const std::vector<EvalDetection>& dets, const std::vector<EvalGroundTruth>& gts) {
  if (gts.empty()) throw InputError("map_suite: no ground truth to evaluate against");
  std::map<std::int64_t, std::pair<std::size_t, std::size_t>> sizes;
  for (const auto& g : gts) sizes.emplace(g.image_id, std::make_pair(g.mask.height, g.mask.width));
  for (const auto& d : dets) {
    const auto it = sizes.find(d.image_id);
    if (it != sizes.end() && (it->second.first != d.mask.height || it->second.second != d.mask.width)) {
      throw InputError("map_suite: detection mask size differs from image " + std::to_string(d.image_id));
    }
  }
  std::map<int, std::pair<std::vector<EvalDetection>, std::vector<EvalGroundTruth>>> by_cat;
  for (const auto& g : gts) by_cat[g.category_id].second.push_back(g);
  for (const auto& d : dets)
    if (by_cat.count(d.category_id)) by_cat[d.category_id].first.push_back(d);

  EvalReport rep;
  std::set<std::int64_t> images;
  for (const auto& g : gts) images.insert(g.image_id);
  rep.images = images.size();
  rep.detections = dets.size();
  rep.ground_truths = gts.size();
  for (const auto& [cat, group] : by_cat) {
    CategoryAp c;
    for (double t : coco_thresholds()) {
      const double ap = *average_precision(group.first, group.second, t);
      c.ap += ap / 10.0;
      if (std::abs(t - 0.5) < 1e-9) c.ap50 = ap;
      if (std::abs(t - 0.75) < 1e-9) c.ap75 = ap;
    }
    rep.per_category[cat] = c;
    rep.map += c.ap;
    rep.map50 += c.ap50;
    rep.map75 += c.ap75;
  }
  const auto n = static_cast<double>(by_cat.size());
  rep.map /= n;
  rep.map50 /= n;
  rep.map75 /= n;
  return rep;
}

std::vector<std::size_t> encode_rle(const Mask& mask) {
  std::vector<std::size_t> runs;
  std::uint8_t cur = 0;
  std::size_t len = 0;
  for (std::uint8_t b : mask.bits) {
    const std::uint8_t v = b ? 1 : 0;
    if (v != cur) {
      runs.push_back(len);
      cur = v;
      len = 0;
    }
    ++len;
  }
  runs.push_back(len);
  return runs;
}

Mask decode_rle(const std::vector<std::size_t>& runs, std::size_t height, std::size_t width) {
  Mask m(height, width);
  std::size_t pos = 0;
  std::uint8_t v = 0;
  for (std::size_t r : runs) {
    if (pos + r > m.bits.size()) throw InputError("RLE runs exceed the mask size");
    std::fill(m.bits.begin() + static_cast<long>(pos), m.bits.begin() + static_cast<long>(pos + r), v);
    pos += r;
    v ^= 1;
  }
  if (pos != m.bits.size()) throw InputError("RLE runs do not cover the mask");
  return m;
}

std::vector<EvalGroundTruth> ground_truth_from_instances(const std::vector<InstanceImage>& images) {
  std::vector<EvalGroundTruth> out;
  for (const auto& im : images)
    for (const auto& a : im.annotations) out.push_back({im.id, category_id(a.category), rasterize(a)});
  return out;
}

std::vector<EvalDetection> detections_from_json(const nlohmann::json& doc) {
  std::vector<EvalDetection> out;
  if (doc.contains("annotations")) {
    for (const auto& im : parse_instances(doc))
      for (const auto& a : im.annotations) out.push_back({im.id, category_id(a.category), 1.0, rasterize(a)});
    return out;
  }
  if (!doc.contains("images") || !doc["images"].is_array()) throw InputError("prediction file needs an images array");
  for (const auto& im : doc["images"]) {
    const auto id = im.at("image_id").get<std::int64_t>();
    const auto h = im.at("height").get<std::size_t>(), w = im.at("width").get<std::size_t>();
    for (const auto& d : im.at("detections")) {
      const double score = d.at("score").get<double>();
      if (!std::isfinite(score)) throw InputError("non-finite detection score in image " + std::to_string(id));
      out.push_back({id, d.at("category_id").get<int>(), score, decode_rle(d.at("rle").get<std::vector<std::size_t>>(), h, w)});
    }
  }
  return out;
}

std::optional<double> parse_number(std::string_view text, const RelaxedOptions& opt) {
  std::size_t b = 0, e = text.size();
  while (b < e && std::isspace(static_cast<unsigned char>(text[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(text[e - 1]))) --e;
  if (opt.strip_symbols) {
    if (b < e && (text[b] == '$' || text[b] == '%')) ++b;
    if (e > b && text[e - 1] == '%') --e;
  }
  if (b == e) return std::nullopt;
  const std::string s(text.substr(b, e - b));
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
  // strtod also accepts hex and inf/nan spellings; keep plain decimals only.
  for (char c : s)
    if (!(std::isdigit(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '+' || c == 'e' || c == 'E'))
      return std::nullopt;
  return v;
}

bool relaxed_accuracy(std::string_view pred, std::string_view gold, const RelaxedOptions& opt) {
  const auto p = parse_number(pred, opt), g = parse_number(gold, opt);
  if (p && g) {
    if (*g == 0.0) return *p == 0.0;
    return std::abs(*p - *g) <= opt.tolerance * std::abs(*g) * (1.0 + 1e-12);
  }
  auto norm = [](std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    std::string out(s.substr(b, e - b));
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
  };
  return norm(pred) == norm(gold);
}

}  // namespace chart
