#include <algorithm>
#include <fstream>

#include "chart/error.hpp"
#include "chart/geometry.hpp"

namespace chart {

namespace {

constexpr std::array<std::string_view, kCategoryCount> kNames = {
    "Bar", "Line", "Pie", "Legend", "ValueAxisTitle", "ChartTitle", "CategoryAxisTitle"};

using nlohmann::json;

Point read_point(const json& p) {
  if (!p.is_array() || p.size() != 2) throw InputError("point must be [x, y]");
  return {p[0].get<double>(), p[1].get<double>()};
}

PolygonAnnotation convert_object(const json& obj, ImageSize size, const ConversionOptions& opt) {
  const Category cat = parse_category(obj.at("category").get<std::string>());
  std::vector<Point> pts;
  for (const json& p : obj.at("points")) pts.push_back(read_point(p));
  for (const Point& p : pts) {
    if (p.x < 0 || p.y < 0 || p.x > static_cast<double>(size.width) || p.y > static_cast<double>(size.height)) {
      throw InputError("point outside image bounds");
    }
  }
  if (cat == Category::pie) {
    if (pts.size() != 3) throw InputError("Pie needs exactly 3 points");
    Point center = pts[0], v1 = pts[1], v2 = pts[2];
    if (obj.contains("role")) {
      const json& roles = obj.at("role");
      if (!roles.is_array() || roles.size() != 3) throw InputError("Pie role must list 3 entries");
      int seen = 0;
      for (std::size_t k = 0; k < 3; ++k) {
        const std::string r = roles[k].get<std::string>();
        if (r == "center") center = pts[k], seen |= 1;
        else if (r == "edge1" || r == "v1") v1 = pts[k], seen |= 2;
        else if (r == "edge2" || r == "v2") v2 = pts[k], seen |= 4;
        else throw InputError("unknown Pie role " + r);
      }
      if (seen != 7) throw InputError("Pie roles must be center, edge1, edge2");
    }
    PieOptions po;
    po.points_per_radian = opt.points_per_radian;
    po.winding = obj.value("winding", 1);
    return pie_polygon(center, v1, v2, size, po);
  }
  if (cat == Category::line) {
    LineOptions lo;
    lo.thickness_frac = opt.line_thickness_frac;
    return line_polygon(pts, size, lo);
  }
  if (pts.size() != 2) throw InputError(std::string(category_name(cat)) + " needs 2 corner points");
  const Point lo{std::min(pts[0].x, pts[1].x), std::min(pts[0].y, pts[1].y)};
  const Point hi{std::max(pts[0].x, pts[1].x), std::max(pts[0].y, pts[1].y)};
  return rect_polygon(lo, hi, size, cat);
}

json bbox_json(const std::vector<double>& poly) {
  double x0 = poly[0], y0 = poly[1], x1 = poly[0], y1 = poly[1];
  for (std::size_t i = 0; i + 1 < poly.size(); i += 2) {
    x0 = std::min(x0, poly[i]);
    x1 = std::max(x1, poly[i]);
    y0 = std::min(y0, poly[i + 1]);
    y1 = std::max(y1, poly[i + 1]);
  }
  return json::array({x0, y0, x1 - x0, y1 - y0});
}

}  // namespace

const std::array<Category, kCategoryCount>& all_categories() {
  static const std::array<Category, kCategoryCount> cats = {Category::bar,    Category::line,
                                                            Category::pie,    Category::legend,
                                                            Category::value_axis_title, Category::chart_title,
                                                            Category::category_axis_title};
  return cats;
}

std::string_view category_name(Category c) { return kNames[static_cast<std::size_t>(category_id(c) - 1)]; }

Category parse_category(std::string_view name) {
  for (std::size_t i = 0; i < kNames.size(); ++i)
    if (kNames[i] == name) return static_cast<Category>(i + 1);
  throw InputError("unknown category " + std::string(name));
}

Category category_from_id(int id) {
  if (id < 1 || id > static_cast<int>(kCategoryCount)) throw InputError("category id out of range");
  return static_cast<Category>(id);
}

bool is_rectangle_category(Category c) { return c != Category::line && c != Category::pie; }

json ConversionReport::to_json() const {
  json rej = json::array();
  for (const auto& r : rejects) rej.push_back({{"image_id", r.image_id}, {"object_index", r.object_index}, {"reason", r.reason}});
  return {{"images", images}, {"counts", counts}, {"rejects", rej}};
}

json convert_keypoints(const json& doc, const ConversionOptions& opt, ConversionReport& report) {
  report = {};
  for (Category c : all_categories()) report.counts[std::string(category_name(c))] = 0;
  json images = json::array(), annotations = json::array(), categories = json::array();
  for (Category c : all_categories()) categories.push_back({{"id", category_id(c)}, {"name", category_name(c)}});
  if (!doc.is_object() || !doc.contains("images") || !doc.at("images").is_array()) {
    throw InputError("keypoints document must have an \"images\" array");
  }
  for (const json& img : doc.at("images")) {
    std::int64_t id = 0;
    ImageSize size;
    try {
      id = img.at("id").get<std::int64_t>();
      size = {img.at("height").get<std::size_t>(), img.at("width").get<std::size_t>()};
      if (size.height == 0 || size.width == 0) throw InputError("image size must be positive");
    } catch (const std::exception& e) {
      report.rejects.push_back({id, 0, std::string("image record: ") + e.what()});
      continue;
    }
    ++report.images;
    json out_img = {{"id", id}, {"height", size.height}, {"width", size.width}};
    if (img.contains("file_name")) out_img["file_name"] = img["file_name"];
    images.push_back(out_img);
    const json objects = img.value("objects", json::array());
    for (std::size_t k = 0; k < objects.size(); ++k) {
      try {
        const PolygonAnnotation pa = convert_object(objects[k], size, opt);
        annotations.push_back({{"image_id", id},
                               {"category_id", category_id(pa.category)},
                               {"polygon", pa.polygon},
                               {"bbox", bbox_json(pa.polygon)}});
        ++report.counts[std::string(category_name(pa.category))];
      } catch (const std::exception& e) {
        report.rejects.push_back({id, k, e.what()});
      }
    }
  }
  return {{"images", images}, {"annotations", annotations}, {"categories", categories}};
}

ConversionReport convert_dataset(const std::filesystem::path& in_path, const std::filesystem::path& out_path,
                                 const ConversionOptions& opt) {
  ConversionReport report;
  const json out = convert_keypoints(read_json_file(in_path), opt, report);
  write_json_file(out_path, out);
  return report;
}

std::vector<InstanceImage> parse_instances(const json& doc) {
  std::vector<InstanceImage> images;
  for (const json& img : doc.at("images")) {
    InstanceImage ii;
    ii.id = img.at("id").get<std::int64_t>();
    ii.size = {img.at("height").get<std::size_t>(), img.at("width").get<std::size_t>()};
    ii.file_name = img.value("file_name", "");
    images.push_back(std::move(ii));
  }
  for (const json& ann : doc.at("annotations")) {
    const std::int64_t id = ann.at("image_id").get<std::int64_t>();
    auto it = std::find_if(images.begin(), images.end(), [&](const InstanceImage& i) { return i.id == id; });
    if (it == images.end()) throw InputError("annotation refers to unknown image " + std::to_string(id));
    it->annotations.push_back(
        {category_from_id(ann.at("category_id").get<int>()), ann.at("polygon").get<std::vector<double>>(), it->size});
  }
  return images;
}

std::vector<InstanceImage> load_instances(const std::filesystem::path& path) { return parse_instances(read_json_file(path)); }

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError(path.string() + " is not valid JSON: " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const json& doc) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

}  // namespace chart
