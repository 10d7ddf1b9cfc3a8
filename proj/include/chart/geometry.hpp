#pragma once

// Keypoint-to-polygon conversion for chart objects, and the mask utilities
// built on it (rasterization, IoU, tight boxes).

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace chart {

enum class Category { bar = 1, line, pie, legend, value_axis_title, chart_title, category_axis_title };

inline constexpr std::size_t kCategoryCount = 7;
const std::array<Category, kCategoryCount>& all_categories();
std::string_view category_name(Category c);
Category parse_category(std::string_view name);
inline int category_id(Category c) { return static_cast<int>(c); }
Category category_from_id(int id);
// Bars and the text-region categories are all given as two opposite corners.
bool is_rectangle_category(Category c);

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct ImageSize {
  std::size_t height = 0;
  std::size_t width = 0;
};

struct PolygonAnnotation {
  Category category = Category::bar;
  std::vector<double> polygon;  // x1, y1, ..., xn, yn
  ImageSize size;
  std::size_t vertex_count() const { return polygon.size() / 2; }
};

// Row-major binary mask, one byte per pixel.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}
  std::uint8_t at(std::size_t y, std::size_t x) const { return bits[y * width + x]; }
  void set(std::size_t y, std::size_t x, bool on = true) { bits[y * width + x] = on ? 1 : 0; }
  std::size_t count() const;
};

// Inclusive pixel bounds.
struct PixelBox {
  std::size_t x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  bool operator==(const PixelBox&) const = default;
};

// Polygon helpers on flat [x1,y1,...] lists.
double signed_area(const std::vector<double>& poly);
double polygon_area(const std::vector<double>& poly);
bool segments_intersect(Point a, Point b, Point c, Point d);
// True when no two non-adjacent edges meet.
bool is_simple(const std::vector<double>& poly);
// Even-odd membership of a point.
bool point_in_polygon(const std::vector<double>& poly, Point p);
double distance_to_boundary(const std::vector<double>& poly, Point p);
// Sutherland-Hodgman clip to [0,W]x[0,H].
std::vector<double> clip_to_image(const std::vector<double>& poly, ImageSize size);

struct PieOptions {
  double points_per_radian = 5.0;
  // +1: the slice runs from v1 to v2 with increasing atan2(y - cy, x - cx) in
  // pixel coordinates; -1: decreasing.
  int winding = 1;
};

PolygonAnnotation pie_polygon(Point center, Point v1, Point v2, ImageSize size, const PieOptions& opt = {});

struct LineOptions {
  double thickness_frac = 0.01;  // of image height
  double spike_angle_deg = 30.0;
  double spike_shift = 0.25;     // px between duplicated outer vertices
};

PolygonAnnotation line_polygon(const std::vector<Point>& centerline, ImageSize size, const LineOptions& opt = {});

PolygonAnnotation rect_polygon(Point corner_min, Point corner_max, ImageSize size, Category category = Category::bar);

Mask rasterize(const std::vector<double>& poly, ImageSize size);
Mask rasterize(const PolygonAnnotation& poly);
double mask_iou(const Mask& a, const Mask& b);
PixelBox bbox_from_mask(const Mask& mask);

// --- dataset conversion -----------------------------------------------------

struct ConversionOptions {
  double points_per_radian = 5.0;
  double line_thickness_frac = 0.01;
};

struct ConversionReject {
  std::int64_t image_id = 0;
  std::size_t object_index = 0;
  std::string reason;
};

struct ConversionReport {
  std::map<std::string, std::size_t> counts;  // per category name, all 7 present
  std::vector<ConversionReject> rejects;
  std::size_t images = 0;
  nlohmann::json to_json() const;
};

// Pure conversion of a keypoints document into an instances document.
nlohmann::json convert_keypoints(const nlohmann::json& keypoints, const ConversionOptions& opt,
                                 ConversionReport& report);
ConversionReport convert_dataset(const std::filesystem::path& in_path, const std::filesystem::path& out_path,
                                 const ConversionOptions& opt = {});

struct InstanceImage {
  std::int64_t id = 0;
  ImageSize size;
  std::string file_name;
  std::vector<PolygonAnnotation> annotations;
};

std::vector<InstanceImage> parse_instances(const nlohmann::json& doc);
std::vector<InstanceImage> load_instances(const std::filesystem::path& path);
nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& doc);

}  // namespace chart
