#pragma once

// Mask average precision (COCO-style) and relaxed answer accuracy.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "chart/geometry.hpp"
#include "json.hpp"

namespace chart {

struct EvalDetection {
  std::int64_t image_id = 0;
  int category_id = 0;
  double score = 0.0;
  Mask mask;
};

struct EvalGroundTruth {
  std::int64_t image_id = 0;
  int category_id = 0;
  Mask mask;
};

// 101-point interpolated AP for detections and ground truths of one category.
// Matching visits equal scores in input order; they form a single PR point.
// nullopt when there is no ground truth.
std::optional<double> average_precision(const std::vector<EvalDetection>& dets,
                                        const std::vector<EvalGroundTruth>& gts, double iou_threshold);

// IoU thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> coco_thresholds();

struct CategoryAp {
  double ap = 0.0;    // mean over thresholds
  double ap50 = 0.0;
  double ap75 = 0.0;
};

struct EvalReport {
  double map = 0.0;
  double map50 = 0.0;
  double map75 = 0.0;
  std::map<int, CategoryAp> per_category;  // categories present in the ground truth
  std::size_t images = 0;
  std::size_t detections = 0;
  std::size_t ground_truths = 0;
  nlohmann::json to_json() const;
};

// Throws InputError when `gts` is empty or a detection's mask shape differs
// from the ground truth of its image.
EvalReport map_suite(const std::vector<EvalDetection>& dets, const std::vector<EvalGroundTruth>& gts);

// Row-major run lengths starting with a run of zeros.
std::vector<std::size_t> encode_rle(const Mask& mask);
Mask decode_rle(const std::vector<std::size_t>& runs, std::size_t height, std::size_t width);

std::vector<EvalGroundTruth> ground_truth_from_instances(const std::vector<InstanceImage>& images);
// Reads either a prediction dump ({"images": [{"image_id", "height", "width", "detections": [...]}]})
// or an instances document, whose annotations then count as score-1 detections.
std::vector<EvalDetection> detections_from_json(const nlohmann::json& doc);

struct RelaxedOptions {
  double tolerance = 0.05;
  bool strip_symbols = true;  // leading '$' or '%', trailing '%'
};

// Parses a numeric answer under the relaxed-accuracy normalisation.
std::optional<double> parse_number(std::string_view text, const RelaxedOptions& opt = {});
bool relaxed_accuracy(std::string_view pred, std::string_view gold, const RelaxedOptions& opt = {});

}  // namespace chart
