#pragma once

// Synthetic charts, image files and the run configuration shared by the CLI.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "chart/geometry.hpp"
#include "chart/nn.hpp"
#include "chart/optim.hpp"
#include "chart/qa.hpp"
#include "chart/segmenter.hpp"
#include "json.hpp"

namespace chart {

// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(std::size_t h, std::size_t w, std::uint8_t fill = 255) : height(h), width(w), pixels(h * w * 3, fill) {}
  void put(std::size_t y, std::size_t x, const std::array<std::uint8_t, 3>& rgb);
  // [3, H, W] with values in [0, 1].
  Tensor to_tensor() const;
};

void write_ppm(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);
// Reads the image named by a dataset record, relative to `root` unless absolute.
Tensor load_image_tensor(const std::filesystem::path& root, const std::string& name);

struct CountRange {
  int min = 0;
  int max = 0;
};

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t images = 20;
  std::size_t height = 64;
  std::size_t width = 64;
  // Relative frequency of bar, line and pie charts.
  std::vector<double> chart_mix = {1.0, 1.0, 1.0};
  CountRange bars = {2, 5};
  CountRange lines = {1, 2};
  CountRange points_per_line = {4, 6};
  CountRange slices = {2, 4};
  CountRange legends = {0, 1};
  CountRange chart_titles = {1, 1};
  CountRange value_axis_titles = {0, 1};
  CountRange category_axis_titles = {0, 1};
  double line_thickness_frac = 0.04;
  double points_per_radian = 5.0;
  std::size_t questions_per_image = 2;
  std::vector<std::string> palette = {"red", "blue", "green", "orange", "purple"};
  // Any of "value", "argmax", "compare".
  std::vector<std::string> templates = {"value", "argmax", "compare"};

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct QaPair {
  std::string question;
  std::string answer;
};

// One rendered chart with its keypoint record, the renderer's own per-object
// masks (same order as the record's objects) and templated questions.
struct SynthChart {
  RgbImage image;
  nlohmann::json record;
  std::vector<Mask> masks;
  std::vector<QaPair> questions;
};

SynthChart render_chart(const SynthConfig& cfg, std::int64_t id, Rng& rng);

struct SynthSummary {
  std::size_t images = 0;
  std::size_t objects = 0;
  std::size_t questions = 0;
};

// Writes images/, keypoints.json and qa_dataset.json under `out_dir`.
SynthSummary synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir);

struct TrainSchedule {
  std::size_t steps = 2000;
  std::size_t batch = 1;
  std::size_t log_every = 100;
  // Evaluate on the training set every `eval_every` steps and stop once the
  // target is met; 0 disables early stopping.
  std::size_t eval_every = 0;
  double target = 0.0;
};

void to_json(nlohmann::json& j, const TrainSchedule& c);
void from_json(const nlohmann::json& j, TrainSchedule& c);

SynthConfig default_qa_synth();

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path run_dir = "runs/default";
  std::filesystem::path data_dir = "data";
  // QA charts live in their own dataset so both tasks keep their own sizes.
  std::filesystem::path qa_data_dir = "data_qa";
  std::size_t threads = 1;
  SynthConfig synth;
  SynthConfig qa_synth = default_qa_synth();
  ConversionOptions conversion{5.0, 0.04};
  SegmenterConfig segmenter;
  OptimizerConfig seg_optimizer{"adam", 1e-3};
  TrainSchedule seg_train;
  QaConfig qa;
  OptimizerConfig qa_optimizer{"adam", 5e-4, 0.9, 0.9, 0.999, 1e-8, 1.0};
  TrainSchedule qa_train{3000, 4, 100, 0, 0.0};

  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

struct GradSuiteResult {
  std::string name;
  std::string scope;  // ops, modules or losses
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  double seconds = 0.0;
};

// Central-difference checks of every differentiable op, the attention and
// decoder modules and both training losses. `scope` is all, ops, modules or losses.
std::vector<GradSuiteResult> run_gradcheck_suite(const std::string& scope = "all", double eps = 1e-5);
nlohmann::json gradcheck_report_json(const std::vector<GradSuiteResult>& results, double tolerance);

}  // namespace chart
