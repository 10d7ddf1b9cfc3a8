#pragma once

// Dataset loading, training loops, evaluation and checkpoints shared by the
// command-line tool and the acceptance runner.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "chart/harness.hpp"
#include "chart/metrics.hpp"

namespace chart {

using LogFn = std::function<void(const std::string&)>;

struct SegDataset {
  std::vector<InstanceImage> records;
  std::vector<TrainSample> samples;
};

// Reads instances.json under `dir`, or converts keypoints.json in memory when
// no instances file exists. Images resolve relative to `dir`.
SegDataset load_seg_dataset(const std::filesystem::path& dir, const ConversionOptions& conversion);

struct TrainLog {
  std::vector<double> losses;  // one per optimizer step
  std::vector<std::pair<std::size_t, double>> evals;  // (step, metric)
  std::size_t steps = 0;
  double seconds = 0.0;
  double final_metric = 0.0;
  bool reached = false;  // final metric met the schedule target

  nlohmann::json to_json() const;
};

// Training-set detections of every image, ready for map_suite.
std::vector<EvalDetection> predict_dataset(const ChartFormer& model, const SegDataset& data);
nlohmann::json predictions_to_json(const SegDataset& data, const std::vector<EvalDetection>& dets);

// Steps cycle through the samples in order; the metric is training-set mAP50.
TrainLog train_segmenter(ChartFormer& model, const SegDataset& data, const OptimizerConfig& opt,
                         const TrainSchedule& schedule, const LogFn& log = {});

struct QaDataset {
  std::vector<QaRecord> records;
  std::vector<QaSample> samples;  // ids are record indices
};

// Vocabulary over every question and answer of a qa_dataset.json.
Vocabulary build_qa_vocabulary(const std::vector<QaRecord>& records);
QaDataset load_qa_dataset(const std::filesystem::path& dir, const Vocabulary& vocab);
// Precomputed question embeddings keyed "z:<sample id>".
void attach_question_embeddings(QaDataset& data, const std::filesystem::path& checkpoint);
std::size_t answer_vocabulary_size(const std::vector<QaRecord>& records);

// Relaxed accuracy over the samples; `answers` receives the decoded strings.
double evaluate_qa(const QaModel& model, const std::vector<QaSample>& samples,
                   std::vector<std::string>* answers = nullptr);
TrainLog train_qa(QaModel& model, QaDataset& data, const OptimizerConfig& opt, const TrainSchedule& schedule,
                  const LogFn& log = {});

struct AblationRow {
  FusionMode mode = FusionMode::qdcat;
  double relaxed_accuracy = 0.0;
  std::size_t steps = 0;
  double seconds = 0.0;
};

// Trains one model per fusion mode from the same configuration and data.
std::vector<AblationRow> run_ablation(const RunConfig& cfg, const ChartFormer& chart, QaDataset& data,
                                      const LogFn& log = {});

void save_segmenter(const std::filesystem::path& path, const ChartFormer& model);
ChartFormer load_segmenter(const std::filesystem::path& path);
void save_qa_model(const std::filesystem::path& path, const QaModel& model);
// Rebuilds a QA model around a frozen segmenter from its checkpoint.
QaModel load_qa_model(const std::filesystem::path& path, const ChartFormer& chart);

// Serialized bytes of the frozen chart-encoder tensors.
std::string encoder_region(const ParamRegistry& reg);

}  // namespace chart
