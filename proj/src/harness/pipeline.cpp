#include "chart/pipeline.hpp"

#include <chrono>
#include <set>
#include <sstream>

#include "chart/checkpoint.hpp"
#include "chart/error.hpp"

namespace chart {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void emit(const LogFn& log, const std::string& line) {
  if (log) log(line);
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

// Shared loop: cycles the data in order, logs, evaluates, stops at the target.
template <class Sample, class StepFn, class EvalFn>
TrainLog run_schedule(const std::vector<Sample>& data, const TrainSchedule& schedule, StepFn step, EvalFn evaluate,
                      const char* metric, const LogFn& log) {
  if (data.empty()) throw InputError("training set is empty");
  TrainLog out;
  const auto t0 = Clock::now();
  double window = 0.0;
  std::size_t in_window = 0;
  bool evaluated_last = false;
  for (std::size_t s = 0; s < schedule.steps; ++s) {
    std::vector<const Sample*> batch;
    for (std::size_t b = 0; b < schedule.batch; ++b) batch.push_back(&data[(s * schedule.batch + b) % data.size()]);
    const double loss = step(batch);
    out.losses.push_back(loss);
    out.steps = s + 1;
    window += loss;
    ++in_window;
    evaluated_last = false;
    if (schedule.log_every > 0 && out.steps % schedule.log_every == 0) {
      emit(log, "step " + std::to_string(out.steps) + " loss " + fixed(window / static_cast<double>(in_window)) +
                    " elapsed " + fixed(since(t0), 1) + "s");
      window = 0.0;
      in_window = 0;
    }
    if (schedule.eval_every > 0 && out.steps % schedule.eval_every == 0) {
      const double m = evaluate();
      out.evals.emplace_back(out.steps, m);
      out.final_metric = m;
      evaluated_last = true;
      emit(log, "step " + std::to_string(out.steps) + " " + metric + " " + fixed(m));
      if (m >= schedule.target) break;
    }
  }
  if (!evaluated_last) {
    out.final_metric = evaluate();
    out.evals.emplace_back(out.steps, out.final_metric);
    emit(log, "final " + std::string(metric) + " " + fixed(out.final_metric));
  }
  out.reached = out.final_metric >= schedule.target;
  out.seconds = since(t0);
  return out;
}

}  // namespace

nlohmann::json TrainLog::to_json() const {
  nlohmann::json ev = nlohmann::json::array();
  for (const auto& [s, m] : evals) ev.push_back({{"step", s}, {"metric", m}});
  return {{"steps", steps}, {"seconds", seconds}, {"final_metric", final_metric},
          {"reached_target", reached}, {"evaluations", ev}, {"losses", losses}};
}

// --- segmentation -------------------------------------------------------------------

SegDataset load_seg_dataset(const fs::path& dir, const ConversionOptions& conversion) {
  SegDataset d;
  if (fs::exists(dir / "instances.json")) {
    d.records = load_instances(dir / "instances.json");
  } else {
    ConversionReport report;
    d.records = parse_instances(convert_keypoints(read_json_file(dir / "keypoints.json"), conversion, report));
  }
  for (const auto& r : d.records) d.samples.push_back(make_train_sample(load_image_tensor(dir, r.file_name), r));
  return d;
}

std::vector<EvalDetection> predict_dataset(const ChartFormer& model, const SegDataset& data) {
  std::vector<EvalDetection> dets;
  for (std::size_t i = 0; i < data.samples.size(); ++i)
    for (auto& d : model.predict(data.samples[i].image).detections())
      dets.push_back({data.records[i].id, d.category_id, d.score, std::move(d.mask)});
  return dets;
}

nlohmann::json predictions_to_json(const SegDataset& data, const std::vector<EvalDetection>& dets) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& r : data.records) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& d : dets) {
      if (d.image_id != r.id) continue;
      nlohmann::json box = nullptr;
      if (d.mask.count() > 0) {
        const PixelBox b = bbox_from_mask(d.mask);
        box = {b.x_min, b.y_min, b.x_max, b.y_max};
      }
      list.push_back({{"category_id", d.category_id}, {"score", d.score}, {"rle", encode_rle(d.mask)}, {"bbox", box}});
    }
    images.push_back({{"image_id", r.id}, {"file_name", r.file_name}, {"height", r.size.height},
                      {"width", r.size.width}, {"detections", list}});
  }
  return {{"images", images}};
}

TrainLog train_segmenter(ChartFormer& model, const SegDataset& data, const OptimizerConfig& opt,
                         const TrainSchedule& schedule, const LogFn& log) {
  SegTrainer trainer(model, opt);
  const auto gts = ground_truth_from_instances(data.records);
  return run_schedule(
      data.samples, schedule, [&](const std::vector<const TrainSample*>& b) { return trainer.step(b); },
      [&] { return map_suite(predict_dataset(model, data), gts).map50; }, "mAP50", log);
}

void save_segmenter(const fs::path& path, const ChartFormer& model) {
  save_checkpoint(path, model.params().entries(), {{"segmenter", model.config()}});
}

ChartFormer load_segmenter(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (!ck.config.contains("segmenter")) throw ConfigError(path.string() + " is not a segmenter checkpoint");
  SegmenterConfig cfg;
  from_json(ck.config["segmenter"], cfg);
  cfg.validate();
  ChartFormer model(cfg, 0);
  ck.load_into(model.params());
  return model;
}

std::string encoder_region(const ParamRegistry& reg) {
  std::vector<NamedTensor> enc;
  for (const auto& e : reg.entries())
    if (e.name.rfind("encoder.", 0) == 0) enc.push_back(e);
  return encode_checkpoint(enc, nlohmann::json::object());
}

// --- question answering ---------------------------------------------------------------

Vocabulary build_qa_vocabulary(const std::vector<QaRecord>& records) {
  std::vector<std::string> texts;
  for (const auto& r : records) {
    texts.push_back(r.question);
    texts.push_back(r.answer);
  }
  return Vocabulary::build(texts);
}

std::size_t answer_vocabulary_size(const std::vector<QaRecord>& records) {
  std::set<std::string> words;
  for (const auto& r : records)
    for (auto& w : tokenize(r.answer)) words.insert(std::move(w));
  return words.size();
}

QaDataset load_qa_dataset(const fs::path& dir, const Vocabulary& vocab) {
  QaDataset d;
  d.records = parse_qa_dataset(read_json_file(dir / "qa_dataset.json"));
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    const QaRecord& r = d.records[i];
    QaSample s;
    s.id = std::to_string(i);
    s.image = load_image_tensor(dir, r.image);
    s.question = vocab.encode(r.question);
    s.answer = vocab.encode(r.answer);
    s.answer_text = r.answer;
    d.samples.push_back(std::move(s));
  }
  return d;
}

void attach_question_embeddings(QaDataset& data, const fs::path& checkpoint) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  for (auto& s : data.samples) {
    const Tensor* z = ck.find("z:" + s.id);
    if (z == nullptr) throw InputError(checkpoint.string() + " has no embedding for sample " + s.id);
    s.question_override = *z;
  }
}

double evaluate_qa(const QaModel& model, const std::vector<QaSample>& samples, std::vector<std::string>* answers) {
  if (samples.empty()) throw InputError("no QA samples to evaluate");
  std::size_t correct = 0;
  for (const auto& s : samples) {
    const std::string a = model.answer(s);
    correct += relaxed_accuracy(a, s.answer_text);
    if (answers) answers->push_back(a);
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainLog train_qa(QaModel& model, QaDataset& data, const OptimizerConfig& opt, const TrainSchedule& schedule,
                  const LogFn& log) {
  for (auto& s : data.samples) model.prepare(s);
  QaTrainer trainer(model, opt);
  return run_schedule(
      data.samples, schedule, [&](const std::vector<const QaSample*>& b) { return trainer.step(b); },
      [&] { return evaluate_qa(model, data.samples); }, "RA", log);
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg, const ChartFormer& chart, QaDataset& data,
                                      const LogFn& log) {
  const Vocabulary vocab = build_qa_vocabulary(data.records);
  std::vector<AblationRow> rows;
  for (FusionMode mode : all_fusion_modes()) {
    QaConfig qc = cfg.qa;
    qc.mode = mode;
    QaModel model(chart, qc, vocab, cfg.seed);
    emit(log, "ablation: " + std::string(fusion_name(mode)));
    const TrainLog t = train_qa(model, data, cfg.qa_optimizer, cfg.qa_train, log);
    rows.push_back({mode, t.final_metric, t.steps, t.seconds});
  }
  return rows;
}

void save_qa_model(const fs::path& path, const QaModel& model) {
  save_checkpoint(path, model.params().entries(),
                  {{"qa", model.config()}, {"vocab", model.vocab().to_json()}});
}

QaModel load_qa_model(const fs::path& path, const ChartFormer& chart) {
  const Checkpoint ck = load_checkpoint(path);
  if (!ck.config.contains("qa") || !ck.config.contains("vocab")) throw ConfigError(path.string() + " is not a QA checkpoint");
  QaConfig qc;
  from_json(ck.config["qa"], qc);
  QaModel model(chart, qc, Vocabulary::from_json(ck.config["vocab"]), 0);
  ck.load_into(model.params());
  return model;
}

}  // namespace chart
