// chartctl: synthetic data, segmentation and chart-QA runs from one JSON config.

#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "chart/error.hpp"
#include "chart/pipeline.hpp"

namespace fs = std::filesystem;
using namespace chart;

namespace {

struct Common {
  std::string config;
  std::optional<std::string> run_dir, data_dir, qa_data_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "run configuration JSON")->check(CLI::ExistingFile);
  app->add_option("--run-dir", c.run_dir, "output directory");
  app->add_option("--data-dir", c.data_dir, "segmentation dataset directory");
  app->add_option("--qa-data-dir", c.qa_data_dir, "QA dataset directory");
  app->add_option("--seed", c.seed, "random seed");
  app->add_option("--threads", c.threads, "worker cap");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) cfg = load_run_config(c.config);
  if (c.run_dir) cfg.run_dir = *c.run_dir;
  if (c.data_dir) cfg.data_dir = *c.data_dir;
  if (c.qa_data_dir) cfg.qa_data_dir = *c.qa_data_dir;
  if (c.seed) cfg.seed = *c.seed;
  if (c.threads) cfg.threads = *c.threads;
  return cfg;
}

// Validates, creates the run directory and records the resolved config there.
void start_run(RunConfig& cfg, const std::string& command) {
  cfg.validate();
  fs::create_directories(cfg.run_dir);
  nlohmann::json echo = cfg;
  echo["command"] = command;
  write_json_file(cfg.run_dir / ("config." + command + ".json"), echo);
}

void say(const std::string& line) { std::cout << line << std::endl; }

fs::path or_default(const std::string& given, const fs::path& fallback) {
  return given.empty() ? fallback : fs::path(given);
}

QaDataset qa_data(const RunConfig& cfg, const Vocabulary& vocab, const std::string& embeddings) {
  QaDataset d = load_qa_dataset(cfg.qa_data_dir, vocab);
  if (!embeddings.empty()) attach_question_embeddings(d, embeddings);
  return d;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chart segmentation and question answering at desk scale"};
  app.require_subcommand(1);
  Common common;

  // synth
  auto* synth = app.add_subcommand("synth", "render synthetic charts, keypoints and QA pairs");
  add_common(synth, common);
  std::optional<std::size_t> synth_images;
  std::string synth_out;
  bool synth_qa = false;
  synth->add_option("--images", synth_images, "number of charts");
  synth->add_option("--out", synth_out, "output directory (default: data dir)");
  synth->add_flag("--qa", synth_qa, "generate the QA dataset from qa_synth instead");

  // convert
  auto* convert = app.add_subcommand("convert", "keypoints.json to polygon instances");
  add_common(convert, common);
  std::string conv_in, conv_out;
  convert->add_option("--in", conv_in, "keypoint annotations")->required()->check(CLI::ExistingFile);
  convert->add_option("--out", conv_out, "instances output")->required();

  // train-seg
  auto* train_seg = app.add_subcommand("train-seg", "train the segmenter");
  add_common(train_seg, common);
  std::optional<std::size_t> seg_steps;
  std::optional<double> seg_lr;
  train_seg->add_option("--steps", seg_steps, "optimizer steps");
  train_seg->add_option("--lr", seg_lr, "learning rate");

  // infer-seg
  auto* infer_seg = app.add_subcommand("infer-seg", "predict masks for a dataset");
  add_common(infer_seg, common);
  std::string seg_ckpt, seg_pred_out;
  infer_seg->add_option("--checkpoint", seg_ckpt, "segmenter checkpoint (default: run dir)");
  infer_seg->add_option("--out", seg_pred_out, "prediction file (default: run dir/seg_pred.json)");

  // eval-seg
  auto* eval_seg = app.add_subcommand("eval-seg", "mask mAP of predictions against ground truth");
  add_common(eval_seg, common);
  std::string eval_pred, eval_gt;
  eval_seg->add_option("--pred", eval_pred, "predictions or instances JSON")->required()->check(CLI::ExistingFile);
  eval_seg->add_option("--gt", eval_gt, "ground-truth instances JSON")->required()->check(CLI::ExistingFile);

  // train-qa
  auto* train_qa_cmd = app.add_subcommand("train-qa", "train the QA model on a frozen segmenter");
  add_common(train_qa_cmd, common);
  std::string qa_seg_ckpt, qa_mode, qa_embeddings;
  std::optional<std::size_t> qa_steps;
  std::optional<double> qa_lr;
  train_qa_cmd->add_option("--segmenter", qa_seg_ckpt, "segmenter checkpoint (default: run dir)");
  train_qa_cmd->add_option("--mode", qa_mode, "fusion mode")->check(CLI::IsMember({"qdcat", "qdcat_minus_qon", "concat", "concat_cnn"}));
  train_qa_cmd->add_option("--steps", qa_steps, "optimizer steps");
  train_qa_cmd->add_option("--lr", qa_lr, "learning rate");
  train_qa_cmd->add_option("--embeddings", qa_embeddings, "precomputed question embeddings")->check(CLI::ExistingFile);

  // infer-qa
  auto* infer_qa = app.add_subcommand("infer-qa", "answer every question of the QA dataset");
  add_common(infer_qa, common);
  std::string iq_ckpt, iq_seg, iq_out, iq_embeddings;
  infer_qa->add_option("--checkpoint", iq_ckpt, "QA checkpoint (default: run dir)");
  infer_qa->add_option("--segmenter", iq_seg, "segmenter checkpoint (default: run dir)");
  infer_qa->add_option("--out", iq_out, "answers file (default: run dir/qa_pred.json)");
  infer_qa->add_option("--embeddings", iq_embeddings, "precomputed question embeddings")->check(CLI::ExistingFile);

  // eval-qa
  auto* eval_qa = app.add_subcommand("eval-qa", "relaxed accuracy, or a fusion-mode ablation");
  add_common(eval_qa, common);
  std::string eq_pred, eq_seg;
  bool eq_ablation = false;
  eval_qa->add_option("--pred", eq_pred, "answers file from infer-qa");
  eval_qa->add_flag("--ablation", eq_ablation, "train and score every fusion mode");
  eval_qa->add_option("--segmenter", eq_seg, "segmenter checkpoint for the ablation (default: run dir)");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(gradcheck, common);
  std::string gc_scope = "all";
  double gc_tol = 1e-4;
  gradcheck->add_option("--scope", gc_scope, "all, ops, modules or losses")->check(CLI::IsMember({"all", "ops", "modules", "losses"}));
  gradcheck->add_option("--tolerance", gc_tol, "relative error bound");

  // dump-points
  auto* dump = app.add_subcommand("dump-points", "deformed sampling points of a QA sample");
  add_common(dump, common);
  std::string dp_ckpt, dp_seg, dp_out;
  std::size_t dp_index = 0;
  bool dp_raster = false;
  dump->add_option("--checkpoint", dp_ckpt, "QA checkpoint (default: run dir)");
  dump->add_option("--segmenter", dp_seg, "segmenter checkpoint (default: run dir)");
  dump->add_option("--index", dp_index, "sample index in the QA dataset");
  dump->add_option("--out", dp_out, "overlay JSON (default: run dir/points_<index>.json)");
  dump->add_flag("--raster", dp_raster, "also write the image with the points marked");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg = resolve(common);
    const fs::path seg_default = cfg.run_dir / "segmenter.ckpt";
    const fs::path qa_default = cfg.run_dir / "qa.ckpt";

    if (*synth) {
      SynthConfig& sc = synth_qa ? cfg.qa_synth : cfg.synth;
      if (common.seed) sc.seed = *common.seed;
      if (synth_images) sc.images = *synth_images;
      start_run(cfg, "synth");
      const fs::path out = or_default(synth_out, synth_qa ? cfg.qa_data_dir : cfg.data_dir);
      const SynthSummary s = synth_generate(sc, out);
      say("wrote " + std::to_string(s.images) + " charts, " + std::to_string(s.objects) + " objects, " +
          std::to_string(s.questions) + " questions to " + out.string());
    } else if (*convert) {
      start_run(cfg, "convert");
      const ConversionReport rep = convert_dataset(conv_in, conv_out, cfg.conversion);
      write_json_file(cfg.run_dir / "conversion_report.json", rep.to_json());
      say("converted " + std::to_string(rep.images) + " images, " + std::to_string(rep.rejects.size()) + " rejected objects");
    } else if (*train_seg) {
      if (seg_steps) cfg.seg_train.steps = *seg_steps;
      if (seg_lr) cfg.seg_optimizer.learning_rate = *seg_lr;
      start_run(cfg, "train-seg");
      const SegDataset data = load_seg_dataset(cfg.data_dir, cfg.conversion);
      ChartFormer model(cfg.segmenter, cfg.seed);
      const TrainLog log = train_segmenter(model, data, cfg.seg_optimizer, cfg.seg_train, say);
      save_segmenter(seg_default, model);
      write_json_file(cfg.run_dir / "train_seg_log.json", log.to_json());
      say("saved " + seg_default.string());
    } else if (*infer_seg) {
      start_run(cfg, "infer-seg");
      const ChartFormer model = load_segmenter(or_default(seg_ckpt, seg_default));
      const SegDataset data = load_seg_dataset(cfg.data_dir, cfg.conversion);
      const auto dets = predict_dataset(model, data);
      const fs::path out = or_default(seg_pred_out, cfg.run_dir / "seg_pred.json");
      write_json_file(out, predictions_to_json(data, dets));
      say("wrote " + std::to_string(dets.size()) + " detections to " + out.string());
    } else if (*eval_seg) {
      start_run(cfg, "eval-seg");
      const auto gts = ground_truth_from_instances(parse_instances(read_json_file(eval_gt)));
      const EvalReport rep = map_suite(detections_from_json(read_json_file(eval_pred)), gts);
      write_json_file(cfg.run_dir / "eval_report.json", rep.to_json());
      say("mAP " + std::to_string(rep.map) + " mAP50 " + std::to_string(rep.map50) + " mAP75 " + std::to_string(rep.map75));
    } else if (*train_qa_cmd) {
      if (!qa_mode.empty()) cfg.qa.mode = parse_fusion(qa_mode);
      if (qa_steps) cfg.qa_train.steps = *qa_steps;
      if (qa_lr) cfg.qa_optimizer.learning_rate = *qa_lr;
      start_run(cfg, "train-qa");
      const fs::path seg_path = or_default(qa_seg_ckpt, seg_default);
      if (!fs::exists(seg_path)) throw ConfigError("segmenter checkpoint " + seg_path.string() + " not found");
      const ChartFormer chart = load_segmenter(seg_path);
      const auto records = parse_qa_dataset(read_json_file(cfg.qa_data_dir / "qa_dataset.json"));
      QaDataset data = qa_data(cfg, build_qa_vocabulary(records), qa_embeddings);
      QaModel model(chart, cfg.qa, build_qa_vocabulary(records), cfg.seed);
      const std::string before = encoder_region(model.frozen_params());
      const TrainLog log = train_qa(model, data, cfg.qa_optimizer, cfg.qa_train, say);
      if (encoder_region(model.frozen_params()) != before) throw std::runtime_error("chart encoder changed during QA training");
      save_qa_model(qa_default, model);
      write_json_file(cfg.run_dir / "train_qa_log.json", log.to_json());
      say("saved " + qa_default.string());
    } else if (*infer_qa) {
      start_run(cfg, "infer-qa");
      const ChartFormer chart = load_segmenter(or_default(iq_seg, seg_default));
      const QaModel model = load_qa_model(or_default(iq_ckpt, qa_default), chart);
      QaDataset data = qa_data(cfg, model.vocab(), iq_embeddings);
      for (auto& s : data.samples) model.prepare(s);
      std::vector<std::string> answers;
      const double ra = evaluate_qa(model, data.samples, &answers);
      nlohmann::json out = nlohmann::json::array();
      for (std::size_t i = 0; i < answers.size(); ++i) {
        const QaRecord& r = data.records[i];
        out.push_back({{"image", r.image}, {"question", r.question}, {"answer", r.answer}, {"prediction", answers[i]}});
      }
      const fs::path path = or_default(iq_out, cfg.run_dir / "qa_pred.json");
      write_json_file(path, out);
      say("answered " + std::to_string(answers.size()) + " questions, relaxed accuracy " + std::to_string(ra));
    } else if (*eval_qa) {
      start_run(cfg, "eval-qa");
      if (eq_ablation) {
        const ChartFormer chart = load_segmenter(or_default(eq_seg, seg_default));
        const auto records = parse_qa_dataset(read_json_file(cfg.qa_data_dir / "qa_dataset.json"));
        QaDataset data = qa_data(cfg, build_qa_vocabulary(records), "");
        nlohmann::json rows = nlohmann::json::array();
        for (const AblationRow& r : run_ablation(cfg, chart, data, say)) {
          rows.push_back({{"mode", fusion_name(r.mode)}, {"relaxed_accuracy", r.relaxed_accuracy}, {"steps", r.steps},
                          {"seconds", r.seconds}});
          say(std::string(fusion_name(r.mode)) + " RA " + std::to_string(r.relaxed_accuracy));
        }
        write_json_file(cfg.run_dir / "ablation_report.json", {{"modes", rows}});
      } else {
        const nlohmann::json pred = read_json_file(or_default(eq_pred, cfg.run_dir / "qa_pred.json"));
        if (!pred.is_array() || pred.empty()) throw InputError("answers file must be a non-empty array");
        std::size_t correct = 0;
        for (const auto& p : pred)
          correct += relaxed_accuracy(p.at("prediction").get<std::string>(), p.at("answer").get<std::string>());
        const double ra = static_cast<double>(correct) / static_cast<double>(pred.size());
        write_json_file(cfg.run_dir / "qa_eval_report.json", {{"relaxed_accuracy", ra}, {"samples", pred.size()}});
        say("relaxed accuracy " + std::to_string(ra));
      }
    } else if (*gradcheck) {
      start_run(cfg, "gradcheck");
      const auto results = run_gradcheck_suite(gc_scope);
      const nlohmann::json rep = gradcheck_report_json(results, gc_tol);
      write_json_file(cfg.run_dir / "gradcheck_report.json", rep);
      for (const auto& r : results) std::cout << r.name << " " << std::scientific << r.max_rel_error << std::defaultfloat << "\n";
      if (!rep["passed"].get<bool>()) {
        std::cerr << "gradcheck: max relative error " << rep["max_rel_error"].get<double>() << " exceeds " << gc_tol << "\n";
        return 1;
      }
    } else if (*dump) {
      start_run(cfg, "dump-points");
      const ChartFormer chart = load_segmenter(or_default(dp_seg, seg_default));
      const QaModel model = load_qa_model(or_default(dp_ckpt, qa_default), chart);
      QaDataset data = qa_data(cfg, model.vocab(), "");
      if (dp_index >= data.samples.size()) throw InputError("--index beyond the QA dataset");
      QaSample& s = data.samples[dp_index];
      model.prepare(s);
      std::size_t gh = 0, gw = 0;
      const auto pts = model.deformed_points(s, &gh, &gw);
      nlohmann::json list = nlohmann::json::array();
      for (const Point& p : pts) list.push_back({p.x, p.y});
      const std::string image = data.records[dp_index].image;
      const fs::path out = or_default(dp_out, cfg.run_dir / ("points_" + std::to_string(dp_index) + ".json"));
      write_json_file(out, {{"image", image}, {"question", data.records[dp_index].question}, {"points", list}, {"grid", {gh, gw}}});
      if (dp_raster) {
        RgbImage img = read_ppm(cfg.qa_data_dir / image);
        for (const Point& p : pts) {
          const auto cx = static_cast<long>(p.x), cy = static_cast<long>(p.y);
          for (long dy = -1; dy <= 1; ++dy)
            for (long dx = -1; dx <= 1; ++dx) {
              const long y = cy + dy, x = cx + dx;
              if (y >= 0 && x >= 0 && y < static_cast<long>(img.height) && x < static_cast<long>(img.width)) {
                img.put(static_cast<std::size_t>(y), static_cast<std::size_t>(x), {255, 0, 255});
              }
            }
        }
        write_ppm(fs::path(out).replace_extension(".ppm"), img);
      }
      say("wrote " + std::to_string(pts.size()) + " points to " + out.string());
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
